//! Changes of measure `P⁺`/`P⁻` as weighted estimators, the martingale
//! limit `W⁺`, trajectories conditioned on survival, and the kernel `h(u, w)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envmodel::{EnvRealization, OffspringFamily};
use crate::gfengine::GenFunChain;
use crate::renewal::{MuMeasure, RenewalTable, Side};
use crate::rng::{Exec, LaneRng, Merge, StreamKey};
use crate::stablecore::IncrementModel;
use crate::stats::{Moments, WeightedSample};
use crate::walks::WalkPath;

/// Below this effective sample size an estimate is flagged.
pub const MIN_ESS: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CondError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("environment survival probability is zero")]
    NoSurvival,
}

/// Importance-weighted mean with weight diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub value: f64,
    pub std_error: f64,
    pub effective_sample_size: f64,
    pub samples: u64,
    pub horizon: usize,
    /// Share of total weight that came from extrapolated renewal values.
    pub extrapolated_fraction: f64,
    pub low_ess: bool,
}

#[derive(Clone, Copy, Debug, Default)]
struct WeightAcc {
    /// Moments of `weight * functional`.
    wg: Moments,
    sum_w: f64,
    sum_w2: f64,
    extrapolated_w: f64,
}

impl Merge for WeightAcc {
    fn merge(&mut self, o: &Self) {
        self.wg.merge(&o.wg);
        self.sum_w += o.sum_w;
        self.sum_w2 += o.sum_w2;
        self.extrapolated_w += o.extrapolated_w;
    }
}

impl WeightAcc {
    fn push(&mut self, w: f64, g: f64, extrapolated: bool) {
        self.wg.push(w * g);
        self.sum_w += w;
        self.sum_w2 += w * w;
        if extrapolated {
            self.extrapolated_w += w;
        }
    }

    fn finish(&self, horizon: usize) -> WeightedEstimate {
        let ess = if self.sum_w2 > 0.0 { self.sum_w * self.sum_w / self.sum_w2 } else { 0.0 };
        WeightedEstimate {
            value: self.wg.mean(),
            std_error: self.wg.std_error(),
            effective_sample_size: ess,
            samples: self.wg.count,
            horizon,
            extrapolated_fraction: if self.sum_w > 0.0 { self.extrapolated_w / self.sum_w } else { 0.0 },
            low_ess: ess < MIN_ESS,
        }
    }
}

/// A walk started at `start`, with its environment; `env.walk` holds the
/// increments, so the level at time `k` is `start + env.s(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedWalk {
    pub start: f64,
    pub env: EnvRealization,
    /// Importance weight `U(S_n)/U(x)` or `V(S_n)/V(x)`.
    pub weight: f64,
}

/// Draws a walk from `x` and returns its increments and final level, or
/// `None` once it leaves the allowed half-line.
/// Walks up to `n` steps from `x`, stopping when the half line is left;
/// returns the number of steps kept in `buf`.
fn walk_killed<R: Rng + ?Sized>(model: &IncrementModel, n: usize, x: f64, plus: bool, buf: &mut Vec<f64>, rng: &mut R) -> usize {
    buf.clear();
    let mut level = x;
    for _ in 0..n {
        let step = model.sample(rng);
        level += step;
        let ok = if plus { level >= 0.0 } else { level < 0.0 };
        if !ok {
            break;
        }
        buf.push(step);
    }
    buf.len()
}

fn walk_in_half_line<R: Rng + ?Sized>(
    model: &IncrementModel,
    n: usize,
    x: f64,
    plus: bool,
    buf: &mut Vec<f64>,
    rng: &mut R,
) -> Option<f64> {
    buf.clear();
    let mut level = x;
    for _ in 0..n {
        let step = model.sample(rng);
        level += step;
        let ok = if plus { level >= 0.0 } else { level < 0.0 };
        if !ok {
            return None;
        }
        buf.push(step);
    }
    Some(level)
}

/// Weight of the minus side at the end level; `V(0-) = 1` at the origin.
fn minus_reference(table: &RenewalTable, x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        table.eval(x)
    }
}

#[allow(clippy::too_many_arguments)]
fn weighted_expectation<G>(
    model: &IncrementModel,
    family: OffspringFamily,
    n: usize,
    x: f64,
    table: &RenewalTable,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
    functional: G,
) -> WeightedEstimate
where
    G: Fn(&ConditionedWalk, &mut LaneRng) -> f64 + Sync,
{
    let plus = table.side == Side::Plus;
    let reference = if plus { table.eval(x) } else { minus_reference(table, x) };
    let acc: WeightAcc = exec.run_merge(key, samples, |_, rng, share| {
        let mut acc = WeightAcc::default();
        let mut buf = Vec::with_capacity(n);
        for _ in 0..share {
            match walk_in_half_line(model, n, x, plus, &mut buf, rng) {
                None => acc.wg.push_zeros(1),
                Some(end) => {
                    let weight = table.eval(end) / reference;
                    let walk = ConditionedWalk {
                        start: x,
                        env: EnvRealization::new(WalkPath::from_increments(buf.clone()), family),
                        weight,
                    };
                    let g = functional(&walk, rng);
                    acc.push(weight, g, table.is_extrapolated(end.abs()));
                }
            }
        }
        acc
    });
    acc.finish(n)
}

/// `E_x⁺[g] = E_x[g U(S_n); L_n >= 0] / U(x)` for `x >= 0`.
#[allow(clippy::too_many_arguments)]
pub fn plus_expectation<G>(
    model: &IncrementModel,
    family: OffspringFamily,
    n: usize,
    x: f64,
    u_table: &RenewalTable,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
    functional: G,
) -> Result<WeightedEstimate, CondError>
where
    G: Fn(&ConditionedWalk, &mut LaneRng) -> f64 + Sync,
{
    if u_table.side != Side::Plus {
        return Err(CondError::Precondition("plus expectation needs a U table".into()));
    }
    if x < 0.0 {
        return Err(CondError::Precondition(format!("start {x} must be nonnegative")));
    }
    Ok(weighted_expectation(model, family, n, x, u_table, samples, exec, key, functional))
}

/// `E_x⁻[g] = E_x[g V(S_n); M_n < 0] / V(x)` for `x < 0`.
#[allow(clippy::too_many_arguments)]
pub fn minus_expectation<G>(
    model: &IncrementModel,
    family: OffspringFamily,
    n: usize,
    x: f64,
    v_table: &RenewalTable,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
    functional: G,
) -> Result<WeightedEstimate, CondError>
where
    G: Fn(&ConditionedWalk, &mut LaneRng) -> f64 + Sync,
{
    if v_table.side != Side::Minus {
        return Err(CondError::Precondition("minus expectation needs a V table".into()));
    }
    if x >= 0.0 {
        return Err(CondError::Precondition(format!("start {x} must be negative")));
    }
    Ok(weighted_expectation(model, family, n, x, v_table, samples, exec, key, functional))
}

/// `P⁻` started at the origin, using the left limit `V(0-) = 1` as normaliser.
#[allow(clippy::too_many_arguments)]
pub fn minus_expectation_origin<G>(
    model: &IncrementModel,
    family: OffspringFamily,
    n: usize,
    v_table: &RenewalTable,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
    functional: G,
) -> Result<WeightedEstimate, CondError>
where
    G: Fn(&ConditionedWalk, &mut LaneRng) -> f64 + Sync,
{
    if v_table.side != Side::Minus {
        return Err(CondError::Precondition("minus expectation needs a V table".into()));
    }
    Ok(weighted_expectation(model, family, n, 0.0, v_table, samples, exec, key, functional))
}

/// Population sizes `Z_0..Z_n` in one environment, as integer-valued floats
/// (sizes beyond `2^53` are approximate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationPath {
    pub z: Vec<f64>,
}

/// Unconditioned population path from `Z_0 = q`.
pub fn simulate_population<R: Rng + ?Sized>(env: &EnvRealization, q: u64, rng: &mut R) -> PopulationPath {
    let mut z = Vec::with_capacity(env.len() + 1);
    z.push(q as f64);
    for k in 1..=env.len() {
        let prev = z[k - 1];
        z.push(env.family.sample_sum_f64(env.x(k), prev, rng));
    }
    PopulationPath { z }
}

/// `1 - (1 - s)^j`.
#[inline]
fn survive_any(s: f64, j: f64) -> f64 {
    if j == 0.0 {
        0.0
    } else {
        -(j * (-s).ln_1p()).exp_m1()
    }
}

/// `P(Z_{m+1} = j | Z_m = k, Z_n > 0, E)`.
pub fn conditioned_step_pmf(chain: &GenFunChain, m: usize, k: u64, j: u64) -> f64 {
    let env = chain.env();
    let norm = survive_any(chain.survival_from(m), k as f64);
    env.family.sum_pmf(env.x(m + 1), k, j) * survive_any(chain.survival_from(m + 1), j as f64) / norm
}

/// Exact draw of `Z_0..Z_n` from `L(Z | Z_n > 0, E)` with `Z_0 = q`.
///
/// Each transition is the one-step h-transform
/// `P(j | k) (1 - F_{m+1,n}(0)^j) / (1 - F_{m,n}(0)^k)`, sampled by rejection:
/// from the plain offspring law when the acceptance rate is at least 0.1,
/// otherwise from the size-biased law with acceptance `(1 - (1-s)^j)/(j s)`.
pub fn conditioned_trajectory<R: Rng + ?Sized>(
    chain: &GenFunChain,
    q: u64,
    rng: &mut R,
) -> Result<PopulationPath, CondError> {
    if q == 0 {
        return Err(CondError::Precondition("need Z_0 >= 1".into()));
    }
    let env = chain.env();
    let n = env.len();
    if survive_any(chain.survival_from(0), q as f64) <= 0.0 {
        return Err(CondError::NoSurvival);
    }
    let mut z = Vec::with_capacity(n + 1);
    z.push(q as f64);
    for m in 0..n {
        let k = z[m];
        let x = env.x(m + 1);
        let s_next = chain.survival_from(m + 1);
        let norm = survive_any(chain.survival_from(m), k);
        let j = if norm >= 0.1 {
            loop {
                let j = env.family.sample_sum_f64(x, k, rng);
                if rng.random::<f64>() < survive_any(s_next, j) {
                    break j;
                }
            }
        } else {
            loop {
                let j = 1.0 + env.family.sample_sum_size_biased_tail(x, k, rng);
                let accept = survive_any(s_next, j) / (j * s_next);
                if rng.random::<f64>() < accept {
                    break j;
                }
            }
        };
        z.push(j);
    }
    Ok(PopulationPath { z })
}

/// Weighted sample of `e^{-(S_n - S_0)} Z_n` under `P⁺` with `Z_0 = q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WplusSummary {
    pub q: u64,
    pub n: usize,
    pub law: WeightedSample,
    pub mean: WeightedEstimate,
    /// Weighted mass of `{Z_n = 0}`.
    pub atom_at_zero: f64,
    pub effective_sample_size: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_wplus(
    model: &IncrementModel,
    family: OffspringFamily,
    q: u64,
    n: usize,
    u_table: &RenewalTable,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<WplusSummary, CondError> {
    if q == 0 {
        return Err(CondError::Precondition("q must be positive".into()));
    }
    if n == 0 {
        let law = WeightedSample::new(vec![(q as f64, 1.0)]);
        let mean = WeightedEstimate {
            value: q as f64,
            std_error: 0.0,
            effective_sample_size: 1.0,
            samples: 1,
            horizon: 0,
            extrapolated_fraction: 0.0,
            low_ess: false,
        };
        return Ok(WplusSummary { q, n, law, mean, atom_at_zero: 0.0, effective_sample_size: 1.0 });
    }
    let lanes: Vec<(WeightAcc, Vec<(f64, f64)>)> = exec.run(key, samples, |_, rng, share| {
        let mut acc = WeightAcc::default();
        let mut pairs = Vec::new();
        let mut buf = Vec::with_capacity(n);
        for _ in 0..share {
            match walk_in_half_line(model, n, 0.0, true, &mut buf, rng) {
                None => acc.wg.push_zeros(1),
                Some(end) => {
                    let weight = u_table.eval(end);
                    let env = EnvRealization::new(WalkPath::from_increments(buf.clone()), family);
                    let zn = simulate_population(&env, q, rng).z[n];
                    let w = (-end).exp() * zn;
                    acc.push(weight, w, u_table.is_extrapolated(end));
                    pairs.push((w, weight));
                }
            }
        }
        (acc, pairs)
    });
    let mut acc = WeightAcc::default();
    let mut pairs = Vec::new();
    for (a, p) in lanes {
        acc.merge(&a);
        pairs.extend(p);
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let zero: f64 = pairs.iter().filter(|p| p.0 == 0.0).map(|p| p.1).sum();
    let mean = acc.finish(n);
    let law = WeightedSample::new(pairs);
    Ok(WplusSummary {
        q,
        n,
        atom_at_zero: if total > 0.0 { zero / total } else { f64::NAN },
        effective_sample_size: mean.effective_sample_size,
        law,
        mean,
    })
}

/// One draw from the `P⁻` side at the origin: the weight and `ln B_m(u)` per `u`.
#[derive(Clone, Debug)]
struct MinusDraw {
    weight: f64,
    log_b: Vec<f64>,
}

/// `ln B_m(u) = e^{-R_m} ln(f̃_m ∘ … ∘ f̃_1(u))` along a negative walk `R`.
pub fn log_b_limit(family: OffspringFamily, increments: &[f64], u: f64) -> f64 {
    let mut c = 1.0 - u;
    let mut r = 0.0;
    for x in increments {
        c = family.complement(*x, c);
        r += x;
    }
    (-r).exp() * (-c).ln_1p()
}

/// One draw from `P_y⁺`: the start level, weight and increments.
#[derive(Clone, Debug)]
struct PlusDraw {
    y: f64,
    weight: f64,
    increments: Vec<f64>,
    /// `Σ_{k<m} e^{-(T_k - y)}` and `e^{-(T_m - y)}` (linear-fractional closed form).
    c_sum: f64,
    d_end: f64,
    end: f64,
}

/// `e^y (1 - E[b^{W⁺ e^{-y}} | E])` for one `P_y⁺` environment, from the pgf of `Z_m`.
fn psi_integrand(family: OffspringFamily, plus: &PlusDraw, log_b: f64) -> f64 {
    let t = -(log_b * (-plus.y).exp() * plus.d_end).exp_m1();
    let c = match family {
        OffspringFamily::LinearFractional => t / (plus.c_sum * t + plus.d_end),
        OffspringFamily::Poisson => {
            let mut c = t;
            for x in plus.increments.iter().rev() {
                c = family.complement(*x, c);
            }
            c
        }
    };
    plus.y.exp() * c
}

/// Horizons and budget for the kernel estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HSettings {
    pub plus_horizon: usize,
    pub minus_horizon: usize,
    /// Number of independent (`y`, `P⁺`, `P⁻`) triples.
    pub samples: u64,
    /// Truncating the conditioned walks at horizon `m` biases the kernel by
    /// `O(m^{-1/2})` (the walks still return near their floor with probability
    /// `~ 1/√m`); when set, the walks run to `4m` and `2 h(4m) - h(m)` is reported.
    pub richardson: bool,
}

/// `h(u, w)` on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HGrid {
    pub us: Vec<f64>,
    pub ws: Vec<f64>,
    /// `values[iu][iw]`, with standard errors alongside.
    pub values: Vec<Vec<f64>>,
    pub std_errors: Vec<Vec<f64>>,
    pub settings: HSettings,
    pub plus_ess: f64,
    pub minus_ess: f64,
    pub extrapolated_fraction: f64,
}

#[derive(Clone, Debug, Default)]
struct HAcc {
    cells: Vec<Moments>,
    plus_w: (f64, f64),
    minus_w: (f64, f64),
    extrapolated: f64,
}

impl Merge for HAcc {
    fn merge(&mut self, o: &Self) {
        self.cells.merge(&o.cells);
        self.plus_w.0 += o.plus_w.0;
        self.plus_w.1 += o.plus_w.1;
        self.minus_w.0 += o.minus_w.0;
        self.minus_w.1 += o.minus_w.1;
        self.extrapolated += o.extrapolated;
    }
}

fn sample_mu<R: Rng + ?Sized>(mu: &MuMeasure, cdf: &[f64], rng: &mut R) -> f64 {
    let r = rng.random::<f64>() * cdf[cdf.len() - 1];
    let i = cdf.partition_point(|c| *c < r).min(cdf.len() - 1);
    mu.sample_in_cell(i, rng)
}

/// `h(u, w) = ∫ μ₁(dy) 1{y >= -w} E_y⁺ ⊗ E⁻ [e^y (1 - E[B_∞(u)^{W⁺ e^{-y}} | E])]`,
/// the `y`-integral done by sampling `μ₁` exactly on the table grid.
#[allow(clippy::too_many_arguments)]
pub fn estimate_h_grid(
    model: &IncrementModel,
    family: OffspringFamily,
    us: &[f64],
    ws: &[f64],
    u_table: &RenewalTable,
    v_table: &RenewalTable,
    settings: &HSettings,
    exec: &Exec,
    key: StreamKey,
) -> Result<HGrid, CondError> {
    if us.iter().any(|u| !(0.0..=1.0).contains(u)) {
        return Err(CondError::Precondition("u must lie in [0, 1]".into()));
    }
    let mu = crate::renewal::mu_eta(u_table, 1.0).map_err(|e| CondError::Precondition(e.to_string()))?;
    let mut cdf = Vec::with_capacity(mu.weights.len());
    let mut acc_w = 0.0;
    for w in &mu.weights {
        acc_w += w;
        cdf.push(acc_w);
    }
    let (nu, nw) = (us.len(), ws.len());
    let HSettings { plus_horizon, minus_horizon, samples, richardson } = *settings;
    let factor = if richardson { 4 } else { 1 };
    let lf = family == OffspringFamily::LinearFractional;
    let acc: HAcc = exec.run_merge(key, samples, |_, rng, share| {
        let mut acc = HAcc { cells: vec![Moments::default(); nu * nw], ..Default::default() };
        let mut buf = Vec::with_capacity(factor * plus_horizon.max(minus_horizon));
        let mut vals = vec![0.0; nu];
        for _ in 0..share {
            let y = sample_mu(&mu, &cdf, rng);
            // Draws at the base horizon and, for extrapolation, at four times it.
            let steps = walk_killed(model, factor * plus_horizon, y, true, &mut buf, rng);
            let plus_at = |m: usize| {
                (steps >= m).then(|| {
                    let mut level: f64 = 0.0;
                    let mut c_sum = 0.0;
                    for x in &buf[..m] {
                        c_sum += (-level).exp();
                        level += x;
                    }
                    PlusDraw {
                        y,
                        weight: u_table.eval(y + level) / u_table.eval(y),
                        increments: if lf { Vec::new() } else { buf[..m].to_vec() },
                        c_sum,
                        d_end: (-level).exp(),
                        end: y + level,
                    }
                })
            };
            let plus = [plus_at(plus_horizon), if richardson { plus_at(factor * plus_horizon) } else { None }];
            let steps = walk_killed(model, factor * minus_horizon, 0.0, false, &mut buf, rng);
            let minus_at = |m: usize| {
                (steps >= m).then(|| MinusDraw {
                    weight: v_table.eval(buf[..m].iter().sum::<f64>()),
                    log_b: us.iter().map(|u| log_b_limit(family, &buf[..m], *u)).collect(),
                })
            };
            let minus = [minus_at(minus_horizon), if richardson { minus_at(factor * minus_horizon) } else { None }];
            let last = usize::from(richardson);
            if let Some(p) = &plus[last] {
                acc.plus_w.0 += p.weight;
                acc.plus_w.1 += p.weight * p.weight;
                if u_table.is_extrapolated(p.end) {
                    acc.extrapolated += p.weight;
                }
            }
            if let Some(m) = &minus[last] {
                acc.minus_w.0 += m.weight;
                acc.minus_w.1 += m.weight * m.weight;
            }
            vals.iter_mut().for_each(|v| *v = 0.0);
            for (level, coef) in [(0, if richardson { -1.0 } else { 1.0 }), (1, 2.0)] {
                if level == 1 && !richardson {
                    continue;
                }
                if let (Some(p), Some(m)) = (&plus[level], &minus[level]) {
                    let w = p.weight * m.weight;
                    for iu in 0..nu {
                        if us[iu] < 1.0 {
                            vals[iu] += coef * w * psi_integrand(family, p, m.log_b[iu]);
                        }
                    }
                }
            }
            for (iu, v) in vals.iter().enumerate().take(nu) {
                for (iw, w) in ws.iter().enumerate().take(nw) {
                    let cell = &mut acc.cells[iu * nw + iw];
                    if y >= -w {
                        cell.push(*v);
                    } else {
                        cell.push_zeros(1);
                    }
                }
            }
        }
        acc
    });
    let ess = |(s, s2): (f64, f64)| if s2 > 0.0 { s * s / s2 } else { 0.0 };
    let mut values = vec![vec![0.0; nw]; nu];
    let mut std_errors = vec![vec![0.0; nw]; nu];
    for iu in 0..nu {
        for iw in 0..nw {
            let m = &acc.cells[iu * nw + iw];
            values[iu][iw] = m.mean();
            std_errors[iu][iw] = m.std_error();
        }
    }
    Ok(HGrid {
        us: us.to_vec(),
        ws: ws.to_vec(),
        values,
        std_errors,
        settings: *settings,
        plus_ess: ess(acc.plus_w),
        minus_ess: ess(acc.minus_w),
        extrapolated_fraction: if acc.plus_w.0 > 0.0 { acc.extrapolated / acc.plus_w.0 } else { 0.0 },
    })
}

/// A single value of the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HKernel {
    pub u: f64,
    pub w: f64,
    pub value: f64,
    pub std_error: f64,
    pub settings: HSettings,
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_h(
    model: &IncrementModel,
    family: OffspringFamily,
    u: f64,
    w: f64,
    u_table: &RenewalTable,
    v_table: &RenewalTable,
    settings: &HSettings,
    exec: &Exec,
    key: StreamKey,
) -> Result<HKernel, CondError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(CondError::Precondition(format!("u = {u} outside [0, 1]")));
    }
    if u == 1.0 {
        return Ok(HKernel { u, w, value: 0.0, std_error: 0.0, settings: *settings });
    }
    let g = estimate_h_grid(model, family, &[u], &[w], u_table, v_table, settings, exec, key)?;
    Ok(HKernel { u, w, value: g.values[0][0], std_error: g.std_errors[0][0], settings: *settings })
}

impl HGrid {
    /// Bilinear interpolation in `(u, w)`. Beyond the `u` range the kernel
    /// falls linearly to `h(1, w) = 0`; below the `w` range it decays like
    /// `e^{w/2}`; above it is held constant. Returns `(value, standard error)`.
    pub fn interpolate(&self, u: f64, w: f64) -> (f64, f64) {
        let (iu, fu, u_scale) = bracket_u(&self.us, u);
        let (iw, fw, w_scale) = bracket(&self.ws, w);
        let corner = |a: usize, b: usize| (self.values[a][b], self.std_errors[a][b]);
        let mix = |a: usize| {
            let (v0, s0) = corner(a, iw);
            if iw + 1 < self.ws.len() {
                let (v1, s1) = corner(a, iw + 1);
                (v0 + fw * (v1 - v0), (1.0 - fw) * s0 + fw * s1)
            } else {
                (v0, s0)
            }
        };
        let (v, s) = if iu + 1 < self.us.len() {
            let (v0, s0) = mix(iu);
            let (v1, s1) = mix(iu + 1);
            (v0 + fu * (v1 - v0), (1.0 - fu) * s0 + fu * s1)
        } else {
            mix(iu)
        };
        (v * u_scale * w_scale, s * u_scale * w_scale)
    }
}

/// Index and fraction of `x` in the increasing grid, with the exponential
/// envelope factor applied below the grid.
fn bracket(grid: &[f64], x: f64) -> (usize, f64, f64) {
    if x <= grid[0] {
        return (0, 0.0, ((x - grid[0]) / 2.0).exp());
    }
    if x >= grid[grid.len() - 1] {
        return (grid.len() - 1, 0.0, 1.0);
    }
    let i = grid.partition_point(|g| *g <= x) - 1;
    (i, (x - grid[i]) / (grid[i + 1] - grid[i]), 1.0)
}

fn bracket_u(grid: &[f64], u: f64) -> (usize, f64, f64) {
    let last = grid[grid.len() - 1];
    if u >= last {
        let scale = if last < 1.0 { ((1.0 - u) / (1.0 - last)).max(0.0) } else { 0.0 };
        return (grid.len() - 1, 0.0, scale);
    }
    if u <= grid[0] {
        return (0, 0.0, 1.0);
    }
    let i = grid.partition_point(|g| *g <= u) - 1;
    (i, (u - grid[i]) / (grid[i + 1] - grid[i]), 1.0)
}
