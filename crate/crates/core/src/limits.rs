//! Experiment drivers: survival scaling, walk asymptotics, the constants
//! `G_left`/`G_right`, the limit law of `Z_n` and path constancy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condsim::{conditioned_trajectory, estimate_h_grid, log_b_limit, CondError, HGrid, HSettings};
use crate::envmodel::{EnvRealization, OffspringFamily};
use crate::gfengine::{ChainError, GenFunChain};
use crate::quad::QuadratureError;
use crate::renewal::{integral_v, RenewalError, RenewalTable, Side};
use crate::rng::{Exec, Merge, StreamKey};
use crate::stablecore::IncrementModel;
use crate::stats::{z_distance, Estimate, Moments, PairMoments, RatioEstimate, WeightedSample};
use crate::walks::{estimate_exp_below_zero, estimate_stay_low, WalkPath};

#[derive(Debug, Error)]
pub enum LimitError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no sample hit the conditioning event")]
    Degenerate,
    #[error("h grid does not cover w = {0}")]
    HGridCoverage(f64),
    #[error(transparent)]
    Renewal(#[from] RenewalError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Cond(#[from] CondError),
}

fn g0(model: &IncrementModel) -> Result<f64, LimitError> {
    Ok(model.density_at_zero()?)
}

/// `Σ_{j>J} j^{-p} / Σ_{J/2<j<=J} j^{-p}`: converts the last window of a
/// series with terms `~ C j^{-p}` into an estimate of its tail.
pub fn power_tail_factor(j_max: usize, p: f64) -> f64 {
    let window: f64 = (j_max / 2 + 1..=j_max).map(|j| (j as f64).powf(-p)).sum();
    // Euler–Maclaurin for the tail sum.
    let jf = j_max as f64;
    let tail = (jf + 0.5).powf(1.0 - p) / (p - 1.0);
    tail / window
}

/// Per-index sums for sparse accumulation of many correlated terms.
#[derive(Clone, Debug, Default)]
struct TermAcc {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    /// Contributions of the current sample not yet folded in.
    pending: Vec<f64>,
    touched: Vec<usize>,
}

impl TermAcc {
    fn new(len: usize) -> Self {
        Self { sum: vec![0.0; len], sum_sq: vec![0.0; len], pending: vec![0.0; len], touched: Vec::new() }
    }

    #[inline]
    fn add_partial(&mut self, i: usize, x: f64) {
        if !self.touched.contains(&i) {
            self.touched.push(i);
        }
        self.pending[i] += x;
    }

    fn flush(&mut self) {
        for k in 0..self.touched.len() {
            let i = self.touched[k];
            let x = std::mem::take(&mut self.pending[i]);
            self.add(i, x);
        }
        self.touched.clear();
    }

    #[inline]
    fn add(&mut self, i: usize, x: f64) {
        self.sum[i] += x;
        self.sum_sq[i] += x * x;
    }

    fn estimates(&self, count: u64) -> Vec<Estimate> {
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| Moments { count, sum: *s, sum_sq: *q }.estimate())
            .collect()
    }
}

impl Merge for TermAcc {
    fn merge(&mut self, o: &Self) {
        if self.sum.is_empty() {
            *self = o.clone();
            return;
        }
        for i in 0..self.sum.len() {
            self.sum[i] += o.sum[i];
            self.sum_sq[i] += o.sum_sq[i];
        }
    }
}

/// `∫_0^y V(-u) du` on the table grid (trapezoidal), linear beyond it.
struct VIntegral<'a> {
    table: &'a RenewalTable,
    cum: Vec<f64>,
}

impl<'a> VIntegral<'a> {
    fn new(table: &'a RenewalTable) -> Self {
        let mut cum = Vec::with_capacity(table.values.len());
        cum.push(0.0);
        for w in table.values.windows(2) {
            let last = *cum.last().expect("nonempty");
            cum.push(last + 0.5 * table.step * (w[0] + w[1]));
        }
        Self { table, cum }
    }

    fn at(&self, y: f64) -> f64 {
        let pos = y / self.table.step;
        let last = self.cum.len() - 1;
        let (i, base) = if pos >= last as f64 { (last, self.table.max_magnitude()) } else { (pos as usize, pos.floor() * self.table.step) };
        let (v0, v1) = (self.table.at_magnitude(base), self.table.at_magnitude(y));
        self.cum[i] + 0.5 * (y - base) * (v0 + v1)
    }
}

// ---------------------------------------------------------------------------
// Environment sweep: exact per-environment survival probabilities.

/// What one environment sweep at fixed `n` records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub n: usize,
    /// Levels `K` of the events `{S_n <= K}`.
    pub thresholds: Vec<f64>,
    /// Index into `thresholds` for which the conditional pgf is tracked.
    pub law_threshold: Option<usize>,
    pub zs: Vec<f64>,
    /// Cut points `J` for the split of `τ_n` into `[0,J]`, `(J,n-J]`, `(n-J,n]`.
    pub tau_cuts: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSplit {
    pub j: usize,
    pub left: Estimate,
    pub middle: Estimate,
    pub right: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCell {
    pub k: f64,
    /// `P(Z_n > 0, S_n <= K)`.
    pub survival: Estimate,
    /// `P(S_n <= K | Z_n > 0)`.
    pub conditional: RatioEstimate,
    /// `P(S_n <= K, L_n >= 0)`.
    pub stay_low: Estimate,
    /// `P(Z_n > 0, S_n <= K) / P(S_n <= K, L_n >= 0)`.
    pub versus_stay_low: RatioEstimate,
    pub tau_split: Vec<TauSplit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub n: usize,
    pub a_n: f64,
    pub b_n: f64,
    pub samples: u64,
    /// `P(Z_n > 0)`.
    pub survival: Estimate,
    /// `P(L_n >= 0)`.
    pub stay_positive: Estimate,
    /// `P(Z_n > 0) / P(L_n >= 0)`.
    pub theta: RatioEstimate,
    pub cells: Vec<ThresholdCell>,
    pub zs: Vec<f64>,
    /// `E[z^{Z_n} | Z_n > 0, S_n <= K]` for the law threshold.
    pub law: Vec<RatioEstimate>,
}

#[derive(Clone, Debug, Default)]
struct SweepAcc {
    survival: Moments,
    theta: PairMoments,
    cond: Vec<PairMoments>,
    stay: Vec<Moments>,
    versus: Vec<PairMoments>,
    /// `[cell][cut][left, middle, right]`.
    split: Vec<Moments>,
    law: Vec<PairMoments>,
}

impl Merge for SweepAcc {
    fn merge(&mut self, o: &Self) {
        self.survival.merge(&o.survival);
        self.theta.merge(&o.theta);
        self.cond.merge(&o.cond);
        self.stay.merge(&o.stay);
        self.versus.merge(&o.versus);
        self.split.merge(&o.split);
        self.law.merge(&o.law);
    }
}

/// One environment of length `n`: `S_n`, `min_{k>=1} S_k`, `τ_n` and the
/// complements `1 - F_{0,n}(z)` at `z = 0` and at every `z` requested.
struct EnvScan {
    s_n: f64,
    l_n: f64,
    tau: usize,
    /// `Σ_{k<n} e^{-S_k}` (linear-fractional only).
    a: f64,
}

fn scan_env<R: Rng + ?Sized>(model: &IncrementModel, n: usize, keep: Option<&mut Vec<f64>>, rng: &mut R) -> EnvScan {
    let mut s: f64 = 0.0;
    let mut a = 0.0;
    let mut l = f64::INFINITY;
    let mut min = 0.0;
    let mut tau = 0;
    let mut keep = keep;
    if let Some(b) = keep.as_deref_mut() {
        b.clear();
    }
    for k in 1..=n {
        a += (-s).exp();
        let x = model.sample(rng);
        s += x;
        if let Some(b) = keep.as_deref_mut() {
            b.push(x);
        }
        l = l.min(s);
        if s < min {
            min = s;
            tau = k;
        }
    }
    EnvScan { s_n: s, l_n: if n == 0 { 0.0 } else { l }, tau, a }
}

/// `1 - F_{0,n}(1 - t)` from a scan; `buf` must hold the increments for
/// families without a closed form.
fn scan_complement(family: OffspringFamily, scan: &EnvScan, buf: &[f64], t: f64) -> f64 {
    match family {
        OffspringFamily::LinearFractional => {
            if t == 0.0 {
                0.0
            } else {
                1.0 / (scan.a + (-scan.s_n).exp() / t)
            }
        }
        OffspringFamily::Poisson => {
            let mut c = t;
            for x in buf.iter().rev() {
                c = family.complement(*x, c);
            }
            c
        }
    }
}

pub fn survival_sweep(
    model: &IncrementModel,
    family: OffspringFamily,
    spec: &SweepSpec,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<SweepResult, LimitError> {
    let n = spec.n;
    if n == 0 {
        return Err(LimitError::Precondition("sweep needs n >= 1".into()));
    }
    let nk = spec.thresholds.len();
    let ncut = spec.tau_cuts.len();
    let nz = if spec.law_threshold.is_some() { spec.zs.len() } else { 0 };
    let need_buf = family != OffspringFamily::LinearFractional;
    let acc: SweepAcc = exec.run_merge(key, samples, |_, rng, share| {
        let mut acc = SweepAcc {
            cond: vec![PairMoments::default(); nk],
            stay: vec![Moments::default(); nk],
            versus: vec![PairMoments::default(); nk],
            split: vec![Moments::default(); nk * ncut * 3],
            law: vec![PairMoments::default(); nz],
            ..Default::default()
        };
        let mut buf = Vec::with_capacity(if need_buf { n } else { 0 });
        for _ in 0..share {
            let scan = scan_env(model, n, if need_buf { Some(&mut buf) } else { None }, rng);
            let surv = scan_complement(family, &scan, &buf, 1.0).clamp(0.0, 1.0);
            let positive = f64::from(u8::from(scan.l_n >= 0.0));
            acc.survival.push(surv);
            acc.theta.push(surv, positive);
            for (c, k) in spec.thresholds.iter().enumerate() {
                let hit = scan.s_n <= *k;
                let sv = if hit { surv } else { 0.0 };
                acc.cond[c].push(sv, surv);
                let low = if hit { positive } else { 0.0 };
                acc.stay[c].push(low);
                acc.versus[c].push(sv, low);
                for (i, j) in spec.tau_cuts.iter().enumerate() {
                    let part = if scan.tau <= *j {
                        0
                    } else if scan.tau + j < n + 1 {
                        1
                    } else {
                        2
                    };
                    for p in 0..3 {
                        let cell = &mut acc.split[(c * ncut + i) * 3 + p];
                        if p == part {
                            cell.push(sv);
                        } else {
                            cell.push_zeros(1);
                        }
                    }
                }
            }
            if let Some(c) = spec.law_threshold {
                let hit = scan.s_n <= spec.thresholds[c];
                for (iz, z) in spec.zs.iter().enumerate() {
                    if hit && surv > 0.0 {
                        let cz = scan_complement(family, &scan, &buf, 1.0 - z).clamp(0.0, surv);
                        acc.law[iz].push(surv - cz, surv);
                    } else {
                        acc.law[iz].push_zeros(1);
                    }
                }
            }
        }
        acc
    });
    let norming = model.norming(n as u64);
    let cells = spec
        .thresholds
        .iter()
        .enumerate()
        .map(|(c, k)| ThresholdCell {
            k: *k,
            survival: acc.cond[c].x().estimate(),
            conditional: acc.cond[c].ratio(),
            stay_low: acc.stay[c].estimate(),
            versus_stay_low: acc.versus[c].ratio(),
            tau_split: spec
                .tau_cuts
                .iter()
                .enumerate()
                .map(|(i, j)| {
                    let e = |p: usize| acc.split[(c * ncut + i) * 3 + p].estimate();
                    TauSplit { j: *j, left: e(0), middle: e(1), right: e(2) }
                })
                .collect(),
        })
        .collect();
    Ok(SweepResult {
        n,
        a_n: norming.a_n,
        b_n: norming.b_n,
        samples,
        survival: acc.survival.estimate(),
        stay_positive: acc.theta.y().estimate(),
        theta: acc.theta.ratio(),
        cells,
        zs: if nz > 0 { spec.zs.clone() } else { Vec::new() },
        law: acc.law.iter().map(PairMoments::ratio).collect(),
    })
}

/// Runs one sweep per `n` on independent streams.
#[allow(clippy::too_many_arguments)]
pub fn sweeps(
    model: &IncrementModel,
    family: OffspringFamily,
    n_list: &[usize],
    thresholds: impl Fn(usize) -> Vec<f64>,
    law_threshold: Option<usize>,
    zs: &[f64],
    tau_cuts: &[usize],
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<Vec<SweepResult>, LimitError> {
    n_list
        .iter()
        .map(|n| {
            let spec = SweepSpec {
                n: *n,
                thresholds: thresholds(*n),
                law_threshold,
                zs: zs.to_vec(),
                tau_cuts: tau_cuts.to_vec(),
            };
            survival_sweep(model, family, &spec, samples, exec, key.child_index(*n as u64))
        })
        .collect()
}

fn check_increasing(n_list: &[usize]) -> Result<(), LimitError> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] == 0 {
        return Err(LimitError::Precondition("n_list must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// Row of a `quantity / reference` table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub n: usize,
    pub estimate: Estimate,
    pub reference: f64,
    pub ratio: f64,
    pub ratio_se: f64,
}

impl RatioRow {
    fn new(n: usize, estimate: Estimate, reference: f64) -> Self {
        Self { n, estimate, reference, ratio: estimate.value / reference, ratio_se: estimate.std_error / reference }
    }
}

/// Whether the last two rows agree within `sigmas` combined standard errors.
pub fn last_two_agree(rows: &[RatioRow], sigmas: f64) -> bool {
    match rows {
        [.., a, b] => z_distance(a.ratio, a.ratio_se, b.ratio, b.ratio_se) < sigmas,
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub k: f64,
    pub rows: Vec<RatioRow>,
    pub stabilized: bool,
}

/// `P(Z_n > 0, S_n <= K) / b_n` from sweeps whose threshold `cell` is `K`.
pub fn scaling_from_sweeps(sweeps: &[SweepResult], cell: usize) -> Result<ScalingTable, LimitError> {
    let rows: Vec<RatioRow> = sweeps.iter().map(|s| RatioRow::new(s.n, s.cells[cell].survival, s.b_n)).collect();
    if rows.iter().all(|r| r.estimate.degenerate) {
        return Err(LimitError::Degenerate);
    }
    Ok(ScalingTable { k: sweeps[0].cells[cell].k, stabilized: last_two_agree(&rows, 3.0), rows })
}

pub fn survival_scaling(
    model: &IncrementModel,
    family: OffspringFamily,
    k: f64,
    n_list: &[usize],
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<ScalingTable, LimitError> {
    check_increasing(n_list)?;
    let sw = sweeps(model, family, n_list, |_| vec![k], None, &[], &[], samples, exec, key)?;
    scaling_from_sweeps(&sw, 0)
}

// ---------------------------------------------------------------------------
// Walk asymptotics.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StayLowTable {
    pub y: f64,
    pub integral_v: f64,
    pub integral_v_se: f64,
    pub rows: Vec<RatioRow>,
    /// `max_n ratio`: empirical constant of the uniform upper bound.
    pub empirical_c: f64,
    pub stabilized: bool,
}

/// `P(S_n <= y, L_n >= 0) / (g(0) b_n ∫_0^y V(-u) du)`.
#[allow(clippy::too_many_arguments)]
pub fn asym_stay_low(
    model: &IncrementModel,
    n_list: &[usize],
    y: f64,
    v_table: &RenewalTable,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<StayLowTable, LimitError> {
    check_increasing(n_list)?;
    if y <= 0.0 {
        return Err(LimitError::Precondition("y must be positive".into()));
    }
    let iv = integral_v(v_table, y)?;
    let g = g0(model)?;
    let rows: Vec<RatioRow> = n_list
        .iter()
        .map(|n| {
            let e = estimate_stay_low(model, *n, &[y], samples, exec, key.child_index(*n as u64))[0];
            RatioRow::new(*n, e, g * model.b(*n as u64) * iv.value)
        })
        .collect();
    Ok(StayLowTable {
        y,
        integral_v: iv.value,
        integral_v_se: iv.std_error,
        empirical_c: rows.iter().map(|r| r.ratio).fold(0.0, f64::max),
        stabilized: last_two_agree(&rows, 3.0),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsecutiveRatio {
    pub n: usize,
    pub next: usize,
    /// `E_n / E_next`.
    pub observed: f64,
    pub std_error: f64,
    /// `b_n / b_next`.
    pub expected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpMinTable {
    pub laplace: Estimate,
    pub rows: Vec<RatioRow>,
    pub consecutive: Vec<ConsecutiveRatio>,
}

/// `E[e^{S_n}; τ_n = n] / (g(0) b_n ∫_0^∞ e^{-y} U(y) dy)`, using the dual
/// form `E[e^{S_n}; M_n < 0]`.
pub fn asym_exp_min(
    model: &IncrementModel,
    n_list: &[usize],
    u_table: &RenewalTable,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<ExpMinTable, LimitError> {
    check_increasing(n_list)?;
    if u_table.side != Side::Plus {
        return Err(LimitError::Precondition("needs a U table".into()));
    }
    let laplace = u_table.laplace(1.0);
    let g = g0(model)?;
    let rows: Vec<RatioRow> = n_list
        .iter()
        .map(|n| {
            let e = estimate_exp_below_zero(model, *n, samples, exec, key.child_index(*n as u64));
            RatioRow::new(*n, e, g * model.b(*n as u64) * laplace.value)
        })
        .collect();
    let consecutive = rows
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0].estimate, w[1].estimate);
            let observed = a.value / b.value;
            ConsecutiveRatio {
                n: w[0].n,
                next: w[1].n,
                observed,
                std_error: observed * a.relative_error().hypot(b.relative_error()),
                expected: model.b(w[0].n as u64) / model.b(w[1].n as u64),
            }
        })
        .collect();
    Ok(ExpMinTable { laplace, rows, consecutive })
}

// ---------------------------------------------------------------------------
// The left constant.

/// How the survival factor of a left term is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeftForm {
    /// `P⁺(survive forever from Z_j)`, with `P⁺(Z_m > 0)` at the plus horizon.
    SurviveForever,
    /// Survival through the final descent as well: the end height `y` above
    /// the minimum is integrated against `V(-y) dy` and the end of the
    /// environment, reversed, is drawn under `P⁻` from `-y`.
    EndCorrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeftSettings {
    pub j_max: usize,
    pub plus_horizon: usize,
    pub minus_horizon: usize,
    pub samples: u64,
    pub form: LeftForm,
    /// Depth below which prefixes are counted in the `deep_fraction` diagnostic.
    pub n_cut: f64,
    /// Extrapolate the `P±` horizons as `2 f(4m) - f(m)`; see [`HSettings::richardson`].
    pub richardson: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeftReport {
    pub k: f64,
    pub form: LeftForm,
    pub j_max: usize,
    /// `m_0 .. m_J`.
    pub terms: Vec<Estimate>,
    /// Extrapolated `Σ_{j>J} m_j`.
    pub tail: f64,
    /// `G_left(K)` including the tail.
    pub total: Estimate,
    pub zs: Vec<f64>,
    /// `Ĝ_left(K, z)` including tails.
    pub hat: Vec<Estimate>,
    /// Share of the total coming from prefixes with `S_j < -n_cut`.
    pub deep_fraction: f64,
}

impl LeftReport {
    pub fn partial_sums(&self) -> Vec<f64> {
        self.terms
            .iter()
            .scan(0.0, |acc, t| {
                *acc += t.value;
                Some(*acc)
            })
            .collect()
    }
}

/// One `P⁺` draw from level 0: weight and the data of its complement map.
struct PlusEnv {
    weight: f64,
    /// `φ⁺(t) = t / (a t + d)` for the linear-fractional family.
    a: f64,
    d: f64,
    increments: Vec<f64>,
}

impl PlusEnv {
    /// Draws at horizon `m` and, when `factor > 1`, at `factor·m` on the same walk.
    fn draw<R: Rng + ?Sized>(
        model: &IncrementModel,
        family: OffspringFamily,
        m: usize,
        factor: usize,
        u_table: &RenewalTable,
        rng: &mut R,
    ) -> [Option<Self>; 2] {
        let mut level: f64 = 0.0;
        let mut a = 0.0;
        let keep = family != OffspringFamily::LinearFractional;
        let mut increments = Vec::new();
        let mut out = [None, None];
        let u0 = u_table.eval(0.0);
        for step in 1..=factor * m {
            a += (-level).exp();
            let x = model.sample(rng);
            level += x;
            if level < 0.0 {
                break;
            }
            if keep {
                increments.push(x);
            }
            if step == m || step == factor * m {
                let slot = usize::from(step != m);
                out[slot] = Some(Self { weight: u_table.eval(level) / u0, a, d: (-level).exp(), increments: increments.clone() });
            }
        }
        out
    }

    /// `1 - F⁺_{0,m}(1 - t)`.
    fn complement(&self, family: OffspringFamily, t: f64) -> f64 {
        match family {
            OffspringFamily::LinearFractional => {
                if t == 0.0 {
                    0.0
                } else {
                    t / (self.a * t + self.d)
                }
            }
            OffspringFamily::Poisson => {
                let mut c = t;
                for x in self.increments.iter().rev() {
                    c = family.complement(*x, c);
                }
                c
            }
        }
    }
}

/// `1 - F_{0,j}(1 - σ)` for the prefix whose reversed walk is `rev`
/// (`rev[i]` = `X̃_{i+1}`), given `Σ_{i<=j} e^{R_i}` for the closed form.
fn prefix_complement(family: OffspringFamily, rev: &[f64], r_j: f64, c_j: f64, sigma: f64) -> f64 {
    match family {
        OffspringFamily::LinearFractional => {
            if sigma == 0.0 {
                0.0
            } else {
                r_j.exp() / (c_j + 1.0 / sigma)
            }
        }
        OffspringFamily::Poisson => {
            let mut t = sigma;
            for x in rev {
                t = family.complement(*x, t);
            }
            t
        }
    }
}

#[derive(Clone, Debug, Default)]
struct LeftAcc {
    terms: TermAcc,
    total: Moments,
    hat: Vec<Moments>,
    deep: f64,
}

impl Merge for LeftAcc {
    fn merge(&mut self, o: &Self) {
        self.terms.merge(&o.terms);
        self.total.merge(&o.total);
        self.hat.merge(&o.hat);
        self.deep += o.deep;
    }
}

/// `G_left(K) = g(0) Σ_j E[Π(Z_j) ∫_0^{K-S_j} V(-u) du; S_j <= K∧0, τ_j = j]`,
/// with `Π` the survival factor selected by `settings.form`, and `Ĝ_left(K, z)`
/// for each `z`. Prefixes with `τ_j = j` for all `j <= J` at once come from one
/// reversed walk abandoned at its first nonnegative value.
#[allow(clippy::too_many_arguments)]
pub fn constant_gleft(
    model: &IncrementModel,
    family: OffspringFamily,
    k: f64,
    zs: &[f64],
    settings: &LeftSettings,
    u_table: &RenewalTable,
    v_table: &RenewalTable,
    exec: &Exec,
    key: StreamKey,
) -> Result<LeftReport, LimitError> {
    if u_table.side != Side::Plus || v_table.side != Side::Minus {
        return Err(LimitError::Precondition("needs U and V tables".into()));
    }
    if zs.iter().any(|z| !(0.0..=1.0).contains(z)) {
        return Err(LimitError::Precondition("z must lie in [0, 1]".into()));
    }
    let g = g0(model)?;
    let jm = settings.j_max;
    let kappa = if jm >= 2 { power_tail_factor(jm, model.b_exponent()) } else { 0.0 };
    let window = jm / 2 + 1;
    let iv = VIntegral::new(v_table);
    let top = k.min(0.0);
    let factor = if settings.richardson { 4 } else { 1 };
    let acc: LeftAcc = exec.run_merge(key, settings.samples, |_, rng, share| {
        let mut acc = LeftAcc { terms: TermAcc::new(jm + 1), hat: vec![Moments::default(); zs.len()], ..Default::default() };
        let mut rev: Vec<f64> = Vec::with_capacity(jm);
        // (j, R_j, Σ_{i<=j} e^{R_i}) for the prefixes that contribute.
        let mut hits: Vec<(usize, f64, f64)> = Vec::new();
        let mut minus: Vec<f64> = Vec::with_capacity(factor * settings.minus_horizon);
        let mut run_max: Vec<f64> = Vec::with_capacity(factor * settings.minus_horizon);
        let mut ys: Vec<f64> = Vec::new();
        let mut contrib = vec![0.0; zs.len() + 1];
        for _ in 0..share {
            rev.clear();
            hits.clear();
            if k >= 0.0 {
                hits.push((0, 0.0, 0.0));
            }
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 1..=jm {
                let x = model.sample(rng);
                r += x;
                if r >= 0.0 {
                    break;
                }
                rev.push(x);
                c += f64::exp(r);
                if r <= top {
                    hits.push((j, r, c));
                }
            }
            if hits.is_empty() {
                acc.total.push_zeros(1);
                acc.hat.iter_mut().for_each(|m| m.push_zeros(1));
                continue;
            }
            let plus = PlusEnv::draw(model, family, settings.plus_horizon, factor, u_table, rng);
            contrib.iter_mut().for_each(|v| *v = 0.0);
            let mut sample_total = 0.0;
            // End heights y_j ∝ V(-y) on [0, K - S_j], by rejection.
            if settings.form == LeftForm::EndCorrected {
                ys.clear();
                for &(_, r_j, _) in &hits {
                    let ymax = k - r_j;
                    let cap = v_table.at_magnitude(ymax);
                    ys.push(loop {
                        let y = ymax * rng.random::<f64>();
                        if rng.random::<f64>() * cap <= v_table.at_magnitude(y) {
                            break y;
                        }
                    });
                }
                // Shared reversed end walk; each y keeps it while it stays below y.
                let y_top = ys.iter().cloned().fold(0.0, f64::max);
                minus.clear();
                run_max.clear();
                let mut r_end = 0.0;
                let mut top = f64::NEG_INFINITY;
                while minus.len() < factor * settings.minus_horizon && top < y_top {
                    let x = model.sample(rng);
                    r_end += x;
                    top = top.max(r_end);
                    minus.push(x);
                    run_max.push(top);
                }
            }
            for (slot, coef) in [(0, if factor > 1 { -1.0 } else { 1.0 }), (1, 2.0)] {
                if slot == 1 && factor == 1 {
                    continue;
                }
                let Some(plus) = &plus[slot] else { continue };
                let m_minus = if slot == 0 { settings.minus_horizon } else { factor * settings.minus_horizon };
                let end_walk = (settings.form == LeftForm::EndCorrected && minus.len() >= m_minus).then(|| {
                    let walk = &minus[..m_minus];
                    let log_b0 = log_b_limit(family, walk, 0.0);
                    let log_bz: Vec<f64> = zs.iter().map(|z| if *z >= 1.0 { 0.0 } else { log_b_limit(family, walk, *z) }).collect();
                    (walk.iter().sum::<f64>(), run_max[m_minus - 1], log_b0, log_bz)
                });
                let sig_forever = (settings.form == LeftForm::SurviveForever).then(|| {
                    (plus.complement(family, 1.0), zs.iter().map(|z| plus.complement(family, 1.0 - z)).collect::<Vec<f64>>())
                });
                for (h, &(j, r_j, c_j)) in hits.iter().enumerate() {
                    let pre = &rev[..j];
                    let (scale, sig0, sigz): (f64, f64, Vec<f64>) = match settings.form {
                        LeftForm::SurviveForever => {
                            let (s0, sz) = sig_forever.clone().expect("set for this form");
                            (g * plus.weight * iv.at(k - r_j), s0, sz)
                        }
                        LeftForm::EndCorrected => {
                            let Some((r_end, top, log_b0, log_bz)) = &end_walk else { continue };
                            let y = ys[h];
                            if *top >= y {
                                continue;
                            }
                            let w_minus = v_table.at_magnitude(y - r_end) / v_table.at_magnitude(y);
                            let sigma = |log_b: f64| plus.complement(family, -(log_b * y.exp() * plus.d).exp_m1());
                            (g * plus.weight * w_minus * iv.at(k - r_j), sigma(*log_b0), log_bz.iter().map(|lb| sigma(*lb)).collect())
                        }
                    };
                    let t0 = prefix_complement(family, pre, r_j, c_j, sig0);
                    let v = coef * scale * t0;
                    let tail_w = if j >= window && jm >= 2 { 1.0 + kappa } else { 1.0 };
                    acc.terms.add_partial(j, v);
                    sample_total += v * tail_w;
                    if -r_j > settings.n_cut {
                        acc.deep += v;
                    }
                    for (iz, sz) in sigz.iter().enumerate() {
                        let tz = prefix_complement(family, pre, r_j, c_j, *sz);
                        contrib[iz] += coef * scale * (t0 - tz) * tail_w;
                    }
                }
            }
            acc.terms.flush();
            acc.total.push(sample_total);
            for (iz, m) in acc.hat.iter_mut().enumerate() {
                m.push(contrib[iz]);
            }
        }
        acc
    });
    let terms = acc.terms.estimates(settings.samples);
    let window_sum: f64 = terms[window.min(jm)..].iter().map(|t| t.value).sum();
    let tail = if jm >= 2 { kappa * window_sum } else { 0.0 };
    let total = acc.total.estimate();
    Ok(LeftReport {
        k,
        form: settings.form,
        j_max: jm,
        terms,
        tail,
        deep_fraction: if total.value > 0.0 { acc.deep / (settings.samples as f64) / total.value } else { 0.0 },
        total,
        zs: zs.to_vec(),
        hat: acc.hat.iter().map(Moments::estimate).collect(),
    })
}

// ---------------------------------------------------------------------------
// The right constant.

/// Default `(u, w)` grid for the kernel when the series is evaluated at level `K`.
pub fn default_h_grid(k: f64) -> (Vec<f64>, Vec<f64>) {
    let mut us: Vec<f64> = (0..10).map(|i| f64::from(i) / 10.0).collect();
    us.extend([0.95, 0.98, 0.99, 0.995, 0.999]);
    let ws: Vec<f64> = (0..=48).rev().map(|i| k - f64::from(i) * 0.25).collect();
    (us, ws)
}

#[allow(clippy::too_many_arguments)]
pub fn kernel_grid(
    model: &IncrementModel,
    family: OffspringFamily,
    k: f64,
    u_table: &RenewalTable,
    v_table: &RenewalTable,
    settings: &HSettings,
    exec: &Exec,
    key: StreamKey,
) -> Result<HGrid, LimitError> {
    let (us, ws) = default_h_grid(k);
    Ok(estimate_h_grid(model, family, &us, &ws, u_table, v_table, settings, exec, key)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RightSettings {
    pub v_max: usize,
    pub samples: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RightReport {
    pub k: f64,
    pub v_max: usize,
    /// `E[h(F_{0,v}(0), K - S_v); L_v >= 0]` for `v = 0..=V`.
    pub terms: Vec<Estimate>,
    pub tail: f64,
    /// `E[Σ_v h(F_{0,v}(0), K - S_v) I{L_v >= 0}]`, tail included.
    pub series: Estimate,
    /// `g(0) ∫ e^{-y} U(y) dy`.
    pub prefactor: Estimate,
    /// `G_right(K)`; its SE includes the prefactor and kernel-grid errors.
    pub total: Estimate,
    /// Conservative SE contribution of the kernel grid to `series`.
    pub kernel_se: f64,
    pub zs: Vec<f64>,
    /// `Ĝ_right(K, z) = G_right(K) - G_right(K, z)`.
    pub hat: Vec<Estimate>,
    /// Share of the series evaluated below the `w` range of the grid.
    pub below_grid_fraction: f64,
}

#[derive(Clone, Debug, Default)]
struct RightAcc {
    terms: TermAcc,
    series: Moments,
    kernel_se: f64,
    hat: Vec<Moments>,
    below: f64,
}

impl Merge for RightAcc {
    fn merge(&mut self, o: &Self) {
        self.terms.merge(&o.terms);
        self.series.merge(&o.series);
        self.kernel_se += o.kernel_se;
        self.hat.merge(&o.hat);
        self.below += o.below;
    }
}

/// `G_right(K) = g(0) ∫ e^{-y} U(y) dy · E[Σ_v h(F_{0,v}(0), K - S_v) I{L_v >= 0}]`
/// with `h` interpolated on `grid`, and `Ĝ_right(K, z)` for each `z`.
#[allow(clippy::too_many_arguments)]
pub fn constant_gright(
    model: &IncrementModel,
    family: OffspringFamily,
    k: f64,
    zs: &[f64],
    grid: &HGrid,
    settings: &RightSettings,
    u_table: &RenewalTable,
    exec: &Exec,
    key: StreamKey,
) -> Result<RightReport, LimitError> {
    let w_top = *grid.ws.last().ok_or(LimitError::HGridCoverage(k))?;
    if w_top < k || grid.us.first() != Some(&0.0) {
        return Err(LimitError::HGridCoverage(k));
    }
    let w_low = grid.ws[0];
    let vm = settings.v_max;
    let kappa = if vm >= 2 { power_tail_factor(vm, model.b_exponent()) } else { 0.0 };
    let window = vm / 2 + 1;
    let lf = family == OffspringFamily::LinearFractional;
    let acc: RightAcc = exec.run_merge(key, settings.samples, |_, rng, share| {
        let mut acc = RightAcc { terms: TermAcc::new(vm + 1), hat: vec![Moments::default(); zs.len()], ..Default::default() };
        let mut incs: Vec<f64> = Vec::with_capacity(vm);
        let mut hz = vec![0.0; zs.len()];
        for _ in 0..share {
            incs.clear();
            hz.iter_mut().for_each(|v| *v = 0.0);
            let mut s: f64 = 0.0;
            // Σ_{k<v} e^{-S_k}.
            let mut a = 0.0;
            let mut total = 0.0;
            let mut kse = 0.0;
            for v in 0..=vm {
                if v > 0 {
                    a += (-s).exp();
                    let x = model.sample(rng);
                    s += x;
                    if s < 0.0 {
                        break;
                    }
                    if !lf {
                        incs.push(x);
                    }
                }
                let comp = |z: f64| -> f64 {
                    if z >= 1.0 {
                        return 0.0;
                    }
                    if lf {
                        if v == 0 {
                            1.0 - z
                        } else {
                            1.0 / (a + (-s).exp() / (1.0 - z))
                        }
                    } else {
                        let mut c = 1.0 - z;
                        for x in incs.iter().rev() {
                            c = family.complement(*x, c);
                        }
                        c
                    }
                };
                let w = k - s;
                let tail_w = if v >= window && vm >= 2 { 1.0 + kappa } else { 1.0 };
                let (h0, se0) = grid.interpolate(1.0 - comp(0.0), w);
                acc.terms.add(v, h0);
                total += h0 * tail_w;
                kse += se0 * tail_w;
                if w < w_low {
                    acc.below += h0;
                }
                for (iz, z) in zs.iter().enumerate() {
                    let (hz_v, _) = grid.interpolate(1.0 - comp(*z), w);
                    hz[iz] += (h0 - hz_v) * tail_w;
                }
            }
            acc.series.push(total);
            acc.kernel_se += kse;
            for (iz, m) in acc.hat.iter_mut().enumerate() {
                m.push(hz[iz]);
            }
        }
        acc
    });
    let n = settings.samples as f64;
    let terms = acc.terms.estimates(settings.samples);
    let window_sum: f64 = terms[window.min(vm)..].iter().map(|t| t.value).sum();
    let series = acc.series.estimate();
    let kernel_se = acc.kernel_se / n;
    let laplace = u_table.laplace(1.0);
    let g = g0(model)?;
    let prefactor = laplace.scaled(g);
    let value = prefactor.value * series.value;
    let series_se = series.std_error.hypot(kernel_se);
    let se = value * (series_se / series.value).hypot(prefactor.relative_error());
    Ok(RightReport {
        k,
        v_max: vm,
        tail: if vm >= 2 { kappa * window_sum } else { 0.0 },
        terms,
        below_grid_fraction: if series.value > 0.0 { acc.below / n / series.value } else { 0.0 },
        series,
        prefactor,
        total: Estimate { value, std_error: se, samples: series.samples, degenerate: series.degenerate },
        kernel_se,
        zs: zs.to_vec(),
        hat: acc.hat.iter().map(|m| m.estimate().scaled(prefactor.value)).collect(),
    })
}

// ---------------------------------------------------------------------------
// Theorem 1: the conditional law of Z_n.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawCurve {
    pub n: usize,
    pub zs: Vec<f64>,
    pub values: Vec<RatioEstimate>,
}

impl LawCurve {
    pub fn sup_distance(&self, other: &LawCurve) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a.value - b.value).abs()).fold(0.0, f64::max)
    }
}

pub fn law_from_sweeps(sweeps: &[SweepResult]) -> Result<Vec<LawCurve>, LimitError> {
    sweeps
        .iter()
        .map(|s| {
            if s.law.is_empty() || s.law.iter().all(|r| r.denominator.degenerate) {
                return Err(LimitError::Degenerate);
            }
            // The endpoints are exact by construction.
            let values = s
                .zs
                .iter()
                .zip(&s.law)
                .map(|(z, r)| {
                    let mut r = *r;
                    if *z == 0.0 || *z == 1.0 {
                        r.value = *z;
                        r.std_error = 0.0;
                    }
                    r
                })
                .collect();
            Ok(LawCurve { n: s.n, zs: s.zs.clone(), values })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitLaw {
    pub zs: Vec<f64>,
    pub values: Vec<Estimate>,
    pub g_left: Estimate,
    pub g_right: Estimate,
}

/// `(Ĝ_left(K,z) + Ĝ_right(K,z)) / (G_left(K) + G_right(K))`.
pub fn assemble_limit_law(left: &LeftReport, right: &RightReport) -> Result<LimitLaw, LimitError> {
    if left.zs != right.zs {
        return Err(LimitError::Precondition("left and right z grids differ".into()));
    }
    let den = left.total.value + right.total.value;
    let den_se = left.total.std_error.hypot(right.total.std_error);
    let values = left
        .hat
        .iter()
        .zip(&right.hat)
        .map(|(l, r)| {
            let num = l.value + r.value;
            let num_se = l.std_error.hypot(r.std_error);
            let v = num / den;
            Estimate { value: v, std_error: v * (num_se / num).hypot(den_se / den), samples: l.samples, degenerate: false }
        })
        .collect();
    Ok(LimitLaw { zs: left.zs.clone(), values, g_left: left.total, g_right: right.total })
}

#[allow(clippy::too_many_arguments)]
pub fn theorem1_law(
    model: &IncrementModel,
    family: OffspringFamily,
    k: f64,
    n_list: &[usize],
    zs: &[f64],
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<Vec<LawCurve>, LimitError> {
    check_increasing(n_list)?;
    if zs.iter().any(|z| !(0.0..=1.0).contains(z)) {
        return Err(LimitError::Precondition("z grid must lie in [0, 1]".into()));
    }
    let sw = sweeps(model, family, n_list, |_| vec![k], Some(0), zs, &[], samples, exec, key)?;
    law_from_sweeps(&sw)
}

// ---------------------------------------------------------------------------
// Theorem 2: constancy of the rescaled population along the path.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathConstancyReport {
    pub n: usize,
    pub theta_frac: f64,
    pub window_start: usize,
    /// Weighted sample of `sup_t |Y(t) - Y(0)| / Y(0)`.
    pub deviation: WeightedSample,
    /// Weighted sample of `Y(0)`.
    pub y0: WeightedSample,
    pub median_deviation: f64,
    pub y0_zero_mass: f64,
    pub y0_q999: f64,
    /// Weighted mass of `{Y(0) > 10 q_{0.999}}`.
    pub y0_far_mass: f64,
    pub trajectories: u64,
    pub effective_sample_size: f64,
}

/// Generations `⌊n t⌋` on 17 equispaced `t ∈ [θ, 1 - θ]`.
pub fn window_indices(n: usize, theta: f64) -> Vec<usize> {
    (0..=16)
        .map(|i| {
            let t = theta + (1.0 - 2.0 * theta) * f64::from(i) / 16.0;
            // Guard against `n t` landing a rounding error below an integer.
            ((n as f64 * t) * (1.0 + 1e-12)).floor() as usize
        })
        .map(|g| g.min(n))
        .collect()
}

/// `sup_t |Y(t) - Y(0)| / Y(0)` and `Y(0)` for one trajectory.
pub fn path_deviation(env: &EnvRealization, z: &[f64], idx: &[usize]) -> (f64, f64) {
    let y = |i: usize| (-env.s(i)).exp() * z[i];
    let y0 = y(idx[0]);
    if y0 == 0.0 {
        return (0.0, 0.0);
    }
    let d = idx.iter().map(|i| (y(*i) - y0).abs()).fold(0.0, f64::max) / y0;
    (d, y0)
}

/// Per lane: weighted deviations, weighted `Y(0)` and trajectory count.
type LaneDraws = (Vec<(f64, f64)>, Vec<(f64, f64)>, u64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Settings {
    pub theta_frac: f64,
    /// Environments drawn per `n`.
    pub samples: u64,
    /// Survival weights below this are played by Russian roulette.
    pub roulette: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn theorem2_constancy(
    model: &IncrementModel,
    family: OffspringFamily,
    k: f64,
    n_list: &[usize],
    settings: &Theorem2Settings,
    exec: &Exec,
    key: StreamKey,
) -> Result<Vec<PathConstancyReport>, LimitError> {
    let theta = settings.theta_frac;
    if !(theta > 0.0 && theta < 0.5) {
        return Err(LimitError::Precondition(format!("theta_frac = {theta} outside (0, 1/2)")));
    }
    check_increasing(n_list)?;
    n_list
        .iter()
        .map(|&n| {
            let idx = window_indices(n, theta);
            let start = idx[0];
            let lanes: Vec<LaneDraws> =
                exec.run(key.child_index(n as u64), settings.samples, |_, rng, share| {
                    let mut dev = Vec::new();
                    let mut y0s = Vec::new();
                    let mut count = 0;
                    let mut buf = Vec::with_capacity(n);
                    for _ in 0..share {
                        let scan = scan_env(model, n, Some(&mut buf), rng);
                        if scan.s_n > k {
                            continue;
                        }
                        let surv = scan_complement(family, &scan, &buf, 1.0);
                        let weight = if surv >= settings.roulette {
                            surv
                        } else if rng.random::<f64>() * settings.roulette < surv {
                            settings.roulette
                        } else {
                            continue;
                        };
                        let env = EnvRealization::new(WalkPath::from_increments(buf.clone()), family);
                        let chain = GenFunChain::new(env);
                        let Ok(path) = conditioned_trajectory(&chain, 1, rng) else { continue };
                        let (d, y0) = path_deviation(chain.env(), &path.z, &idx);
                        dev.push((d, weight));
                        y0s.push((y0, weight));
                        count += 1;
                    }
                    (dev, y0s, count)
                });
            let mut dev = Vec::new();
            let mut y0s = Vec::new();
            let mut trajectories = 0;
            for (d, y, c) in lanes {
                dev.extend(d);
                y0s.extend(y);
                trajectories += c;
            }
            if trajectories == 0 {
                return Err(LimitError::Degenerate);
            }
            let deviation = WeightedSample::new(dev);
            let y0 = WeightedSample::new(y0s);
            let q999 = y0.quantile(0.999);
            Ok(PathConstancyReport {
                n,
                theta_frac: theta,
                window_start: start,
                median_deviation: deviation.quantile(0.5),
                y0_zero_mass: y0.cdf(0.0),
                y0_q999: q999,
                y0_far_mass: y0.mass_above(10.0 * q999),
                trajectories,
                effective_sample_size: y0.ess(),
                deviation,
                y0,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Meander proportionality, the survival constant θ and the constant D.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanderCurve {
    pub n: usize,
    pub xs: Vec<f64>,
    /// `P(S_n <= x a_n | Z_n > 0)`.
    pub values: Vec<RatioEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanderTable {
    pub curves: Vec<MeanderCurve>,
    /// Sup distance between consecutive curves.
    pub distances: Vec<f64>,
}

/// Needs sweeps whose thresholds are `x a_n` for `x` in `xs`.
pub fn meander_from_sweeps(sweeps: &[SweepResult], xs: &[f64]) -> MeanderTable {
    let curves: Vec<MeanderCurve> = sweeps
        .iter()
        .map(|s| MeanderCurve { n: s.n, xs: xs.to_vec(), values: s.cells.iter().map(|c| c.conditional).collect() })
        .collect();
    let distances = curves
        .windows(2)
        .map(|w| w[0].values.iter().zip(&w[1].values).map(|(a, b)| (a.value - b.value).abs()).fold(0.0, f64::max))
        .collect();
    MeanderTable { curves, distances }
}

#[allow(clippy::too_many_arguments)]
pub fn meander_proportionality(
    model: &IncrementModel,
    family: OffspringFamily,
    xs: &[f64],
    n_list: &[usize],
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<MeanderTable, LimitError> {
    check_increasing(n_list)?;
    if xs.iter().any(|x| *x <= 0.0) {
        return Err(LimitError::Precondition("x grid must be positive".into()));
    }
    let sw = sweeps(
        model,
        family,
        n_list,
        |n| {
            let a = model.norming(n as u64).a_n;
            xs.iter().map(|x| x * a).collect()
        },
        None,
        &[],
        &[],
        samples,
        exec,
        key,
    )?;
    Ok(meander_from_sweeps(&sw, xs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaRow {
    pub n: usize,
    pub survival: Estimate,
    pub stay_positive: Estimate,
    pub ratio: RatioEstimate,
}

pub fn theta_from_sweeps(sweeps: &[SweepResult]) -> Vec<ThetaRow> {
    sweeps
        .iter()
        .map(|s| ThetaRow { n: s.n, survival: s.survival, stay_positive: s.stay_positive, ratio: s.theta })
        .collect()
}

pub fn survival_ratio_theta(
    model: &IncrementModel,
    family: OffspringFamily,
    n_list: &[usize],
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<Vec<ThetaRow>, LimitError> {
    check_increasing(n_list)?;
    let sw = sweeps(model, family, n_list, |_| Vec::new(), None, &[], &[], samples, exec, key)?;
    Ok(theta_from_sweeps(&sw))
}

/// Level sequences `φ(n) -> ∞` with `φ(n) = o(a_n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PhiSpec {
    /// `a_n / log n`.
    OverLog,
    /// `a_n n^{-exponent}`.
    Power { exponent: f64 },
}

impl PhiSpec {
    pub fn at(&self, model: &IncrementModel, n: usize) -> f64 {
        let a = model.norming(n as u64).a_n;
        match self {
            PhiSpec::OverLog => a / (n as f64).ln(),
            PhiSpec::Power { exponent } => a * (n as f64).powf(-exponent),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DRow {
    pub n: usize,
    pub phi: f64,
    /// `P(Z_n > 0, S_n <= φ) / (g(0) b_n ∫_0^φ V(-u) du)`.
    pub d: Estimate,
    /// `P(Z_n > 0, S_n <= φ) / P(S_n <= φ, L_n >= 0)`.
    pub d_versus_walk: RatioEstimate,
}

/// `D` per `φ` (outer) and `n` (inner), from sweeps whose thresholds are
/// `φ(n)` in the order of `specs`.
pub fn d_from_sweeps(
    model: &IncrementModel,
    sweeps: &[SweepResult],
    specs: &[PhiSpec],
    v_table: &RenewalTable,
) -> Result<Vec<Vec<DRow>>, LimitError> {
    let g = g0(model)?;
    let iv = VIntegral::new(v_table);
    Ok(specs
        .iter()
        .enumerate()
        .map(|(i, _)| {
            sweeps
                .iter()
                .map(|s| {
                    let cell = &s.cells[i];
                    let reference = g * s.b_n * iv.at(cell.k);
                    DRow { n: s.n, phi: cell.k, d: cell.survival.scaled(1.0 / reference), d_versus_walk: cell.versus_stay_low }
                })
                .collect()
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn d_constant(
    model: &IncrementModel,
    family: OffspringFamily,
    specs: &[PhiSpec],
    n_list: &[usize],
    v_table: &RenewalTable,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<Vec<Vec<DRow>>, LimitError> {
    check_increasing(n_list)?;
    let sw = sweeps(
        model,
        family,
        n_list,
        |n| specs.iter().map(|p| p.at(model, n)).collect(),
        None,
        &[],
        &[],
        samples,
        exec,
        key,
    )?;
    d_from_sweeps(model, &sw, specs, v_table)
}
