//! Renewal functions `U` (walk killed on entering `[0, ∞)`) and `V` (walk
//! killed on entering `(-∞, 0)`), their harmonic identities, and the measure
//! `μ_η(dy) ∝ e^{-ηy} U(y) dy`.
//!
//! Tables are stored on a uniform grid of magnitudes `u_i = i h`:
//! a plus table holds `U(u_i)`, a minus table holds `V(-u_i)`. Entry 0 of a
//! minus table is the left limit `V(0-) = 1`; the literal value `V(0)` is 0.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Exec, Merge, StreamKey};
use crate::stablecore::IncrementModel;
use crate::stats::{Estimate, Moments};

#[derive(Debug, Error)]
pub enum RenewalError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("table does not cover {needed}; grid ends at {available}")]
    Coverage { needed: f64, available: f64 },
    #[error("reference value is zero at x = {0}; residual undefined")]
    ZeroReference(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed table: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// `U`, supported on `x >= 0`.
    Plus,
    /// `V`, supported on `x < 0`.
    Minus,
}

/// Truncation behaviour of the series at the top of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailDiagnostic {
    /// Last series term divided by the partial sum.
    pub last_term_rel: f64,
    /// First `N` at which three consecutive terms fell below `rel_tol` times the partial sum.
    pub stop_index: Option<usize>,
    /// Extrapolated tail beyond `N_max`, relative to the corrected value.
    pub tail_rel: f64,
    /// Set when terms in the last window are not decaying.
    pub warning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenewalTable {
    pub side: Side,
    pub step: f64,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub n_max: usize,
    pub paths: u64,
    pub tail: TailDiagnostic,
}

/// Tuning of a table estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenewalSettings {
    pub step: f64,
    pub x_max: f64,
    pub n_max: usize,
    pub paths: u64,
    pub rel_tol: f64,
}

impl RenewalSettings {
    /// Grid spacing `a_1/20`, grid out to 30 `a_1`, horizon 4096.
    pub fn defaults(model: &IncrementModel, paths: u64) -> Self {
        let a1 = model.norming(1).a_n;
        Self { step: a1 / 20.0, x_max: 30.0 * a1, n_max: 4096, paths, rel_tol: 1e-3 }
    }
}

#[derive(Clone, Debug, Default)]
struct LaneHist {
    paths: u64,
    all: Vec<u64>,
    window: Vec<u64>,
    per_n: Vec<u64>,
}

impl Merge for LaneHist {
    fn merge(&mut self, other: &Self) {
        if self.all.is_empty() {
            *self = other.clone();
            return;
        }
        self.paths += other.paths;
        for (a, b) in self.all.iter_mut().zip(&other.all) {
            *a += b;
        }
        for (a, b) in self.window.iter_mut().zip(&other.window) {
            *a += b;
        }
        for (a, b) in self.per_n.iter_mut().zip(&other.per_n) {
            *a += b;
        }
    }
}

/// `Σ_{n > N} n^{-p}` by the midpoint integral approximation.
fn power_tail(n: usize, p: f64) -> f64 {
    (n as f64 + 0.5).powf(1.0 - p) / (p - 1.0)
}

fn window_sum(n: usize, p: f64) -> f64 {
    (n / 2 + 1..=n).map(|k| (k as f64).powf(-p)).sum()
}

pub fn estimate_u(model: &IncrementModel, settings: &RenewalSettings, exec: &Exec, key: StreamKey) -> RenewalTable {
    estimate_table(model, Side::Plus, settings, exec, key)
}

pub fn estimate_v(model: &IncrementModel, settings: &RenewalSettings, exec: &Exec, key: StreamKey) -> RenewalTable {
    estimate_table(model, Side::Minus, settings, exec, key)
}

fn estimate_table(
    model: &IncrementModel,
    side: Side,
    settings: &RenewalSettings,
    exec: &Exec,
    key: StreamKey,
) -> RenewalTable {
    let RenewalSettings { step, x_max, n_max, paths, rel_tol } = *settings;
    assert!(n_max >= 2 && step > 0.0 && x_max > step && paths > 0);
    let bins = (x_max / step).ceil() as usize + 1;
    let half = n_max / 2;
    // Plus side follows the reflected walk while it stays strictly positive
    // (S_k < 0); minus side follows the walk while it stays nonnegative.
    let sign = if side == Side::Plus { -1.0 } else { 1.0 };
    let lanes: Vec<LaneHist> = exec.run(key, paths, |_, rng, share| {
        let mut h = LaneHist { paths: share, all: vec![0; bins], window: vec![0; bins], per_n: vec![0; n_max] };
        for _ in 0..share {
            let mut v = 0.0;
            for n in 1..=n_max {
                v += sign * model.sample(rng);
                let alive = if side == Side::Plus { v > 0.0 } else { v >= 0.0 };
                if !alive {
                    break;
                }
                // Plus side counts depths `v <= u_i`; minus side counts heights `v < u_i`.
                let b = if side == Side::Plus { (v / step).ceil() } else { (v / step).floor() + 1.0 };
                if b < bins as f64 {
                    let b = b as usize;
                    h.all[b] += 1;
                    if n > half {
                        h.window[b] += 1;
                    }
                    h.per_n[n - 1] += 1;
                }
            }
        }
        h
    });

    let p = model.b_exponent();
    let kappa = power_tail(n_max, p) / window_sum(n_max, p);
    let lane_values: Vec<Vec<f64>> = lanes
        .iter()
        .filter(|l| l.paths > 0)
        .map(|l| {
            let (mut ca, mut cw) = (0u64, 0u64);
            (0..bins)
                .map(|i| {
                    ca += l.all[i];
                    cw += l.window[i];
                    1.0 + (ca as f64 + kappa * cw as f64) / l.paths as f64
                })
                .collect()
        })
        .collect();
    let mut pooled = LaneHist::default();
    for l in &lanes {
        pooled.merge(l);
    }
    let mut values = Vec::with_capacity(bins);
    let mut std_errors = Vec::with_capacity(bins);
    let (mut ca, mut cw) = (0u64, 0u64);
    for i in 0..bins {
        ca += pooled.all[i];
        cw += pooled.window[i];
        values.push(1.0 + (ca as f64 + kappa * cw as f64) / paths as f64);
        let mut m = Moments::default();
        lane_values.iter().for_each(|v| m.push(v[i]));
        std_errors.push(if lane_values.len() > 1 { m.std_error() } else { f64::NAN });
    }

    let total: u64 = pooled.per_n.iter().sum();
    let mut running = 0u64;
    let mut streak = 0;
    let mut stop_index = None;
    for (n, t) in pooled.per_n.iter().enumerate() {
        running += t;
        if running > 0 && (*t as f64) < rel_tol * running as f64 {
            streak += 1;
            if streak == 3 && stop_index.is_none() {
                stop_index = Some(n + 1);
            }
        } else {
            streak = 0;
        }
    }
    let quarter = n_max / 4;
    let early: u64 = pooled.per_n[half..half + quarter].iter().sum();
    let late: u64 = pooled.per_n[half + quarter..].iter().sum();
    let top = *values.last().expect("nonempty grid");
    let tail = TailDiagnostic {
        last_term_rel: pooled.per_n[n_max - 1] as f64 / total.max(1) as f64,
        stop_index,
        tail_rel: kappa * cw as f64 / paths as f64 / top,
        warning: late > early && late > 0,
    };
    RenewalTable { side, step, values, std_errors, n_max, paths, tail }
}

impl RenewalTable {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.step * (self.values.len() - 1) as f64
    }

    /// Grid in increasing `x` order.
    pub fn grid(&self) -> Vec<f64> {
        let g = (0..self.len()).map(|i| i as f64 * self.step);
        match self.side {
            Side::Plus => g.collect(),
            Side::Minus => g.map(|u| -u).rev().collect(),
        }
    }

    /// Slope used beyond the grid, fitted over the last tenth of the table.
    fn tail_slope(&self) -> f64 {
        let n = self.len();
        let k = (n / 10).max(1);
        (self.values[n - 1] - self.values[n - 1 - k]) / (k as f64 * self.step)
    }

    /// Table value as a function of the magnitude `u >= 0`, linear between
    /// grid points and linearly extrapolated beyond the grid.
    pub fn at_magnitude(&self, u: f64) -> f64 {
        debug_assert!(u >= 0.0);
        let pos = u / self.step;
        let last = self.len() - 1;
        if pos >= last as f64 {
            return self.values[last] + self.tail_slope() * (u - self.max_magnitude());
        }
        let i = pos as usize;
        let frac = pos - i as f64;
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }

    pub fn se_at_magnitude(&self, u: f64) -> f64 {
        let i = ((u / self.step).round() as usize).min(self.len() - 1);
        self.std_errors[i]
    }

    pub fn is_extrapolated(&self, u: f64) -> bool {
        u > self.max_magnitude()
    }

    /// `U(x)` or `V(x)` with the literal conventions `U(x) = 0` for `x < 0`,
    /// `V(x) = 0` for `x >= 0`.
    pub fn eval(&self, x: f64) -> f64 {
        match self.side {
            Side::Plus if x < 0.0 => 0.0,
            Side::Plus => self.at_magnitude(x),
            Side::Minus if x >= 0.0 => 0.0,
            Side::Minus => self.at_magnitude(-x),
        }
    }

    pub fn se(&self, x: f64) -> f64 {
        self.se_at_magnitude(x.abs())
    }

    /// `∫_0^y V(-u) du` (or `∫_0^y U(u) du`) by the trapezoidal rule, with a
    /// grid-refinement error estimate and a conservatively propagated SE.
    pub fn integral(&self, y: f64) -> Result<IntegralEstimate, RenewalError> {
        if y < 0.0 {
            return Err(RenewalError::Precondition(format!("integral upper limit {y} < 0")));
        }
        if y > self.max_magnitude() {
            return Err(RenewalError::Coverage { needed: y, available: self.max_magnitude() });
        }
        let fine = self.trapezoid(y, 1);
        let coarse = self.trapezoid(y, 2);
        let full = (y / self.step).floor() as usize;
        let mut se = self.std_errors[..=full].iter().map(|s| s * self.step).sum::<f64>();
        se += (y - full as f64 * self.step) * self.std_errors[full];
        Ok(IntegralEstimate { value: fine, std_error: se, quad_error: (fine - coarse).abs() / 3.0 })
    }

    fn trapezoid(&self, y: f64, stride: usize) -> f64 {
        let h = self.step * stride as f64;
        let full = (y / h).floor() as usize;
        let mut acc = 0.0;
        for i in 0..full {
            acc += 0.5 * h * (self.at_magnitude(i as f64 * h) + self.at_magnitude((i + 1) as f64 * h));
        }
        let rest = y - full as f64 * h;
        acc + 0.5 * rest * (self.at_magnitude(full as f64 * h) + self.at_magnitude(y))
    }

    /// `∫_0^∞ e^{-ηx} U(x) dx`, exact for the piecewise-linear table with
    /// its linear extension.
    pub fn laplace(&self, eta: f64) -> Estimate {
        let mut total = 0.0;
        let mut se = 0.0;
        for i in 0..self.len() - 1 {
            let (a, b) = (i as f64 * self.step, (i + 1) as f64 * self.step);
            total += exp_linear_integral(eta, a, b, self.values[i], self.values[i + 1]);
            se += exp_linear_integral(eta, a, b, self.std_errors[i], self.std_errors[i + 1]);
        }
        let xm = self.max_magnitude();
        total += (-eta * xm).exp() * (self.values[self.len() - 1] / eta + self.tail_slope() / (eta * eta));
        Estimate { value: total, std_error: se, samples: self.paths, degenerate: false }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), RenewalError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "value", "se", "n_max"])?;
        let grid = self.grid();
        let order: Vec<usize> = match self.side {
            Side::Plus => (0..self.len()).collect(),
            Side::Minus => (0..self.len()).rev().collect(),
        };
        for (x, i) in grid.iter().zip(order) {
            wr.write_record([
                format!("{x:e}"),
                format!("{:e}", self.values[i]),
                format!("{:e}", self.std_errors[i]),
                self.n_max.to_string(),
            ])?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a table written by [`RenewalTable::write_csv`]; diagnostics that
    /// the CSV does not carry are restored from `meta`.
    pub fn read_csv<R: Read>(side: Side, r: R, paths: u64, tail: TailDiagnostic) -> Result<Self, RenewalError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64, RenewalError> {
                rec.get(i)
                    .ok_or_else(|| RenewalError::Malformed("short row".into()))?
                    .parse::<f64>()
                    .map_err(|e| RenewalError::Malformed(e.to_string()))
            };
            rows.push((parse(0)?, parse(1)?, parse(2)?, parse(3)? as usize));
        }
        if rows.len() < 2 {
            return Err(RenewalError::Malformed("fewer than two rows".into()));
        }
        if side == Side::Minus {
            rows.reverse();
        }
        let step = (rows[1].0 - rows[0].0).abs();
        Ok(Self {
            side,
            step,
            values: rows.iter().map(|r| r.1).collect(),
            std_errors: rows.iter().map(|r| r.2).collect(),
            n_max: rows[0].3,
            paths,
            tail,
        })
    }
}

/// `∫_a^b e^{-ηx} f(x) dx` for `f` linear with `f(a) = fa`, `f(b) = fb`.
fn exp_linear_integral(eta: f64, a: f64, b: f64, fa: f64, fb: f64) -> f64 {
    let s = (fb - fa) / (b - a);
    let (ea, eb) = ((-eta * a).exp(), (-eta * b).exp());
    fa * (ea - eb) / eta + s * ((ea - eb) / (eta * eta) - (b - a) * eb / eta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegralEstimate {
    pub value: f64,
    pub std_error: f64,
    pub quad_error: f64,
}

/// `∫_0^y V(-u) du`.
pub fn integral_v(table: &RenewalTable, y: f64) -> Result<IntegralEstimate, RenewalError> {
    if table.side != Side::Minus {
        return Err(RenewalError::Precondition("integral_v needs a V table".into()));
    }
    table.integral(y)
}

/// Residual of the one-step harmonic identity at `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicCheck {
    pub x: f64,
    pub lhs: Estimate,
    pub table_value: f64,
    pub residual: f64,
    /// Combined standard error of the relative residual.
    pub combined_se: f64,
}

impl HarmonicCheck {
    pub fn within(&self, sigmas: f64) -> bool {
        self.residual < sigmas * self.combined_se
    }
}

/// `|E[T(x+X); constraint] - T(x)| / T(x)` with the constraint `x+X >= 0`
/// (plus side) or `x+X < 0` (minus side).
pub fn check_harmonicity(
    model: &IncrementModel,
    table: &RenewalTable,
    x: f64,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<HarmonicCheck, RenewalError> {
    match table.side {
        Side::Plus if x < 0.0 => return Err(RenewalError::Precondition(format!("plus side needs x >= 0, got {x}"))),
        Side::Minus if x >= 0.0 => return Err(RenewalError::Precondition(format!("minus side needs x < 0, got {x}"))),
        _ => {}
    }
    let reference = table.eval(x);
    if reference == 0.0 {
        return Err(RenewalError::ZeroReference(x));
    }
    let acc: Moments = exec.run_merge(key, samples, |_, rng, share| {
        let mut m = Moments::default();
        for _ in 0..share {
            m.push(table.eval(x + model.sample(rng)));
        }
        m
    });
    let lhs = acc.estimate();
    let se_tab = table.se(x);
    let combined = (lhs.std_error.powi(2) + 2.0 * se_tab.powi(2)).sqrt() / reference;
    Ok(HarmonicCheck { x, lhs, table_value: reference, residual: (lhs.value - reference).abs() / reference, combined_se: combined })
}

/// Discretised `μ_η`: cells `[lo, hi)` of the table grid with their masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuMeasure {
    pub eta: f64,
    pub cells: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
    /// Normaliser `∫_0^∞ e^{-ηx} U(x) dx`.
    pub normaliser: f64,
    lower_values: Vec<f64>,
    upper_values: Vec<f64>,
}

impl MuMeasure {
    pub fn mean(&self) -> f64 {
        self.cells.iter().zip(&self.weights).map(|((a, b), w)| 0.5 * (a + b) * w).sum()
    }

    /// Exact draw from the piecewise density `e^{-ηy}U(y)` within cell `i`
    /// (truncated exponential proposal, accepted in proportion to the linear `U`).
    pub fn sample_in_cell<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> f64 {
        let (a, b) = self.cells[i];
        let (ua, ub) = (self.lower_values[i], self.upper_values[i]);
        let cap = ua.max(ub);
        loop {
            let e = rng.random::<f64>();
            let y = a - (1.0 - e * (1.0 - (-self.eta * (b - a)).exp())).ln() / self.eta;
            let u = ua + (ub - ua) * (y - a) / (b - a);
            if rng.random::<f64>() * cap <= u {
                return y.min(b);
            }
        }
    }
}

/// `μ_η(dy) = e^{-ηy} U(y) dy / ∫ e^{-ηx} U(x) dx` on the table grid.
pub fn mu_eta(table: &RenewalTable, eta: f64) -> Result<MuMeasure, RenewalError> {
    if table.side != Side::Plus {
        return Err(RenewalError::Precondition("mu_eta needs a U table".into()));
    }
    if eta <= 0.0 {
        return Err(RenewalError::Precondition(format!("eta must be positive, got {eta}")));
    }
    let peak = (0..table.len())
        .map(|i| (-eta * i as f64 * table.step).exp() * table.values[i])
        .fold(0.0, f64::max);
    let xm = table.max_magnitude();
    if (-eta * xm).exp() * table.values[table.len() - 1] >= 1e-10 * peak {
        return Err(RenewalError::Coverage { needed: f64::NAN, available: xm });
    }
    let normaliser = table.laplace(eta).value;
    let mut cells = Vec::with_capacity(table.len() - 1);
    let mut weights = Vec::with_capacity(table.len() - 1);
    for i in 0..table.len() - 1 {
        let (a, b) = (i as f64 * table.step, (i + 1) as f64 * table.step);
        cells.push((a, b));
        weights.push(exp_linear_integral(eta, a, b, table.values[i], table.values[i + 1]));
    }
    // The mass beyond the grid (below 1e-10 of the peak density) is folded into the last cell.
    let tail = normaliser - weights.iter().sum::<f64>();
    *weights.last_mut().expect("nonempty") += tail.max(0.0);
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(MuMeasure {
        eta,
        cells,
        weights,
        normaliser,
        lower_values: table.values[..table.len() - 1].to_vec(),
        upper_values: table.values[1..].to_vec(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::stats::normal_cdf;
    use statrs::function::erf::erfc;

    /// `e^{x²} erfc(x)` without overflow.
    fn erfcx(x: f64) -> f64 {
        if x < 20.0 {
            (x * x).exp() * erfc(x)
        } else {
            let r = 1.0 / (x * x);
            (1.0 - 0.5 * r + 0.75 * r * r - 1.875 * r * r * r) / (x * std::f64::consts::PI.sqrt())
        }
    }

    /// Closed-form `∫_0^∞ e^{-ηx} U(x) dx` for standard Gaussian increments,
    /// from the ladder-height factorisation of the walk.
    pub fn gaussian_laplace_oracle(eta: f64) -> f64 {
        let term = |n: f64| 0.5 * erfcx(eta * (n / 2.0).sqrt()) / n;
        let big = 1_000_000usize;
        let mut s: f64 = (1..=big).map(|n| term(n as f64)).sum();
        // Tail of Σ n^{-3/2}/(η√(2π)).
        s += 2.0 / (eta * (2.0 * std::f64::consts::PI).sqrt()) / (big as f64 + 0.5).sqrt();
        (s.exp()) / eta
    }

    fn gauss() -> IncrementModel {
        IncrementModel::gaussian(1.0).unwrap()
    }

    fn table(side: Side, n_max: usize, paths: u64, seed: u64) -> RenewalTable {
        let s = RenewalSettings { step: 0.05, x_max: 30.0, n_max, paths, rel_tol: 1e-3 };
        estimate_table(&gauss(), side, &s, &Exec { lanes: 16, parallel: true }, StreamKey::new(seed, "table"))
    }

    #[test]
    fn oracle_sanity() {
        assert!((erfcx(19.99) - erfcx(20.01)).abs() < 1e-4);
        assert!((0.5 * erfcx(0.0) - (1.0 - normal_cdf(0.0))).abs() < 1e-15);
    }

    #[test]
    fn boundary_values() {
        let u = table(Side::Plus, 256, 2000, 1);
        assert_eq!(u.eval(-0.5), 0.0);
        assert_eq!(u.eval(0.0), 1.0);
        let v = table(Side::Minus, 256, 2000, 2);
        assert_eq!(v.eval(1.0), 0.0);
        assert_eq!(v.eval(0.0), 0.0);
        assert!(v.eval(-1.0) >= 1.0);
    }

    #[test]
    fn monotone_tables() {
        let u = table(Side::Plus, 512, 20_000, 3);
        assert!(u.values.windows(2).all(|w| w[0] <= w[1]));
        let v = table(Side::Minus, 512, 20_000, 4);
        let grid = v.grid();
        assert!(grid.windows(2).all(|w| v.eval(w[0]) >= v.eval(w[1])));
    }

    #[test]
    fn laplace_transform_matches_ladder_factorisation() {
        let u = table(Side::Plus, 4096, 400_000, 5);
        for eta in [1.0, 2.0] {
            let est = u.laplace(eta);
            let exact = gaussian_laplace_oracle(eta);
            assert!((est.value - exact).abs() < 3.0 * est.std_error + 2e-3 * exact, "eta={eta}: {est:?} vs {exact}");
        }
    }

    #[test]
    fn u_at_two_is_horizon_stable() {
        let a = table(Side::Plus, 2048, 200_000, 6);
        let b = table(Side::Plus, 4096, 200_000, 7);
        let z = crate::stats::z_distance(a.eval(2.0), a.se(2.0), b.eval(2.0), b.se(2.0));
        assert!(z < 3.0, "z = {z}");
        assert!(b.tail.last_term_rel < a.tail.last_term_rel);
    }

    #[test]
    fn gaussian_u_and_v_agree_by_symmetry() {
        let u = table(Side::Plus, 2048, 200_000, 8);
        let v = table(Side::Minus, 2048, 200_000, 9);
        for x in [0.5, 1.0, 3.0] {
            let z = crate::stats::z_distance(u.eval(x), u.se(x), v.eval(-x), v.se(-x));
            assert!(z < 3.5, "x={x}: z={z}");
        }
    }

    #[test]
    fn harmonicity_both_sides() {
        let u = table(Side::Plus, 4096, 400_000, 10);
        let v = table(Side::Minus, 4096, 400_000, 11);
        let exec = Exec { lanes: 16, parallel: true };
        let c = check_harmonicity(&gauss(), &u, 0.0, 400_000, &exec, StreamKey::new(1, "h+")).unwrap();
        assert!(c.within(3.0), "{c:?}");
        let c = check_harmonicity(&gauss(), &v, -2.0, 400_000, &exec, StreamKey::new(1, "h-")).unwrap();
        assert!(c.within(3.0), "{c:?}");
        assert!(matches!(
            check_harmonicity(&gauss(), &u, -1.0, 10, &exec, StreamKey::new(1, "bad")),
            Err(RenewalError::Precondition(_))
        ));
    }

    #[test]
    fn integral_v_properties() {
        let v = table(Side::Minus, 1024, 50_000, 12);
        assert_eq!(integral_v(&v, 0.0).unwrap().value, 0.0);
        let a = integral_v(&v, 0.7).unwrap().value;
        let b = integral_v(&v, 1.3).unwrap().value;
        let mid = v.trapezoid(1.3, 1) - v.trapezoid(0.7, 1);
        assert!((a + mid - b).abs() < 1e-12);
        let i = integral_v(&v, 1.0).unwrap();
        assert!(i.quad_error < 0.02 * i.value);
        assert!(integral_v(&v, 1e6).is_err());
    }

    #[test]
    fn mu_eta_normalised_and_concentrated() {
        let u = table(Side::Plus, 1024, 20_000, 13);
        let mu = mu_eta(&u, 1.0).unwrap();
        assert!((mu.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mu20 = mu_eta(&u, 20.0).unwrap();
        assert!(mu20.mean() < 0.2);
        let mut rng = StreamKey::new(3, "cell").lane(0);
        for _ in 0..100 {
            let y = mu.sample_in_cell(7, &mut rng);
            assert!(y >= mu.cells[7].0 && y <= mu.cells[7].1);
        }
    }

    #[test]
    fn mu_eta_requires_tail_coverage() {
        let s = RenewalSettings { step: 0.05, x_max: 2.0, n_max: 64, paths: 1000, rel_tol: 1e-3 };
        let u = estimate_u(&gauss(), &s, &Exec { lanes: 4, parallel: false }, StreamKey::new(1, "short"));
        assert!(matches!(mu_eta(&u, 1.0), Err(RenewalError::Coverage { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let u = table(Side::Plus, 128, 1000, 14);
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let back = RenewalTable::read_csv(Side::Plus, buf.as_slice(), u.paths, u.tail).unwrap();
        assert_eq!(back, u);
        let v = table(Side::Minus, 128, 1000, 15);
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        let back = RenewalTable::read_csv(Side::Minus, buf.as_slice(), v.paths, v.tail).unwrap();
        assert_eq!(back.values, v.values);
    }
}
