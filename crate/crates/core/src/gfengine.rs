//! Iterated generating functions `F_{k,n}(z) = f_{k+1}(f_{k+2}(… f_n(z)))`.
//!
//! Everything is evaluated in complement coordinates `t = 1 - z`, where a
//! single step is `φ_i(t) = 1 - f_i(1 - t)`. For linear-fractional laws
//! `φ_i(t) = t / (e^{-X_i} + t)`, a Möbius map whose coefficient matrix
//! `[[1, 0], [1, e^{-X_i}]]` has nonnegative entries, so products never
//! cancel and survival probabilities as small as `1e-300` keep full
//! relative precision.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envmodel::{EnvRealization, OffspringFamily};
use crate::rng::{Exec, Merge, StreamKey};
use crate::stablecore::IncrementModel;
use crate::stats::{PairMoments, RatioEstimate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("index range {k}..{n} invalid for an environment of length {len}")]
    Range { k: usize, n: usize, len: usize },
    #[error("pgf argument |z| = {0} exceeds 1")]
    OutsideDisc(f64),
    #[error("denominator estimate is not positive")]
    Denominator,
}

/// `t ↦ a t / (c t + d)`, kept scaled so the largest coefficient is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mobius {
    pub a: f64,
    pub c: f64,
    pub d: f64,
}

impl Mobius {
    pub const IDENTITY: Mobius = Mobius { a: 1.0, c: 0.0, d: 1.0 };

    /// Complement map of one linear-fractional step with log-mean `x`.
    pub fn step(x: f64) -> Self {
        let e = (-x).exp();
        if e > 1.0 {
            Mobius { a: 1.0 / e, c: 1.0 / e, d: 1.0 }
        } else {
            Mobius { a: 1.0, c: 1.0, d: e }
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Mobius) -> Mobius {
        // [[a,0],[c,d]] · [[a',0],[c',d']] = [[a a', 0], [c a' + d c', d d']]
        let a = self.a * other.a;
        let c = self.c * other.a + self.d * other.c;
        let d = self.d * other.d;
        let s = a.max(c).max(d);
        Mobius { a: a / s, c: c / s, d: d / s }
    }

    #[inline]
    pub fn apply(&self, t: f64) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        self.a * t / (self.c * t + self.d)
    }

    pub fn apply_c(&self, t: Complex64) -> Complex64 {
        t * self.a / (t * self.c + self.d)
    }
}

/// Evaluator for the iterated generating functions of one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenFunChain {
    env: EnvRealization,
    /// `suffix[k]` is the complement map of `F_{k,n}` (linear-fractional only).
    suffix: Vec<Mobius>,
    /// `prefix[m]` is the complement map of `F_{0,m}` (linear-fractional only).
    prefix: Vec<Mobius>,
    /// `1 - F_{k,n}(0)` for `k = 0..=n`.
    suffix_survival: Vec<f64>,
}

impl GenFunChain {
    pub fn new(env: EnvRealization) -> Self {
        let n = env.len();
        let mut suffix_survival = vec![1.0; n + 1];
        let (mut suffix, mut prefix) = (Vec::new(), Vec::new());
        if env.family == OffspringFamily::LinearFractional {
            suffix = vec![Mobius::IDENTITY; n + 1];
            for k in (0..n).rev() {
                suffix[k] = Mobius::step(env.x(k + 1)).compose(&suffix[k + 1]);
                suffix_survival[k] = suffix[k].apply(1.0);
            }
            prefix = Vec::with_capacity(n + 1);
            prefix.push(Mobius::IDENTITY);
            for m in 1..=n {
                let next = prefix[m - 1].compose(&Mobius::step(env.x(m)));
                prefix.push(next);
            }
        } else {
            for k in (0..n).rev() {
                suffix_survival[k] = env.family.complement(env.x(k + 1), suffix_survival[k + 1]);
            }
        }
        Self { env, suffix, prefix, suffix_survival }
    }

    pub fn env(&self) -> &EnvRealization {
        &self.env
    }

    pub fn len(&self) -> usize {
        self.env.len()
    }

    pub fn is_empty(&self) -> bool {
        self.env.is_empty()
    }

    fn check(&self, k: usize, n: usize) -> Result<(), ChainError> {
        if k > n || n > self.len() {
            return Err(ChainError::Range { k, n, len: self.len() });
        }
        Ok(())
    }

    fn is_lf(&self) -> bool {
        self.env.family == OffspringFamily::LinearFractional
    }

    /// `1 - F_{k,n}(1 - t)` for real `t ∈ [0, 1]`.
    pub fn complement(&self, k: usize, n: usize, t: f64) -> Result<f64, ChainError> {
        self.check(k, n)?;
        if self.is_lf() {
            if k == 0 {
                return Ok(self.prefix[n].apply(t));
            }
            if n == self.len() {
                return Ok(self.suffix[k].apply(t));
            }
            let mut m = Mobius::IDENTITY;
            for i in k + 1..=n {
                m = m.compose(&Mobius::step(self.env.x(i)));
            }
            return Ok(m.apply(t));
        }
        let mut t = t;
        for i in (k + 1..=n).rev() {
            t = self.env.family.complement(self.env.x(i), t);
        }
        Ok(t)
    }

    /// `F_{k,n}(z)` for complex `|z| <= 1`.
    pub fn iterate(&self, k: usize, n: usize, z: Complex64) -> Result<Complex64, ChainError> {
        self.check(k, n)?;
        if z.norm() > 1.0 + 1e-15 {
            return Err(ChainError::OutsideDisc(z.norm()));
        }
        if k == n {
            return Ok(z);
        }
        if z.im == 0.0 {
            return Ok(Complex64::new(1.0 - self.complement(k, n, 1.0 - z.re)?, 0.0));
        }
        if self.is_lf() {
            let m = if k == 0 {
                self.prefix[n]
            } else if n == self.len() {
                self.suffix[k]
            } else {
                (k + 1..=n).fold(Mobius::IDENTITY, |m, i| m.compose(&Mobius::step(self.env.x(i))))
            };
            return Ok(1.0 - m.apply_c(1.0 - z));
        }
        let mut s = z;
        for i in (k + 1..=n).rev() {
            s = self.env.family.pgf(self.env.x(i), s).map_err(|_| ChainError::OutsideDisc(s.norm()))?;
        }
        Ok(s)
    }

    pub fn iterate_real(&self, k: usize, n: usize, s: f64) -> Result<f64, ChainError> {
        Ok(1.0 - self.complement(k, n, 1.0 - s)?)
    }

    /// `P(Z_n > 0 | E) = 1 - F_{0,n}(0)`.
    pub fn survival_prob(&self, n: usize) -> Result<f64, ChainError> {
        Ok(self.complement(0, n, 1.0)?.clamp(0.0, 1.0))
    }

    /// `1 - F_{k,N}(0)` for the full length `N`: survival to the end from one particle at generation `k`.
    pub fn survival_from(&self, k: usize) -> f64 {
        self.suffix_survival[k]
    }

    /// `1 - F_{0,m}(0)` for every `m = 0..=n`.
    pub fn survival_curve(&self) -> Vec<f64> {
        (0..=self.len()).map(|m| self.complement(0, m, 1.0).expect("in range")).collect()
    }

    /// `E[z^{Z_n}; Z_n > 0 | E, Z_0 = q] = F_{0,n}(z)^q - F_{0,n}(0)^q`.
    pub fn conditional_pgf(&self, n: usize, z: f64, q: u32) -> Result<f64, ChainError> {
        let cz = self.complement(0, n, 1.0 - z)?;
        let c0 = self.complement(0, n, 1.0)?;
        Ok(pow_difference(cz, c0, q))
    }
}

/// `(1-cz)^q - (1-c0)^q` without cancellation when both are close to 1.
pub fn pow_difference(cz: f64, c0: f64, q: u32) -> f64 {
    let qf = f64::from(q);
    let l0 = (-c0).ln_1p();
    let lz = (-cz).ln_1p();
    if l0 == f64::NEG_INFINITY {
        return (qf * lz).exp();
    }
    (qf * l0).exp() * (qf * (lz - l0)).exp_m1()
}

/// Draws the increments of a walk with `τ_j = j`, returned in time order, by
/// sampling the reversed walk with abandonment at its first nonnegative value.
/// Returns `None` when the reversed walk leaves `(-∞, 0)`.
pub fn sample_min_at_end<R: Rng + ?Sized>(
    model: &IncrementModel,
    j: usize,
    buf: &mut Vec<f64>,
    rng: &mut R,
) -> Option<f64> {
    buf.clear();
    let mut s = 0.0;
    for _ in 0..j {
        let x = model.sample(rng);
        s += x;
        if s >= 0.0 {
            return None;
        }
        buf.push(x);
    }
    buf.reverse();
    Some(s)
}

/// `1 - F_{0,j}(z)` for the environment with increments `xs`.
pub fn complement_of_increments(family: OffspringFamily, xs: &[f64], z: f64) -> f64 {
    let mut t = 1.0 - z;
    for x in xs.iter().rev() {
        t = family.complement(*x, t);
    }
    t
}

/// `O_j(z, w)` on a grid of `z` and `w` values from one sample of walks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OGrid {
    pub j: usize,
    pub zs: Vec<f64>,
    pub ws: Vec<f64>,
    /// `ratios[iz][iw]`.
    pub ratios: Vec<Vec<RatioEstimate>>,
}

#[derive(Clone, Debug, Default)]
struct OAcc(Vec<PairMoments>);

impl Merge for OAcc {
    fn merge(&mut self, other: &Self) {
        self.0.merge(&other.0);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn o_functional_grid(
    model: &IncrementModel,
    family: OffspringFamily,
    j: usize,
    zs: &[f64],
    ws: &[f64],
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<OGrid, ChainError> {
    assert!(j >= 1, "O_j needs j >= 1");
    let cells = zs.len() * ws.len();
    let acc: OAcc = exec.run_merge(key, samples, |_, rng, share| {
        let mut acc = vec![PairMoments::default(); cells];
        let mut buf = Vec::with_capacity(j);
        for _ in 0..share {
            match sample_min_at_end(model, j, &mut buf, rng) {
                None => acc.iter_mut().for_each(|a| a.push_zeros(1)),
                Some(s) => {
                    let denom = s.exp();
                    for (iz, z) in zs.iter().enumerate() {
                        let c = complement_of_increments(family, &buf, *z);
                        for (iw, w) in ws.iter().enumerate() {
                            let num = if s <= *w { c } else { 0.0 };
                            acc[iz * ws.len() + iw].push(num, denom);
                        }
                    }
                }
            }
        }
        OAcc(acc)
    });
    let ratios: Vec<Vec<RatioEstimate>> =
        zs.iter().enumerate().map(|(iz, _)| (0..ws.len()).map(|iw| acc.0[iz * ws.len() + iw].ratio()).collect()).collect();
    if ratios.iter().flatten().any(|r| r.denominator.value <= 0.0) {
        return Err(ChainError::Denominator);
    }
    Ok(OGrid { j, zs: zs.to_vec(), ws: ws.to_vec(), ratios })
}

/// `O_j(z, w) = E[1 - F_{0,j}(z); S_j <= w, τ_j = j] / E[e^{S_j}; τ_j = j]`.
#[allow(clippy::too_many_arguments)]
pub fn o_functional(
    model: &IncrementModel,
    family: OffspringFamily,
    j: usize,
    z: f64,
    w: f64,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<RatioEstimate, ChainError> {
    Ok(o_functional_grid(model, family, j, &[z], &[w], samples, exec, key)?.ratios[0][0])
}

/// One cell of the bound check: `E[1 - F_{0,j}(z); S_j <= w, τ_j = j] / ((1-z) b_j e^{w/2})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HBoundCell {
    pub j: usize,
    pub z: f64,
    pub w: f64,
    pub ratio: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HBoundReport {
    pub cells: Vec<HBoundCell>,
    pub max_ratio: f64,
}

impl HBoundReport {
    pub fn cell(&self, j: usize, z: f64, w: f64) -> Option<&HBoundCell> {
        self.cells.iter().find(|c| c.j == j && c.z == z && c.w == w)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn check_hbound(
    model: &IncrementModel,
    family: OffspringFamily,
    js: &[usize],
    zs: &[f64],
    ws: &[f64],
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<HBoundReport, ChainError> {
    let mut cells = Vec::new();
    for &j in js {
        // Same stream for every j: paired comparisons across j.
        let grid = o_functional_grid(model, family, j, zs, ws, samples, exec, key)?;
        let b = model.b(j as u64);
        for (iz, z) in zs.iter().enumerate() {
            for (iw, w) in ws.iter().enumerate() {
                let num = grid.ratios[iz][iw].numerator;
                let scale = if *z >= 1.0 { 0.0 } else { 1.0 / ((1.0 - z) * b * (w / 2.0).exp()) };
                let (ratio, se) = if scale == 0.0 { (0.0, 0.0) } else { (num.value * scale, num.std_error * scale) };
                cells.push(HBoundCell { j, z: *z, w: *w, ratio, std_error: se });
            }
        }
    }
    let max_ratio = cells.iter().map(|c| c.ratio).fold(0.0, f64::max);
    Ok(HBoundReport { cells, max_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envmodel::sample_environment;
    use crate::walks::WalkPath;

    const FAMILIES: [OffspringFamily; 2] = [OffspringFamily::LinearFractional, OffspringFamily::Poisson];

    fn env(xs: Vec<f64>, family: OffspringFamily) -> EnvRealization {
        EnvRealization::new(WalkPath::from_increments(xs), family)
    }

    /// Backward recursion `f_{k+1}(… f_n(z))` straight from the pgf.
    fn naive(e: &EnvRealization, k: usize, n: usize, z: Complex64) -> Complex64 {
        (k + 1..=n).rev().fold(z, |s, i| e.family.pgf(e.x(i), s).unwrap())
    }

    #[test]
    fn identity_and_hand_example() {
        let ch = GenFunChain::new(env(vec![0.0, 0.0], OffspringFamily::LinearFractional));
        let z = Complex64::new(0.3, 0.2);
        assert_eq!(ch.iterate(1, 1, z).unwrap(), z);
        assert!((ch.iterate_real(0, 2, 0.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((ch.survival_prob(2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ch.survival_prob(0).unwrap(), 1.0);
        assert!(ch.iterate(0, 3, z).is_err());
        assert!(ch.iterate(0, 2, Complex64::new(1.5, 0.0)).is_err());
    }

    #[test]
    fn fast_path_matches_naive_recursion() {
        let model = IncrementModel::gaussian(1.0).unwrap();
        let mut rng = StreamKey::new(1, "naive").lane(0);
        for family in FAMILIES {
            for _ in 0..20 {
                let e = sample_environment(&model, family, 50, &mut rng);
                let ch = GenFunChain::new(e.clone());
                for (k, n) in [(0, 50), (0, 17), (13, 50), (5, 31), (50, 50)] {
                    for z in [Complex64::new(0.0, 0.0), Complex64::new(0.7, 0.0), Complex64::new(0.2, -0.6)] {
                        let a = ch.iterate(k, n, z).unwrap();
                        let b = naive(&e, k, n, z);
                        assert!((a - b).norm() < 1e-12, "{family:?} {k} {n} {z}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn closed_form_survival() {
        // 1/P(Z_n > 0 | E) = Σ_{k=0}^{n} e^{-S_k}.
        let model = IncrementModel::gaussian(1.0).unwrap();
        let mut rng = StreamKey::new(2, "closed").lane(0);
        for _ in 0..20 {
            let e = sample_environment(&model, OffspringFamily::LinearFractional, 400, &mut rng);
            let ch = GenFunChain::new(e.clone());
            let inv: f64 = (0..=400).map(|k| (-e.s(k)).exp()).sum();
            let p = ch.survival_prob(400).unwrap();
            assert!((p * inv - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_survival_keeps_relative_precision() {
        let xs = vec![-3.0; 200];
        let ch = GenFunChain::new(env(xs.clone(), OffspringFamily::LinearFractional));
        let e = env(xs, OffspringFamily::LinearFractional);
        let inv: f64 = (0..=200).map(|k| (-e.s(k)).exp()).sum();
        let p = ch.survival_prob(200).unwrap();
        assert!(p > 0.0 && (p * inv - 1.0).abs() < 1e-12, "{p}");
        assert!((ch.survival_from(0) - p).abs() <= 1e-12 * p);
    }

    #[test]
    fn algebra_invariants() {
        let model = IncrementModel::gaussian(1.0).unwrap();
        let mut rng = StreamKey::new(3, "alg").lane(0);
        for family in FAMILIES {
            let e = sample_environment(&model, family, 60, &mut rng);
            let ch = GenFunChain::new(e);
            let vals: Vec<f64> = (0..=50).map(|i| ch.iterate_real(7, 60, i as f64 / 50.0).unwrap()).collect();
            assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            assert!(vals.windows(3).all(|w| w[0] + w[2] - 2.0 * w[1] >= -1e-13));
            for z in [0.0, 0.4, 0.95] {
                let inner = ch.iterate_real(25, 60, z).unwrap();
                let two = ch.iterate_real(7, 25, inner).unwrap();
                assert!((two - ch.iterate_real(7, 60, z).unwrap()).abs() < 1e-12);
            }
            let curve = ch.survival_curve();
            assert!(curve.windows(2).all(|w| w[1] <= w[0] + 1e-15));
            for (m, c) in curve.iter().enumerate() {
                assert!(*c <= 1f64.min(ch.env().s(m).exp()) * (1.0 + 1e-12));
            }
            for k in 0..=60 {
                assert!((ch.survival_from(k) - (1.0 - ch.iterate_real(k, 60, 0.0).unwrap())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conditional_pgf_examples() {
        let model = IncrementModel::gaussian(1.0).unwrap();
        let mut rng = StreamKey::new(4, "cpgf").lane(0);
        let e = sample_environment(&model, OffspringFamily::LinearFractional, 5, &mut rng);
        let ch = GenFunChain::new(e.clone());
        let f0 = ch.iterate_real(0, 5, 0.0).unwrap();
        assert!((ch.conditional_pgf(5, 1.0, 3).unwrap() - (1.0 - f0.powi(3))).abs() < 1e-14);
        assert_eq!(ch.conditional_pgf(5, 0.0, 2).unwrap(), 0.0);
        // Z_0 = 2: convolve the pmf of two independent one-particle lines of descent.
        let pmf1: Vec<f64> = pmf_by_enumeration(&e, 400);
        let z: f64 = 0.6;
        let mut direct = 0.0;
        for (a, pa) in pmf1.iter().enumerate() {
            for (b, pb) in pmf1.iter().enumerate() {
                if a + b > 0 {
                    direct += pa * pb * z.powi((a + b) as i32);
                }
            }
        }
        let mass: f64 = pmf1.iter().sum();
        assert!((mass - 1.0).abs() < 1e-10, "truncated mass {mass}");
        let got = ch.conditional_pgf(5, z, 2).unwrap();
        assert!((got - direct).abs() < 1e-9, "{got} vs {direct}");
    }

    /// pmf of `Z_n` from one ancestor by forward convolution on a truncated support.
    fn pmf_by_enumeration(e: &EnvRealization, support: usize) -> Vec<f64> {
        let mut pmf = vec![0.0; support];
        pmf[1] = 1.0;
        for k in 1..=e.len() {
            let mut next = vec![0.0; support];
            for (i, p) in pmf.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                for (j, slot) in next.iter_mut().enumerate() {
                    *slot += p * e.family.sum_pmf(e.x(k), i as u64, j as u64);
                }
            }
            pmf = next;
        }
        pmf
    }

    #[test]
    fn o_functional_examples() {
        let model = IncrementModel::gaussian(1.0).unwrap();
        let exec = Exec { lanes: 8, parallel: false };
        let lf = OffspringFamily::LinearFractional;
        let key = StreamKey::new(5, "o");
        let g = o_functional_grid(&model, lf, 10, &[0.0, 1.0], &[0.0, 3.0, -1.0], 100_000, &exec, key).unwrap();
        assert_eq!(g.ratios[1][0].value, 0.0);
        // S_j <= 0 already holds on {τ_j = j}.
        assert_eq!(g.ratios[0][0].value, g.ratios[0][1].value);
        assert!(g.ratios[0][2].value < g.ratios[0][0].value);
        assert!(g.ratios[0][0].value > 0.0);
    }

    #[test]
    fn hbound_rows_and_monotone_in_w() {
        let model = IncrementModel::gaussian(1.0).unwrap();
        let exec = Exec { lanes: 8, parallel: false };
        let r = check_hbound(
            &model,
            OffspringFamily::LinearFractional,
            &[10, 20],
            &[0.0, 1.0],
            &[-2.0, -1.0, 0.0],
            100_000,
            &exec,
            StreamKey::new(6, "hb"),
        )
        .unwrap();
        for c in r.cells.iter().filter(|c| c.z == 1.0) {
            assert_eq!(c.ratio, 0.0);
        }
        for j in [10, 20] {
            let a = r.cell(j, 0.0, -2.0).unwrap().ratio;
            let b = r.cell(j, 0.0, -1.0).unwrap().ratio;
            let c = r.cell(j, 0.0, 0.0).unwrap().ratio;
            assert!(a <= b && b <= c, "{a} {b} {c}");
        }
        let r10 = r.cell(10, 0.0, 0.0).unwrap().ratio;
        let r20 = r.cell(20, 0.0, 0.0).unwrap().ratio;
        assert!(r20 / r10 < 2.0 && r10 / r20 < 2.0);
    }

    #[test]
    fn pow_difference_accuracy() {
        let (cz, c0) = (1e-20, 3e-20);
        let exact = 2.0 * (c0 - cz);
        assert!((pow_difference(cz, c0, 2) - exact).abs() < 1e-6 * exact);
        assert!((pow_difference(0.5, 0.9, 3) - (0.125 - 0.001)).abs() < 1e-15);
        assert!((pow_difference(0.3, 1.0, 2) - 0.49).abs() < 1e-15);
    }
}
