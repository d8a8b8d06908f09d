//! Offspring laws keyed to the walk increment: the law attached to increment
//! `X` has mean `e^X`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};
use thiserror::Error;

use crate::rng::{Exec, StreamKey};
use crate::stablecore::IncrementModel;
use crate::stats::{Estimate, Moments};
use crate::walks::{simulate_path, WalkPath};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("pgf argument |z| = {0} exceeds 1")]
    OutsideDisc(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OffspringFamily {
    /// `f(z) = p / (1 - (1-p) z)` with `p = 1/(1+e^X)`.
    #[default]
    LinearFractional,
    /// Poisson with mean `e^X`.
    Poisson,
}

/// Above this mean a Poisson count is replaced by its mean; the relative
/// fluctuation there is below 1e-7.
const POISSON_DETERMINISTIC: f64 = 4.5e15;

impl OffspringFamily {
    pub fn mean(&self, x: f64) -> f64 {
        x.exp()
    }

    /// `(p, q)` of the geometric law, computed without cancellation.
    #[inline]
    pub fn lf_pq(x: f64) -> (f64, f64) {
        (1.0 / (1.0 + x.exp()), 1.0 / (1.0 + (-x).exp()))
    }

    pub fn pgf(&self, x: f64, z: Complex64) -> Result<Complex64, EnvError> {
        if z.norm() > 1.0 + 1e-15 {
            return Err(EnvError::OutsideDisc(z.norm()));
        }
        Ok(match self {
            OffspringFamily::LinearFractional => {
                let (p, q) = Self::lf_pq(x);
                Complex64::new(p, 0.0) / (p + q * (1.0 - z))
            }
            OffspringFamily::Poisson => ((z - 1.0) * x.exp()).exp(),
        })
    }

    #[inline]
    pub fn pgf_real(&self, x: f64, s: f64) -> f64 {
        1.0 - self.complement(x, 1.0 - s)
    }

    /// `1 - f(1 - t)`, accurate for small `t`.
    #[inline]
    pub fn complement(&self, x: f64, t: f64) -> f64 {
        match self {
            OffspringFamily::LinearFractional => t / ((-x).exp() + t),
            OffspringFamily::Poisson => -(-(x.exp()) * t).exp_m1(),
        }
    }

    /// `P(ξ = k)`.
    pub fn pmf(&self, x: f64, k: u64) -> f64 {
        match self {
            OffspringFamily::LinearFractional => {
                let (p, q) = Self::lf_pq(x);
                p * q.powf(k as f64)
            }
            OffspringFamily::Poisson => {
                let m = x.exp();
                (k as f64 * x - m - ln_gamma(k as f64 + 1.0)).exp()
            }
        }
    }

    /// `P(ξ_1 + … + ξ_n = j)` for `n` independent offspring counts.
    pub fn sum_pmf(&self, x: f64, n: u64, j: u64) -> f64 {
        if n == 0 {
            return if j == 0 { 1.0 } else { 0.0 };
        }
        let (nf, jf) = (n as f64, j as f64);
        match self {
            OffspringFamily::LinearFractional => {
                let (p, q) = Self::lf_pq(x);
                let log_binom = ln_gamma(nf + jf) - ln_gamma(jf + 1.0) - ln_gamma(nf);
                (log_binom + nf * p.ln() + jf * q.ln()).exp()
            }
            OffspringFamily::Poisson => {
                let lam = nf * x.exp();
                (jf * lam.ln() - lam - ln_gamma(jf + 1.0)).exp()
            }
        }
    }

    /// Mean and variance of the sum of `n` offspring counts.
    pub fn sum_moments(&self, x: f64, n: u64) -> (f64, f64) {
        let nf = n as f64;
        match self {
            OffspringFamily::LinearFractional => {
                let m = x.exp();
                (nf * m, nf * m * (1.0 + m))
            }
            OffspringFamily::Poisson => (nf * x.exp(), nf * x.exp()),
        }
    }

    /// Total offspring of `n` particles reproducing under the law at `x`.
    pub fn sample_sum<R: Rng + ?Sized>(&self, x: f64, n: u64, rng: &mut R) -> u64 {
        if n == 0 {
            return 0;
        }
        let lambda = match self {
            OffspringFamily::LinearFractional => {
                // Negative binomial as a Gamma mixture of Poissons.
                let scale = x.exp();
                Gamma::new(n as f64, scale).expect("positive gamma parameters").sample(rng)
            }
            OffspringFamily::Poisson => n as f64 * x.exp(),
        };
        poisson_draw(lambda, rng)
    }

    /// [`sample_sum`](Self::sample_sum) for populations held as integer-valued
    /// floats. Above [`EXACT_POPULATION`] parents the sum is drawn from its
    /// normal approximation and rounded.
    pub fn sample_sum_f64<R: Rng + ?Sized>(&self, x: f64, n: f64, rng: &mut R) -> f64 {
        if n < EXACT_POPULATION {
            return self.sample_sum(x, n as u64, rng) as f64;
        }
        let m = x.exp();
        let var = match self {
            OffspringFamily::LinearFractional => m * (1.0 + m),
            OffspringFamily::Poisson => m,
        };
        let g: f64 = rng.sample(rand_distr::StandardNormal);
        (n * m + g * (n * var).sqrt()).round().max(0.0)
    }

    /// `J - 1` where `J` follows the size-biased law of the offspring sum of
    /// `n >= 1` particles: `1 + NegBin(n + 1)` resp. `1 + Poisson(n m)`.
    pub fn sample_sum_size_biased_tail<R: Rng + ?Sized>(&self, x: f64, n: f64, rng: &mut R) -> f64 {
        match self {
            OffspringFamily::LinearFractional => self.sample_sum_f64(x, n + 1.0, rng),
            OffspringFamily::Poisson => self.sample_sum_f64(x, n, rng),
        }
    }

    /// `γ(b) = Σ_{k>=b} k² P(ξ=k) / (E ξ)²` in closed form.
    pub fn gamma_b(&self, x: f64, b: u64) -> f64 {
        let bf = b as f64;
        match self {
            OffspringFamily::LinearFractional => {
                // Written in powers of q so that no factor overflows as X grows.
                let (p, q) = Self::lf_pq(x);
                let mut g = q.powf(bf - 1.0) * (1.0 + q);
                if b > 0 {
                    g += 2.0 * bf * p * q.powf(bf - 1.0) + bf * bf * p * p * q.powf(bf - 2.0);
                }
                g
            }
            OffspringFamily::Poisson => {
                let m = x.exp();
                let upper = |k: f64| if k <= 0.0 { 1.0 } else { gamma_lr(k, m) };
                upper(bf - 2.0) + upper(bf - 1.0) / m
            }
        }
    }
}

/// Parent counts from which offspring sums are no longer drawn exactly.
pub const EXACT_POPULATION: f64 = 1e12;

fn poisson_draw<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        0
    } else if lambda > POISSON_DETERMINISTIC {
        lambda.round() as u64
    } else {
        let v: f64 = Poisson::new(lambda).expect("finite positive mean").sample(rng);
        v as u64
    }
}

/// An environment `F_1..F_n` coupled to the walk: law `k` has log-mean `X_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvRealization {
    pub walk: WalkPath,
    pub family: OffspringFamily,
}

impl EnvRealization {
    pub fn new(walk: WalkPath, family: OffspringFamily) -> Self {
        Self { walk, family }
    }

    pub fn len(&self) -> usize {
        self.walk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.walk.is_empty()
    }

    /// Log-mean of law `k`, `1 <= k <= n`.
    pub fn x(&self, k: usize) -> f64 {
        self.walk.increments()[k - 1]
    }

    pub fn s(&self, k: usize) -> f64 {
        self.walk.s(k)
    }

    pub fn log_mean(&self, k: usize) -> f64 {
        self.family.mean(self.x(k)).ln()
    }
}

pub fn sample_environment<R: Rng + ?Sized>(
    model: &IncrementModel,
    family: OffspringFamily,
    n: usize,
    rng: &mut R,
) -> EnvRealization {
    EnvRealization::new(simulate_path(model, n, rng), family)
}

/// Outcome of the moment check on `(log⁺ γ(b))^{α+ε}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct B2Report {
    pub b: u64,
    pub epsilon: f64,
    pub estimate: Estimate,
    /// The same mean on the first half of the sample.
    pub half_sample: Estimate,
    /// Hill estimate of the tail index of the positive summands (∞ when too few are positive).
    pub hill_index: f64,
    pub finite: bool,
    pub heavy_tail_warning: bool,
}

pub fn check_b2(
    model: &IncrementModel,
    family: OffspringFamily,
    b: u64,
    epsilon: f64,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Result<B2Report, EnvError> {
    if epsilon <= 0.0 {
        return Err(EnvError::Precondition(format!("epsilon must be positive, got {epsilon}")));
    }
    if samples < 2 {
        return Err(EnvError::Precondition("need at least two samples".into()));
    }
    let power = model.alpha() + epsilon;
    let lanes: Vec<Vec<f64>> = exec.run(key, samples, |_, rng, share| {
        (0..share)
            .map(|_| {
                let g = family.gamma_b(model.sample(rng), b);
                if g > 1.0 {
                    g.ln().powf(power)
                } else {
                    0.0
                }
            })
            .collect()
    });
    let all: Vec<f64> = lanes.into_iter().flatten().collect();
    let moments = |v: &[f64]| {
        let mut m = Moments::default();
        v.iter().for_each(|x| m.push(*x));
        m.estimate()
    };
    let estimate = moments(&all);
    let half_sample = moments(&all[..all.len() / 2]);
    let hill_index = hill(&all);
    let agree = crate::stats::z_distance(estimate.value, estimate.std_error, half_sample.value, half_sample.std_error) < 3.0
        || estimate.value == half_sample.value;
    let heavy = hill_index <= 2.0;
    Ok(B2Report {
        b,
        epsilon,
        estimate,
        half_sample,
        hill_index,
        finite: hill_index > 1.0 && agree,
        heavy_tail_warning: heavy,
    })
}

/// Hill estimator over the top `√n` positive values.
fn hill(values: &[f64]) -> f64 {
    let mut pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    if pos.len() < 100 {
        return f64::INFINITY;
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let k = (pos.len() as f64).sqrt() as usize;
    let threshold = pos[k].ln();
    let mean_log = pos[..k].iter().map(|v| v.ln() - threshold).sum::<f64>() / k as f64;
    if mean_log <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / mean_log
    }
}
