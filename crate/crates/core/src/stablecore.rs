//! Increment laws in the domain of attraction of a strictly stable law.
//!
//! The characteristic function convention is
//! `G(w) = exp{-c |w|^α (1 - iβ sgn(w) tan(πα/2))}`, i.e. the strictly
//! stable (shift-free) form, so `S_n / n^{1/α}` is exactly stable for the
//! exact-stable family.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad::{self, QuadratureError};
use crate::rng::StreamKey;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("(alpha, beta) = ({alpha}, {beta}) is outside the admissible set")]
    Inadmissible { alpha: f64, beta: f64 },
    #[error("scale parameter must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// `(α, β, c)` of a strictly stable law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableParams {
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
}

impl StableParams {
    pub fn new(alpha: f64, beta: f64, c: f64) -> Result<Self, ModelError> {
        let admissible = (alpha > 0.0 && alpha < 2.0 && alpha != 1.0 && beta.abs() < 1.0)
            || (alpha == 1.0 && beta == 0.0)
            || (alpha == 2.0 && beta == 0.0);
        if !admissible {
            return Err(ModelError::Inadmissible { alpha, beta });
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(ModelError::NonPositiveScale(c));
        }
        Ok(Self { alpha, beta, c })
    }

    /// `β tan(πα/2)`; zero in the symmetric cases α ∈ {1, 2}.
    fn skew(&self) -> f64 {
        if self.beta == 0.0 {
            0.0
        } else {
            self.beta * (FRAC_PI_2 * self.alpha).tan()
        }
    }

    pub fn char_fn(&self, w: f64) -> Complex64 {
        if w == 0.0 {
            return Complex64::new(1.0, 0.0);
        }
        let mag = self.c * w.abs().powf(self.alpha);
        let phase = mag * self.skew() * w.signum();
        Complex64::from_polar((-mag).exp(), phase)
    }

    /// `g(0) = (1/π) ∫_0^∞ Re G(w) dw` by adaptive quadrature.
    pub fn density_at_zero(&self) -> Result<f64, QuadratureError> {
        let (alpha, c, skew) = (self.alpha, self.c, self.skew());
        let integrand = move |w: f64| {
            let mag = c * w.powf(alpha);
            (-mag).exp() * (mag * skew).cos()
        };
        let tail = move |w: f64| (-c * w.powf(alpha)).exp() / (c * alpha * w.powf(alpha - 1.0));
        Ok(quad::integrate_half_line(integrand, tail, 1e-8, 1e-12)? / PI)
    }

    /// `ρ = P(Y_1 > 0)`.
    pub fn positivity_rho(&self) -> f64 {
        0.5 + self.skew().atan() / (PI * self.alpha)
    }

    /// One draw by the Chambers–Mallows–Stuck construction.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let alpha = self.alpha;
        if alpha == 2.0 {
            let z: f64 = StandardNormal.sample(rng);
            return (2.0 * self.c).sqrt() * z;
        }
        let v = PI * (rng.random::<f64>() - 0.5);
        if alpha == 1.0 {
            return self.c * v.tan();
        }
        let w: f64 = Exp1.sample(rng);
        let skew = self.skew();
        let b = skew.atan() / alpha;
        let s = (1.0 + skew * skew).powf(0.5 / alpha);
        let x = s * (alpha * (v + b)).sin() / v.cos().powf(1.0 / alpha)
            * ((v - alpha * (v + b)).cos() / w).powf((1.0 - alpha) / alpha);
        self.c.powf(1.0 / alpha) * x
    }
}

/// The increment distributions the walk can be driven by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum IncrementFamily {
    ExactStable(StableParams),
    Gaussian { sigma: f64 },
    /// Lomax-type tails `P(|X| > x) ≈ (x/scale)^{-α}`, sign positive with
    /// probability `(1 + balance)/2`, centred when the mean exists.
    TwoSidedPareto { alpha: f64, balance: f64, scale: f64 },
}

/// Config record for an increment model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelSpec {
    ExactStable { alpha: f64, beta: f64, c: f64 },
    Gaussian { sigma: f64 },
    TwoSidedPareto { alpha: f64, balance: f64, scale: f64 },
}

impl ModelSpec {
    pub fn build(&self) -> Result<IncrementModel, ModelError> {
        match *self {
            ModelSpec::ExactStable { alpha, beta, c } => IncrementModel::exact_stable(StableParams::new(alpha, beta, c)?),
            ModelSpec::Gaussian { sigma } => IncrementModel::gaussian(sigma),
            ModelSpec::TwoSidedPareto { alpha, balance, scale } => IncrementModel::two_sided_pareto(alpha, balance, scale),
        }
    }
}

/// `a_n`, `b_n = 1/(a_n n)` for one `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norming {
    pub n: u64,
    pub a_n: f64,
    pub b_n: f64,
}

/// An increment law together with its stable limit and norming factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementModel {
    pub family: IncrementFamily,
    /// The stable law `S_n / a_n` converges to.
    pub limit: StableParams,
    /// Constant slowly varying factor: `a_n = n^{1/α} ell`.
    pub ell: f64,
    /// Shift applied to Pareto draws so the mean is zero.
    centre: f64,
}

impl IncrementModel {
    pub fn exact_stable(p: StableParams) -> Result<Self, ModelError> {
        Ok(Self { family: IncrementFamily::ExactStable(p), limit: p, ell: 1.0, centre: 0.0 })
    }

    /// Gaussian increments; the limit law is pinned to `c = 1/2` so `a_n = σ√n`.
    pub fn gaussian(sigma: f64) -> Result<Self, ModelError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ModelError::NonPositiveScale(sigma));
        }
        Ok(Self {
            family: IncrementFamily::Gaussian { sigma },
            limit: StableParams::new(2.0, 0.0, 0.5)?,
            ell: sigma,
            centre: 0.0,
        })
    }

    /// Two-sided Pareto increments; `ell` is calibrated from a fixed pilot run.
    pub fn two_sided_pareto(alpha: f64, balance: f64, scale: f64) -> Result<Self, ModelError> {
        let limit = StableParams::new(alpha, balance, 1.0)?;
        if alpha == 2.0 {
            return Err(ModelError::Invalid("two-sided Pareto needs alpha < 2".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(ModelError::NonPositiveScale(scale));
        }
        let centre = if alpha > 1.0 { balance * scale / (alpha - 1.0) } else { 0.0 };
        let mut model =
            Self { family: IncrementFamily::TwoSidedPareto { alpha, balance, scale }, limit, ell: 1.0, centre };
        model.ell = calibrate_ell(&model, 2048, 20_000);
        Ok(model)
    }

    pub fn alpha(&self) -> f64 {
        self.limit.alpha
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            IncrementFamily::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            }
            IncrementFamily::ExactStable(p) => p.sample(rng),
            IncrementFamily::TwoSidedPareto { alpha, balance, scale } => {
                let u: f64 = 1.0 - rng.random::<f64>();
                let mag = scale * (u.powf(-1.0 / alpha) - 1.0);
                let positive = rng.random::<f64>() < 0.5 * (1.0 + balance);
                (if positive { mag } else { -mag }) - self.centre
            }
        }
    }

    pub fn norming(&self, n: u64) -> Norming {
        assert!(n >= 1, "norming needs n >= 1");
        let nf = n as f64;
        let a_n = nf.powf(1.0 / self.alpha()) * self.ell;
        Norming { n, a_n, b_n: 1.0 / (a_n * nf) }
    }

    pub fn b(&self, n: u64) -> f64 {
        self.norming(n).b_n
    }

    /// Exponent `1 + 1/α` of the power decay of `b_n`.
    pub fn b_exponent(&self) -> f64 {
        1.0 + 1.0 / self.alpha()
    }

    pub fn density_at_zero(&self) -> Result<f64, QuadratureError> {
        self.limit.density_at_zero()
    }

    pub fn rho(&self) -> f64 {
        self.limit.positivity_rho()
    }

    /// Density of a single increment, where available in closed form.
    pub fn increment_density(&self, x: f64) -> Option<f64> {
        match self.family {
            IncrementFamily::Gaussian { sigma } => {
                Some((-0.5 * (x / sigma).powi(2)).exp() / (sigma * (2.0 * PI).sqrt()))
            }
            IncrementFamily::ExactStable(p) if p.alpha == 2.0 => {
                let var = 2.0 * p.c;
                Some((-0.5 * x * x / var).exp() / (2.0 * PI * var).sqrt())
            }
            IncrementFamily::ExactStable(p) if p.alpha == 1.0 => Some(p.c / (PI * (p.c * p.c + x * x))),
            IncrementFamily::TwoSidedPareto { alpha, balance, scale } => {
                let y = x + self.centre;
                let weight = if y >= 0.0 { 0.5 * (1.0 + balance) } else { 0.5 * (1.0 - balance) };
                Some(weight * alpha / scale * (1.0 + y.abs() / scale).powf(-alpha - 1.0))
            }
            IncrementFamily::ExactStable(_) => None,
        }
    }
}

/// Ratio of the 75% quantile of `S_N / N^{1/α}` to that of the unit-scale stable target.
fn calibrate_ell(model: &IncrementModel, pilot_n: u64, paths: usize) -> f64 {
    let key = StreamKey::new(0x5eed_ca1b, "pareto-calibration");
    let mut rng = key.lane(0);
    let norm = (pilot_n as f64).powf(1.0 / model.alpha());
    let mut sums: Vec<f64> = (0..paths)
        .map(|_| (0..pilot_n).map(|_| model.sample(&mut rng)).sum::<f64>() / norm)
        .collect();
    let mut target: Vec<f64> = (0..10 * paths).map(|_| model.limit.sample(&mut rng)).collect();
    let q75 = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[(0.75 * v.len() as f64) as usize]
    };
    q75(&mut sums) / q75(&mut target)
}
