//! Monte Carlo accumulators and the estimate records they produce.

use serde::{Deserialize, Serialize};

use crate::rng::Merge;

/// Running first and second moments of a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    /// Records `k` zero observations.
    #[inline]
    pub fn push_zeros(&mut self, k: u64) {
        self.count += k;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let m = self.sum / n;
        ((self.sum_sq / n - m * m) * n / (n - 1.0)).max(0.0)
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    pub fn estimate(&self) -> Estimate {
        let degenerate = self.sum == 0.0;
        Estimate {
            value: self.mean(),
            std_error: if degenerate { f64::NAN } else { self.std_error() },
            samples: self.count,
            degenerate,
        }
    }
}

impl Merge for Moments {
    fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }
}

/// Joint moments of a pair `(x, y)`, used for ratio estimators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairMoments {
    pub count: u64,
    pub sx: f64,
    pub sy: f64,
    pub sxx: f64,
    pub syy: f64,
    pub sxy: f64,
}

impl PairMoments {
    #[inline]
    pub fn push(&mut self, x: f64, y: f64) {
        self.count += 1;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    #[inline]
    pub fn push_zeros(&mut self, k: u64) {
        self.count += k;
    }

    pub fn x(&self) -> Moments {
        Moments { count: self.count, sum: self.sx, sum_sq: self.sxx }
    }

    pub fn y(&self) -> Moments {
        Moments { count: self.count, sum: self.sy, sum_sq: self.syy }
    }

    /// `E[x]/E[y]` with a delta-method standard error.
    pub fn ratio(&self) -> RatioEstimate {
        let n = self.count as f64;
        let num = self.x().estimate();
        let den = self.y().estimate();
        if self.count < 2 || self.sy <= 0.0 {
            return RatioEstimate { value: f64::NAN, std_error: f64::NAN, numerator: num, denominator: den, degenerate: true };
        }
        let mx = self.sx / n;
        let my = self.sy / n;
        let r = mx / my;
        let vx = self.sxx / n - mx * mx;
        let vy = self.syy / n - my * my;
        let cxy = self.sxy / n - mx * my;
        let var = ((vx - 2.0 * r * cxy + r * r * vy) / (my * my) / (n - 1.0)).max(0.0);
        RatioEstimate { value: r, std_error: var.sqrt(), numerator: num, denominator: den, degenerate: false }
    }
}

impl Merge for PairMoments {
    fn merge(&mut self, other: &Self) {
        self.count += other.count;
        self.sx += other.sx;
        self.sy += other.sy;
        self.sxx += other.sxx;
        self.syy += other.syy;
        self.sxy += other.sxy;
    }
}

/// A Monte Carlo mean with its standard error.
///
/// `degenerate` is set when every observation was zero; the standard error
/// is then reported as NaN rather than a misleading zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
    pub degenerate: bool,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0, samples: 0, degenerate: false }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self { value: self.value * factor, std_error: self.std_error * factor.abs(), ..self }
    }

    pub fn relative_error(&self) -> f64 {
        self.std_error / self.value.abs()
    }

    /// `|a - b|` in units of the combined standard error.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        z_distance(self.value, self.std_error, other.value, other.std_error)
    }
}

pub fn z_distance(a: f64, se_a: f64, b: f64, se_b: f64) -> f64 {
    let se = se_a.hypot(se_b);
    if se == 0.0 {
        if a == b {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (a - b).abs() / se
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub value: f64,
    pub std_error: f64,
    pub numerator: Estimate,
    pub denominator: Estimate,
    pub degenerate: bool,
}

impl RatioEstimate {
    pub fn as_estimate(&self) -> Estimate {
        Estimate { value: self.value, std_error: self.std_error, samples: self.numerator.samples, degenerate: self.degenerate }
    }
}

/// Sorted weighted sample with empirical CDF queries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    values: Vec<f64>,
    cum_weights: Vec<f64>,
}

impl WeightedSample {
    pub fn new(mut pairs: Vec<(f64, f64)>) -> Self {
        pairs.retain(|(_, w)| *w > 0.0);
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let mut values = Vec::with_capacity(pairs.len());
        let mut cum_weights = Vec::with_capacity(pairs.len());
        for (v, w) in pairs {
            acc += w;
            values.push(v);
            cum_weights.push(acc);
        }
        Self { values, cum_weights }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.cum_weights.last().copied().unwrap_or(0.0)
    }

    /// Weighted fraction of mass at values `<= x`.
    pub fn cdf(&self, x: f64) -> f64 {
        let total = self.total_weight();
        if total == 0.0 {
            return 0.0;
        }
        let idx = self.values.partition_point(|v| *v <= x);
        if idx == 0 {
            0.0
        } else {
            self.cum_weights[idx - 1] / total
        }
    }

    /// Smallest sample value whose weighted CDF reaches `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let total = self.total_weight();
        if total == 0.0 {
            return f64::NAN;
        }
        let target = p.clamp(0.0, 1.0) * total;
        let idx = self.cum_weights.partition_point(|c| *c < target);
        self.values[idx.min(self.values.len() - 1)]
    }

    /// Weighted mass strictly above `x`.
    pub fn mass_above(&self, x: f64) -> f64 {
        1.0 - self.cdf(x)
    }

    /// Kish effective sample size.
    pub fn ess(&self) -> f64 {
        let mut prev = 0.0;
        let mut sq = 0.0;
        for c in &self.cum_weights {
            let w = c - prev;
            sq += w * w;
            prev = *c;
        }
        if sq == 0.0 {
            0.0
        } else {
            self.total_weight().powi(2) / sq
        }
    }

    /// Sup-distance between two weighted empirical CDFs.
    pub fn kolmogorov_distance(&self, other: &WeightedSample) -> f64 {
        self.values
            .iter()
            .chain(other.values.iter())
            .map(|x| (self.cdf(*x) - other.cdf(*x)).abs())
            .fold(0.0, f64::max)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let en = (na * nb / (na + nb)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    (d, kolmogorov_q(lambda))
}

/// Complementary Kolmogorov distribution `Q_KS(lambda)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}
