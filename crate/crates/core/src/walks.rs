//! Associated random walk paths and their fluctuation functionals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{Exec, StreamKey};
use crate::stablecore::IncrementModel;
use crate::stats::{Estimate, Moments};

/// Increments `X_1..X_n` with partial sums `S_1..S_n` (`S_0 = 0` implicit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    increments: Vec<f64>,
    partial_sums: Vec<f64>,
}

impl WalkPath {
    pub fn from_increments(increments: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let partial_sums = increments
            .iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect();
        Self { increments, partial_sums }
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn partial_sums(&self) -> &[f64] {
        &self.partial_sums
    }

    /// `S_k` for `0 <= k <= n`.
    pub fn s(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.partial_sums[k - 1]
        }
    }

    pub fn end(&self) -> f64 {
        self.partial_sums.last().copied().unwrap_or(0.0)
    }
}

/// `L_n = min S_k`, `M_n = max S_k` over `1..=n`, and the first epoch `τ_n`
/// at which `min(0, L_n)` is attained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub l: f64,
    pub m: f64,
    pub tau: usize,
}

pub fn simulate_path<R: Rng + ?Sized>(model: &IncrementModel, n: usize, rng: &mut R) -> WalkPath {
    assert!(n >= 1, "walk length must be positive");
    WalkPath::from_increments((0..n).map(|_| model.sample(rng)).collect())
}

pub fn path_stats(path: &WalkPath) -> PathStats {
    assert!(!path.is_empty(), "path_stats of an empty path");
    let mut l = f64::INFINITY;
    let mut m = f64::NEG_INFINITY;
    let mut tau = 0;
    let mut low = 0.0;
    for (k, &s) in path.partial_sums.iter().enumerate() {
        l = l.min(s);
        m = m.max(s);
        if s < low {
            low = s;
            tau = k + 1;
        }
    }
    PathStats { l, m, tau }
}

pub fn reverse_path(path: &WalkPath) -> WalkPath {
    WalkPath::from_increments(path.increments.iter().rev().copied().collect())
}

/// Paired estimates of `P(S_n <= y, L_n >= 0)` for every `y` in `ys` on the
/// same paths; paths are abandoned as soon as they go negative.
pub fn estimate_stay_low(
    model: &IncrementModel,
    n: usize,
    ys: &[f64],
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> Vec<Estimate> {
    assert!(ys.iter().all(|y| *y > 0.0), "levels must be positive");
    let acc: Vec<Moments> = exec.run_merge(key, samples, |_, rng, share| {
        let mut acc = vec![Moments::default(); ys.len()];
        for _ in 0..share {
            let mut s = 0.0;
            let mut alive = true;
            for _ in 0..n {
                s += model.sample(rng);
                if s < 0.0 {
                    alive = false;
                    break;
                }
            }
            for (m, y) in acc.iter_mut().zip(ys) {
                if alive && s <= *y {
                    m.push(1.0);
                } else {
                    m.push_zeros(1);
                }
            }
        }
        acc
    });
    acc.iter().map(Moments::estimate).collect()
}

/// `E[e^{S_n}; τ_n = n]` on full paths together with its dual form
/// `E[e^{S_n}; M_n < 0]` evaluated on the time-reversed paths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpMinEstimate {
    pub primal: Estimate,
    pub dual: Estimate,
    /// Paths on which the primal and dual indicators disagreed (always 0).
    pub mismatches: u64,
}

#[derive(Clone, Copy, Debug, Default)]
struct ExpMinAcc {
    primal: Moments,
    dual: Moments,
    mismatches: u64,
}

impl crate::rng::Merge for ExpMinAcc {
    fn merge(&mut self, other: &Self) {
        self.primal.merge(&other.primal);
        self.dual.merge(&other.dual);
        self.mismatches += other.mismatches;
    }
}

pub fn estimate_exp_at_min_epoch(
    model: &IncrementModel,
    n: usize,
    samples: u64,
    exec: &Exec,
    key: StreamKey,
) -> ExpMinEstimate {
    let acc: ExpMinAcc = exec.run_merge(key, samples, |_, rng, share| {
        let mut acc = ExpMinAcc::default();
        for _ in 0..share {
            let path = simulate_path(model, n, rng);
            let primal = path_stats(&path).tau == n;
            let rev = reverse_path(&path);
            let dual = path_stats(&rev).m < 0.0;
            let weight = path.end().exp();
            if primal {
                acc.primal.push(weight);
            } else {
                acc.primal.push_zeros(1);
            }
            if dual {
                acc.dual.push(weight);
            } else {
                acc.dual.push_zeros(1);
            }
            acc.mismatches += u64::from(primal != dual);
        }
        acc
    });
    ExpMinEstimate { primal: acc.primal.estimate(), dual: acc.dual.estimate(), mismatches: acc.mismatches }
}

/// `E[e^{S_n}; M_n < 0]` with paths abandoned at their first nonnegative
/// partial sum. Same law as the primal `τ_n = n` form, at `O(√n)` cost per path.
pub fn estimate_exp_below_zero(model: &IncrementModel, n: usize, samples: u64, exec: &Exec, key: StreamKey) -> Estimate {
    let acc: Moments = exec.run_merge(key, samples, |_, rng, share| {
        let mut acc = Moments::default();
        for _ in 0..share {
            match run_below_zero(model, n, rng) {
                Some(s) => acc.push(s.exp()),
                None => acc.push_zeros(1),
            }
        }
        acc
    });
    acc.estimate()
}

/// `S_n` if the walk stays strictly negative on `1..=n`, else `None`.
#[inline]
pub fn run_below_zero<R: Rng + ?Sized>(model: &IncrementModel, n: usize, rng: &mut R) -> Option<f64> {
    let mut s = 0.0;
    for _ in 0..n {
        s += model.sample(rng);
        if s >= 0.0 {
            return None;
        }
    }
    Some(s)
}
