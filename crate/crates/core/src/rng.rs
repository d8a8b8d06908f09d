//! Counter-based random streams and the lane runner.
//!
//! Every experiment owns a [`StreamKey`]. A lane is a ChaCha8 keystream
//! selected by `(key, lane index)`, so the numbers a lane sees never depend
//! on which thread ran it or in what order lanes were scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub type LaneRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Identifies one family of reproducible random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub master_seed: u64,
    pub tag: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, label: &str) -> Self {
        Self { master_seed, tag: fnv1a(label.as_bytes()) }
    }

    /// Derived key for a sub-experiment; distinct labels give unrelated streams.
    pub fn child(&self, label: &str) -> Self {
        let mut s = self.tag ^ fnv1a(label.as_bytes()).rotate_left(17);
        Self { master_seed: self.master_seed, tag: splitmix(&mut s) }
    }

    pub fn child_index(&self, index: u64) -> Self {
        let mut s = self.tag ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93);
        Self { master_seed: self.master_seed, tag: splitmix(&mut s) }
    }

    /// ChaCha key of this stream family; lane `i` is stream `i` under it.
    pub fn seed(&self) -> [u8; 32] {
        let mut state = self.master_seed ^ self.tag.rotate_left(32);
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
        }
        seed
    }

    /// The keystream for `lane`.
    pub fn lane(&self, lane: u64) -> LaneRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed());
        rng.set_stream(lane);
        rng
    }
}

/// How sample budgets are split and executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exec {
    /// Number of lanes a budget is divided into. Results depend on this,
    /// never on the thread count.
    pub lanes: usize,
    pub parallel: bool,
}

impl Default for Exec {
    fn default() -> Self {
        Self { lanes: 64, parallel: true }
    }
}

impl Exec {
    pub fn serial(self) -> Self {
        Self { parallel: false, ..self }
    }

    /// Sample count assigned to `lane` when `total` samples are spread over the lanes.
    pub fn lane_share(&self, total: u64, lane: usize) -> u64 {
        let lanes = self.lanes.max(1) as u64;
        total / lanes + u64::from((lane as u64) < total % lanes)
    }

    /// Runs `job(lane, rng, share)` for each lane and returns the results in lane order.
    pub fn run<T, F>(&self, key: StreamKey, total: u64, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &mut LaneRng, u64) -> T + Sync,
    {
        let lanes = self.lanes.max(1);
        let body = |lane: usize| {
            let mut rng = key.lane(lane as u64);
            job(lane, &mut rng, self.lane_share(total, lane))
        };
        if self.parallel {
            (0..lanes).into_par_iter().map(body).collect()
        } else {
            (0..lanes).map(body).collect()
        }
    }

    /// Like [`Exec::run`] but folds lane results in lane order.
    pub fn run_merge<T, F>(&self, key: StreamKey, total: u64, job: F) -> T
    where
        T: Send + Default + Merge,
        F: Fn(usize, &mut LaneRng, u64) -> T + Sync,
    {
        let mut acc = T::default();
        for part in self.run(key, total, job) {
            acc.merge(&part);
        }
        acc
    }
}

/// Associative accumulation of lane results.
pub trait Merge {
    fn merge(&mut self, other: &Self);
}

impl<T: Merge + Clone> Merge for Vec<T> {
    fn merge(&mut self, other: &Self) {
        if self.is_empty() {
            self.extend_from_slice(other);
            return;
        }
        assert_eq!(self.len(), other.len(), "merging accumulators of different shapes");
        for (a, b) in self.iter_mut().zip(other) {
            a.merge(b);
        }
    }
}
