//! Monte Carlo bookkeeping: mergeable moment accumulators, estimates with
//! standard errors, and deterministic random substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Root seed used when none is given.
pub const DEFAULT_SEED: u64 = 20_240_917;

/// Random stream used by every sampler in the crate.
pub type RandomStream = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a root seed together with a path of counters into a child seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Independent stream for `path` under `seed`. Identical inputs always give
/// identical streams, independent of thread scheduling.
pub fn substream(seed: u64, path: &[u64]) -> RandomStream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Draws per parallel task in [`parallel_moments`].
pub const CHUNK_SIZE: u64 = 8192;

/// Moments of `draw(rng)` over `reps` draws. Work is split into chunks of
/// [`CHUNK_SIZE`] draws, chunk `c` using `substream(seed, path ++ [c])`, and
/// merged in chunk order, so the result does not depend on the thread count.
pub fn parallel_moments(
    reps: u64,
    seed: u64,
    path: &[u64],
    draw: impl Fn(&mut RandomStream) -> f64 + Sync,
) -> MeanAccumulator {
    let chunks = reps.div_ceil(CHUNK_SIZE);
    let parts: Vec<MeanAccumulator> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut p = path.to_vec();
            p.push(c);
            let mut rng = substream(seed, &p);
            let n = CHUNK_SIZE.min(reps - c * CHUNK_SIZE);
            let mut acc = MeanAccumulator::new();
            for _ in 0..n {
                acc.push(draw(&mut rng));
            }
            acc
        })
        .collect();
    let mut total = MeanAccumulator::new();
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Formats `x` in plain decimal notation with `digits` significant digits.
/// Non-finite values print as `nan`, `inf` and `-inf`.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return format!("{:.*}", digits.saturating_sub(1), 0.0);
    }
    // round first so that 9.999995 is classified by its rounded magnitude
    let rounded: f64 = format!("{:.*e}", digits.saturating_sub(1), x).parse().unwrap_or(x);
    let magnitude = rounded.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{rounded:.decimals$}")
}

/// Count / mean / centered second moment, merged with Chan's pairwise rule.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.mean(),
            stderr: self.std_error(),
            samples: self.count,
        }
    }
}

impl FromIterator<f64> for MeanAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = MeanAccumulator::new();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// A point estimate with its Monte Carlo standard error. Closed-form values
/// carry `stderr == 0` and `samples == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            samples: 0,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.samples == 0
    }

    /// Standard error of a Bernoulli proportion.
    pub fn proportion(successes: u64, trials: u64) -> Self {
        let p = successes as f64 / trials as f64;
        Self {
            value: p,
            stderr: (p * (1.0 - p) / trials as f64).sqrt(),
            samples: trials,
        }
    }
}
