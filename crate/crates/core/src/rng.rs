//! Seeded, splittable random number generation.
//!
//! Everything stochastic in the toolkit draws from a [`SeedRng`], a thin
//! wrapper over the ChaCha8 stream cipher generator: a fixed named algorithm
//! whose output for a given seed is identical on every platform. Child
//! generators are derived by hashing the parent seed with a label, so each
//! pipeline stage gets an independent stream that does not shift when an
//! unrelated stage changes its draw count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic random generator seeded from a 64-bit value.
#[derive(Debug, Clone)]
pub struct SeedRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child generator from this generator's seed and
    /// a label. Splitting is a pure function of `(seed, label)` — it does not
    /// consume or depend on this generator's stream position.
    pub fn split(&self, label: &str) -> SeedRng {
        SeedRng::new(fnv1a64(self.seed, label.as_bytes()))
    }

    /// Child generator keyed by an index, e.g. one stream per task.
    pub fn split_index(&self, label: &str, index: u64) -> SeedRng {
        self.split(label).split(&index.to_string())
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal via Box–Muller.
    pub fn standard_normal(&mut self) -> f64 {
        // Guard against ln(0).
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.standard_normal()
    }

    /// Samples an index from a categorical distribution given by `probs`
    /// (assumed nonnegative, summing to ~1; the last index absorbs rounding).
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}

/// FNV-1a over the seed bytes then the label bytes; stable across platforms.
fn fnv1a64(seed: u64, label: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(label) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}
