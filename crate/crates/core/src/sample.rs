//! Seeded samplers for the randomized checks; all randomness in the
//! toolkit flows through these so runs reproduce bit-for-bit.

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct BoxSampler {
    rng: ChaCha8Rng,
}

impl BoxSampler {
    pub fn new(seed: u64) -> Self {
        BoxSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.rng.random_range(lo..hi)
    }

    pub fn vector(&mut self, n: usize, radius: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.range(-radius, radius))
    }

    /// A vector bounded away from the origin (for maps with a zero rule).
    pub fn nonzero_vector(&mut self, n: usize, radius: f64) -> DVector<f64> {
        loop {
            let v = self.vector(n, radius);
            if v.norm() >= 0.05 * radius {
                return v;
            }
        }
    }
}
