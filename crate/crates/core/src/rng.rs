//! Seedable counter-based random number generation.
//!
//! Every stochastic decision in the crate draws from a [`Prng`] that is
//! derived from `(master seed, domain tag, counter)`. Because the stream is a
//! pure function of those three values, any step of any run can be replayed
//! in isolation: resuming training at step `s` reproduces the exact noise,
//! timesteps, and batch indices of an uninterrupted run.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::Real;

const TAU: f64 = std::f64::consts::TAU;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic random stream.
pub struct Prng(ChaCha8Rng);

impl Prng {
    pub fn seeded(seed: u64) -> Self {
        Prng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Stream for a named purpose at a given counter value (for example a
    /// training step). Streams with distinct `(seed, tag, counter)` triples
    /// are independent.
    pub fn for_purpose(seed: u64, tag: &str, counter: u64) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(tag.as_bytes()).to_le_bytes());
        key[16..24].copy_from_slice(&counter.to_le_bytes());
        key[24..32].copy_from_slice(&0x9e3779b97f4a7c15u64.to_le_bytes());
        Prng(ChaCha8Rng::from_seed(key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> Real {
        ((self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) as Real
    }

    pub fn uniform_range(&mut self, lo: Real, hi: Real) -> Real {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: Real) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> Real {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (u1 as f64).ln()).sqrt();
        (r * (TAU * u2 as f64).cos()) as Real
    }

    pub fn fill_normal(&mut self, out: &mut [Real]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<Real> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }

    /// Index draw from unnormalised non-negative weights.
    pub fn categorical(&mut self, weights: &[Real]) -> usize {
        let total: Real = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
