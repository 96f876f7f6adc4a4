//! Counter-based pseudo-random generator.
//!
//! The generator is a keyed SplitMix64: output `i` is a bijective mix of
//! `key + i·φ`, so the same (seed, stream, call sequence) produces the same
//! bits on every platform. Streams are derived by remixing the key, which
//! keeps per-sample / per-chain draws independent of evaluation order.

use crate::math;
use alloc::vec::Vec;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    /// Root stream for a 64-bit seed.
    pub fn new(seed: u64) -> Self {
        Rng { key: mix(seed ^ GOLDEN), counter: 0 }
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Rng::new(seed).fork(stream)
    }

    /// Derive an independent child stream; `self` is left untouched.
    pub fn fork(&self, stream: u64) -> Self {
        Rng {
            key: mix(self.key ^ mix(stream.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; safe to feed into logs.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller; every call consumes two uniforms.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Exp(1) variate.
    pub fn next_exp(&mut self) -> f64 {
        -math::ln(self.next_open01())
    }

    /// Gamma(looks, 1/looks) variate (unit mean): the L-look speckle factor.
    pub fn next_gamma_looks(&mut self, looks: u32) -> f64 {
        let mut acc = 0.0;
        for _ in 0..looks {
            acc += self.next_exp();
        }
        acc / looks as f64
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }
}
