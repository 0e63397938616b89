//! Seeded random streams.
//!
//! Every stream is ChaCha8 (a counter-based generator) seeded through
//! `rand_core`'s `seed_from_u64`, with an optional 64-bit stream id so that
//! independent consumers (samples, epochs, policies) never share draws.
//! Derived values use fixed conversions so they can be reproduced elsewhere:
//!
//! * uniform `f64` in `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! * integer below `n`: high 64 bits of `next_u64 * n` (128-bit product)
//! * standard normal: Box–Muller, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SeedStream(ChaCha8Rng);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream `stream` under the same seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
