//! Seeded xoshiro256++ stream.
//!
//! Seeding expands a 64-bit value into the 256-bit state with four SplitMix64
//! outputs, the same expansion `rand_xoshiro` uses for `seed_from_u64`.
//! Every draw is one 64-bit output; `draws` counts them so a stream position
//! can be audited and restored.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub const RNG_ALGORITHM: &str = "xoshiro256++/splitmix64";

const STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    state: [u64; 4],
    draws: u64,
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { state, draws: 0 }
    }

    /// Independent named sub-stream of a run seed. Stream 0 is the plain seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::from_seed(seed ^ stream.wrapping_mul(STREAM_SALT))
    }

    pub fn from_parts(state: [u64; 4], draws: u64) -> Self {
        Self { state, draws }
    }

    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        self.draws += 1;
        result
    }

    /// Uniform in [0, 1) with 53 random bits. One draw.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in [0, n) by 128-bit multiply-high. One draw.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index over an empty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal deviate by Box–Muller (cosine branch). Exactly two draws.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian_vec<F: Scalar>(&mut self, len: usize) -> Vec<F> {
        (0..len).map(|_| F::lit(self.gaussian())).collect()
    }

    /// Fisher–Yates, `len - 1` draws.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
