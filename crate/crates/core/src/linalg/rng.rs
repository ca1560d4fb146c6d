//! Seeded, platform-independent random source.
//!
//! SplitMix64 over a 64-bit counter: the stream depends only on the seed,
//! never on platform word size or library versions. All randomness in a run
//! flows from one config seed through named substreams (`init`, `data`,
//! `shuffle`, ...) so that editing one component does not shift the draws of
//! another.

use super::matrix::{Matrix, Scalar};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives an independent substream seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    mix(seed ^ fnv1a(label.as_bytes()))
}

#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: mix(seed) }
    }

    pub fn substream(seed: u64, label: &str) -> Self {
        Rng::new(derive_seed(seed, label))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `(0, 1]`; safe as a logarithm argument.
    #[inline]
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (one value per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Unbiased-enough index draw in `[0, n)` via the multiply-shift trick.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn normal_vec<S: Scalar>(&mut self, n: usize, std: f64) -> Vec<S> {
        (0..n).map(|_| S::from_f64(self.normal() * std)).collect()
    }

    pub fn normal_matrix<S: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<S> {
        let data = self.normal_vec(rows * cols, std);
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    }
}
