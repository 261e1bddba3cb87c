//! Reproducible random streams.
//!
//! ChaCha20 keyed by a 64-bit seed, with the ChaCha stream id used to split
//! independent substreams. Gaussian draws use the polar-free Box-Muller
//! transform on 53-bit uniforms and cache the second variate, so a stream of
//! normals is fully determined by `(seed, stream)` on every platform.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

pub const ALGORITHM: &str = "chacha20";

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

/// Everything needed to resume a [`SeededRng`] exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, as decimal because JSON numbers top out at 2^53.
    pub word_pos: String,
    /// Bit pattern of the cached Box-Muller variate, if any.
    pub spare: Option<u64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A new generator on a different stream of the same seed.
    pub fn substream(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1].
    fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.standard_normal();
        }
    }

    /// Uniform integer in `0..n` by rejection (no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            algorithm: ALGORITHM.to_owned(),
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos().to_string(),
            spare: self.spare.map(f64::to_bits),
        }
    }

    pub fn from_state(state: &RngState) -> crate::Result<Self> {
        if state.algorithm != ALGORITHM {
            return Err(crate::Error::Format(format!(
                "unsupported rng algorithm {:?}",
                state.algorithm
            )));
        }
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| crate::Error::Format(format!("bad rng word position {:?}", state.word_pos)))?;
        let mut rng = Self::new(state.seed, state.stream);
        rng.inner.set_word_pos(pos);
        rng.spare = state.spare.map(f64::from_bits);
        Ok(rng)
    }
}
