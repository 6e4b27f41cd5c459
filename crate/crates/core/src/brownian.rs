//! Seeded Brownian increments on dyadic grids.
//!
//! Channel `i` of a grid with seed `s` is drawn from a ChaCha8 stream seeded
//! with [`split(s, i)`](split), using the ziggurat standard-normal sampler of
//! `rand_distr`. Coarser grids are built by summing adjacent pairs, so every
//! resolution of one experiment sees the same Brownian path.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Derives an independent 64-bit seed for sub-stream `index` of `seed`
/// (two rounds of the SplitMix64 finaliser).
pub fn split(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `d` channels of Brownian increments over `2^level` uniform steps on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementGrid<T> {
    d: usize,
    level: u32,
    horizon: T,
    seed: u64,
    // channel-major: channel i occupies [i*n, (i+1)*n)
    increments: Vec<T>,
}

impl<T: Real> IncrementGrid<T> {
    pub fn generate(seed: u64, d: usize, level: u32, horizon: T) -> Self {
        let n = 1usize << level;
        let scale = (horizon / T::lit(n as f64)).sqrt();
        let mut increments = Vec::with_capacity(d * n);
        for channel in 0..d {
            let mut rng = ChaCha8Rng::seed_from_u64(split(seed, channel as u64));
            increments.extend((0..n).map(|_| scale * T::standard_normal(&mut rng)));
        }
        Self {
            d,
            level,
            horizon,
            seed,
            increments,
        }
    }

    /// Wraps explicit channel-major increments (`d * 2^level` values).
    pub fn from_increments(d: usize, level: u32, horizon: T, seed: u64, increments: Vec<T>) -> Result<Self> {
        let expected = d << level;
        if increments.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: increments.len(),
            });
        }
        Ok(Self {
            d,
            level,
            horizon,
            seed,
            increments,
        })
    }

    /// Halves the resolution: coarse step `k` is `fine[2k] + fine[2k+1]`.
    pub fn coarsen(&self) -> Result<Self> {
        if self.level == 0 {
            return Err(Error::CoarsenLevelZero);
        }
        let increments = self.increments.chunks_exact(2).map(|p| p[0] + p[1]).collect();
        Ok(Self {
            d: self.d,
            level: self.level - 1,
            horizon: self.horizon,
            seed: self.seed,
            increments,
        })
    }

    /// This grid followed by successively coarser ones, down to `min_level`.
    pub fn ladder(&self, min_level: u32) -> Result<Vec<Self>> {
        let mut out = vec![self.clone()];
        while out.last().map_or(false, |g| g.level > min_level) {
            let next = out.last().unwrap().coarsen()?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn steps(&self) -> usize {
        1 << self.level
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dt(&self) -> T {
        self.horizon / T::lit(self.steps() as f64)
    }

    pub fn channel(&self, i: usize) -> &[T] {
        let n = self.steps();
        &self.increments[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn increment(&self, channel: usize, step: usize) -> T {
        self.increments[channel * self.steps() + step]
    }

    /// Increments of all channels at `step`, written into `out`.
    pub fn step_into(&self, step: usize, out: &mut [T]) {
        let n = self.steps();
        for (i, o) in out.iter_mut().enumerate().take(self.d) {
            *o = self.increments[i * n + step];
        }
    }

    /// `W_i(horizon)` for every channel.
    pub fn endpoint(&self) -> Vec<T> {
        (0..self.d).map(|i| self.channel(i).iter().copied().sum()).collect()
    }

    /// Debug dump with header `channel,step,increment`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "channel,step,increment")?;
        for i in 0..self.d {
            for (k, v) in self.channel(i).iter().enumerate() {
                writeln!(w, "{i},{k},{v}")?;
            }
        }
        Ok(())
    }
}
