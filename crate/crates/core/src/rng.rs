//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, purpose, particle, step)`. A particle's
//! Brownian stream is a ChaCha8 keystream selected by the particle index and
//! positioned by the step index, and every step consumes a fixed number of
//! words. Sequential reads and random access therefore return the same bits,
//! independent of thread schedule or of how many other particles exist.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const DOMAIN_BROWNIAN: u64 = 0x4252_4f57_4e49_414e;
const DOMAIN_INITIAL: u64 = 0x494e_4954_4941_4c30;

/// SplitMix64 finaliser, used to derive independent keys from a base seed.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replica `index` derived from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(mix64(base) ^ mix64(index.wrapping_add(0x5eed)))
}

fn keyed(seed: u64, domain: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ domain))
}

#[inline]
fn unit_open_closed(bits: u64) -> f64 {
    // (0, 1]
    ((bits >> 11) as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0)
}

#[inline]
fn unit_closed_open(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Fills `out` with standard normals using Box–Muller; always consumes
/// `2·⌈len/2⌉` 64-bit words.
fn fill_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for pair in out.chunks_mut(2) {
        let u1 = unit_open_closed(rng.next_u64());
        let u2 = unit_closed_open(rng.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        pair[0] = r * c;
        if pair.len() > 1 {
            pair[1] = r * s;
        }
    }
}

/// Replayable standard-normal increments `ξ[particle][step] ∈ R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrownianTape {
    seed: u64,
    dim: usize,
}

impl BrownianTape {
    pub fn new(seed: u64, dim: usize) -> Self {
        BrownianTape { seed, dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn words_per_step(&self) -> u128 {
        // Two u64 (four u32 words) per Box–Muller pair.
        4 * self.dim.div_ceil(2) as u128
    }

    /// Stream for `particle`, positioned at `step`.
    pub fn stream_at(&self, particle: u64, step: u64) -> NoiseStream {
        let mut rng = keyed(self.seed, DOMAIN_BROWNIAN);
        rng.set_stream(particle);
        rng.set_word_pos(step as u128 * self.words_per_step());
        NoiseStream {
            rng,
            step,
        }
    }

    pub fn stream(&self, particle: u64) -> NoiseStream {
        self.stream_at(particle, 0)
    }

    /// Random access to the increment of `particle` at `step`.
    pub fn draw(&self, particle: u64, step: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        self.stream_at(particle, step).next_into(out);
    }
}

/// Sequential reader over one particle's increments.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    step: u64,
}

impl NoiseStream {
    pub fn next_into(&mut self, out: &mut [f64]) {
        fill_normals(&mut self.rng, out);
        self.step += 1;
    }

    /// Index of the next step this stream will produce.
    pub fn position(&self) -> u64 {
        self.step
    }
}

/// Law of the initial follower positions, sampled through keyed streams so
/// that particle `n` receives the same datum in every system built on the
/// same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    /// Independent coordinates `N(mean_k, std²)`.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Uniform on the box `[low_k, high_k]`.
    Uniform { low: Vec<f64>, high: Vec<f64> },
    /// All followers at one point; no density.
    Dirac { at: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Uniform { low, .. } => low.len(),
            InitialLaw::Dirac { at } => at.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(invalid("initial_law", "dimension must be at least 1"));
        }
        match self {
            InitialLaw::Gaussian { mean, std } => {
                if !(std.is_finite() && *std >= 0.0) || mean.iter().any(|m| !m.is_finite()) {
                    return Err(invalid("initial_law.std", "needs finite mean and std >= 0"));
                }
            }
            InitialLaw::Uniform { low, high } => {
                if low.len() != high.len()
                    || low.iter().zip(high).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h))
                {
                    return Err(invalid("initial_law.low", "needs finite bounds with low < high"));
                }
            }
            InitialLaw::Dirac { at } => {
                if at.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("initial_law.at", "must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Position of follower `particle` under `seed`.
    pub fn sample_into(&self, seed: u64, particle: u64, out: &mut [f64]) {
        let mut rng = keyed(seed, DOMAIN_INITIAL);
        rng.set_stream(particle);
        match self {
            InitialLaw::Gaussian { mean, std } => {
                fill_normals(&mut rng, out);
                for (o, m) in out.iter_mut().zip(mean) {
                    *o = m + std * *o;
                }
            }
            InitialLaw::Uniform { low, high } => {
                for ((o, l), h) in out.iter_mut().zip(low).zip(high) {
                    *o = l + (h - l) * unit_closed_open(rng.next_u64());
                }
            }
            InitialLaw::Dirac { at } => out.copy_from_slice(at),
        }
    }

    /// Samples followers `0..n` into a flat `n × d` buffer.
    pub fn sample_many(&self, seed: u64, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        for (i, chunk) in out.chunks_mut(d).enumerate() {
            self.sample_into(seed, i as u64, chunk);
        }
        out
    }

    /// Probability density in one dimension, when the law has one.
    pub fn density_1d(&self) -> Option<Box<dyn Fn(f64) -> f64 + Send + Sync>> {
        if self.dim() != 1 {
            return None;
        }
        match self {
            InitialLaw::Gaussian { mean, std } if *std > 0.0 => {
                let (m, s) = (mean[0], *std);
                let norm = 1.0 / (s * (std::f64::consts::TAU).sqrt());
                Some(Box::new(move |x| norm * (-0.5 * ((x - m) / s).powi(2)).exp()))
            }
            InitialLaw::Uniform { low, high } => {
                let (l, h) = (low[0], high[0]);
                Some(Box::new(move |x| if x >= l && x <= h { 1.0 / (h - l) } else { 0.0 }))
            }
            _ => None,
        }
    }
}
