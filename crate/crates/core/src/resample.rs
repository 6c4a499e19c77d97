//! Causal rational-ratio resampling with a fixed windowed-sinc prototype.
//!
//! The signal is conceptually zero-stuffed by `up`, filtered at `up * rate_in`
//! and decimated by `down`. Only the taps that land on non-zero input samples
//! are evaluated (polyphase form). Output sample `m` reads input samples up to
//! index `floor(m * down / up)` and nothing later, so the resampler never looks
//! ahead, and every output sample is computed by the same formula no matter
//! how the input was chunked.

use crate::error::{Error, Result};

/// Prototype length in input-rate samples.
const TAPS_PER_PHASE: usize = 24;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Resampler {
    pub up: usize,
    pub down: usize,
    /// Prototype filter at the intermediate rate, `TAPS_PER_PHASE * up` taps.
    taps: Vec<f64>,
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Resampler {
    pub fn new(rate_in: u32, rate_out: u32) -> Result<Self> {
        if rate_in == 0 || rate_out == 0 {
            return Err(Error::InvalidConfig("resampler rates must be positive".into()));
        }
        let g = gcd(rate_in as usize, rate_out as usize);
        let (up, down) = (rate_out as usize / g, rate_in as usize / g);
        let n = TAPS_PER_PHASE * up;
        // cutoff in cycles per intermediate-rate sample
        let fc = ROLLOFF * 0.5 / up.max(down) as f64;
        let centre = (n - 1) as f64 / 2.0;
        let taps = (0..n)
            .map(|i| {
                let t = i as f64 - centre;
                let sinc = if t == 0.0 {
                    2.0 * fc
                } else {
                    (2.0 * std::f64::consts::PI * fc * t).sin() / (std::f64::consts::PI * t)
                };
                // Blackman window
                let a = 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
                let w = 0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos();
                sinc * w * up as f64
            })
            .collect();
        Ok(Self { up, down, taps })
    }

    /// Output samples that can be computed from `n_in` inputs.
    pub fn output_len(&self, n_in: usize) -> usize {
        (n_in * self.up).div_ceil(self.down)
    }

    /// Output sample `m` from the full input prefix `x`.
    pub fn sample(&self, x: &[f32], m: usize) -> f32 {
        let pos = m * self.down;
        // taps i with (pos - i) divisible by up
        let mut i = pos % self.up;
        let mut acc = 0.0f64;
        while i < self.taps.len() && i <= pos {
            let src = (pos - i) / self.up;
            if let Some(&v) = x.get(src) {
                acc += self.taps[i] * v as f64;
            }
            i += self.up;
        }
        acc as f32
    }

    /// Output samples `start..end`.
    pub fn range(&self, x: &[f32], start: usize, end: usize) -> Vec<f32> {
        (start..end).map(|m| self.sample(x, m)).collect()
    }

    pub fn process(&self, x: &[f32]) -> Vec<f32> {
        self.range(x, 0, self.output_len(x.len()))
    }
}
