use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[frames x dim]` real-valued features at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub data: Vec<f32>,
    pub frames: usize,
    pub dim: usize,
    pub frame_rate_hz: f64,
}

impl LatentSequence {
    pub fn new(data: Vec<f32>, dim: usize, frame_rate_hz: f64) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "{} values do not fill rows of {dim}", data.len());
        Self {
            frames: data.len() / dim,
            data,
            dim,
            frame_rate_hz,
        }
    }

    pub fn zeros(frames: usize, dim: usize, frame_rate_hz: f64) -> Self {
        Self::new(vec![0.0; frames * dim], dim, frame_rate_hz)
    }

    pub fn from_tensor(t: &Tensor, frame_rate_hz: f64) -> Self {
        let dim = t.cols();
        Self::new(t.data().to_vec(), dim, frame_rate_hz)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.dim], self.data.clone())
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn truncated(&self, frames: usize) -> Self {
        Self::new(self.data[..frames.min(self.frames) * self.dim].to_vec(), self.dim, self.frame_rate_hz)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!((self.frames, self.dim), (other.frames, other.dim));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: self.dim,
            });
        }
        Ok(())
    }
}

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct PcmBuffer {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl PcmBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn expect_rate(&self, rate: u32) -> Result<()> {
        if self.sample_rate_hz != rate {
            return Err(Error::SampleRateMismatch {
                expected: rate,
                actual: self.sample_rate_hz,
            });
        }
        Ok(())
    }

    /// Zero-pads to a whole number of `hop`-sample frames.
    pub fn padded_to(&self, hop: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(samples.len().div_ceil(hop) * hop, 0.0);
        Self::new(samples, self.sample_rate_hz)
    }
}
