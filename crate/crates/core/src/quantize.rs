//! Vector quantization: nearest-code search, the residual stack, EMA codebook
//! maintenance, quantizer dropout and dead-code reseeding.
//!
//! Codebooks and their EMA statistics are kept in `f64`; latents enter and
//! leave as `f32`. Distances and residuals are computed in `f64`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sequence::LatentSequence;

/// Serialized marker for a stage that was not active in a frame.
pub const INACTIVE_TOKEN: u16 = 0xFFFF;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    /// `[size x dim]`.
    pub vectors: Vec<f64>,
    pub ema_cluster_size: Vec<f64>,
    /// `[size x dim]`.
    pub ema_vector_sum: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
    /// False until the codebook has been seeded from data.
    pub initialized: bool,
    training: bool,
}

/// Per-code assignment counts and vector sums gathered over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaStats {
    pub counts: Vec<f64>,
    pub sums: Vec<f64>,
    dim: usize,
}

impl EmaStats {
    pub fn new(size: usize, dim: usize) -> Self {
        Self {
            counts: vec![0.0; size],
            sums: vec![0.0; size * dim],
            dim,
        }
    }

    pub fn add(&mut self, index: usize, v: &[f64]) {
        self.counts[index] += 1.0;
        for (s, x) in self.sums[index * self.dim..(index + 1) * self.dim].iter_mut().zip(v) {
            *s += x;
        }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

impl Codebook {
    /// Standard-normal codewords, not yet seeded from data.
    pub fn random(size: usize, dim: usize, decay: f64, epsilon: f64, rng: &mut impl Rng) -> Self {
        let vectors: Vec<f64> = (0..size * dim).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            size,
            dim,
            ema_vector_sum: vectors.clone(),
            vectors,
            ema_cluster_size: vec![1.0; size],
            decay,
            epsilon,
            initialized: false,
            training: false,
        }
    }

    /// Codebook with the given codewords and unit cluster sizes.
    pub fn from_vectors(dim: usize, vectors: Vec<f64>, decay: f64, epsilon: f64) -> Self {
        assert!(dim > 0 && vectors.len() % dim == 0);
        let size = vectors.len() / dim;
        Self {
            size,
            dim,
            ema_vector_sum: vectors.clone(),
            vectors,
            ema_cluster_size: vec![1.0; size],
            decay,
            epsilon,
            initialized: true,
            training: false,
        }
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn distance(&self, k: usize, x: &[f64]) -> f64 {
        self.vector(k)
            .iter()
            .zip(x)
            .map(|(c, v)| (v - c) * (v - c))
            .sum()
    }

    /// Index of the closest codeword; ties go to the smallest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size {
            let d = self.distance(k, x);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    /// Seeds codeword `k` with data row `k mod rows`.
    pub fn init_from_data(&mut self, rows: &[f64]) {
        let n = rows.len() / self.dim;
        if n == 0 {
            return;
        }
        for k in 0..self.size {
            let src = &rows[(k % n) * self.dim..(k % n + 1) * self.dim];
            self.vectors[k * self.dim..(k + 1) * self.dim].copy_from_slice(src);
            self.ema_vector_sum[k * self.dim..(k + 1) * self.dim].copy_from_slice(src);
            self.ema_cluster_size[k] = 1.0;
        }
        self.initialized = true;
    }

    /// One EMA step from a batch of assignments.
    ///
    /// Cluster sizes and vector sums decay toward the batch statistics, then
    /// codewords are the vector sums divided by Laplace-smoothed cluster sizes.
    pub fn ema_update(&mut self, stats: &EmaStats) -> Result<()> {
        if !self.training {
            return Err(Error::NotInTrainingMode);
        }
        let (d, dec) = (self.dim, self.decay);
        for k in 0..self.size {
            self.ema_cluster_size[k] = dec * self.ema_cluster_size[k] + (1.0 - dec) * stats.counts[k];
            for i in 0..d {
                let j = k * d + i;
                self.ema_vector_sum[j] = dec * self.ema_vector_sum[j] + (1.0 - dec) * stats.sums[j];
            }
        }
        let n: f64 = self.ema_cluster_size.iter().sum();
        let denom = n + self.size as f64 * self.epsilon;
        for k in 0..self.size {
            let smoothed = (self.ema_cluster_size[k] + self.epsilon) / denom * n;
            for i in 0..d {
                let j = k * d + i;
                self.vectors[j] = self.ema_vector_sum[j] / smoothed;
            }
        }
        Ok(())
    }

    /// Convenience form of [`Codebook::ema_update`] over explicit pairs.
    pub fn ema_update_pairs(&mut self, assignments: &[(usize, Vec<f64>)]) -> Result<()> {
        let mut stats = EmaStats::new(self.size, self.dim);
        for (k, v) in assignments {
            stats.add(*k, v);
        }
        self.ema_update(&stats)
    }

    pub fn dead_codes(&self, threshold: f64) -> Vec<usize> {
        (0..self.size)
            .filter(|&k| self.ema_cluster_size[k] < threshold)
            .collect()
    }

    /// Replaces every code whose EMA cluster size is below `threshold` with a
    /// randomly drawn batch row. Returns how many codes were replaced.
    pub fn reseed_dead(&mut self, batch: &[f64], threshold: f64, rng: &mut impl Rng) -> Result<usize> {
        if !self.training {
            return Err(Error::NotInTrainingMode);
        }
        let dead = self.dead_codes(threshold);
        if dead.is_empty() {
            return Ok(0);
        }
        let n = batch.len() / self.dim;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        for &k in &dead {
            let r = rng.gen_range(0..n);
            let src = &batch[r * self.dim..(r + 1) * self.dim];
            self.vectors[k * self.dim..(k + 1) * self.dim].copy_from_slice(src);
            self.ema_vector_sum[k * self.dim..(k + 1) * self.dim].copy_from_slice(src);
            self.ema_cluster_size[k] = 1.0;
        }
        Ok(dead.len())
    }
}

/// Nearest codeword for one `f32` vector.
pub fn vq_nearest(codebook: &Codebook, x: &[f32]) -> (usize, Vec<f32>) {
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let k = codebook.nearest(&xd);
    (k, codebook.vector(k).iter().map(|&v| v as f32).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantResult {
    /// `[frames x stages]`; `None` for inactive stages.
    pub indices: Vec<Option<usize>>,
    pub stages: usize,
    pub quantized: LatentSequence,
    /// Mean over frames of the summed squared error.
    pub commit_loss: f64,
    /// Mean squared norm of the residual left after each stage.
    pub residual_energy_per_stage: Vec<f64>,
    /// Input residual of every active stage, `[frames x dim]` each.
    pub stage_inputs: Vec<Vec<f64>>,
}

impl QuantResult {
    pub fn index(&self, frame: usize, stage: usize) -> Option<usize> {
        self.indices[frame * self.stages + stage]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqStack {
    pub stages: Vec<Codebook>,
    pub dim: usize,
}

impl RvqStack {
    pub fn random(stages: usize, size: usize, dim: usize, decay: f64, epsilon: f64, rng: &mut impl Rng) -> Self {
        Self {
            stages: (0..stages)
                .map(|_| Codebook::random(size, dim, decay, epsilon, rng))
                .collect(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn set_training(&mut self, on: bool) {
        for s in &mut self.stages {
            s.set_training(on);
        }
    }

    fn check_active(&self, n_active: usize) -> Result<()> {
        if n_active == 0 || n_active > self.stages.len() {
            return Err(Error::InvalidStageCount {
                requested: n_active,
                stages: self.stages.len(),
            });
        }
        Ok(())
    }

    /// Seeds any uninitialized active stage from the residuals it would see.
    pub fn ensure_initialized(&mut self, x: &LatentSequence, n_active: usize) -> Result<()> {
        self.check_active(n_active)?;
        x.expect_dim(self.dim)?;
        if self.stages[..n_active].iter().all(|s| s.initialized) || x.frames == 0 {
            return Ok(());
        }
        let mut r: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
        for cb in &mut self.stages[..n_active] {
            if !cb.initialized {
                cb.init_from_data(&r);
            }
            for row in r.chunks_exact_mut(self.dim) {
                let k = cb.nearest(row);
                for (v, c) in row.iter_mut().zip(cb.vector(k)) {
                    *v -= c;
                }
            }
        }
        Ok(())
    }

    /// Quantizes with the first `n_active` stages.
    pub fn quantize(&self, x: &LatentSequence, n_active: usize) -> Result<QuantResult> {
        self.check_active(n_active)?;
        x.expect_dim(self.dim)?;
        let (d, s_total, frames) = (self.dim, self.stages.len(), x.frames);
        let mut r: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
        let mut q = vec![0.0f64; frames * d];
        let mut indices = vec![None; frames * s_total];
        let mut energy = Vec::with_capacity(s_total);
        let mut stage_inputs = Vec::with_capacity(n_active);
        for (s, cb) in self.stages.iter().enumerate() {
            if s < n_active {
                stage_inputs.push(r.clone());
                for f in 0..frames {
                    let row = &mut r[f * d..(f + 1) * d];
                    let k = cb.nearest(row);
                    indices[f * s_total + s] = Some(k);
                    let c = cb.vector(k);
                    for i in 0..d {
                        row[i] -= c[i];
                        q[f * d + i] += c[i];
                    }
                }
            }
            energy.push(mean_sq_norm(&r, d));
        }
        let quantized = LatentSequence::new(q.iter().map(|&v| v as f32).collect(), d, x.frame_rate_hz);
        let commit_loss = x
            .data
            .chunks_exact(d)
            .zip(quantized.data.chunks_exact(d))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
            / frames.max(1) as f64;
        Ok(QuantResult {
            indices,
            stages: s_total,
            quantized,
            commit_loss,
            residual_energy_per_stage: energy,
            stage_inputs,
        })
    }

    /// Sum of the selected codewords per frame, accumulated in stage order
    /// exactly as [`RvqStack::quantize`] does.
    pub fn dequantize(&self, indices: &[Option<usize>], frame_rate_hz: f64) -> LatentSequence {
        let (d, s_total) = (self.dim, self.stages.len());
        let frames = indices.len() / s_total;
        let mut q = vec![0.0f64; frames * d];
        for (s, cb) in self.stages.iter().enumerate() {
            for f in 0..frames {
                if let Some(k) = indices[f * s_total + s] {
                    for (acc, c) in q[f * d..(f + 1) * d].iter_mut().zip(cb.vector(k)) {
                        *acc += c;
                    }
                }
            }
        }
        LatentSequence::new(q.iter().map(|&v| v as f32).collect(), d, frame_rate_hz)
    }
}

fn mean_sq_norm(r: &[f64], d: usize) -> f64 {
    let frames = r.len() / d;
    r.iter().map(|v| v * v).sum::<f64>() / frames.max(1) as f64
}

/// Active stage count given a branch choice and a uniform draw in `[0, 1)`.
pub fn dropout_stage_count(all_active: bool, uniform: f64, stages: usize) -> usize {
    if all_active {
        stages
    } else {
        1 + ((uniform * stages as f64) as usize).min(stages - 1)
    }
}

/// With probability 1/2 every stage is active, otherwise a uniform count in
/// `1..=stages`.
pub fn quantizer_dropout_schedule(rng: &mut impl Rng, stages: usize) -> usize {
    let all = rng.gen_bool(0.5);
    let u: f64 = rng.gen();
    dropout_stage_count(all, u, stages)
}

/// Fraction of the `size` codes that occur at least once.
pub fn used_fraction(indices: impl IntoIterator<Item = usize>, size: usize) -> f64 {
    let mut seen = vec![false; size];
    for k in indices {
        seen[k] = true;
    }
    seen.iter().filter(|&&b| b).count() as f64 / size as f64
}
