//! Training harness: data sources, learning-rate schedule, AdamW, the
//! generator/discriminator step, single-clip overfitting and resumable
//! checkpoints.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::autograd::Tape;
use crate::checkpoint::{get_codec, put_codec, Checkpoint};
use crate::codec::Codec;
use crate::config::{parse_entries, parse_value, ValidatedConfig};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, generator_adversarial, multiscale_mel_loss_var, total_loss, DiscriminatorBank, LossParts,
};
use crate::nn::{Bound, ParamStore};
use crate::quantize::{quantizer_dropout_schedule, EmaStats};
use crate::semantic::wiring_tag;
use crate::sequence::PcmBuffer;
use crate::tensor::Tensor;
use crate::token_io::wav_read;

pub const MAX_SEGMENT_SECONDS: f64 = 10.0;
const DISC_SEED_SALT: u64 = 0xD15C;
const RNG_SEED_SALT: u64 = 0x7EA1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    WavDir(PathBuf),
    SingleClip(PathBuf),
}

impl DataSource {
    /// `synthetic`, a directory, or a `.wav` file.
    pub fn parse(s: &str) -> Self {
        if s == "synthetic" {
            DataSource::Synthetic
        } else if s.to_ascii_lowercase().ends_with(".wav") {
            DataSource::SingleClip(PathBuf::from(s))
        } else {
            DataSource::WavDir(PathBuf::from(s))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub segment_seconds: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
    pub grad_accum: usize,
    pub checkpoint_every: u64,
    pub data_source: DataSource,
    /// Step at which the discriminator and adversarial terms switch on.
    pub adversarial_start: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 4,
            segment_seconds: 1.0,
            lr_peak: 1e-4,
            warmup_steps: 250,
            decay_steps: 5000,
            grad_accum: 1,
            checkpoint_every: 1000,
            data_source: DataSource::Synthetic,
            adversarial_start: 500,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Reads `train.*` keys; every other key is left to the codec config.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for e in parse_entries(text)? {
            let Some(k) = e.key.strip_prefix("train.") else { continue };
            match k {
                "steps" => c.steps = parse_value(&e, "an integer")?,
                "batch_size" => c.batch_size = parse_value(&e, "an integer")?,
                "segment_seconds" => c.segment_seconds = parse_value(&e, "a number")?,
                "lr_peak" => c.lr_peak = parse_value(&e, "a number")?,
                "warmup_steps" => c.warmup_steps = parse_value(&e, "an integer")?,
                "decay_steps" => c.decay_steps = parse_value(&e, "an integer")?,
                "grad_accum" => c.grad_accum = parse_value(&e, "an integer")?,
                "checkpoint_every" => c.checkpoint_every = parse_value(&e, "an integer")?,
                "data_source" => c.data_source = DataSource::parse(&e.value),
                "adversarial_start" => c.adversarial_start = parse_value(&e, "an integer")?,
                "beta1" => c.beta1 = parse_value(&e, "a number")?,
                "beta2" => c.beta2 = parse_value(&e, "a number")?,
                "weight_decay" => c.weight_decay = parse_value(&e, "a number")?,
                _ => log::warn!("line {}: unknown key `{}` ignored", e.line, e.key),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        if !(self.segment_seconds > 0.0 && self.segment_seconds <= MAX_SEGMENT_SECONDS) {
            return bad("segment_seconds must be in (0, 10]");
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be finite and >= 0");
        }
        Ok(())
    }
}

/// Linear warmup to `lr_peak`, cosine decay to zero, then zero.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let t = step - cfg.warmup_steps;
    if t >= cfg.decay_steps {
        return if cfg.decay_steps == 0 && t == 0 { cfg.lr_peak } else { 0.0 };
    }
    cfg.lr_peak * 0.5 * (1.0 + (PI * t as f64 / cfg.decay_steps as f64).cos())
}

// -------------------------------------------------------------------------
// Synthetic data

/// Seeded generator of test-signal mixtures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub sample_rate: u32,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Component {
    Sweep,
    Harmonic,
    NoiseBurst,
    AmChirp,
}

pub const PEAK_LIMIT: f32 = 0.95;

impl SyntheticSpec {
    pub fn new(seed: u64, sample_rate: u32, seconds: f64) -> Self {
        Self {
            seed,
            sample_rate,
            seconds,
        }
    }

    fn len(&self) -> usize {
        (self.seconds * self.sample_rate as f64).round() as usize
    }

    /// A mixture of one to three components.
    pub fn generate(&self) -> PcmBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.len();
        let mut x = vec![0.0f64; n];
        let all = [Component::Sweep, Component::Harmonic, Component::NoiseBurst, Component::AmChirp];
        for _ in 0..rng.gen_range(1..=3) {
            let c = all[rng.gen_range(0..all.len())];
            let gain = rng.gen_range(0.3..1.0);
            for (acc, v) in x.iter_mut().zip(self.component(c, &mut rng)) {
                *acc += gain * v;
            }
        }
        let peak = rng.gen_range(0.3..PEAK_LIMIT as f64);
        normalize(&x, peak, self.sample_rate)
    }

    /// A harmonic stack with `f0` in 100..400 Hz.
    pub fn harmonic(&self) -> PcmBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let x = self.component(Component::Harmonic, &mut rng);
        normalize(&x, 0.8, self.sample_rate)
    }

    fn component(&self, c: Component, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sr = self.sample_rate as f64;
        let n = self.len();
        let t = |i: usize| i as f64 / sr;
        match c {
            Component::Sweep => {
                let (f0, f1) = (rng.gen_range(100.0..1000.0), rng.gen_range(1000.0..6000.0));
                let dur = self.seconds.max(1e-3);
                let k = (f1 / f0 as f64).ln() / dur;
                (0..n)
                    .map(|i| (2.0 * PI * f0 * ((k * t(i)).exp() - 1.0) / k).sin())
                    .collect()
            }
            Component::Harmonic => {
                let f0 = rng.gen_range(100.0..400.0);
                let partials = rng.gen_range(3..=10);
                let vib_rate = rng.gen_range(3.0..7.0);
                let vib_depth = rng.gen_range(0.0..0.01);
                let mut phase = 0.0f64;
                (0..n)
                    .map(|i| {
                        let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t(i)).sin());
                        phase += 2.0 * PI * f / sr;
                        (1..=partials)
                            .filter(|&h| f0 * h as f64 <= 0.45 * sr)
                            .map(|h| (h as f64 * phase).sin() / h as f64)
                            .sum()
                    })
                    .collect()
            }
            Component::NoiseBurst => {
                let centre: f64 = rng.gen_range(300.0..6000.0);
                let q = rng.gen_range(0.7..4.0);
                let start = rng.gen_range(0..n.max(1));
                let len = rng.gen_range(n / 10 + 1..n / 2 + 2);
                let w0 = 2.0 * PI * centre / sr;
                let alpha = w0.sin() / (2.0 * q);
                let a0 = 1.0 + alpha;
                let (b0, b2) = (alpha / a0, -alpha / a0);
                let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
                let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
                (0..n)
                    .map(|i| {
                        let gate = if i >= start && i < start + len {
                            (PI * (i - start) as f64 / len as f64).sin()
                        } else {
                            0.0
                        };
                        let w: f64 = rng.gen_range(-1.0..1.0) * gate;
                        let y = b0 * w + b2 * x2 - a1 * y1 - a2 * y2;
                        (x2, x1, y2, y1) = (x1, w, y1, y);
                        y
                    })
                    .collect()
            }
            Component::AmChirp => {
                let (f0, f1) = (rng.gen_range(200.0..2000.0), rng.gen_range(200.0..4000.0));
                let am = rng.gen_range(2.0..20.0);
                let dur = self.seconds.max(1e-3);
                (0..n)
                    .map(|i| {
                        let ti = t(i);
                        let phase = 2.0 * PI * (f0 * ti + 0.5 * (f1 - f0) / dur * ti * ti);
                        phase.sin() * (0.5 + 0.5 * (2.0 * PI * am * ti).sin())
                    })
                    .collect()
            }
        }
    }
}

fn normalize(x: &[f64], peak: f64, sample_rate: u32) -> PcmBuffer {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if m > 0.0 { peak / m } else { 0.0 };
    let samples = x
        .iter()
        .map(|v| ((v * g) as f32).clamp(-PEAK_LIMIT, PEAK_LIMIT))
        .collect();
    PcmBuffer::new(samples, sample_rate)
}

/// Training clips drawn from the configured source.
pub enum Dataset {
    Synthetic { sample_rate: u32, seconds: f64 },
    Clips { clips: Vec<PcmBuffer> },
}

impl Dataset {
    pub fn open(cfg: &TrainConfig, sample_rate: u32) -> Result<Self> {
        let max = (cfg.segment_seconds * sample_rate as f64).round() as usize;
        let load = |p: &Path| -> Result<PcmBuffer> {
            let mut pcm = wav_read(p)?;
            pcm.expect_rate(sample_rate)?;
            pcm.samples.truncate(max);
            Ok(pcm)
        };
        match &cfg.data_source {
            DataSource::Synthetic => Ok(Dataset::Synthetic {
                sample_rate,
                seconds: cfg.segment_seconds,
            }),
            DataSource::SingleClip(p) => Ok(Dataset::Clips { clips: vec![load(p)?] }),
            DataSource::WavDir(dir) => {
                let clips = wav_files(dir)?
                    .iter()
                    .filter_map(|p| match load(p) {
                        Ok(c) => Some(c),
                        Err(e) => {
                            log::warn!("skipping {}: {e}", p.display());
                            None
                        }
                    })
                    .collect::<Vec<_>>();
                if clips.is_empty() {
                    return Err(Error::EmptyCorpus(dir.display().to_string()));
                }
                Ok(Dataset::Clips { clips })
            }
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> PcmBuffer {
        match self {
            Dataset::Synthetic { sample_rate, seconds } => SyntheticSpec::new(rng.gen(), *sample_rate, *seconds).generate(),
            Dataset::Clips { clips } => clips[rng.gen_range(0..clips.len())].clone(),
        }
    }
}

/// `.wav` files of a directory in name order.
pub fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

// -------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay on matrices and higher-rank tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update; parameters without a gradient see a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name).expect("moment per parameter");
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let v = self.v.get_mut(name).expect("moment per parameter");
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i] as f64);
                let mi = self.beta1 * m.data()[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let pi = p.data()[i] as f64;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps) + decay * pi;
                p.data_mut()[i] = (pi - lr * update) as f32;
            }
        }
    }
}

// -------------------------------------------------------------------------
// Training state and step

pub struct TrainState {
    pub codec: Codec,
    pub disc: DiscriminatorBank,
    pub disc_params: ParamStore,
    pub opt_gen: AdamW,
    pub opt_disc: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub cfg: TrainConfig,
}

/// Per-step loss breakdown. Absent terms are switched off by configuration
/// or not yet active.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub step: u64,
    pub lr: f64,
    pub n_active: usize,
    pub ac_recon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se_recon: Option<f64>,
    pub commit: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub self_guidance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fm: Option<f64>,
    pub generator_total: f64,
    pub discriminator_total: f64,
    pub reseeded: usize,
    pub wiring: String,
}

impl LossReport {
    pub fn parts(&self) -> LossParts {
        LossParts {
            ac_recon: self.ac_recon,
            se_recon: self.se_recon.unwrap_or(0.0),
            commit: self.commit,
            self_guidance: self.self_guidance.unwrap_or(0.0),
            dis: self.dis.unwrap_or(0.0),
            gen: self.gen.unwrap_or(0.0),
            fm: self.fm.unwrap_or(0.0),
        }
    }

    /// Names of the terms present in this report.
    pub fn schema(&self) -> Vec<&'static str> {
        let mut out = vec!["ac_recon"];
        if self.se_recon.is_some() {
            out.push("se_recon");
        }
        out.push("commit");
        if self.self_guidance.is_some() {
            out.push("self_guidance");
        }
        for (name, v) in [("dis", self.dis), ("gen", self.gen), ("fm", self.fm)] {
            if v.is_some() {
                out.push(name);
            }
        }
        out
    }

    pub fn to_log_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn accumulate(sum: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, scale: f32) {
    for (name, g) in grads {
        match sum.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
            None => {
                let mut g = g;
                for v in g.data_mut() {
                    *v *= scale;
                }
                sum.insert(name, g);
            }
        }
    }
}

impl TrainState {
    pub fn new(cfg: ValidatedConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let seed = cfg.seed;
        let disc = DiscriminatorBank::stft(cfg.disc_channels);
        let disc_params = disc.init_params(seed ^ DISC_SEED_SALT);
        let codec = Codec::new(cfg)?;
        Ok(Self {
            opt_gen: AdamW::new(&codec.params, &train),
            opt_disc: AdamW::new(&disc_params, &train),
            codec,
            disc,
            disc_params,
            rng: ChaCha8Rng::seed_from_u64(seed ^ RNG_SEED_SALT),
            step: 0,
            cfg: train,
        })
    }

    pub fn adversarial_active(&self) -> bool {
        self.step >= self.cfg.adversarial_start && !self.codec.cfg.loss_weights.adversarial_disabled()
    }

    /// One generator update and, once adversarial training is active, one
    /// discriminator update, followed by codebook maintenance.
    pub fn train_step(&mut self, batch: &[PcmBuffer]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let sr = self.codec.cfg.sample_rate_hz;
        let max_len = (self.cfg.segment_seconds * sr as f64).round() as usize;
        let clips: Vec<Vec<f32>> = batch
            .iter()
            .map(|b| {
                b.expect_rate(sr)?;
                Ok(b.samples[..b.len().min(max_len)].to_vec())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[f32]> = clips.iter().map(Vec::as_slice).collect();
        self.codec.init_codebooks(&refs)?;
        self.codec.set_training(true);

        let cfg = self.codec.cfg.clone();
        let w = cfg.loss_weights;
        let stages = self.codec.rvq.len();
        let n_active = if cfg.quantizer_dropout {
            quantizer_dropout_schedule(&mut self.rng, stages)
        } else {
            stages
        };
        let adversarial = self.adversarial_active();
        let lr = lr_schedule(self.step, &self.cfg);
        let scale = 1.0 / clips.len() as f32;

        let mut grads = BTreeMap::new();
        let mut sums = LossParts::default();
        let mut has_sg = false;
        let mut has_se = false;
        let mut stage_stats: Vec<EmaStats> = (0..n_active)
            .map(|_| EmaStats::new(cfg.acoustic_codebook_size, cfg.acoustic_code_dim))
            .collect();
        let mut stage_rows: Vec<Vec<f64>> = vec![Vec::new(); n_active];
        let mut sem_stats = EmaStats::new(cfg.semantic_codebook_size, cfg.semantic_dim);
        let mut sem_rows = Vec::new();
        let mut recon = Vec::with_capacity(clips.len());

        for clip in &clips {
            let mut tape = Tape::new();
            let p = Bound::trainable(&self.codec.params);
            let fwd = self.codec.forward_train(&mut tape, &p, clip, None, n_active)?;
            let mel = multiscale_mel_loss_var(&mut tape, fwd.x, fwd.x_hat, sr);
            let mut terms = vec![(mel, w.ac_recon as f32), (fwd.commit, w.commit as f32)];
            if let Some(sg) = fwd.self_guidance {
                terms.push((sg, w.self_guidance as f32));
                sums.self_guidance += tape.value(sg).item() as f64;
                has_sg = true;
            }
            if adversarial {
                let (g, fm) = generator_adversarial(&mut tape, &self.disc, &self.disc_params, fwd.x, fwd.x_hat);
                terms.push((g, w.gen as f32));
                terms.push((fm, w.fm as f32));
                sums.gen += tape.value(g).item() as f64;
                sums.fm += tape.value(fm).item() as f64;
            }
            let loss = tape.weighted_sum(&terms);
            sums.ac_recon += tape.value(mel).item() as f64;
            sums.commit += tape.value(fwd.commit).item() as f64 + fwd.semantic_commit.unwrap_or(0.0);
            if let Some(se) = fwd.se_recon {
                sums.se_recon += se;
                has_se = true;
            }
            if !tape.value(loss).item().is_finite() {
                total_loss(&sums, &w)?;
                return Err(Error::NonFiniteLoss { term: "generator".into() });
            }
            let g = tape.backward(loss);
            accumulate(&mut grads, tape.bound_grads(&g), scale);

            let frames = fwd.quant.quantized.frames;
            for (s, inputs) in fwd.quant.stage_inputs.iter().enumerate() {
                for f in 0..frames {
                    let k = fwd.quant.index(f, s).expect("active stage has an index");
                    stage_stats[s].add(k, &inputs[f * cfg.acoustic_code_dim..(f + 1) * cfg.acoustic_code_dim]);
                }
                stage_rows[s].extend_from_slice(inputs);
            }
            if let (Some(tokens), Some(t)) = (&fwd.semantic_tokens, &fwd.teacher) {
                for (f, &k) in tokens.iter().enumerate() {
                    let row: Vec<f64> = t.frame(f).iter().map(|&v| v as f64).collect();
                    sem_stats.add(k, &row);
                    sem_rows.extend(row);
                }
            }
            if adversarial {
                recon.push((Tensor::new(vec![clip.len().div_ceil(cfg.hop) * cfg.hop], tape.value(fwd.x).data().to_vec()), tape.value(fwd.x_hat).clone()));
            }
        }

        let n = clips.len() as f64;
        let mut parts = LossParts {
            ac_recon: sums.ac_recon / n,
            se_recon: sums.se_recon / n,
            commit: sums.commit / n,
            self_guidance: sums.self_guidance / n,
            dis: 0.0,
            gen: sums.gen / n,
            fm: sums.fm / n,
        };
        total_loss(&parts, &w)?;

        let mut disc_grads = BTreeMap::new();
        if adversarial {
            for (x, x_hat) in &recon {
                let mut tape = Tape::new();
                let l = discriminator_loss(&mut tape, &self.disc, &self.disc_params, x, x_hat);
                parts.dis += tape.value(l).item() as f64 / n;
                let g = tape.backward(l);
                accumulate(&mut disc_grads, tape.bound_grads(&g), scale);
            }
        }
        let (generator_total, discriminator_total) = total_loss(&parts, &w)?;

        self.opt_gen.step(&mut self.codec.params, &grads, lr);
        if adversarial {
            self.opt_disc.step(&mut self.disc_params, &disc_grads, lr);
        }

        let mut reseeded = 0;
        for (s, stats) in stage_stats.iter().enumerate() {
            let cb = &mut self.codec.rvq.stages[s];
            cb.ema_update(stats)?;
            if cfg.reseed_dead_codes {
                reseeded += cb.reseed_dead(&stage_rows[s], cfg.dead_code_threshold, &mut self.rng)?;
            }
        }
        if let Some(cb) = self.codec.semantic_vq.as_mut() {
            if !sem_rows.is_empty() {
                cb.ema_update(&sem_stats)?;
                if cfg.reseed_dead_codes {
                    reseeded += cb.reseed_dead(&sem_rows, cfg.dead_code_threshold, &mut self.rng)?;
                }
            }
        }

        let report = LossReport {
            step: self.step,
            lr,
            n_active,
            ac_recon: parts.ac_recon,
            se_recon: has_se.then_some(parts.se_recon),
            commit: parts.commit,
            self_guidance: has_sg.then_some(parts.self_guidance),
            dis: adversarial.then_some(parts.dis),
            gen: adversarial.then_some(parts.gen),
            fm: adversarial.then_some(parts.fm),
            generator_total,
            discriminator_total,
            reseeded,
            wiring: wiring_tag(&cfg),
        };
        self.step += 1;
        Ok(report)
    }

    /// Draws `batch_size * grad_accum` clips and takes one step.
    pub fn step_from(&mut self, data: &Dataset) -> Result<LossReport> {
        let n = self.cfg.batch_size * self.cfg.grad_accum;
        let batch: Vec<PcmBuffer> = (0..n).map(|_| data.draw(&mut self.rng)).collect();
        self.train_step(&batch)
    }

    /// Runs until `cfg.steps`, logging one line per step and checkpointing
    /// into `out_dir` when given.
    pub fn run(&mut self, data: &Dataset, log: &mut dyn Write, out_dir: Option<&Path>) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        while self.step < self.cfg.steps {
            let r = self.step_from(data)?;
            writeln!(log, "{}", r.to_log_line()).map_err(|e| Error::io("<train log>", e))?;
            reports.push(r);
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.save(&dir.join(format!("step{:07}.omck", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join("latest.omck"))?;
        }
        Ok(reports)
    }

    // ---------------------------------------------------------------------
    // Checkpoints

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(0, json!({}));
        put_codec(&mut ck, &self.codec);
        ck.put_store("disc/", &self.disc_params);
        for (prefix, opt) in [("opt_gen", &self.opt_gen), ("opt_disc", &self.opt_disc)] {
            ck.put_store(&format!("{prefix}.m/"), &opt.m);
            ck.put_store(&format!("{prefix}.v/"), &opt.v);
        }
        let m = ck.meta.as_object_mut().unwrap();
        m.insert("step".into(), json!(self.step));
        m.insert("opt_gen_t".into(), json!(self.opt_gen.t));
        m.insert("opt_disc_t".into(), json!(self.opt_disc.t));
        m.insert(
            "rng".into(),
            json!({
                "seed": crate::checkpoint::hex(&self.rng.get_seed()),
                "stream": self.rng.get_stream().to_string(),
                "word_pos": self.rng.get_word_pos().to_string(),
            }),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, train: TrainConfig) -> Result<Self> {
        let codec = get_codec(ck)?;
        let disc = DiscriminatorBank::stft(codec.cfg.disc_channels);
        let disc_params = ck.store("disc/")?;
        let bad = |what: &str| Error::InvalidConfig(format!("corrupt checkpoint: {what}"));
        let opt = |prefix: &str, t_key: &str| -> Result<AdamW> {
            let mut o = AdamW::new(&ParamStore::new(), &train);
            o.m = ck.store(&format!("{prefix}.m/"))?;
            o.v = ck.store(&format!("{prefix}.v/"))?;
            o.t = ck.meta[t_key].as_u64().ok_or_else(|| bad(t_key))?;
            Ok(o)
        };
        let rng_meta = &ck.meta["rng"];
        let seed_hex = rng_meta["seed"].as_str().ok_or_else(|| bad("rng seed"))?;
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = seed_hex
                .get(2 * i..2 * i + 2)
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| bad("rng seed"))?;
        }
        let num = |k: &str| -> Result<u128> {
            rng_meta[k].as_str().and_then(|s| s.parse().ok()).ok_or_else(|| bad(k))
        };
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(num("stream")? as u64);
        rng.set_word_pos(num("word_pos")?);
        Ok(Self {
            opt_gen: opt("opt_gen", "opt_gen_t")?,
            opt_disc: opt("opt_disc", "opt_disc_t")?,
            codec,
            disc,
            disc_params,
            rng,
            step: ck.meta["step"].as_u64().ok_or_else(|| bad("step"))?,
            cfg: train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path, train: TrainConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, train)
    }
}

// -------------------------------------------------------------------------
// Single-clip overfitting

pub const MIN_CLIP_SECONDS: f64 = 0.5;

/// Per-step multiscale mel loss and the final state.
pub struct LossCurve {
    pub mel: Vec<f64>,
    pub reports: Vec<LossReport>,
}

/// Trains on one clip only.
pub fn overfit_single_clip(state: &mut TrainState, clip: &PcmBuffer, steps: u64) -> Result<LossCurve> {
    let seconds = clip.duration_seconds();
    if seconds < MIN_CLIP_SECONDS {
        return Err(Error::ClipTooShort { seconds });
    }
    if seconds > MAX_SEGMENT_SECONDS {
        return Err(Error::InvalidConfig(format!("overfit clip is {seconds:.2} s, limit is 10 s")));
    }
    let batch = [clip.clone()];
    let mut curve = LossCurve {
        mel: Vec::with_capacity(steps as usize),
        reports: Vec::with_capacity(steps as usize),
    };
    for _ in 0..steps {
        let r = state.train_step(&batch)?;
        curve.mel.push(r.ac_recon);
        curve.reports.push(r);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;

    fn tiny(f: impl FnOnce(&mut CodecConfig)) -> ValidatedConfig {
        let mut c = CodecConfig {
            hidden_dim: 16,
            transformer_layers: 1,
            transformer_heads: 2,
            transformer_ff_dim: 16,
            semantic_codebook_size: 8,
            semantic_dim: 8,
            acoustic_stages: 2,
            acoustic_codebook_size: 8,
            acoustic_code_dim: 4,
            disc_channels: 2,
            ..CodecConfig::default()
        };
        f(&mut c);
        c.validate().unwrap()
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 1,
            segment_seconds: 0.5,
            lr_peak: 1e-3,
            warmup_steps: 2,
            decay_steps: 100,
            adversarial_start: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let c = TrainConfig {
            warmup_steps: 100,
            decay_steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(100, &c), 1e-4);
        assert!((lr_schedule(600, &c) - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(1100, &c), 0.0);
        assert_eq!(lr_schedule(5000, &c), 0.0);
    }

    #[test]
    fn train_config_parsing() {
        let c = TrainConfig::parse("hidden_dim = 8\ntrain.steps = 7\ntrain.data_source = clips/a.wav\ntrain.lr_peak = 3e-4\n").unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.lr_peak, 3e-4);
        assert_eq!(c.data_source, DataSource::SingleClip("clips/a.wav".into()));
        assert!(TrainConfig::parse("train.segment_seconds = 12").is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        for seed in 0..20 {
            let a = SyntheticSpec::new(seed, 24_000, 0.5).generate();
            assert_eq!(a, SyntheticSpec::new(seed, 24_000, 0.5).generate());
            assert_eq!(a.len(), 12_000);
            let peak = a.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(peak <= PEAK_LIMIT && peak > 0.0, "seed {seed}: {peak}");
        }
        assert_ne!(SyntheticSpec::new(0, 24_000, 0.5).generate(), SyntheticSpec::new(1, 24_000, 0.5).generate());
    }

    #[test]
    fn adamw_matches_hand_computation() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![1, 1], vec![1.0]));
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&p, &cfg);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(vec![1, 1], vec![0.5]));
        opt.step(&mut p, &g, 0.1);
        // first step: m_hat = g, v_hat = g^2, update = sign(g) + wd * p
        let want = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
        assert!((p.w("w").data()[0] as f64 - want).abs() < 1e-7);
    }

    #[test]
    fn steps_are_deterministic_and_recombine() {
        let clip = SyntheticSpec::new(3, 24_000, 0.5).generate();
        let run = || {
            let mut s = TrainState::new(tiny(|_| {}), train_cfg()).unwrap();
            (0..3).map(|_| s.train_step(&[clip.clone()]).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        let w = LossWeights::default();
        for r in &a {
            let (g, d) = total_loss(&r.parts(), &w).unwrap();
            assert_eq!((g, d), (r.generator_total, r.discriminator_total));
        }
        assert!(a[0].dis.is_none() && a[2].dis.is_some());
        assert_eq!(a[2].schema(), vec!["ac_recon", "se_recon", "commit", "self_guidance", "dis", "gen", "fm"]);
    }

    use crate::config::LossWeights;

    #[test]
    fn zero_lr_only_moves_codebooks() {
        let clip = SyntheticSpec::new(4, 24_000, 0.5).generate();
        let mut cfg = train_cfg();
        cfg.lr_peak = 0.0;
        let mut s = TrainState::new(tiny(|_| {}), cfg).unwrap();
        s.codec.init_codebooks(&[&clip.samples]).unwrap();
        let (params, disc, rvq) = (s.codec.params.clone(), s.disc_params.clone(), s.codec.rvq.clone());
        for _ in 0..3 {
            s.train_step(&[clip.clone()]).unwrap();
        }
        assert_eq!(s.codec.params, params);
        assert_eq!(s.disc_params, disc);
        assert_ne!(s.codec.rvq, rvq);
    }

    #[test]
    fn ablation_switches_change_schema() {
        let clip = SyntheticSpec::new(5, 24_000, 0.5).generate();
        let mut cfg = train_cfg();
        cfg.adversarial_start = 100;
        let schema = |c: ValidatedConfig| {
            let mut s = TrainState::new(c, cfg.clone()).unwrap();
            let r = s.train_step(&[clip.clone()]).unwrap();
            (r.schema(), r.wiring)
        };
        let (full, tag) = schema(tiny(|_| {}));
        assert_eq!(full, vec!["ac_recon", "se_recon", "commit", "self_guidance"]);
        assert_eq!(tag, "semantic=on adapter=learned self_guidance=on");
        let (s, _) = schema(tiny(|c| c.semantic_branch = false));
        assert_eq!(s, vec!["ac_recon", "commit", "self_guidance"]);
        let (s, _) = schema(tiny(|c| c.self_guidance = false));
        assert_eq!(s, vec!["ac_recon", "se_recon", "commit"]);
        let (s, tag) = schema(tiny(|c| c.learned_adapter = false));
        assert_eq!(s, full);
        assert!(tag.contains("adapter=slice"));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = Dataset::Synthetic {
            sample_rate: 24_000,
            seconds: 0.5,
        };
        let cfg = TrainConfig {
            grad_accum: 2,
            ..train_cfg()
        };
        let mut full = TrainState::new(tiny(|_| {}), cfg.clone()).unwrap();
        let want: Vec<_> = (0..6).map(|_| full.step_from(&data).unwrap()).collect();

        let mut first = TrainState::new(tiny(|_| {}), cfg.clone()).unwrap();
        for _ in 0..3 {
            first.step_from(&data).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.omck");
        first.save(&path).unwrap();
        let mut resumed = TrainState::load(&path, cfg).unwrap();
        assert_eq!(resumed.codec.params, first.codec.params);
        assert_eq!(resumed.opt_gen, first.opt_gen);
        assert_eq!(resumed.rng, first.rng);
        let got: Vec<_> = (0..3).map(|_| resumed.step_from(&data).unwrap()).collect();
        assert_eq!(got, want[3..]);
    }

    #[test]
    fn overfit_guards() {
        let mut s = TrainState::new(tiny(|_| {}), train_cfg()).unwrap();
        let short = PcmBuffer::new(vec![0.0; 1000], 24_000);
        assert!(matches!(overfit_single_clip(&mut s, &short, 1), Err(Error::ClipTooShort { .. })));
        let clip = SyntheticSpec::new(6, 24_000, 0.5).harmonic();
        assert!(overfit_single_clip(&mut s, &clip, 0).unwrap().mel.is_empty());
    }

    #[test]
    fn teacher_stays_frozen() {
        let clip = SyntheticSpec::new(7, 24_000, 0.5).generate();
        let mut s = TrainState::new(tiny(|_| {}), train_cfg()).unwrap();
        let before = s.codec.teacher().unwrap().param_hash();
        for _ in 0..3 {
            s.train_step(&[clip.clone()]).unwrap();
        }
        let ck = s.to_checkpoint();
        let back = TrainState::from_checkpoint(&ck, train_cfg()).unwrap();
        assert_eq!(back.codec.teacher().unwrap().param_hash(), before);
    }
}
