//! The semantic branch: a frozen teacher, the semantic quantizer, Adapter-1
//! and the subtract / re-add decoupling of semantic and acoustic latents.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex32;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::config::{ValidatedConfig, TEACHER_FRAME_RATE_HZ};
use crate::dsp;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Bound, Init, ParamSpec, ParamStore};
use crate::quantize::{vq_nearest, Codebook};
use crate::resample::Resampler;
use crate::sequence::LatentSequence;
use crate::tensor::Tensor;

/// Seed of the desk teacher's frozen projection.
pub const TEACHER_SEED: u64 = 0x5EED_7EAC;
pub const TEACHER_MELS: usize = 80;
const TEACHER_WIN_MS: usize = 25;
const TEACHER_FFT: usize = 512;
const STFT_FRAMES_PER_FEATURE: usize = 4;
/// Affine normalization of the teacher log-mel before projection.
const LOGMEL_SHIFT: f32 = 6.0;
const LOGMEL_SCALE: f32 = 0.25;

/// A frozen feature extractor emitting 12.5 Hz frames.
pub trait SemanticTeacher {
    fn dim(&self) -> usize;

    /// Codec-rate input samples per teacher frame.
    fn hop(&self) -> usize;

    /// Frames `start..end` as `[(end-start) x dim]` rows, computed from the
    /// input prefix `pcm`. Frame `j` may depend only on `pcm[..(j+1)*hop]`.
    fn frames(&self, pcm: &[f32], start: usize, end: usize) -> Vec<f32>;

    /// Hash of all frozen parameters.
    fn param_hash(&self) -> [u8; 32];

    /// Every complete frame of `pcm`.
    fn features(&self, pcm: &[f32]) -> LatentSequence {
        let n = pcm.len() / self.hop();
        LatentSequence::new(self.frames(pcm, 0, n), self.dim(), TEACHER_FRAME_RATE_HZ)
    }
}

/// Stand-in teacher: causal resampling to the teacher rate, an 80-bin log-mel
/// frontend pooled to 12.5 Hz and a frozen random projection.
#[derive(Clone, Debug)]
pub struct DeskTeacher {
    dim: usize,
    hop: usize,
    resampler: Resampler,
    /// Teacher-rate samples per STFT hop.
    stft_hop: usize,
    win: usize,
    window: Vec<f32>,
    bank: Vec<f32>,
    /// `[TEACHER_MELS x dim]`.
    projection: Vec<f32>,
}

impl DeskTeacher {
    pub fn new(sample_rate_hz: u32, teacher_rate_hz: u32, dim: usize) -> Result<Self> {
        let hop = sample_rate_hz as f64 / TEACHER_FRAME_RATE_HZ;
        let hop_t = teacher_rate_hz as f64 / TEACHER_FRAME_RATE_HZ;
        if hop.fract() != 0.0 || hop_t.fract() != 0.0 || (hop_t as usize) % STFT_FRAMES_PER_FEATURE != 0 {
            return Err(Error::InvalidConfig(format!(
                "teacher needs sample rates on the 12.5 Hz grid, got {sample_rate_hz}/{teacher_rate_hz}"
            )));
        }
        let win = teacher_rate_hz as usize * TEACHER_WIN_MS / 1000;
        let n_fft = TEACHER_FFT.max(win.next_power_of_two());
        let mut rng = ChaCha8Rng::seed_from_u64(TEACHER_SEED);
        let normal = Normal::new(0.0, 1.0 / (TEACHER_MELS as f32).sqrt()).expect("finite std");
        let projection = (0..TEACHER_MELS * dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            dim,
            hop: hop as usize,
            resampler: Resampler::new(sample_rate_hz, teacher_rate_hz)?,
            stft_hop: hop_t as usize / STFT_FRAMES_PER_FEATURE,
            win,
            window: dsp::hann(win),
            bank: dsp::mel_filterbank(teacher_rate_hz, n_fft, TEACHER_MELS),
            projection,
        })
    }

    pub fn for_config(cfg: &ValidatedConfig) -> Result<Self> {
        Self::new(cfg.sample_rate_hz, cfg.teacher_sample_rate_hz, cfg.semantic_dim)
    }

    fn n_fft(&self) -> usize {
        self.bank.len() / TEACHER_MELS * 2 - 2
    }

    /// Log-mel of the STFT frame ending at teacher-rate sample `end`.
    fn log_mel(&self, y: &[f32], y_offset: usize, end: usize, out: &mut [f32]) {
        let n_fft = self.n_fft();
        let bins = n_fft / 2 + 1;
        let mut buf = vec![Complex32::new(0.0, 0.0); n_fft];
        for i in 0..self.win {
            // sample index end - win + i, zero before the signal start
            let idx = (end + i).checked_sub(self.win);
            let v = idx
                .and_then(|k| k.checked_sub(y_offset))
                .and_then(|k| y.get(k))
                .copied()
                .unwrap_or(0.0);
            buf[i] = Complex32::new(v * self.window[i], 0.0);
        }
        dsp::fft_plan(n_fft, false).process(&mut buf);
        let mag: Vec<f32> = buf[..bins].iter().map(|c| c.norm()).collect();
        let mel = kernels::matmul(&mag, 1, bins, &self.bank, TEACHER_MELS);
        for (o, m) in out.iter_mut().zip(mel) {
            *o = ((m + 1e-5).ln() + LOGMEL_SHIFT) * LOGMEL_SCALE;
        }
    }
}

impl SemanticTeacher for DeskTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn hop(&self) -> usize {
        self.hop
    }

    fn frames(&self, pcm: &[f32], start: usize, end: usize) -> Vec<f32> {
        if end <= start {
            return Vec::new();
        }
        let hop_t = self.stft_hop * STFT_FRAMES_PER_FEATURE;
        let lo = (start * hop_t).saturating_sub(self.win);
        let hi = end * hop_t;
        let y = self.resampler.range(pcm, lo, hi);
        let mut out = Vec::with_capacity((end - start) * self.dim);
        let mut pooled = vec![0.0f32; TEACHER_MELS];
        let mut lm = vec![0.0f32; TEACHER_MELS];
        for j in start..end {
            pooled.fill(0.0);
            for f in 0..STFT_FRAMES_PER_FEATURE {
                let stft_end = (j * STFT_FRAMES_PER_FEATURE + f + 1) * self.stft_hop;
                self.log_mel(&y, lo, stft_end, &mut lm);
                for (p, v) in pooled.iter_mut().zip(&lm) {
                    *p += v / STFT_FRAMES_PER_FEATURE as f32;
                }
            }
            out.extend(kernels::matmul(&pooled, 1, TEACHER_MELS, &self.projection, self.dim));
        }
        out
    }

    fn param_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in self.projection.iter().chain(&self.bank).chain(&self.window) {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Averages groups of `factor` consecutive frames; a trailing partial group
/// is dropped.
pub fn pool_frames(x: &LatentSequence, factor: usize) -> LatentSequence {
    if factor <= 1 {
        return x.clone();
    }
    let d = x.dim;
    let frames = x.frames / factor;
    let mut out = vec![0.0f32; frames * d];
    for f in 0..frames {
        for g in 0..factor {
            for (o, v) in out[f * d..(f + 1) * d].iter_mut().zip(x.frame(f * factor + g)) {
                *o += v;
            }
        }
        for o in &mut out[f * d..(f + 1) * d] {
            *o /= factor as f32;
        }
    }
    LatentSequence::new(out, d, x.frame_rate_hz / factor as f64)
}

// -------------------------------------------------------------------------
// Teacher feature files

const FEATURE_HEADER_BYTES: usize = 8;

/// Writes a feature matrix: `u32 frames, u32 dim`, then row-major f32, all
/// little-endian.
pub fn write_features(path: &Path, x: &LatentSequence) -> Result<()> {
    let mut bytes = Vec::with_capacity(FEATURE_HEADER_BYTES + 4 * x.data.len());
    bytes.extend_from_slice(&(x.frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(x.dim as u32).to_le_bytes());
    for v in &x.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<LatentSequence> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < FEATURE_HEADER_BYTES {
        return Err(Error::TruncatedPayload {
            expected: FEATURE_HEADER_BYTES,
            found: bytes.len(),
        });
    }
    let frames = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = FEATURE_HEADER_BYTES + 4 * frames * dim;
    if bytes.len() != expected || dim == 0 {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[FEATURE_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(LatentSequence::new(data, dim, TEACHER_FRAME_RATE_HZ))
}

// -------------------------------------------------------------------------
// Semantic quantizer

/// Nearest semantic codeword per frame.
pub fn semantic_quantize(teacher_out: &LatentSequence, codebook: &Codebook) -> Result<(Vec<usize>, LatentSequence)> {
    teacher_out.expect_dim(codebook.dim)?;
    let mut tokens = Vec::with_capacity(teacher_out.frames);
    let mut data = Vec::with_capacity(teacher_out.data.len());
    for f in 0..teacher_out.frames {
        let (k, q) = vq_nearest(codebook, teacher_out.frame(f));
        tokens.push(k);
        data.extend(q);
    }
    Ok((tokens, LatentSequence::new(data, teacher_out.dim, teacher_out.frame_rate_hz)))
}

/// Mean over frames and dims of `(s_q - teacher)^2`.
pub fn semantic_recon_loss(s_q: &LatentSequence, teacher_out: &LatentSequence) -> Result<f64> {
    if (s_q.frames, s_q.dim) != (teacher_out.frames, teacher_out.dim) {
        return Err(Error::ShapeMismatch {
            left: vec![s_q.frames, s_q.dim],
            right: vec![teacher_out.frames, teacher_out.dim],
        });
    }
    let n = s_q.data.len().max(1);
    Ok(s_q
        .data
        .iter()
        .zip(&teacher_out.data)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / n as f64)
}

// -------------------------------------------------------------------------
// Adapter-1

/// Map from semantic features to the acoustic hidden space.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    /// Learned affine map `s . W + b`.
    Learned { weight: Tensor, bias: Tensor },
    /// Fixed map: keeps the first `min(semantic_dim, hidden_dim)` features and
    /// zero-pads the rest.
    Fixed { matrix: Tensor },
}

pub const ADAPTER_WEIGHT: &str = "adapter.weight";
pub const ADAPTER_BIAS: &str = "adapter.bias";

pub fn adapter_specs(cfg: &ValidatedConfig) -> Vec<ParamSpec> {
    if !cfg.semantic_branch || !cfg.learned_adapter {
        return Vec::new();
    }
    let std = 1.0 / (cfg.semantic_dim as f32).sqrt();
    vec![
        ParamSpec::new(ADAPTER_WEIGHT, vec![cfg.semantic_dim, cfg.hidden_dim], Init::Normal(std)),
        ParamSpec::new(ADAPTER_BIAS, vec![cfg.hidden_dim], Init::Zeros),
    ]
}

/// Identity on the leading features, zero elsewhere.
pub fn slicing_matrix(semantic_dim: usize, hidden_dim: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![semantic_dim, hidden_dim]);
    for i in 0..semantic_dim.min(hidden_dim) {
        m.data_mut()[i * hidden_dim + i] = 1.0;
    }
    m
}

impl Adapter {
    pub fn from_params(cfg: &ValidatedConfig, params: &ParamStore) -> Result<Self> {
        Ok(if cfg.learned_adapter {
            Adapter::Learned {
                weight: params.get(ADAPTER_WEIGHT)?.clone(),
                bias: params.get(ADAPTER_BIAS)?.clone(),
            }
        } else {
            Adapter::Fixed {
                matrix: slicing_matrix(cfg.semantic_dim, cfg.hidden_dim),
            }
        })
    }

    pub fn zero(semantic_dim: usize, hidden_dim: usize) -> Self {
        Adapter::Learned {
            weight: Tensor::zeros(vec![semantic_dim, hidden_dim]),
            bias: Tensor::zeros(vec![hidden_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Adapter::Learned { weight, .. } => weight.rows(),
            Adapter::Fixed { matrix } => matrix.rows(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Adapter::Learned { weight, .. } => weight.cols(),
            Adapter::Fixed { matrix } => matrix.cols(),
        }
    }

    /// Applies the map to `rows` (`[n x in_dim]`).
    pub fn apply_rows(&self, rows: &[f32]) -> Vec<f32> {
        let (i, o) = (self.in_dim(), self.out_dim());
        let n = rows.len() / i;
        match self {
            Adapter::Learned { weight, bias } => {
                let mut y = kernels::matmul(rows, n, i, weight.data(), o);
                kernels::add_row_bias(&mut y, bias.data());
                y
            }
            Adapter::Fixed { matrix } => kernels::matmul(rows, n, i, matrix.data(), o),
        }
    }

    pub fn apply(&self, s_q: &LatentSequence) -> Result<LatentSequence> {
        s_q.expect_dim(self.in_dim())?;
        Ok(LatentSequence::new(self.apply_rows(&s_q.data), self.out_dim(), s_q.frame_rate_hz))
    }

    /// Differentiable form. Learned parameters are bound under their
    /// checkpoint names.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, s_q: Var) -> Var {
        match self {
            Adapter::Learned { .. } => {
                let w = p.var(tape, ADAPTER_WEIGHT);
                let b = p.var(tape, ADAPTER_BIAS);
                tape.linear(s_q, w, Some(b))
            }
            Adapter::Fixed { matrix } => {
                let m = tape.constant(matrix.clone());
                tape.matmul(s_q, m)
            }
        }
    }
}

/// Truncates both sequences to the shorter one; more than one frame apart is
/// an error.
pub fn align_frames(a: &LatentSequence, b: &LatentSequence) -> Result<(LatentSequence, LatentSequence)> {
    if a.frames.abs_diff(b.frames) > 1 {
        return Err(Error::FrameMisalignment {
            left: a.frames,
            right: b.frames,
        });
    }
    let n = a.frames.min(b.frames);
    Ok((a.truncated(n), b.truncated(n)))
}

/// `acoustic_hidden - Adapter(s_q)`.
pub fn decouple_subtract(acoustic_hidden: &LatentSequence, s_q: &LatentSequence, adapter: &Adapter) -> Result<LatentSequence> {
    let (a, s) = align_frames(acoustic_hidden, s_q)?;
    let s_a = adapter.apply(&s)?;
    a.expect_dim(s_a.dim)?;
    let data = a.data.iter().zip(&s_a.data).map(|(x, y)| x - y).collect();
    Ok(LatentSequence::new(data, a.dim, a.frame_rate_hz))
}

/// `a_q + Adapter(s_q)`: the decoder-side transformer input.
pub fn decouple_recombine(a_q: &LatentSequence, s_q: &LatentSequence, adapter: &Adapter) -> Result<LatentSequence> {
    let (a, s) = align_frames(a_q, s_q)?;
    let s_a = adapter.apply(&s)?;
    a.expect_dim(s_a.dim)?;
    let data = a.data.iter().zip(&s_a.data).map(|(x, y)| x + y).collect();
    Ok(LatentSequence::new(data, a.dim, a.frame_rate_hz))
}

/// Short description of the branch wiring selected by the ablation switches.
pub fn wiring_tag(cfg: &ValidatedConfig) -> String {
    let semantic = if cfg.semantic_branch { "on" } else { "off" };
    let adapter = match (cfg.semantic_branch, cfg.learned_adapter) {
        (false, _) => "none",
        (true, true) => "learned",
        (true, false) => "slice",
    };
    let sg = if cfg.self_guidance { "on" } else { "off" };
    format!("semantic={semantic} adapter={adapter} self_guidance={sg}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;
    use rand::Rng;

    fn rand_seq(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> LatentSequence {
        LatentSequence::new((0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), dim, 12.5)
    }

    fn harmonic(n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let t = i as f32 / 24_000.0;
                0.3 * (2.0 * std::f32::consts::PI * 220.0 * t).sin() + 0.2 * (2.0 * std::f32::consts::PI * 660.0 * t).sin()
            })
            .collect()
    }

    #[test]
    fn teacher_frame_count_and_determinism() {
        let t = DeskTeacher::new(24_000, 16_000, 16).unwrap();
        assert_eq!(t.hop(), 1920);
        let x = harmonic(24_000);
        let f = t.features(&x);
        assert_eq!(f.frames, 12);
        assert_eq!(f.dim, 16);
        assert!(f.is_finite());
        assert_eq!(f, t.features(&x));
        assert_eq!(t.param_hash(), DeskTeacher::new(24_000, 16_000, 16).unwrap().param_hash());
    }

    #[test]
    fn teacher_is_causal_and_chunk_independent() {
        let t = DeskTeacher::new(24_000, 16_000, 8).unwrap();
        let x = harmonic(1920 * 6);
        let full = t.features(&x);
        // a frame computed from just its prefix equals the batch frame
        for j in 0..6 {
            let alone = t.frames(&x[..(j + 1) * 1920], j, j + 1);
            assert_eq!(alone, full.frame(j));
        }
        let mut y = x.clone();
        for v in &mut y[1920 * 3..] {
            *v = 0.0;
        }
        let pert = t.features(&y);
        assert_eq!(pert.data[..3 * 8], full.data[..3 * 8]);
    }

    #[test]
    fn pooling_halves_rate() {
        let x = LatentSequence::new(vec![1.0, 3.0, 5.0, 7.0, 9.0], 1, 12.5);
        let p = pool_frames(&x, 2);
        assert_eq!(p.data, vec![2.0, 6.0]);
        assert_eq!(p.frame_rate_hz, 6.25);
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.feat");
        let x = LatentSequence::new(vec![0.5, -1.25, 3.0, 1e-7, 2.0, 9.0], 3, 12.5);
        write_features(&path, &x).unwrap();
        assert_eq!(read_features(&path).unwrap(), x);
        std::fs::write(&path, [1, 0, 0, 0, 2, 0, 0, 0, 0]).unwrap();
        assert!(matches!(read_features(&path), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn semantic_quantize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb_vecs: Vec<f64> = (0..8 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::from_vectors(4, cb_vecs.clone(), 0.99, 1e-5);
        let word: Vec<f32> = cb_vecs[12..16].iter().map(|&v| v as f32).collect();
        let (tok, s_q) = semantic_quantize(&LatentSequence::new(word.clone(), 4, 12.5), &cb).unwrap();
        assert_eq!(tok, vec![3]);
        assert_eq!(s_q.data, word);
        let (tok, _) = semantic_quantize(&LatentSequence::zeros(0, 4, 12.5), &cb).unwrap();
        assert!(tok.is_empty());
        assert!(matches!(
            semantic_quantize(&LatentSequence::zeros(1, 3, 12.5), &cb),
            Err(Error::DimMismatch { .. })
        ));
        // brute force over 200 frames
        let x = rand_seq(&mut rng, 200, 4);
        let (tok, _) = semantic_quantize(&x, &cb).unwrap();
        for (f, &k) in tok.iter().enumerate() {
            let d = |c: usize| -> f64 { (0..4).map(|i| (x.frame(f)[i] as f64 - cb_vecs[c * 4 + i]).powi(2)).sum() };
            assert!((0..8).all(|c| d(k) <= d(c)));
        }
    }

    #[test]
    fn recon_loss_convention() {
        let a = LatentSequence::zeros(1, 4, 12.5);
        let mut b = a.clone();
        b.data[2] = 1.0;
        assert_eq!(semantic_recon_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(semantic_recon_loss(&a, &b).unwrap(), 0.25);
        assert!(matches!(
            semantic_recon_loss(&a, &LatentSequence::zeros(2, 4, 12.5)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn decoupling_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_seq(&mut rng, 5, 6);
        let s = rand_seq(&mut rng, 5, 4);
        let zero = Adapter::zero(4, 6);
        assert_eq!(decouple_subtract(&a, &s, &zero).unwrap(), a);
        let learned = Adapter::Learned {
            weight: Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            bias: Tensor::new(vec![6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        };
        let s_a = learned.apply(&s).unwrap();
        let r = decouple_subtract(&s_a, &s, &learned).unwrap();
        assert!(r.data.iter().all(|&v| v == 0.0));
        let round = decouple_recombine(&decouple_subtract(&a, &s, &learned).unwrap(), &s, &learned).unwrap();
        assert!(round.max_abs_diff(&a) <= 1e-6);
        let only_sem = decouple_recombine(&LatentSequence::zeros(5, 6, 12.5), &s, &learned).unwrap();
        assert_eq!(only_sem, s_a);
        let fixed = Adapter::Fixed {
            matrix: slicing_matrix(4, 6),
        };
        let back = decouple_recombine(&a, &LatentSequence::zeros(5, 4, 12.5), &fixed).unwrap();
        assert_eq!(back, a);
        assert!(matches!(
            decouple_subtract(&a, &rand_seq(&mut rng, 3, 4), &learned),
            Err(Error::FrameMisalignment { .. })
        ));
        let short = decouple_subtract(&a, &rand_seq(&mut rng, 4, 4), &learned).unwrap();
        assert_eq!(short.frames, 4);
    }

    #[test]
    fn slicing_map_truncates_or_pads() {
        let s = LatentSequence::new(vec![1.0, 2.0, 3.0], 3, 12.5);
        let wide = Adapter::Fixed {
            matrix: slicing_matrix(3, 5),
        };
        assert_eq!(wide.apply(&s).unwrap().data, vec![1.0, 2.0, 3.0, 0.0, 0.0]);
        let narrow = Adapter::Fixed {
            matrix: slicing_matrix(3, 2),
        };
        assert_eq!(narrow.apply(&s).unwrap().data, vec![1.0, 2.0]);
    }

    #[test]
    fn wiring_tags() {
        let mut cfg = CodecConfig::desk();
        assert_eq!(wiring_tag(&cfg.clone().validate().unwrap()), "semantic=on adapter=learned self_guidance=on");
        cfg.learned_adapter = false;
        cfg.self_guidance = false;
        assert_eq!(wiring_tag(&cfg.clone().validate().unwrap()), "semantic=on adapter=slice self_guidance=off");
        cfg.semantic_branch = false;
        assert_eq!(wiring_tag(&cfg.validate().unwrap()), "semantic=off adapter=none self_guidance=off");
    }
}
