//! Objective metrics: log-mel distance, mel-cepstral distance, codebook
//! utilization, token-LM perplexity and a reconstruction report over a WAV
//! directory.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::codec::Codec;
use crate::dsp;
use crate::error::{Error, Result};
use crate::nn::{init_from_specs, Bound, Init, ParamSpec, ParamStore, TransformerSpec};
use crate::sequence::PcmBuffer;
use crate::tensor::Tensor;
use crate::token_io::{wav_read, TokenMatrix};
use crate::train::{wav_files, AdamW, TrainConfig};

pub const MEL_WIN: usize = 1024;
pub const MEL_HOP: usize = 256;
pub const MEL_BINS: usize = 80;
pub const LOG_EPS: f64 = 1e-5;
pub const MCD_COEFFS: usize = 13;

fn truncated_pair<'a>(x: &'a PcmBuffer, y: &'a PcmBuffer) -> Result<(&'a [f32], &'a [f32])> {
    x.expect_rate(y.sample_rate_hz)?;
    let n = x.len().min(y.len());
    Ok((&x.samples[..n], &y.samples[..n]))
}

/// `[frames][bins]` natural-log mel spectrogram.
pub fn log_mel(x: &[f32], sample_rate: u32) -> Vec<Vec<f64>> {
    let (frames, mel) = dsp::mel_spectrogram(x, sample_rate, MEL_WIN, MEL_HOP, MEL_BINS);
    (0..frames)
        .map(|f| {
            mel[f * MEL_BINS..(f + 1) * MEL_BINS]
                .iter()
                .map(|&m| (m as f64 + LOG_EPS).ln())
                .collect()
        })
        .collect()
}

/// Mean absolute difference of log-mel spectrograms; lengths are truncated
/// to the shorter signal.
pub fn mel_distance(x: &PcmBuffer, y: &PcmBuffer) -> Result<f64> {
    let (a, b) = truncated_pair(x, y)?;
    let (ma, mb) = (log_mel(a, x.sample_rate_hz), log_mel(b, x.sample_rate_hz));
    let n = ma.len() * MEL_BINS;
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = ma
        .iter()
        .zip(&mb)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(u, v)| (u - v).abs()))
        .sum();
    Ok(s / n as f64)
}

/// Cepstral coefficients `c_0 ..= c_13` per frame, via orthonormal DCT-II of
/// the log-mel spectrogram.
pub fn mel_cepstra(x: &[f32], sample_rate: u32) -> Vec<Vec<f64>> {
    log_mel(x, sample_rate)
        .iter()
        .map(|row| dsp::dct2_ortho(row)[..=MCD_COEFFS].to_vec())
        .collect()
}

/// `(10 / ln 10) * sqrt(2 * sum_{i=1..13} (c_i - c'_i)^2)` averaged over
/// aligned frames; `c_0` is excluded.
pub fn mcd_from_cepstra(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let frames = a.len().min(b.len());
    if frames == 0 {
        return 0.0;
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let total: f64 = a[..frames]
        .iter()
        .zip(&b[..frames])
        .map(|(ca, cb)| {
            let d: f64 = (1..=MCD_COEFFS).map(|i| (ca[i] - cb[i]).powi(2)).sum();
            k * (2.0 * d).sqrt()
        })
        .sum();
    total / frames as f64
}

/// Frame-aligned mel-cepstral distance in dB.
pub fn mcd(x: &PcmBuffer, y: &PcmBuffer) -> Result<f64> {
    let (a, b) = truncated_pair(x, y)?;
    Ok(mcd_from_cepstra(&mel_cepstra(a, x.sample_rate_hz), &mel_cepstra(b, x.sample_rate_hz)))
}

// -------------------------------------------------------------------------
// Utilization

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtilizationReport {
    pub used: Vec<usize>,
    pub per_stage: Vec<f64>,
    pub aggregate: f64,
}

/// Distinct codes per stream over a corpus, divided by `k`. Inactive tokens
/// are ignored.
pub fn codebook_utilization(corpus: &[TokenMatrix], k: usize) -> Result<UtilizationReport> {
    let streams = corpus.iter().map(|m| m.streams).max().unwrap_or(0);
    let mut seen = vec![vec![false; k]; streams];
    for m in corpus {
        for f in 0..m.frames {
            for (s, v) in m.row(f).iter().enumerate() {
                if let Some(v) = *v {
                    let v = v as usize;
                    if v >= k {
                        return Err(Error::TokenOutOfRange {
                            value: v as u32,
                            limit: k as u32,
                        });
                    }
                    seen[s][v] = true;
                }
            }
        }
    }
    let used: Vec<usize> = seen.iter().map(|s| s.iter().filter(|&&b| b).count()).collect();
    let per_stage: Vec<f64> = used.iter().map(|&u| u as f64 / k as f64).collect();
    let aggregate = if per_stage.is_empty() {
        0.0
    } else {
        per_stage.iter().sum::<f64>() / per_stage.len() as f64
    };
    Ok(UtilizationReport {
        used,
        per_stage,
        aggregate,
    })
}

// -------------------------------------------------------------------------
// Token language model

#[derive(Clone, Debug, PartialEq)]
pub struct TokenLmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    /// Frames per training window and evaluation chunk.
    pub context: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TokenLmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 256,
            heads: 4,
            ff: 1024,
            context: 256,
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TokenLmConfig {
    /// Small enough for unit tests and quick comparisons.
    pub fn tiny() -> Self {
        Self {
            layers: 1,
            dim: 32,
            heads: 2,
            ff: 64,
            context: 64,
            steps: 300,
            batch: 4,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PplMode {
    Ppl0,
    PplMean8,
}

impl std::str::FromStr for PplMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppl0" => Ok(PplMode::Ppl0),
            "ppl8" | "ppl_mean_8" => Ok(PplMode::PplMean8),
            other => Err(Error::InvalidConfig(format!("unknown perplexity mode `{other}`"))),
        }
    }
}

pub const PPL_MEAN_STREAMS: usize = 8;

/// Decoder-only model over one token stream; index `vocab` is the
/// begin-of-sequence symbol.
pub struct TokenLm {
    cfg: TokenLmConfig,
    vocab: usize,
    tf: TransformerSpec,
    params: ParamStore,
}

impl TokenLm {
    pub fn new(cfg: TokenLmConfig, vocab: usize) -> Self {
        let tf = TransformerSpec {
            prefix: "lm".into(),
            dim: cfg.dim,
            layers: cfg.layers,
            heads: cfg.heads,
            ff: cfg.ff,
        };
        let mut specs = vec![ParamSpec::new("embed", vec![vocab + 1, cfg.dim], Init::Normal(1.0))];
        specs.extend(tf.specs());
        // a zero head starts at the uniform distribution
        specs.push(ParamSpec::new("head.weight", vec![cfg.dim, vocab], Init::Zeros));
        specs.push(ParamSpec::new("head.bias", vec![vocab], Init::Zeros));
        let params = init_from_specs(&specs, cfg.seed);
        Self {
            cfg,
            vocab,
            tf,
            params,
        }
    }

    /// Mean NLL of `targets`, each predicted from the token before it.
    fn nll(&self, tape: &mut Tape, p: &Bound, inputs: &[usize], targets: &[usize]) -> crate::autograd::Var {
        let table = p.var(tape, "embed");
        let x = tape.embedding(table, inputs);
        let h = self.tf.forward(tape, p, x);
        let w = p.var(tape, "head.weight");
        let b = p.var(tape, "head.bias");
        let logits = tape.linear(h, w, Some(b));
        tape.cross_entropy(logits, targets)
    }

    /// `(inputs, targets)` for `seq[start..start+len]`.
    fn window(&self, seq: &[usize], start: usize, len: usize) -> (Vec<usize>, Vec<usize>) {
        let targets = seq[start..start + len].to_vec();
        let mut inputs = Vec::with_capacity(len);
        inputs.push(if start == 0 { self.vocab } else { seq[start - 1] });
        inputs.extend_from_slice(&seq[start..start + len - 1]);
        (inputs, targets)
    }

    pub fn train(&mut self, corpus: &[Vec<usize>]) -> Result<()> {
        let seqs: Vec<&Vec<usize>> = corpus.iter().filter(|s| !s.is_empty()).collect();
        if seqs.is_empty() {
            return Err(Error::EmptyCorpus("training token corpus".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&self.params, &tc);
        for _ in 0..self.cfg.steps {
            let mut grads = std::collections::BTreeMap::new();
            for _ in 0..self.cfg.batch {
                let seq = seqs[rng.gen_range(0..seqs.len())];
                let len = self.cfg.context.min(seq.len());
                let start = rng.gen_range(0..=seq.len() - len);
                let (inputs, targets) = self.window(seq, start, len);
                let mut tape = Tape::new();
                let loss = self.nll(&mut tape, &Bound::trainable(&self.params), &inputs, &targets);
                let g = tape.backward(loss);
                for (name, t) in tape.bound_grads(&g) {
                    let scale = 1.0 / self.cfg.batch as f32;
                    let acc = grads.entry(name).or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
                    for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += scale * v;
                    }
                }
            }
            opt.step(&mut self.params, &grads, self.cfg.lr);
        }
        Ok(())
    }

    /// `exp(mean NLL)` over every token of `corpus`; each sequence is scored
    /// in consecutive chunks of `context` tokens.
    pub fn perplexity(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for seq in corpus {
            let mut start = 0;
            while start < seq.len() {
                let len = self.cfg.context.min(seq.len() - start);
                let (inputs, targets) = self.window(seq, start, len);
                let mut tape = Tape::new();
                let loss = self.nll(&mut tape, &Bound::frozen(&self.params), &inputs, &targets);
                total += tape.value(loss).item() as f64 * len as f64;
                count += len;
                start += len;
            }
        }
        if count == 0 {
            return Err(Error::EmptyCorpus("evaluation token corpus".into()));
        }
        Ok((total / count as f64).exp())
    }
}

fn stream_corpus(corpus: &[TokenMatrix], stream: usize, vocab: usize) -> Result<Vec<Vec<usize>>> {
    corpus
        .iter()
        .map(|m| {
            m.stream(stream)
                .into_iter()
                .flatten()
                .map(|v| {
                    let v = v as usize;
                    if v >= vocab {
                        Err(Error::TokenOutOfRange {
                            value: v as u32,
                            limit: vocab as u32,
                        })
                    } else {
                        Ok(v)
                    }
                })
                .collect()
        })
        .collect()
}

/// Perplexity of per-stream token LMs. `Ppl0` models the first stream;
/// `PplMean8` averages the perplexities of the first eight acoustic streams,
/// each modelled on its own history only.
pub fn token_ppl(train: &[TokenMatrix], eval: &[TokenMatrix], mode: PplMode, vocab: usize, lm: &TokenLmConfig) -> Result<f64> {
    if train.iter().all(|m| m.frames == 0) {
        return Err(Error::EmptyCorpus("training token corpus".into()));
    }
    if eval.iter().all(|m| m.frames == 0) {
        return Err(Error::EmptyCorpus("evaluation token corpus".into()));
    }
    let streams: Vec<usize> = match mode {
        PplMode::Ppl0 => vec![0],
        PplMode::PplMean8 => {
            let first = train.iter().chain(eval).find(|m| m.frames > 0).expect("non-empty corpus");
            let available = train
                .iter()
                .chain(eval)
                .map(TokenMatrix::acoustic_streams)
                .min()
                .unwrap_or(0);
            if available < PPL_MEAN_STREAMS {
                return Err(Error::InsufficientStreams {
                    needed: PPL_MEAN_STREAMS,
                    available,
                });
            }
            let off = usize::from(first.has_semantic);
            (off..off + PPL_MEAN_STREAMS).collect()
        }
    };
    let mut sum = 0.0;
    for &s in &streams {
        let mut model = TokenLm::new(lm.clone(), vocab);
        model.train(&stream_corpus(train, s, vocab)?)?;
        sum += model.perplexity(&stream_corpus(eval, s, vocab)?)?;
    }
    Ok(sum / streams.len() as f64)
}

// -------------------------------------------------------------------------
// Reconstruction report

pub struct Reconstruction {
    pub pcm: PcmBuffer,
    pub tokens: Option<TokenMatrix>,
    pub bitrate_bps: f64,
}

/// Anything that maps audio to a reconstruction.
pub trait Reconstructor {
    fn sample_rate(&self) -> u32;
    fn reconstruct(&self, pcm: &PcmBuffer) -> Result<Reconstruction>;
    /// Codebook size for utilization of the acoustic streams.
    fn codebook_size(&self) -> usize;
}

impl Reconstructor for Codec {
    fn sample_rate(&self) -> u32 {
        self.cfg.sample_rate_hz
    }

    fn reconstruct(&self, pcm: &PcmBuffer) -> Result<Reconstruction> {
        let tokens = self.encode(pcm)?;
        let out = self.decode(&tokens)?;
        Ok(Reconstruction {
            pcm: out,
            bitrate_bps: self.cfg.nominal_bitrate_bps(tokens.streams),
            tokens: Some(tokens),
        })
    }

    fn codebook_size(&self) -> usize {
        self.cfg.acoustic_codebook_size
    }
}

/// Returns its input unchanged.
pub struct IdentityCodec {
    pub sample_rate: u32,
}

impl Reconstructor for IdentityCodec {
    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn reconstruct(&self, pcm: &PcmBuffer) -> Result<Reconstruction> {
        Ok(Reconstruction {
            pcm: pcm.clone(),
            tokens: None,
            bitrate_bps: 0.0,
        })
    }

    fn codebook_size(&self) -> usize {
        1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileReport {
    pub file: String,
    pub mel_distance: f64,
    pub mcd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utilization: Option<f64>,
    pub bitrate_bps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub files: usize,
    pub mel_distance: f64,
    pub mcd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utilization: Option<f64>,
    pub bitrate_bps: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReconReport {
    pub files: Vec<FileReport>,
    pub aggregate: Option<Aggregate>,
    pub skipped: Vec<String>,
}

impl ReconReport {
    fn finish(mut self) -> Self {
        let n = self.files.len();
        if n > 0 {
            let mean = |f: &dyn Fn(&FileReport) -> f64| self.files.iter().map(f).sum::<f64>() / n as f64;
            let util: Vec<f64> = self.files.iter().filter_map(|f| f.utilization).collect();
            self.aggregate = Some(Aggregate {
                files: n,
                mel_distance: mean(&|f| f.mel_distance),
                mcd: mean(&|f| f.mcd),
                utilization: (!util.is_empty()).then(|| util.iter().sum::<f64>() / util.len() as f64),
                bitrate_bps: mean(&|f| f.bitrate_bps),
            });
        }
        self
    }

    /// One line per file followed by the aggregate.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let util = |u: Option<f64>| u.map_or("-".to_string(), |u| format!("{u:.4}"));
        for f in &self.files {
            out.push_str(&format!(
                "file={} mel_distance={:.6} mcd={:.6} utilization={} bitrate_bps={}\n",
                f.file,
                f.mel_distance,
                f.mcd,
                util(f.utilization),
                f.bitrate_bps
            ));
        }
        for s in &self.skipped {
            out.push_str(&format!("skipped={s}\n"));
        }
        if let Some(a) = &self.aggregate {
            out.push_str(&format!(
                "aggregate files={} mel_distance={:.6} mcd={:.6} utilization={} bitrate_bps={}\n",
                a.files,
                a.mel_distance,
                a.mcd,
                util(a.utilization),
                a.bitrate_bps
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Reconstructs every WAV file of `dir`; unreadable files are skipped with a
/// warning.
pub fn eval_recon(codec: &dyn Reconstructor, dir: &Path) -> Result<ReconReport> {
    let mut report = ReconReport::default();
    for path in wav_files(dir)? {
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let pcm = match wav_read(&path).and_then(|p| p.expect_rate(codec.sample_rate()).map(|_| p)) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.skipped.push(name);
                continue;
            }
        };
        let rec = codec.reconstruct(&pcm)?;
        let utilization = match &rec.tokens {
            Some(t) => {
                let off = usize::from(t.has_semantic);
                let acoustic: Vec<Option<u16>> = (0..t.frames).flat_map(|f| t.row(f)[off..].to_vec()).collect();
                let m = TokenMatrix::new(t.frames, t.streams - off, false, acoustic)?;
                Some(codebook_utilization(&[m], codec.codebook_size())?.aggregate)
            }
            None => None,
        };
        report.files.push(FileReport {
            file: name,
            mel_distance: mel_distance(&pcm, &rec.pcm)?,
            mcd: mcd(&pcm, &rec.pcm)?,
            utilization,
            bitrate_bps: rec.bitrate_bps,
        });
    }
    Ok(report.finish())
}
