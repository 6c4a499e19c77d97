//! The full codec: encoder, semantic branch, acoustic RVQ, decoder, plus
//! batch and streaming paths for latents and tokens.
//!
//! Signal flow per frame:
//!
//! ```text
//! pcm -> SEANet encoder -> transformer -> a
//! teacher(pcm) -> semantic VQ -> s_q -> adapter -> s_a
//! z_e = proj_in(a - s_a) -> RVQ -> z_q
//! proj_out(z_q) + s_a -> transformer -> h_q -> SEANet decoder -> pcm
//! ```
//!
//! The streaming and tape paths share kernels and summation order, so tokens
//! and waveforms are identical however the input is chunked.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::kernels;
use crate::losses::self_guidance_loss;
use crate::nn::{
    conv_stack_forward, conv_stack_specs, init_from_specs, process_stack, seanet_decoder, seanet_encoder, Bound, Init,
    Layer, LayerState, ParamSpec, ParamStore, TransformerSpec, TransformerState,
};
use crate::quantize::{Codebook, QuantResult, RvqStack};
use crate::semantic::{adapter_specs, pool_frames, Adapter, DeskTeacher, SemanticTeacher};
use crate::sequence::{LatentSequence, PcmBuffer};
use crate::tensor::Tensor;
use crate::token_io::{StreamFormat, TokenFileHeader, TokenMatrix};

pub const PROJ_IN_WEIGHT: &str = "proj_in.weight";
pub const PROJ_IN_BIAS: &str = "proj_in.bias";
pub const PROJ_OUT_WEIGHT: &str = "proj_out.weight";
pub const PROJ_OUT_BIAS: &str = "proj_out.bias";
pub const ENC_TRANSFORMER: &str = "enc_tf";
pub const DEC_TRANSFORMER: &str = "dec_tf";

const CODEBOOK_SEED_SALT: u64 = 0xC0DE_B00C;

pub type SharedTeacher = Arc<dyn SemanticTeacher + Send + Sync>;

/// Which transformer a [`transformer_pass`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

fn transformer(cfg: &ValidatedConfig, side: Side) -> TransformerSpec {
    match side {
        Side::Encoder => TransformerSpec::new(ENC_TRANSFORMER, cfg),
        Side::Decoder => TransformerSpec::new(DEC_TRANSFORMER, cfg),
    }
}

fn projection_specs(cfg: &ValidatedConfig) -> Vec<ParamSpec> {
    let (h, c) = (cfg.hidden_dim, cfg.acoustic_code_dim);
    vec![
        ParamSpec::new(PROJ_IN_WEIGHT, vec![h, c], Init::Normal(1.0 / (h as f32).sqrt())),
        ParamSpec::new(PROJ_IN_BIAS, vec![c], Init::Zeros),
        ParamSpec::new(PROJ_OUT_WEIGHT, vec![c, h], Init::Normal(1.0 / (c as f32).sqrt())),
        ParamSpec::new(PROJ_OUT_BIAS, vec![h], Init::Zeros),
    ]
}

/// Every generator parameter with its initializer, in initialization order.
pub fn param_specs(cfg: &ValidatedConfig) -> Vec<ParamSpec> {
    let mut specs = conv_stack_specs(&seanet_encoder(cfg));
    specs.extend(transformer(cfg, Side::Encoder).specs());
    specs.extend(projection_specs(cfg));
    specs.extend(adapter_specs(cfg));
    specs.extend(transformer(cfg, Side::Decoder).specs());
    specs.extend(conv_stack_specs(&seanet_decoder(cfg)));
    specs
}

/// Deterministic generator initialization: uniform fan-in scaling for
/// convolutions, scaled normals for projections.
pub fn init_params(cfg: &ValidatedConfig, seed: u64) -> ParamStore {
    init_from_specs(&param_specs(cfg), seed)
}

/// Runs one transformer over a whole sequence.
pub fn transformer_pass(cfg: &ValidatedConfig, params: &ParamStore, x: &LatentSequence, side: Side) -> Result<LatentSequence> {
    x.expect_dim(cfg.hidden_dim)?;
    let mut state = TransformerState::new(transformer(cfg, side));
    Ok(LatentSequence::new(state.process(params, &x.data), cfg.hidden_dim, x.frame_rate_hz))
}

fn linear_rows(rows: &[f32], inner: usize, w: &Tensor, b: &Tensor) -> Vec<f32> {
    let n = rows.len() / inner;
    let mut y = kernels::matmul(rows, n, inner, w.data(), w.cols());
    kernels::add_row_bias(&mut y, b.data());
    y
}

// -------------------------------------------------------------------------
// Latent-level streaming

/// Causal buffers of the encoder convolutions and transformer.
pub struct EncoderState {
    sample_rate: u32,
    hidden: usize,
    frame_rate_hz: f64,
    convs: Vec<LayerState>,
    tf: TransformerState,
    frames_emitted: usize,
}

impl EncoderState {
    pub fn new(cfg: &ValidatedConfig) -> Self {
        Self {
            sample_rate: cfg.sample_rate_hz,
            hidden: cfg.hidden_dim,
            frame_rate_hz: cfg.frame_rate_hz,
            convs: LayerState::for_stack(&seanet_encoder(cfg)),
            tf: TransformerState::new(transformer(cfg, Side::Encoder)),
            frames_emitted: 0,
        }
    }

    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    /// Consumes samples and returns every newly completed frame.
    pub fn encode(&mut self, params: &ParamStore, pcm: &PcmBuffer) -> Result<LatentSequence> {
        pcm.expect_rate(self.sample_rate)?;
        Ok(self.encode_samples(params, &pcm.samples))
    }

    fn encode_samples(&mut self, params: &ParamStore, samples: &[f32]) -> LatentSequence {
        let rows = process_stack(&mut self.convs, params, samples.to_vec());
        let out = if rows.is_empty() { rows } else { self.tf.process(params, &rows) };
        let seq = LatentSequence::new(out, self.hidden, self.frame_rate_hz);
        self.frames_emitted += seq.frames;
        seq
    }
}

/// Causal buffers of the decoder transformer and convolutions.
pub struct DecoderState {
    sample_rate: u32,
    hidden: usize,
    tf: TransformerState,
    convs: Vec<LayerState>,
    frames_consumed: usize,
}

impl DecoderState {
    pub fn new(cfg: &ValidatedConfig) -> Self {
        Self {
            sample_rate: cfg.sample_rate_hz,
            hidden: cfg.hidden_dim,
            tf: TransformerState::new(transformer(cfg, Side::Decoder)),
            convs: LayerState::for_stack(&seanet_decoder(cfg)),
            frames_consumed: 0,
        }
    }

    pub fn frames_consumed(&self) -> usize {
        self.frames_consumed
    }

    /// Emits `hop` samples per input frame.
    pub fn decode(&mut self, params: &ParamStore, latents: &LatentSequence) -> Result<PcmBuffer> {
        latents.expect_dim(self.hidden)?;
        Ok(PcmBuffer::new(self.decode_rows(params, &latents.data), self.sample_rate))
    }

    fn decode_rows(&mut self, params: &ParamStore, rows: &[f32]) -> Vec<f32> {
        if rows.is_empty() {
            return Vec::new();
        }
        self.frames_consumed += rows.len() / self.hidden;
        let h = self.tf.process(params, rows);
        process_stack(&mut self.convs, params, h)
    }
}

// -------------------------------------------------------------------------
// Codec

#[derive(Clone)]
pub struct Codec {
    pub cfg: ValidatedConfig,
    pub params: ParamStore,
    pub semantic_vq: Option<Codebook>,
    pub rvq: RvqStack,
    teacher: Option<SharedTeacher>,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
}

/// Tape outputs of one training forward pass.
pub struct TrainForward {
    /// Zero-padded input, flat.
    pub x: Var,
    /// Reconstruction, same length as `x`.
    pub x_hat: Var,
    pub z_e: Var,
    /// Acoustic commitment, `mean_t ||z_e - q||^2`.
    pub commit: Var,
    pub self_guidance: Option<Var>,
    /// Semantic reconstruction and commitment; the teacher is frozen and the
    /// codebook is EMA-maintained, so these carry no gradient.
    pub se_recon: Option<f64>,
    pub semantic_commit: Option<f64>,
    pub quant: QuantResult,
    pub semantic_tokens: Option<Vec<usize>>,
    /// Pooled teacher features, one row per frame.
    pub teacher: Option<LatentSequence>,
}

impl Codec {
    pub fn new(cfg: ValidatedConfig) -> Result<Self> {
        let params = init_params(&cfg, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ CODEBOOK_SEED_SALT);
        let semantic_vq = cfg.semantic_branch.then(|| {
            Codebook::random(cfg.semantic_codebook_size, cfg.semantic_dim, cfg.ema_decay, cfg.ema_epsilon, &mut rng)
        });
        let rvq = RvqStack::random(
            cfg.acoustic_stages,
            cfg.acoustic_codebook_size,
            cfg.acoustic_code_dim,
            cfg.ema_decay,
            cfg.ema_epsilon,
            &mut rng,
        );
        Self::from_parts(cfg, params, semantic_vq, rvq)
    }

    /// Assembles a codec from stored state, checking every shape.
    pub fn from_parts(cfg: ValidatedConfig, params: ParamStore, semantic_vq: Option<Codebook>, rvq: RvqStack) -> Result<Self> {
        for spec in param_specs(&cfg) {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    left: spec.shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if rvq.len() != cfg.acoustic_stages || rvq.dim != cfg.acoustic_code_dim {
            return Err(Error::InvalidStageCount {
                requested: rvq.len(),
                stages: cfg.acoustic_stages,
            });
        }
        if semantic_vq.is_some() != cfg.semantic_branch {
            return Err(Error::InvalidConfig("semantic codebook presence disagrees with semantic_branch".into()));
        }
        let teacher: Option<SharedTeacher> = if cfg.semantic_branch {
            Some(Arc::new(DeskTeacher::for_config(&cfg)?))
        } else {
            None
        };
        Ok(Self {
            encoder: seanet_encoder(&cfg),
            decoder: seanet_decoder(&cfg),
            cfg,
            params,
            semantic_vq,
            rvq,
            teacher,
        })
    }

    /// Replaces the semantic teacher.
    pub fn with_teacher(mut self, teacher: SharedTeacher) -> Result<Self> {
        if teacher.dim() != self.cfg.semantic_dim {
            return Err(Error::DimMismatch {
                expected: self.cfg.semantic_dim,
                actual: teacher.dim(),
            });
        }
        self.teacher = Some(teacher);
        Ok(self)
    }

    pub fn teacher(&self) -> Option<&SharedTeacher> {
        self.teacher.as_ref()
    }

    pub fn adapter(&self) -> Result<Option<Adapter>> {
        if !self.cfg.semantic_branch {
            return Ok(None);
        }
        Adapter::from_params(&self.cfg, &self.params).map(Some)
    }

    pub fn stream_format(&self) -> StreamFormat {
        StreamFormat {
            sample_rate: self.cfg.sample_rate_hz,
            hop: self.cfg.hop as u32,
            bits_per_code: self.cfg.bits_per_code as u8,
        }
    }

    /// A token file is decodable only if its stream layout matches this codec.
    pub fn check_header(&self, h: &TokenFileHeader) -> Result<()> {
        let f = self.stream_format();
        let mine = (f.sample_rate, f.hop, self.cfg.total_streams(), f.bits_per_code, self.cfg.semantic_branch);
        let theirs = (h.sample_rate, h.hop, h.streams as usize, h.bits_per_code, h.has_semantic);
        if mine != theirs {
            return Err(Error::ConfigHashMismatch(format!(
                "token file has (rate, hop, streams, bits, semantic) = {theirs:?}, checkpoint expects {mine:?}"
            )));
        }
        Ok(())
    }

    /// Teacher features pooled to the codec frame rate, one row per complete
    /// frame of `pcm`.
    pub fn teacher_features(&self, pcm: &[f32]) -> Option<LatentSequence> {
        let teacher = self.teacher.as_ref()?;
        Some(pool_frames(&teacher.features(pcm), self.cfg.teacher_frames_per_frame))
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn set_training(&mut self, on: bool) {
        self.rvq.set_training(on);
        if let Some(cb) = &mut self.semantic_vq {
            cb.set_training(on);
        }
    }

    /// Continuous latents `z_e` and pooled teacher features of a padded clip,
    /// via the streaming path.
    pub fn continuous_latents(&self, pcm: &[f32]) -> Result<(LatentSequence, Option<LatentSequence>)> {
        let padded = PcmBuffer::new(pcm.to_vec(), self.cfg.sample_rate_hz).padded_to(self.cfg.hop);
        let mut enc = EncoderState::new(&self.cfg);
        let a = enc.encode_samples(&self.params, &padded.samples);
        let teacher = self.teacher_features(&padded.samples);
        let r = match (&teacher, self.adapter()?) {
            (Some(t), Some(adapter)) => {
                let sem = self.semantic_vq.as_ref().expect("semantic branch has a codebook");
                let (_, s_q) = crate::semantic::semantic_quantize(t, sem)?;
                crate::semantic::decouple_subtract(&a, &s_q, &adapter)?
            }
            _ => a,
        };
        let z = linear_rows(&r.data, self.cfg.hidden_dim, self.params.w(PROJ_IN_WEIGHT), self.params.w(PROJ_IN_BIAS));
        Ok((LatentSequence::new(z, self.cfg.acoustic_code_dim, self.cfg.frame_rate_hz), teacher))
    }

    /// Seeds uninitialized codebooks from the first batch they see.
    pub fn init_codebooks(&mut self, clips: &[&[f32]]) -> Result<()> {
        let sem_pending = self.semantic_vq.as_ref().is_some_and(|c| !c.initialized);
        if sem_pending {
            let mut rows = Vec::new();
            for clip in clips {
                if let Some(t) = self.teacher_features(&PcmBuffer::new(clip.to_vec(), self.cfg.sample_rate_hz).padded_to(self.cfg.hop).samples) {
                    rows.extend(t.data.iter().map(|&v| v as f64));
                }
            }
            if !rows.is_empty() {
                self.semantic_vq.as_mut().unwrap().init_from_data(&rows);
            }
        }
        if self.rvq.stages.iter().all(|s| s.initialized) {
            return Ok(());
        }
        let mut all = LatentSequence::zeros(0, self.cfg.acoustic_code_dim, self.cfg.frame_rate_hz);
        for clip in clips {
            let (z, _) = self.continuous_latents(clip)?;
            all.data.extend_from_slice(&z.data);
            all.frames += z.frames;
        }
        let n = self.rvq.len();
        self.rvq.ensure_initialized(&all, n)
    }

    /// Differentiable forward pass of one clip with `n_active` acoustic
    /// stages. Pooled teacher features may be supplied to skip recomputation.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pcm: &[f32],
        teacher: Option<&LatentSequence>,
        n_active: usize,
    ) -> Result<TrainForward> {
        let cfg = &self.cfg;
        let padded = PcmBuffer::new(pcm.to_vec(), cfg.sample_rate_hz).padded_to(cfg.hop);
        let n = padded.len();
        let frames = n / cfg.hop;
        let x = tape.constant(Tensor::new(vec![n, 1], padded.samples.clone()));
        let h = conv_stack_forward(&self.encoder, tape, p, x);
        let a = transformer(cfg, Side::Encoder).forward(tape, p, h);

        let mut se_recon = None;
        let mut semantic_commit = None;
        let mut semantic_tokens = None;
        let mut teacher_rows = None;
        let s_a = match self.adapter()? {
            Some(adapter) => {
                let t = match teacher {
                    Some(t) => t.clone(),
                    None => self.teacher_features(&padded.samples).expect("semantic branch has a teacher"),
                };
                if t.frames != frames {
                    return Err(Error::FrameMisalignment {
                        left: frames,
                        right: t.frames,
                    });
                }
                let sem = self.semantic_vq.as_ref().expect("semantic branch has a codebook");
                let (tokens, s_q) = crate::semantic::semantic_quantize(&t, sem)?;
                se_recon = Some(crate::semantic::semantic_recon_loss(&s_q, &t)?);
                semantic_commit = Some(row_sq_dist(&t, &s_q));
                semantic_tokens = Some(tokens);
                teacher_rows = Some(t);
                let s_q = tape.constant(s_q.to_tensor());
                Some(adapter.forward(tape, p, s_q))
            }
            None => None,
        };

        let r = match s_a {
            Some(s_a) => tape.sub(a, s_a),
            None => a,
        };
        let w_in = p.var(tape, PROJ_IN_WEIGHT);
        let b_in = p.var(tape, PROJ_IN_BIAS);
        let z_e = tape.linear(r, w_in, Some(b_in));
        let z_val = LatentSequence::from_tensor(tape.value(z_e), cfg.frame_rate_hz);
        let quant = self.rvq.quantize(&z_val, n_active)?;
        let q = quant.quantized.to_tensor();
        let z_q = tape.straight_through(z_e, q.clone());
        let q_const = tape.constant(q);
        let commit = tape.row_sq_dist_mean(z_e, q_const);

        let w_out = p.var(tape, PROJ_OUT_WEIGHT);
        let b_out = p.var(tape, PROJ_OUT_BIAS);
        let dec_tf = transformer(cfg, Side::Decoder);
        let a_q = tape.linear(z_q, w_out, Some(b_out));
        let dec_in = match s_a {
            Some(s_a) => tape.add(a_q, s_a),
            None => a_q,
        };
        let h_q = dec_tf.forward(tape, p, dec_in);

        let self_guidance = if cfg.self_guidance {
            let a_e = tape.linear(z_e, w_out, Some(b_out));
            let dec_in_e = match s_a {
                Some(s_a) => tape.add(a_e, s_a),
                None => a_e,
            };
            let h_e = dec_tf.forward(tape, p, dec_in_e);
            Some(self_guidance_loss(tape, h_e, h_q))
        } else {
            None
        };

        let y = conv_stack_forward(&self.decoder, tape, p, h_q);
        let x_hat = tape.reshape(y, vec![n]);
        let x = tape.reshape(x, vec![n]);
        Ok(TrainForward {
            x,
            x_hat,
            z_e,
            commit,
            self_guidance,
            se_recon,
            semantic_commit,
            quant,
            semantic_tokens,
            teacher: teacher_rows,
        })
    }

    pub fn token_encoder(&self) -> Result<TokenEncoder<'_>> {
        TokenEncoder::new(self)
    }

    pub fn token_decoder(&self) -> Result<TokenDecoder<'_>> {
        TokenDecoder::new(self)
    }

    /// Batch encode: the final partial hop is zero-padded.
    pub fn encode(&self, pcm: &PcmBuffer) -> Result<TokenMatrix> {
        pcm.expect_rate(self.cfg.sample_rate_hz)?;
        let mut enc = self.token_encoder()?;
        let mut out = enc.push(&pcm.samples)?;
        out.extend(&enc.finish()?)?;
        Ok(out)
    }

    /// Batch decode: `frames * hop` samples.
    pub fn decode(&self, tokens: &TokenMatrix) -> Result<PcmBuffer> {
        let samples = self.token_decoder()?.push(tokens)?;
        Ok(PcmBuffer::new(samples, self.cfg.sample_rate_hz))
    }
}

fn row_sq_dist(a: &LatentSequence, b: &LatentSequence) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.frames.max(1) as f64
}

// -------------------------------------------------------------------------
// Token-level streaming

/// Incremental PCM to token conversion.
pub struct TokenEncoder<'a> {
    codec: &'a Codec,
    enc: EncoderState,
    adapter: Option<Adapter>,
    /// Every sample consumed so far; the teacher reads absolute positions.
    history: Vec<f32>,
    frames: usize,
}

impl<'a> TokenEncoder<'a> {
    fn new(codec: &'a Codec) -> Result<Self> {
        Ok(Self {
            codec,
            enc: EncoderState::new(&codec.cfg),
            adapter: codec.adapter()?,
            history: Vec::new(),
            frames: 0,
        })
    }

    pub fn frames_emitted(&self) -> usize {
        self.frames
    }

    pub fn samples_consumed(&self) -> usize {
        self.history.len()
    }

    /// Tokens for every frame completed by `samples`.
    pub fn push(&mut self, samples: &[f32]) -> Result<TokenMatrix> {
        let codec = self.codec;
        let cfg = &codec.cfg;
        self.history.extend_from_slice(samples);
        let a = self.enc.encode_samples(&codec.params, samples);
        let mut out = TokenMatrix::empty(cfg.total_streams(), cfg.semantic_branch);
        if a.frames == 0 {
            return Ok(out);
        }
        let first = self.frames;
        self.frames += a.frames;

        let mut sem_tokens = Vec::new();
        let r = match (&self.adapter, codec.teacher.as_ref(), codec.semantic_vq.as_ref()) {
            (Some(adapter), Some(teacher), Some(sem)) => {
                let tpf = cfg.teacher_frames_per_frame;
                let rows = teacher.frames(&self.history, first * tpf, self.frames * tpf);
                let t = pool_frames(&LatentSequence::new(rows, teacher.dim(), crate::config::TEACHER_FRAME_RATE_HZ), tpf);
                let (tokens, s_q) = crate::semantic::semantic_quantize(&t, sem)?;
                sem_tokens = tokens;
                crate::semantic::decouple_subtract(&a, &s_q, adapter)?
            }
            _ => a,
        };
        let z = linear_rows(&r.data, cfg.hidden_dim, codec.params.w(PROJ_IN_WEIGHT), codec.params.w(PROJ_IN_BIAS));
        let z = LatentSequence::new(z, cfg.acoustic_code_dim, cfg.frame_rate_hz);
        let quant = codec.rvq.quantize(&z, codec.rvq.len())?;
        let mut row = Vec::with_capacity(cfg.total_streams());
        for f in 0..z.frames {
            row.clear();
            if cfg.semantic_branch {
                row.push(Some(sem_tokens[f] as u16));
            }
            row.extend((0..quant.stages).map(|s| quant.index(f, s).map(|k| k as u16)));
            out.push_row(&row)?;
        }
        Ok(out)
    }

    /// Zero-pads the final partial hop and returns its tokens.
    pub fn finish(mut self) -> Result<TokenMatrix> {
        let hop = self.codec.cfg.hop;
        let pad = (hop - self.history.len() % hop) % hop;
        self.push(&vec![0.0; pad])
    }
}

/// Incremental token to PCM conversion.
pub struct TokenDecoder<'a> {
    codec: &'a Codec,
    dec: DecoderState,
    adapter: Option<Adapter>,
}

impl<'a> TokenDecoder<'a> {
    fn new(codec: &'a Codec) -> Result<Self> {
        Ok(Self {
            codec,
            dec: DecoderState::new(&codec.cfg),
            adapter: codec.adapter()?,
        })
    }

    /// `hop` samples per token frame.
    pub fn push(&mut self, tokens: &TokenMatrix) -> Result<Vec<f32>> {
        let codec = self.codec;
        let cfg = &codec.cfg;
        if tokens.streams != cfg.total_streams() || tokens.has_semantic != cfg.semantic_branch {
            return Err(Error::DimMismatch {
                expected: cfg.total_streams(),
                actual: tokens.streams,
            });
        }
        if tokens.frames == 0 {
            return Ok(Vec::new());
        }
        let off = usize::from(cfg.semantic_branch);
        let stages = codec.rvq.len();
        let mut indices = Vec::with_capacity(tokens.frames * stages);
        for f in 0..tokens.frames {
            for s in 0..stages {
                let t = tokens.get(f, off + s).map(usize::from);
                if let Some(k) = t {
                    if k >= cfg.acoustic_codebook_size {
                        return Err(Error::TokenOutOfRange {
                            value: k as u32,
                            limit: cfg.acoustic_codebook_size as u32,
                        });
                    }
                }
                indices.push(t);
            }
        }
        let z_q = codec.rvq.dequantize(&indices, cfg.frame_rate_hz);
        let a_q = linear_rows(&z_q.data, cfg.acoustic_code_dim, codec.params.w(PROJ_OUT_WEIGHT), codec.params.w(PROJ_OUT_BIAS));
        let a_q = LatentSequence::new(a_q, cfg.hidden_dim, cfg.frame_rate_hz);
        let h = match (&self.adapter, codec.semantic_vq.as_ref()) {
            (Some(adapter), Some(sem)) => {
                let mut s_q = Vec::with_capacity(tokens.frames * sem.dim);
                for f in 0..tokens.frames {
                    match tokens.get(f, 0).map(usize::from) {
                        Some(k) if k < sem.size => s_q.extend(sem.vector(k).iter().map(|&v| v as f32)),
                        Some(k) => {
                            return Err(Error::TokenOutOfRange {
                                value: k as u32,
                                limit: sem.size as u32,
                            })
                        }
                        None => s_q.extend(std::iter::repeat_n(0.0, sem.dim)),
                    }
                }
                let s_q = LatentSequence::new(s_q, sem.dim, cfg.frame_rate_hz);
                crate::semantic::decouple_recombine(&a_q, &s_q, adapter)?
            }
            _ => a_q,
        };
        Ok(self.dec.decode_rows(&codec.params, &h.data))
    }
}
