//! Training objectives: multiscale mel reconstruction, self-guidance,
//! hinge adversarial losses with STFT discriminators, feature matching and
//! their weighted combination.

use crate::autograd::{Tape, Var};
use crate::config::LossWeights;
use crate::dsp;
use crate::error::{Error, Result};
use crate::nn::{init_from_specs, Bound, Init, ParamSpec, ParamStore};
use crate::sequence::{LatentSequence, PcmBuffer};
use crate::tensor::Tensor;

pub const MEL_EPS: f32 = 1e-5;
pub const MEL_BINS: usize = 64;
/// Window sizes `2^6 ..= 2^11`.
pub const MEL_SCALES: [usize; 6] = [64, 128, 256, 512, 1024, 2048];

/// Multiscale mel loss on the tape. `x` is the reference, `x_hat` the
/// reconstruction; both are flat signals of equal length.
pub fn multiscale_mel_loss_var(tape: &mut Tape, x: Var, x_hat: Var, sample_rate: u32) -> Var {
    let mut terms = Vec::with_capacity(MEL_SCALES.len() * 2);
    let w = 1.0 / MEL_SCALES.len() as f32;
    for &win in &MEL_SCALES {
        let bank = tape.constant(Tensor::new(
            vec![win / 2 + 1, MEL_BINS],
            dsp::mel_filterbank(sample_rate, win, MEL_BINS),
        ));
        let mel = |tape: &mut Tape, s: Var| {
            let mag = tape.stft_magnitude(s, win, win / 4);
            tape.matmul(mag, bank)
        };
        let (m, m_hat) = (mel(tape, x), mel(tape, x_hat));
        let l1 = tape.l1_loss(m_hat, m);
        let (lm, lm_hat) = (tape.log_eps(m, MEL_EPS), tape.log_eps(m_hat, MEL_EPS));
        let l2 = tape.mse_loss(lm_hat, lm);
        terms.push((l1, w));
        terms.push((l2, w));
    }
    tape.weighted_sum(&terms)
}

/// Truncates to the shorter buffer; a difference above `max_mismatch`
/// samples is an error.
pub fn truncate_pair(x: &PcmBuffer, y: &PcmBuffer, max_mismatch: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    x.expect_rate(y.sample_rate_hz)?;
    if x.len().abs_diff(y.len()) > max_mismatch {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let n = x.len().min(y.len());
    Ok((x.samples[..n].to_vec(), y.samples[..n].to_vec()))
}

/// Multiscale mel loss between two buffers whose lengths differ by at most
/// `max_mismatch` samples.
pub fn multiscale_mel_loss(x: &PcmBuffer, x_hat: &PcmBuffer, max_mismatch: usize) -> Result<f64> {
    let (a, b) = truncate_pair(x, x_hat, max_mismatch)?;
    let mut tape = Tape::new();
    let n = a.len();
    let xa = tape.constant(Tensor::new(vec![n], a));
    let xb = tape.constant(Tensor::new(vec![n], b));
    let l = multiscale_mel_loss_var(&mut tape, xa, xb, x.sample_rate_hz);
    Ok(tape.value(l).item() as f64)
}

/// Hidden features of the continuous and quantized decode paths.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenPair {
    pub h_e: LatentSequence,
    pub h_q: LatentSequence,
}

impl HiddenPair {
    /// Mean over frames of `||h_e - h_q||^2`.
    pub fn loss(&self) -> Result<f64> {
        if (self.h_e.frames, self.h_e.dim) != (self.h_q.frames, self.h_q.dim) {
            return Err(Error::ShapeMismatch {
                left: vec![self.h_e.frames, self.h_e.dim],
                right: vec![self.h_q.frames, self.h_q.dim],
            });
        }
        let s: f64 = self
            .h_e
            .data
            .iter()
            .zip(&self.h_q.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        Ok(s / self.h_e.frames.max(1) as f64)
    }
}

/// `mean_t ||sg(h_e) - h_q||^2`; no gradient reaches the `h_e` path.
pub fn self_guidance_loss(tape: &mut Tape, h_e: Var, h_q: Var) -> Var {
    let target = tape.detach(h_e);
    tape.row_sq_dist_mean(h_q, target)
}

// -------------------------------------------------------------------------
// Discriminators

/// Output of one sub-discriminator.
pub struct DiscOutput {
    pub logits: Var,
    pub features: Vec<Var>,
}

/// A member of the discriminator bank.
pub trait SubDiscriminator: Send + Sync {
    fn name(&self) -> &str;
    fn specs(&self) -> Vec<ParamSpec>;
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> DiscOutput;
}

const LEAKY_SLOPE: f32 = 0.2;

/// 2-D convolutional stack over one STFT magnitude resolution.
pub struct StftDiscriminator {
    name: String,
    win: usize,
    hop: usize,
    channels: usize,
}

struct Conv2dLayer {
    cin: usize,
    cout: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
}

impl StftDiscriminator {
    pub fn new(win: usize, channels: usize) -> Self {
        Self {
            name: format!("disc.stft{win}"),
            win,
            hop: win / 4,
            channels,
        }
    }

    fn layers(&self) -> Vec<Conv2dLayer> {
        let c = self.channels;
        let l = |cin, cout, kernel, stride, pad| Conv2dLayer {
            cin,
            cout,
            kernel,
            stride,
            pad,
        };
        vec![
            l(1, c, (3, 9), (1, 1), (1, 4)),
            l(c, c, (3, 9), (1, 2), (1, 4)),
            l(c, c, (3, 9), (1, 2), (1, 4)),
            l(c, c, (3, 9), (1, 2), (1, 4)),
            l(c, c, (3, 3), (1, 1), (1, 1)),
            l(c, 1, (3, 3), (1, 1), (1, 1)),
        ]
    }
}

impl SubDiscriminator for StftDiscriminator {
    fn name(&self) -> &str {
        &self.name
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut out = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            let fan_in = l.cin * l.kernel.0 * l.kernel.1;
            // the output layer starts at zero so D = 0 at initialization
            let init = if i == last {
                Init::Zeros
            } else {
                Init::Uniform(1.0 / (fan_in as f32).sqrt())
            };
            out.push(ParamSpec::new(
                format!("{}.conv{i}.weight", self.name),
                vec![l.cout, l.cin, l.kernel.0, l.kernel.1],
                init,
            ));
            out.push(ParamSpec::new(format!("{}.conv{i}.bias", self.name), vec![l.cout], Init::Zeros));
        }
        out
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> DiscOutput {
        let mag = tape.stft_magnitude(x, self.win, self.hop);
        let (frames, bins) = (tape.value(mag).rows(), tape.value(mag).cols());
        let mut h = tape.reshape(mag, vec![1, frames, bins]);
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut features = Vec::with_capacity(last);
        for (i, l) in layers.iter().enumerate() {
            let w = p.var(tape, &format!("{}.conv{i}.weight", self.name));
            let b = p.var(tape, &format!("{}.conv{i}.bias", self.name));
            h = tape.conv2d(h, w, b, l.stride, l.pad);
            if i < last {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
                features.push(h);
            }
        }
        DiscOutput { logits: h, features }
    }
}

/// Multi-resolution STFT discriminators; further members can be added with
/// [`DiscriminatorBank::push`].
pub struct DiscriminatorBank {
    members: Vec<Box<dyn SubDiscriminator>>,
}

pub const DISC_WINDOWS: [usize; 3] = [512, 1024, 2048];

impl DiscriminatorBank {
    pub fn stft(channels: usize) -> Self {
        Self {
            members: DISC_WINDOWS
                .iter()
                .map(|&w| Box::new(StftDiscriminator::new(w, channels)) as Box<dyn SubDiscriminator>)
                .collect(),
        }
    }

    pub fn push(&mut self, member: Box<dyn SubDiscriminator>) {
        self.members.push(member);
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.members.iter().flat_map(|m| m.specs()).collect()
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        init_from_specs(&self.specs(), seed)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Vec<DiscOutput> {
        self.members.iter().map(|m| m.forward(tape, p, x)).collect()
    }
}

/// Generator-side adversarial terms `(l_gen, l_fm)`. Discriminator
/// parameters are bound frozen, so only the generator sees these gradients.
pub fn generator_adversarial(
    tape: &mut Tape,
    disc: &DiscriminatorBank,
    disc_params: &ParamStore,
    x: Var,
    x_hat: Var,
) -> (Var, Var) {
    let p = Bound::frozen(disc_params);
    let x_const = tape.detach(x);
    let real = disc.forward(tape, &p, x_const);
    let fake = disc.forward(tape, &p, x_hat);
    let n = fake.len().max(1) as f32;
    let mut gen_terms = Vec::new();
    let mut fm_terms = Vec::new();
    let n_maps: usize = real.iter().map(|r| r.features.len()).sum();
    for (r, f) in real.iter().zip(&fake) {
        let m = tape.mean(f.logits);
        gen_terms.push((m, -1.0 / n));
        for (&fr, &ff) in r.features.iter().zip(&f.features) {
            let scale = tape.value(fr).data().iter().map(|v| v.abs() as f64).sum::<f64>()
                / tape.value(fr).len().max(1) as f64;
            let l1 = tape.l1_loss(ff, fr);
            fm_terms.push((l1, (1.0 / (scale.max(1e-8) * n_maps.max(1) as f64)) as f32));
        }
    }
    (tape.weighted_sum(&gen_terms), tape.weighted_sum(&fm_terms))
}

/// Discriminator hinge loss on real `x` and a detached reconstruction.
pub fn discriminator_loss(
    tape: &mut Tape,
    disc: &DiscriminatorBank,
    disc_params: &ParamStore,
    x: &Tensor,
    x_hat: &Tensor,
) -> Var {
    let p = Bound::trainable(disc_params);
    let xr = tape.constant(x.clone());
    let xf = tape.constant(x_hat.clone());
    let real = disc.forward(tape, &p, xr);
    let fake = disc.forward(tape, &p, xf);
    let n = real.len().max(1) as f32;
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(&fake) {
        let a = tape.hinge(r.logits, 1.0);
        let b = tape.hinge(f.logits, -1.0);
        terms.push((a, 1.0 / n));
        terms.push((b, 1.0 / n));
    }
    tape.weighted_sum(&terms)
}

/// `(l_dis, l_gen, l_fm)` for two buffers of equal length.
pub fn adversarial_losses(
    disc: &DiscriminatorBank,
    disc_params: &ParamStore,
    x: &PcmBuffer,
    x_hat: &PcmBuffer,
) -> Result<(f64, f64, f64)> {
    let (a, b) = truncate_pair(x, x_hat, 0)?;
    let n = a.len();
    let (ta, tb) = (Tensor::new(vec![n], a), Tensor::new(vec![n], b));
    let mut tape = Tape::new();
    let l_dis = discriminator_loss(&mut tape, disc, disc_params, &ta, &tb);
    let xa = tape.constant(ta);
    let xb = tape.constant(tb);
    let (l_gen, l_fm) = generator_adversarial(&mut tape, disc, disc_params, xa, xb);
    Ok((
        tape.value(l_dis).item() as f64,
        tape.value(l_gen).item() as f64,
        tape.value(l_fm).item() as f64,
    ))
}

// -------------------------------------------------------------------------
// Combination

/// The seven loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ac_recon: f64,
    pub se_recon: f64,
    pub commit: f64,
    pub self_guidance: f64,
    pub dis: f64,
    pub gen: f64,
    pub fm: f64,
}

impl LossParts {
    pub fn all(v: f64) -> Self {
        Self {
            ac_recon: v,
            se_recon: v,
            commit: v,
            self_guidance: v,
            dis: v,
            gen: v,
            fm: v,
        }
    }

    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("ac_recon", self.ac_recon),
            ("se_recon", self.se_recon),
            ("commit", self.commit),
            ("self_guidance", self.self_guidance),
            ("dis", self.dis),
            ("gen", self.gen),
            ("fm", self.fm),
        ]
    }
}

/// `(generator_total, discriminator_total)`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<(f64, f64)> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: name.into() });
        }
    }
    let generator = w.ac_recon * parts.ac_recon
        + w.se_recon * parts.se_recon
        + w.commit * parts.commit
        + w.self_guidance * parts.self_guidance
        + w.gen * parts.gen
        + w.fm * parts.fm;
    Ok((generator, w.dis * parts.dis))
}
