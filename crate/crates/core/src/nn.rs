//! The learnable signal path: SEANet-style causal convolution stacks and the
//! causal transformer.
//!
//! Every block exists twice: as a differentiable graph on a [`Tape`] (training
//! and batch inference) and as a streaming state machine that consumes rows as
//! they arrive. Both paths call the same kernels in the same order, so chunked
//! streaming reproduces the batch result bit for bit.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Tape, Var};
use crate::config::ValidatedConfig;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Panicking lookup for names that are fixed by the architecture.
    pub fn w(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }
}

/// Binds parameters from a store onto a tape, either trainable or frozen.
pub struct Bound<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bound<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    pub fn var(&self, tape: &mut Tape, name: &str) -> Var {
        tape.bind(name, self.store.w(name), self.trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-b, b]`.
    Uniform(f32),
    Normal(f32),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Draws every spec in order from one seeded stream.
pub fn init_from_specs(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b);
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data));
    }
    store
}

// -------------------------------------------------------------------------
// Convolution stacks

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn specs(&self, transposed: bool) -> [ParamSpec; 2] {
        // fan-in seen by one output sample
        let fan_in = if transposed {
            (self.cin * self.kernel / self.stride).max(1)
        } else {
            self.cin * self.kernel
        };
        let bound = 1.0 / (fan_in as f32).sqrt();
        [
            ParamSpec::new(self.weight(), vec![self.kernel, self.cin, self.cout], Init::Uniform(bound)),
            ParamSpec::new(self.bias(), vec![self.cout], Init::Zeros),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Causal strided convolution.
    Conv(Conv),
    /// Causal transposed convolution.
    ConvTranspose(Conv),
    Elu,
    /// `x + f(x)`; the branch must preserve the row count.
    Residual(Vec<Layer>),
}

fn residual_unit(prefix: &str, c: usize) -> Layer {
    let mid = (c / 2).max(1);
    Layer::Residual(vec![
        Layer::Elu,
        Layer::Conv(Conv::new(format!("{prefix}.res.conv1"), c, mid, 7, 1)),
        Layer::Elu,
        Layer::Conv(Conv::new(format!("{prefix}.res.conv2"), mid, c, 1, 1)),
    ])
}

/// Waveform `[samples x 1]` to `[frames x hidden]`.
pub fn seanet_encoder(cfg: &ValidatedConfig) -> Vec<Layer> {
    let mut c = cfg.base_channels;
    let mut layers = vec![Layer::Conv(Conv::new("encoder.in", 1, c, 7, 1))];
    for (i, &r) in cfg.seanet_ratios.iter().enumerate() {
        let r = r as usize;
        layers.push(residual_unit(&format!("encoder.block{i}"), c));
        layers.push(Layer::Elu);
        layers.push(Layer::Conv(Conv::new(format!("encoder.block{i}.down"), c, 2 * c, 2 * r, r)));
        c *= 2;
    }
    layers.push(Layer::Elu);
    layers.push(Layer::Conv(Conv::new("encoder.out", c, cfg.hidden_dim, 3, 1)));
    let e = cfg.extra_downsample as usize;
    if e > 1 {
        layers.push(Layer::Conv(Conv::new(
            "encoder.extra_down",
            cfg.hidden_dim,
            cfg.hidden_dim,
            2 * e,
            e,
        )));
    }
    layers
}

/// `[frames x hidden]` to waveform `[samples x 1]`, mirroring the encoder.
pub fn seanet_decoder(cfg: &ValidatedConfig) -> Vec<Layer> {
    let mut layers = Vec::new();
    let e = cfg.extra_downsample as usize;
    if e > 1 {
        layers.push(Layer::ConvTranspose(Conv::new(
            "decoder.extra_up",
            cfg.hidden_dim,
            cfg.hidden_dim,
            2 * e,
            e,
        )));
    }
    let mut c = cfg.base_channels << cfg.seanet_ratios.len();
    layers.push(Layer::Conv(Conv::new("decoder.in", cfg.hidden_dim, c, 7, 1)));
    for (i, &r) in cfg.seanet_ratios.iter().enumerate().rev() {
        let r = r as usize;
        layers.push(Layer::Elu);
        layers.push(Layer::ConvTranspose(Conv::new(format!("decoder.block{i}.up"), c, c / 2, 2 * r, r)));
        c /= 2;
        layers.push(residual_unit(&format!("decoder.block{i}"), c));
    }
    layers.push(Layer::Elu);
    layers.push(Layer::Conv(Conv::new("decoder.out", c, 1, 7, 1)));
    layers
}

pub fn conv_stack_specs(layers: &[Layer]) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for l in layers {
        match l {
            Layer::Conv(c) => out.extend(c.specs(false)),
            Layer::ConvTranspose(c) => out.extend(c.specs(true)),
            Layer::Elu => {}
            Layer::Residual(inner) => out.extend(conv_stack_specs(inner)),
        }
    }
    out
}

pub fn conv_stack_forward(layers: &[Layer], tape: &mut Tape, p: &Bound, mut x: Var) -> Var {
    for l in layers {
        x = match l {
            Layer::Conv(c) => {
                let (w, b) = (p.var(tape, &c.weight()), p.var(tape, &c.bias()));
                tape.conv1d_causal(x, w, b, c.kernel, c.stride)
            }
            Layer::ConvTranspose(c) => {
                let (w, b) = (p.var(tape, &c.weight()), p.var(tape, &c.bias()));
                tape.conv_tr1d_causal(x, w, b, c.kernel, c.stride)
            }
            Layer::Elu => tape.elu(x),
            Layer::Residual(inner) => {
                let y = conv_stack_forward(inner, tape, p, x);
                tape.add(x, y)
            }
        };
    }
    x
}

/// Streaming state of one convolution stack.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Conv {
        conv: Conv,
        /// Pending input rows, starting with the causal left context.
        buf: Vec<f32>,
    },
    ConvTranspose {
        conv: Conv,
        /// The `kernel` accumulator rows starting at the next output row.
        acc: Vec<f32>,
    },
    Elu,
    Residual(Vec<LayerState>),
}

impl LayerState {
    pub fn for_stack(layers: &[Layer]) -> Vec<LayerState> {
        layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerState::Conv {
                    conv: c.clone(),
                    buf: vec![0.0; (c.kernel - c.stride) * c.cin],
                },
                Layer::ConvTranspose(c) => LayerState::ConvTranspose {
                    conv: c.clone(),
                    acc: vec![0.0; c.kernel * c.cout],
                },
                Layer::Elu => LayerState::Elu,
                Layer::Residual(inner) => LayerState::Residual(Self::for_stack(inner)),
            })
            .collect()
    }

    /// Feeds time-major rows and returns every output row that is final.
    pub fn process(&mut self, params: &ParamStore, x: Vec<f32>) -> Vec<f32> {
        match self {
            LayerState::Conv { conv, buf } => {
                buf.extend_from_slice(&x);
                let rows = buf.len() / conv.cin;
                let t_out = kernels::conv_out_len(rows, conv.kernel, conv.stride);
                if t_out == 0 {
                    return Vec::new();
                }
                let y = kernels::conv1d_valid(
                    buf,
                    rows,
                    conv.cin,
                    params.w(&conv.weight()).data(),
                    params.w(&conv.bias()).data(),
                    conv.kernel,
                    conv.stride,
                );
                buf.drain(..t_out * conv.stride * conv.cin);
                y
            }
            LayerState::ConvTranspose { conv, acc } => {
                let (cin, cout, s, k) = (conv.cin, conv.cout, conv.stride, conv.kernel);
                let w = params.w(&conv.weight()).data();
                let b = params.w(&conv.bias()).data();
                let t_in = x.len() / cin;
                let mut out = Vec::with_capacity(t_in * s * cout);
                for row in x.chunks_exact(cin) {
                    kernels::conv_tr1d_scatter(acc, row, 1, cin, w, k, s, cout);
                    let mut ready = acc[..s * cout].to_vec();
                    kernels::add_row_bias(&mut ready, b);
                    out.extend_from_slice(&ready);
                    acc.drain(..s * cout);
                    acc.resize(k * cout, 0.0);
                }
                out
            }
            LayerState::Elu => x.into_iter().map(kernels::elu).collect(),
            LayerState::Residual(inner) => {
                let y = process_stack(inner, params, x.clone());
                debug_assert_eq!(y.len(), x.len());
                x.iter().zip(&y).map(|(a, b)| a + b).collect()
            }
        }
    }
}

pub fn process_stack(states: &mut [LayerState], params: &ParamStore, mut x: Vec<f32>) -> Vec<f32> {
    for s in states.iter_mut() {
        if x.is_empty() {
            break;
        }
        x = s.process(params, x);
    }
    x
}

// -------------------------------------------------------------------------
// Causal transformer

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerSpec {
    pub prefix: String,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
}

impl TransformerSpec {
    pub fn new(prefix: &str, cfg: &ValidatedConfig) -> Self {
        Self {
            prefix: prefix.to_string(),
            dim: cfg.hidden_dim,
            layers: cfg.transformer_layers,
            heads: cfg.transformer_heads,
            ff: cfg.transformer_ff_dim,
        }
    }

    fn name(&self, layer: usize, leaf: &str) -> String {
        format!("{}.layer{layer}.{leaf}", self.prefix)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let d = self.dim;
        let std_in = 1.0 / (d as f32).sqrt();
        // residual branch outputs shrink with depth
        let std_out = std_in / ((2 * self.layers) as f32).sqrt();
        let std_ff2 = 1.0 / (self.ff as f32).sqrt() / ((2 * self.layers) as f32).sqrt();
        let mut out = Vec::new();
        for l in 0..self.layers {
            out.push(ParamSpec::new(self.name(l, "ln1.gamma"), vec![d], Init::Ones));
            out.push(ParamSpec::new(self.name(l, "ln1.beta"), vec![d], Init::Zeros));
            for w in ["wq", "wk", "wv"] {
                out.push(ParamSpec::new(self.name(l, &format!("attn.{w}")), vec![d, d], Init::Normal(std_in)));
            }
            out.push(ParamSpec::new(self.name(l, "attn.wo"), vec![d, d], Init::Normal(std_out)));
            out.push(ParamSpec::new(self.name(l, "ln2.gamma"), vec![d], Init::Ones));
            out.push(ParamSpec::new(self.name(l, "ln2.beta"), vec![d], Init::Zeros));
            out.push(ParamSpec::new(self.name(l, "ff1.weight"), vec![d, self.ff], Init::Normal(std_in)));
            out.push(ParamSpec::new(self.name(l, "ff1.bias"), vec![self.ff], Init::Zeros));
            out.push(ParamSpec::new(self.name(l, "ff2.weight"), vec![self.ff, d], Init::Normal(std_ff2)));
            out.push(ParamSpec::new(self.name(l, "ff2.bias"), vec![d], Init::Zeros));
        }
        out
    }

    /// `x [frames x dim]` to the same shape; frame `t` sees frames `<= t`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Var {
        for l in 0..self.layers {
            let v = |tape: &mut Tape, leaf: &str| p.var(tape, &self.name(l, leaf));
            let (g1, b1) = (v(tape, "ln1.gamma"), v(tape, "ln1.beta"));
            let h = tape.layer_norm(x, g1, b1);
            let wq = v(tape, "attn.wq");
            let wk = v(tape, "attn.wk");
            let wv = v(tape, "attn.wv");
            let wo = v(tape, "attn.wo");
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let vv = tape.matmul(h, wv);
            let q = tape.rope(q, self.heads, 0);
            let k = tape.rope(k, self.heads, 0);
            let a = tape.causal_attention(q, k, vv, self.heads);
            let o = tape.matmul(a, wo);
            x = tape.add(x, o);
            let (g2, b2) = (v(tape, "ln2.gamma"), v(tape, "ln2.beta"));
            let h = tape.layer_norm(x, g2, b2);
            let (w1, c1) = (v(tape, "ff1.weight"), v(tape, "ff1.bias"));
            let f = tape.linear(h, w1, Some(c1));
            let f = tape.gelu(f);
            let (w2, c2) = (v(tape, "ff2.weight"), v(tape, "ff2.bias"));
            let f = tape.linear(f, w2, Some(c2));
            x = tape.add(x, f);
        }
        x
    }
}

/// Key/value cache of a streaming transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerState {
    spec: TransformerSpec,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    pos: usize,
}

impl TransformerState {
    pub fn new(spec: TransformerSpec) -> Self {
        Self {
            keys: vec![Vec::new(); spec.layers],
            values: vec![Vec::new(); spec.layers],
            spec,
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn process(&mut self, params: &ParamStore, x: &[f32]) -> Vec<f32> {
        let d = self.spec.dim;
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            out.extend(self.step(params, row));
        }
        out
    }

    fn step(&mut self, params: &ParamStore, row: &[f32]) -> Vec<f32> {
        let spec = &self.spec;
        let d = spec.dim;
        let w = |l: usize, leaf: &str| params.w(&spec.name(l, leaf)).data();
        let mut x = row.to_vec();
        for l in 0..spec.layers {
            let (h, _, _) = kernels::layer_norm(&x, d, w(l, "ln1.gamma"), w(l, "ln1.beta"));
            let mut q = kernels::matmul(&h, 1, d, w(l, "attn.wq"), d);
            let mut k = kernels::matmul(&h, 1, d, w(l, "attn.wk"), d);
            let v = kernels::matmul(&h, 1, d, w(l, "attn.wv"), d);
            kernels::rope_row(&mut q, self.pos, spec.heads, 1.0);
            kernels::rope_row(&mut k, self.pos, spec.heads, 1.0);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let mut a = vec![0.0f32; d];
            kernels::attend_row(&q, &self.keys[l], &self.values[l], self.pos + 1, spec.heads, &mut a, None);
            let o = kernels::matmul(&a, 1, d, w(l, "attn.wo"), d);
            x = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let (h, _, _) = kernels::layer_norm(&x, d, w(l, "ln2.gamma"), w(l, "ln2.beta"));
            let mut f = kernels::matmul(&h, 1, d, w(l, "ff1.weight"), spec.ff);
            kernels::add_row_bias(&mut f, w(l, "ff1.bias"));
            for v in &mut f {
                *v = kernels::gelu(*v);
            }
            let mut f = kernels::matmul(&f, 1, spec.ff, w(l, "ff2.weight"), d);
            kernels::add_row_bias(&mut f, w(l, "ff2.bias"));
            x = x.iter().zip(&f).map(|(a, b)| a + b).collect();
        }
        self.pos += 1;
        x
    }
}
