//! A small reverse-mode automatic differentiation tape.
//!
//! Values are computed eagerly when an op is recorded. Leaves are either
//! trainable parameters or constants; a node requires a gradient only when
//! one of its parents does, so a [`Tape::detach`]ed value cuts the graph and
//! parameters behind it receive no gradient at all.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex32;

use crate::dsp;
use crate::kernels::{self, axpy, dot};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Read access to node values during the backward pass.
pub struct Values<'a>(&'a [Node]);

impl Values<'_> {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.0[v.0].value
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &Values, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<String, (Var, bool)>,
}

fn scalar_grad(g: &Tensor) -> f32 {
    g.data()[0]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf for a named parameter, created once per tape.
    pub fn bind(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(&(v, _)) = self.bound.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.bound.insert(name.to_string(), (v, trainable));
        v
    }

    /// Gradients of every trainable bound parameter reached by the backward pass.
    pub fn bound_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .filter_map(|(name, (v, _))| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Grads(grads);
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        let values = Values(&self.nodes);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&g, &values, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    // ---------------------------------------------------------------------
    // Structural ops

    /// Same value, no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Forward value `quantized`; gradient passes to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), quantized.shape());
        self.push(
            quantized,
            vec![x],
            Box::new(|g, _, _| vec![Some(g.clone())]),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let old = self.value(x).shape().to_vec();
        let v = self.value(x).clone().reshape(shape);
        self.push(
            v,
            vec![x],
            Box::new(move |g, _, _| vec![Some(g.clone().reshape(old.clone()))]),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let full_shape = src.shape().to_vec();
        let cols = src.cols();
        let v = src.slice_rows(start, len);
        self.push(
            v,
            vec![x],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(full_shape.clone());
                gx.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                vec![Some(gx)]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // Elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            v,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            v,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a, b],
            Box::new(move |g, vals, needs| {
                vec![
                    needs[0].then(|| g.zip_map(vals.get(b), |gi, bi| gi * bi)),
                    needs[1].then(|| g.zip_map(vals.get(a), |gi, ai| gi * ai)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let v = self.value(x).map(|v| v * s);
        self.push(v, vec![x], Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))]))
    }

    /// `x [rows x c] + bias [c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut v = self.value(x).clone();
        kernels::add_row_bias(v.data_mut(), self.value(bias).data());
        self.push(
            v,
            vec![x, bias],
            Box::new(move |g, vals, needs| {
                let gb = needs[1].then(|| {
                    let c = vals.get(bias).len();
                    let mut gb = vec![0.0f32; c];
                    for row in g.data().chunks_exact(c) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::new(vals.get(bias).shape().to_vec(), gb)
                });
                vec![Some(g.clone()), gb]
            }),
        )
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::elu);
        self.push(
            v,
            vec![x],
            Box::new(move |g, vals, _| {
                vec![Some(g.zip_map(vals.get(x), |gi, xi| {
                    if xi > 0.0 {
                        gi
                    } else {
                        gi * xi.exp()
                    }
                }))]
            }),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        self.push(
            v,
            vec![x],
            Box::new(move |g, vals, _| {
                vec![Some(g.zip_map(vals.get(x), |gi, xi| gi * kernels::gelu_grad(xi)))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(
            v,
            vec![x],
            Box::new(move |g, vals, _| {
                vec![Some(g.zip_map(vals.get(x), |gi, xi| if xi > 0.0 { gi } else { slope * gi }))]
            }),
        )
    }

    /// `ln(x + eps)`.
    pub fn log_eps(&mut self, x: Var, eps: f32) -> Var {
        let v = self.value(x).map(|v| (v + eps).ln());
        self.push(
            v,
            vec![x],
            Box::new(move |g, vals, _| {
                vec![Some(g.zip_map(vals.get(x), |gi, xi| gi / (xi + eps)))]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // Linear algebra

    /// `x [rows x inner] . w [inner x out]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, inner) = (xv.rows(), xv.cols());
        assert_eq!(wv.rows(), inner, "matmul inner dims {:?} {:?}", xv.shape(), wv.shape());
        let out = wv.cols();
        let v = Tensor::new(vec![rows, out], kernels::matmul(xv.data(), rows, inner, wv.data(), out));
        self.push(
            v,
            vec![x, w],
            Box::new(move |g, vals, needs| {
                let (xv, wv) = (vals.get(x), vals.get(w));
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0f32; rows * inner];
                    for r in 0..rows {
                        let gr = &gd[r * out..(r + 1) * out];
                        for i in 0..inner {
                            gx[r * inner + i] = dot(gr, &wv.data()[i * out..(i + 1) * out]);
                        }
                    }
                    Tensor::new(xv.shape().to_vec(), gx)
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0f32; inner * out];
                    for r in 0..rows {
                        let gr = &gd[r * out..(r + 1) * out];
                        for i in 0..inner {
                            axpy(&mut gw[i * out..(i + 1) * out], xv.data()[r * inner + i], gr);
                        }
                    }
                    Tensor::new(wv.shape().to_vec(), gw)
                });
                vec![gx, gw]
            }),
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    /// Causal strided convolution over time-major `[t x cin]` input: the input
    /// is left padded with `kernel - stride` zero rows, so `t` inputs give
    /// `t / stride` outputs and output `i` sees inputs `< (i+1) * stride`.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let cin = xv.cols();
        let t_in = xv.rows();
        let pad = kernel - stride;
        let mut padded = vec![0.0f32; pad * cin];
        padded.extend_from_slice(xv.data());
        let wv = self.value(w);
        let bv = self.value(b);
        let cout = bv.len();
        assert_eq!(wv.len(), kernel * cin * cout);
        let t_pad = t_in + pad;
        let y = kernels::conv1d_valid(&padded, t_pad, cin, wv.data(), bv.data(), kernel, stride);
        let t_out = y.len() / cout;
        let v = Tensor::new(vec![t_out, cout], y);
        self.push(
            v,
            vec![x, w, b],
            Box::new(move |g, vals, needs| {
                let wv = vals.get(w);
                let xv = vals.get(x);
                let gd = g.data();
                let mut gx_p = needs[0].then(|| vec![0.0f32; t_pad * cin]);
                let mut gw = needs[1].then(|| vec![0.0f32; kernel * cin * cout]);
                let mut gb = needs[2].then(|| vec![0.0f32; cout]);
                let x_at = |row: usize, ci: usize| -> f32 {
                    if row < pad {
                        0.0
                    } else {
                        xv.data()[(row - pad) * cin + ci]
                    }
                };
                for t in 0..t_out {
                    let gr = &gd[t * cout..(t + 1) * cout];
                    if let Some(gb) = gb.as_mut() {
                        for (a, b) in gb.iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                    for k in 0..kernel {
                        let row = t * stride + k;
                        for ci in 0..cin {
                            let off = (k * cin + ci) * cout;
                            if let Some(gw) = gw.as_mut() {
                                axpy(&mut gw[off..off + cout], x_at(row, ci), gr);
                            }
                            if let Some(gx) = gx_p.as_mut() {
                                gx[row * cin + ci] += dot(&wv.data()[off..off + cout], gr);
                            }
                        }
                    }
                }
                vec![
                    gx_p.map(|gx| Tensor::new(vec![t_in, cin], gx[pad * cin..].to_vec())),
                    gw.map(|gw| Tensor::new(wv.shape().to_vec(), gw)),
                    gb.map(|gb| Tensor::new(vals.get(b).shape().to_vec(), gb)),
                ]
            }),
        )
    }

    /// Causal transposed convolution: each input row emits `stride` output
    /// rows; the `kernel - stride` overhang past the end is trimmed.
    pub fn conv_tr1d_causal(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let cin = xv.cols();
        let t_in = xv.rows();
        let bv = self.value(b);
        let cout = bv.len();
        let wv = self.value(w);
        assert_eq!(wv.len(), kernel * cin * cout);
        let t_out = t_in * stride;
        let full_rows = if t_in == 0 { 0 } else { (t_in - 1) * stride + kernel };
        let mut acc = vec![0.0f32; full_rows * cout];
        kernels::conv_tr1d_scatter(&mut acc, xv.data(), t_in, cin, wv.data(), kernel, stride, cout);
        acc.truncate(t_out * cout);
        kernels::add_row_bias(&mut acc, bv.data());
        let v = Tensor::new(vec![t_out, cout], acc);
        self.push(
            v,
            vec![x, w, b],
            Box::new(move |g, vals, needs| {
                let wv = vals.get(w);
                let xv = vals.get(x);
                let gd = g.data();
                let mut gx = needs[0].then(|| vec![0.0f32; t_in * cin]);
                let mut gw = needs[1].then(|| vec![0.0f32; kernel * cin * cout]);
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0f32; cout];
                    for row in gd.chunks_exact(cout) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::new(vals.get(b).shape().to_vec(), gb)
                });
                for t in 0..t_in {
                    for k in 0..kernel {
                        let row = t * stride + k;
                        if row >= t_out {
                            break;
                        }
                        let gr = &gd[row * cout..(row + 1) * cout];
                        for ci in 0..cin {
                            let off = (k * cin + ci) * cout;
                            if let Some(gw) = gw.as_mut() {
                                axpy(&mut gw[off..off + cout], xv.data()[t * cin + ci], gr);
                            }
                            if let Some(gx) = gx.as_mut() {
                                gx[t * cin + ci] += dot(&wv.data()[off..off + cout], gr);
                            }
                        }
                    }
                }
                vec![
                    gx.map(|gx| Tensor::new(vec![t_in, cin], gx)),
                    gw.map(|gw| Tensor::new(wv.shape().to_vec(), gw)),
                    gb,
                ]
            }),
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let (y, means, rstds) =
            kernels::layer_norm(xv.data(), cols, self.value(gamma).data(), self.value(beta).data());
        let v = Tensor::new(xv.shape().to_vec(), y);
        self.push(
            v,
            vec![x, gamma, beta],
            Box::new(move |g, vals, needs| {
                let xv = vals.get(x);
                let gam = vals.get(gamma).data();
                let rows = means.len();
                let mut gx = vec![0.0f32; rows * cols];
                let mut gg = vec![0.0f32; cols];
                let mut gbeta = vec![0.0f32; cols];
                let mut xhat = vec![0.0f32; cols];
                let mut dxhat = vec![0.0f32; cols];
                for r in 0..rows {
                    let xr = &xv.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let (mean, rstd) = (means[r], rstds[r]);
                    for c in 0..cols {
                        xhat[c] = (xr[c] - mean) * rstd;
                        dxhat[c] = gr[c] * gam[c];
                        gg[c] += gr[c] * xhat[c];
                        gbeta[c] += gr[c];
                    }
                    let m1 = dxhat.iter().sum::<f32>() / cols as f32;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / cols as f32;
                    for c in 0..cols {
                        gx[r * cols + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(xv.shape().to_vec(), gx)),
                    needs[1].then(|| Tensor::new(vals.get(gamma).shape().to_vec(), gg)),
                    needs[2].then(|| Tensor::new(vals.get(beta).shape().to_vec(), gbeta)),
                ]
            }),
        )
    }

    /// Rotary position embedding; row `t` is rotated for position `offset + t`.
    pub fn rope(&mut self, x: Var, heads: usize, offset: usize) -> Var {
        let mut v = self.value(x).clone();
        let cols = v.cols();
        for (t, row) in v.data_mut().chunks_exact_mut(cols).enumerate() {
            kernels::rope_row(row, offset + t, heads, 1.0);
        }
        self.push(
            v,
            vec![x],
            Box::new(move |g, _, _| {
                let mut gx = g.clone();
                for (t, row) in gx.data_mut().chunks_exact_mut(cols).enumerate() {
                    kernels::rope_row(row, offset + t, heads, -1.0);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Multi-head causal self attention over already projected `q, k, v`
    /// (`[t x d]` each). Row `t` attends to rows `0..=t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let t = qv.rows();
        let d = qv.cols();
        let mut out = vec![0.0f32; t * d];
        // probs[(h * t + i) * t + j]
        let mut probs = vec![0.0f32; heads * t * t];
        let mut row_probs = vec![0.0f32; heads * t];
        for i in 0..t {
            let n = i + 1;
            kernels::attend_row(
                qv.row(i),
                kv.data(),
                vv.data(),
                n,
                heads,
                &mut out[i * d..(i + 1) * d],
                Some(&mut row_probs[..heads * n]),
            );
            for h in 0..heads {
                probs[(h * t + i) * t..(h * t + i) * t + n]
                    .copy_from_slice(&row_probs[h * n..(h + 1) * n]);
            }
        }
        let value = Tensor::new(vec![t, d], out);
        self.push(
            value,
            vec![q, k, v],
            Box::new(move |g, vals, _| {
                let (qv, kv, vv) = (vals.get(q).data(), vals.get(k).data(), vals.get(v).data());
                let gd = g.data();
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut gq = vec![0.0f32; t * d];
                let mut gk = vec![0.0f32; t * d];
                let mut gv = vec![0.0f32; t * d];
                let mut dp = vec![0.0f32; t];
                for h in 0..heads {
                    let hs = h * dh..(h + 1) * dh;
                    for i in 0..t {
                        let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let go = &gd[i * d + hs.start..i * d + hs.end];
                        let mut s = 0.0f32;
                        for j in 0..=i {
                            dp[j] = dot(go, &vv[j * d + hs.start..j * d + hs.end]);
                            s += p[j] * dp[j];
                            axpy(&mut gv[j * d + hs.start..j * d + hs.end], p[j], go);
                        }
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - s) * scale;
                            axpy(&mut gq[i * d + hs.start..i * d + hs.end], ds, &kv[j * d + hs.start..j * d + hs.end]);
                            axpy(&mut gk[j * d + hs.start..j * d + hs.end], ds, &qv[i * d + hs.start..i * d + hs.end]);
                        }
                    }
                }
                vec![
                    Some(Tensor::new(vec![t, d], gq)),
                    Some(Tensor::new(vec![t, d], gk)),
                    Some(Tensor::new(vec![t, d], gv)),
                ]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // Spectral

    /// Normalized STFT magnitude of a mono signal (any shape, read flat):
    /// `[frames x (win/2+1)]`. See [`crate::dsp`] for framing.
    pub fn stft_magnitude(&mut self, x: Var, win: usize, hop: usize) -> Var {
        const MAG_EPS2: f32 = 1e-12;
        let window = dsp::hann(win);
        let xv = self.value(x);
        let n = xv.len();
        let (frames, bins, spec) = dsp::stft(xv.data(), &window, hop);
        let mag: Vec<f32> = spec
            .iter()
            .map(|c| (c.re * c.re + c.im * c.im + MAG_EPS2).sqrt())
            .collect();
        let v = Tensor::new(vec![frames, bins], mag.clone());
        let x_shape = xv.shape().to_vec();
        self.push(
            v,
            vec![x],
            Box::new(move |g, _, _| {
                let norm = dsp::window_norm(&window);
                let plan = dsp::fft_plan(win, true);
                let mut gx = vec![0.0f32; n];
                let mut buf = vec![Complex32::new(0.0, 0.0); win];
                for f in 0..frames {
                    buf.fill(Complex32::new(0.0, 0.0));
                    for k in 0..bins {
                        let idx = f * bins + k;
                        let s = g.data()[idx] / mag[idx];
                        buf[k] = spec[idx] * s;
                    }
                    plan.process(&mut buf);
                    let start = f * hop;
                    for i in 0..win {
                        if start + i < n {
                            gx[start + i] += buf[i].re * window[i] * norm;
                        }
                    }
                }
                vec![Some(Tensor::new(x_shape.clone(), gx))]
            }),
        )
    }

    /// 2-D convolution on `[cin x h x w]` with zero padding; weights are
    /// `[cout x cin x kh x kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        assert_eq!(wv.shape()[1], cin);
        let geo = Conv2dGeometry::new(h, wd, kh, kw, stride, pad);
        let (oh, ow) = (geo.oh, geo.ow);
        let mut out = vec![0.0f32; cout * oh * ow];
        let bv = self.value(b).data();
        for co in 0..cout {
            let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
            o.fill(bv[co]);
            for ci in 0..cin {
                let xc = &xv.data()[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wval = wv.data()[((co * cin + ci) * kh + ky) * kw + kx];
                        geo.for_each(ky, kx, |oy, iy, ox0, ox1, ix0| {
                            let orow = &mut o[oy * ow..];
                            let xrow = &xc[iy * wd..];
                            for (n, ox) in (ox0..ox1).enumerate() {
                                orow[ox] += wval * xrow[ix0 + n * geo.sw];
                            }
                        });
                    }
                }
            }
        }
        let v = Tensor::new(vec![cout, oh, ow], out);
        self.push(
            v,
            vec![x, w, b],
            Box::new(move |g, vals, needs| {
                let xv = vals.get(x);
                let wv = vals.get(w);
                let gd = g.data();
                let mut gx = needs[0].then(|| vec![0.0f32; cin * h * wd]);
                let mut gw = needs[1].then(|| vec![0.0f32; cout * cin * kh * kw]);
                let gb = needs[2].then(|| {
                    let gb: Vec<f32> = (0..cout)
                        .map(|co| gd[co * oh * ow..(co + 1) * oh * ow].iter().sum())
                        .collect();
                    Tensor::new(vec![cout], gb)
                });
                for co in 0..cout {
                    let go = &gd[co * oh * ow..(co + 1) * oh * ow];
                    for ci in 0..cin {
                        let xc = &xv.data()[ci * h * wd..(ci + 1) * h * wd];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                                let wval = wv.data()[widx];
                                let mut acc = 0.0f32;
                                geo.for_each(ky, kx, |oy, iy, ox0, ox1, ix0| {
                                    let grow = &go[oy * ow..];
                                    if gw.is_some() {
                                        let xrow = &xc[iy * wd..];
                                        for (n, ox) in (ox0..ox1).enumerate() {
                                            acc += grow[ox] * xrow[ix0 + n * geo.sw];
                                        }
                                    }
                                    if let Some(gx) = gx.as_mut() {
                                        let gxrow = &mut gx[ci * h * wd + iy * wd..];
                                        for (n, ox) in (ox0..ox1).enumerate() {
                                            gxrow[ix0 + n * geo.sw] += wval * grow[ox];
                                        }
                                    }
                                });
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::new(vec![cin, h, wd], v)),
                    gw.map(|v| Tensor::new(wv.shape().to_vec(), v)),
                    gb,
                ]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // Lookup / classification

    /// Rows of `table [vocab x d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let v = Tensor::new(vec![ids.len(), d], out);
        let ids = ids.to_vec();
        self.push(
            v,
            vec![table],
            Box::new(move |g, vals, _| {
                let mut gt = Tensor::zeros(vals.get(table).shape().to_vec());
                for (r, &i) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (a, b) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                vec![Some(gt)]
            }),
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [n x vocab]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let vocab = lv.cols();
        let n = lv.rows();
        assert_eq!(n, targets.len());
        let mut probs = vec![0.0f32; n * vocab];
        let mut nll = 0.0f64;
        for r in 0..n {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                let e = ((l - max) as f64).exp();
                *p = e as f32;
                sum += e;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p = (*p as f64 / sum) as f32;
            }
            nll += sum.ln() - (row[targets[r]] - max) as f64;
        }
        let v = Tensor::scalar((nll / n.max(1) as f64) as f32);
        let targets = targets.to_vec();
        self.push(
            v,
            vec![logits],
            Box::new(move |g, _, _| {
                let s = scalar_grad(g) / n.max(1) as f32;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * vocab + t] -= 1.0;
                }
                for v in &mut gl {
                    *v *= s;
                }
                vec![Some(Tensor::new(vec![n, vocab], gl))]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // Reductions and losses (all return shape [1])

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len().max(1);
        let v = Tensor::scalar((xv.sum_f64() / n as f64) as f32);
        let shape = xv.shape().to_vec();
        self.push(
            v,
            vec![x],
            Box::new(move |g, _, _| vec![Some(Tensor::full(shape.clone(), scalar_grad(g) / n as f32))]),
        )
    }

    /// `mean |a - b|` over all elements.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let n = av.len().max(1);
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs() as f64).sum();
        self.push(
            Tensor::scalar((s / n as f64) as f32),
            vec![a, b],
            Box::new(move |g, vals, needs| {
                let s = scalar_grad(g) / n as f32;
                let ga = vals.get(a).zip_map(vals.get(b), |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                });
                let gb = needs[1].then(|| ga.map(|v| -v));
                vec![needs[0].then_some(ga), gb]
            }),
        )
    }

    /// `mean (a - b)^2` over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let n = av.len().max(1);
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        self.push(
            Tensor::scalar((s / n as f64) as f32),
            vec![a, b],
            Box::new(move |g, vals, needs| {
                let s = 2.0 * scalar_grad(g) / n as f32;
                let ga = vals.get(a).zip_map(vals.get(b), |x, y| s * (x - y));
                let gb = needs[1].then(|| ga.map(|v| -v));
                vec![needs[0].then_some(ga), gb]
            }),
        )
    }

    /// Mean over rows of the squared L2 distance between rows of `a` and `b`
    /// (sum over columns, mean over rows).
    pub fn row_sq_dist_mean(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let rows = av.rows().max(1);
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        self.push(
            Tensor::scalar((s / rows as f64) as f32),
            vec![a, b],
            Box::new(move |g, vals, needs| {
                let s = 2.0 * scalar_grad(g) / rows as f32;
                let ga = vals.get(a).zip_map(vals.get(b), |x, y| s * (x - y));
                let gb = needs[1].then(|| ga.map(|v| -v));
                vec![needs[0].then_some(ga), gb]
            }),
        )
    }

    /// `mean relu(1 - sign * x)`; `sign = 1` scores real samples, `-1` fakes.
    pub fn hinge(&mut self, x: Var, sign: f32) -> Var {
        let xv = self.value(x);
        let n = xv.len().max(1);
        let s: f64 = xv.data().iter().map(|&v| (1.0 - sign * v).max(0.0) as f64).sum();
        self.push(
            Tensor::scalar((s / n as f64) as f32),
            vec![x],
            Box::new(move |g, vals, _| {
                let s = scalar_grad(g) / n as f32;
                vec![Some(vals.get(x).map(|v| if 1.0 - sign * v > 0.0 { -sign * s } else { 0.0 }))]
            }),
        )
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let total: f64 = terms
            .iter()
            .map(|&(v, w)| w as f64 * self.value(v).item() as f64)
            .sum();
        let weights: Vec<f32> = terms.iter().map(|t| t.1).collect();
        self.push(
            Tensor::scalar(total as f32),
            terms.iter().map(|t| t.0).collect(),
            Box::new(move |g, _, _| {
                let s = scalar_grad(g);
                weights.iter().map(|w| Some(Tensor::scalar(w * s))).collect()
            }),
        )
    }
}

/// Output geometry and valid index ranges for a padded strided 2-D conv.
#[derive(Clone, Copy)]
struct Conv2dGeometry {
    h: usize,
    w: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dGeometry {
    fn new(h: usize, w: usize, kh: usize, kw: usize, stride: (usize, usize), pad: (usize, usize)) -> Self {
        let oh = (h + 2 * pad.0).saturating_sub(kh) / stride.0 + 1;
        let ow = (w + 2 * pad.1).saturating_sub(kw) / stride.1 + 1;
        Self {
            h,
            w,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            oh,
            ow,
        }
    }

    /// For kernel tap `(ky, kx)`, calls `f(oy, iy, ox_start, ox_end, ix_start)`
    /// for every output row whose input row is in range; consecutive outputs
    /// in `ox_start..ox_end` read inputs `ix_start + n * sw`.
    fn for_each(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        // ox valid when 0 <= ox*sw + kx - pw < w
        let ox0 = if kx >= self.pw { 0 } else { (self.pw - kx).div_ceil(self.sw) };
        let lim = self.w + self.pw; // ox*sw + kx < lim
        if kx >= lim {
            return;
        }
        let ox1 = ((lim - kx - 1) / self.sw + 1).min(self.ow);
        if ox0 >= ox1 {
            return;
        }
        let ix0 = ox0 * self.sw + kx - self.pw;
        for oy in 0..self.oh {
            let iy = oy * self.sh + ky;
            if iy < self.ph || iy - self.ph >= self.h {
                continue;
            }
            f(oy, iy - self.ph, ox0, ox1, ix0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(leaf) for every element of every leaf.
    fn check_grads(
        leaves: Vec<Tensor>,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        h: f32,
        tol: f32,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eval = |leaves: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = leaves.iter().map(|l| t.constant(l.clone())).collect();
            let l = build(&mut t, &vs);
            t.value(l).item() as f64
        };
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));
            for e in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[e] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                let a = analytic.data()[e] as f64;
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1.0);
                assert!(err < tol as f64, "leaf {li} elem {e}: fd {fd} analytic {a}");
            }
        }
    }

    #[test]
    fn grad_matmul_bias_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
        ];
        check_grads(
            leaves,
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]));
                let y = t.gelu(y);
                let z = t.mul(y, y);
                t.mean(z)
            },
            1e-2,
            2e-3,
        );
    }

    #[test]
    fn grad_conv1d_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            rand_tensor(&mut rng, &[9, 2]),
            rand_tensor(&mut rng, &[6, 2, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grads(
            leaves,
            |t, v| {
                let y = t.conv1d_causal(v[0], v[1], v[2], 6, 3);
                let y = t.elu(y);
                let z = t.mul(y, y);
                t.mean(z)
            },
            1e-2,
            2e-3,
        );
    }

    #[test]
    fn grad_conv_tr1d_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[4, 3, 2]),
            rand_tensor(&mut rng, &[2]),
        ];
        check_grads(
            leaves,
            |t, v| {
                let y = t.conv_tr1d_causal(v[0], v[1], v[2], 4, 2);
                let z = t.mul(y, y);
                t.mean(z)
            },
            1e-2,
            2e-3,
        );
    }

    #[test]
    fn grad_layer_norm_rope_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![
            rand_tensor(&mut rng, &[5, 8]),
            rand_tensor(&mut rng, &[8]),
            rand_tensor(&mut rng, &[8]),
            rand_tensor(&mut rng, &[8, 8]),
        ];
        check_grads(
            leaves,
            |t, v| {
                let n = t.layer_norm(v[0], v[1], v[2]);
                let k = t.matmul(n, v[3]);
                let q = t.rope(n, 2, 3);
                let k = t.rope(k, 2, 3);
                let a = t.causal_attention(q, k, n, 2);
                let z = t.mul(a, a);
                t.mean(z)
            },
            1e-2,
            5e-3,
        );
    }

    #[test]
    fn grad_stft_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![rand_tensor(&mut rng, &[40])];
        check_grads(
            leaves,
            |t, v| {
                let m = t.stft_magnitude(v[0], 16, 4);
                let l = t.log_eps(m, 1e-1);
                t.mean(l)
            },
            1e-2,
            5e-3,
        );
    }

    #[test]
    fn grad_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let leaves = vec![
            rand_tensor(&mut rng, &[2, 5, 7]),
            rand_tensor(&mut rng, &[3, 2, 3, 5]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grads(
            leaves,
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], (1, 2), (1, 2));
                let y = t.leaky_relu(y, 0.2);
                let z = t.mul(y, y);
                t.mean(z)
            },
            1e-2,
            3e-3,
        );
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 6, 9]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 4]);
        let b = rand_tensor(&mut rng, &[3]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, (2, 3), (1, 2));
        let y = t.value(y);
        let (oh, ow) = (y.shape()[1], y.shape()[2]);
        assert_eq!((oh, ow), ((6 + 2 - 3) / 2 + 1, (9 + 4 - 4) / 3 + 1));
        for co in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..4 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 3 + kx) as isize - 2;
                                if iy < 0 || iy >= 6 || ix < 0 || ix >= 9 {
                                    continue;
                                }
                                acc += w.data()[((co * 2 + ci) * 3 + ky) * 4 + kx]
                                    * x.data()[(ci * 6 + iy as usize) * 9 + ix as usize];
                            }
                        }
                    }
                    assert!((acc - y.data()[(co * oh + oy) * ow + ox]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn grad_embedding_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let leaves = vec![rand_tensor(&mut rng, &[6, 4]), rand_tensor(&mut rng, &[4, 6])];
        check_grads(
            leaves,
            |t, v| {
                let e = t.embedding(v[0], &[0, 3, 3, 5]);
                let logits = t.matmul(e, v[1]);
                t.cross_entropy(logits, &[1, 2, 0, 5])
            },
            1e-2,
            2e-3,
        );
    }

    #[test]
    fn grad_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let leaves = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
        check_grads(
            leaves,
            |t, v| {
                let a = t.l1_loss(v[0], v[1]);
                let b = t.mse_loss(v[0], v[1]);
                let c = t.row_sq_dist_mean(v[0], v[1]);
                let d = t.hinge(v[0], 1.0);
                let e = t.hinge(v[1], -1.0);
                t.weighted_sum(&[(a, 0.5), (b, 2.0), (c, 1.0), (d, 1.0), (e, 3.0)])
            },
            1e-3,
            3e-3,
        );
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let b = t.param(Tensor::new(vec![2], vec![0.5, 0.5]));
        let ad = t.detach(a);
        let s = t.mul(ad, b);
        let l = t.mean(s);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[0.5, 1.0]);
    }

    #[test]
    fn straight_through_passes_identity() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![1, 2], vec![0.3, -0.7]));
        let q = t.straight_through(x, Tensor::new(vec![1, 2], vec![0.0, -1.0]));
        assert_eq!(t.value(q).data(), &[0.0, -1.0]);
        let s = t.mul(q, q);
        let l = t.mean(s);
        let g = t.backward(l);
        // d/dq mean(q^2) = q, passed through unchanged
        assert_eq!(g.get(x).unwrap().data(), &[0.0, -1.0]);
    }
}
