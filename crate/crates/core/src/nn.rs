//! Layers shared by the proposal, captioning, and question-answering models.
//!
//! Layers own only [`ParamId`]s; values live in a [`ParamStore`] and every
//! forward pass goes through a [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, in_dim, out_dim));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, in_dim, out_dim));
        Self {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}

/// Two-layer position-wise map `tanh(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            outer: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.tanh(h);
        self.outer.forward(g, h)
    }
}

/// Scaled dot-product attention with `heads` heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads >= 1 && dim % heads == 0,
            "attention dim {dim} not divisible by {heads} heads"
        );
        Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// `mask`, when given, is added to the `Lq×Lk` scores before the softmax.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, mask: Option<&Tensor>) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mask = mask.map(|m| g.constant(m.clone()));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let weights = g.softmax_rows(scores);
            outs.push(g.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.output.forward(g, joined)
    }
}

/// Additive mask that blocks attention from position `i` to any `j > i`.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            m.set(i, j, -1e30);
        }
    }
    m
}

/// Gated recurrent unit.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        Self {
            input: Linear::new(store, rng, &format!("{name}.wx"), in_dim, 3 * hidden_dim),
            hidden: Linear::new(
                store,
                rng,
                &format!("{name}.wh"),
                hidden_dim,
                3 * hidden_dim,
            ),
            hidden_dim,
        }
    }

    /// Runs over the rows of `xs` (forward or reversed) and returns the hidden
    /// state at every input position, in input order, as a `T×hidden` node.
    pub fn run(&self, g: &mut Graph, xs: Var, reverse: bool) -> Var {
        let steps = g.shape(xs).0;
        let h_dim = self.hidden_dim;
        let projected = self.input.forward(g, xs);
        let mut h = g.constant(Tensor::zeros(1, h_dim));
        let mut states = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let gx = g.slice_rows(projected, t, 1);
            let gh = self.hidden.forward(g, h);
            let gx_rz = g.slice_cols(gx, 0, 2 * h_dim);
            let gh_rz = g.slice_cols(gh, 0, 2 * h_dim);
            let rz = g.add(gx_rz, gh_rz);
            let rz = g.sigmoid(rz);
            let r = g.slice_cols(rz, 0, h_dim);
            let z = g.slice_cols(rz, h_dim, h_dim);
            let gx_n = g.slice_cols(gx, 2 * h_dim, h_dim);
            let gh_n = g.slice_cols(gh, 2 * h_dim, h_dim);
            let gated = g.mul(r, gh_n);
            let n = g.add(gx_n, gated);
            let n = g.tanh(n);
            let diff = g.sub(h, n);
            let keep = g.mul(z, diff);
            h = g.add(n, keep);
            states[t] = h;
        }
        g.concat_rows(&states)
    }
}

/// Temporal convolution with odd kernel and zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: usize,
    pub linear: Linear,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            kernel,
            linear: Linear::new(store, rng, name, kernel * in_dim, out_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let steps = g.shape(x).0;
        let half = (self.kernel / 2) as isize;
        let taps: Vec<Var> = (-half..=half)
            .map(|offset| {
                if offset == 0 {
                    return x;
                }
                let shift = g.constant(shift_matrix(steps, offset));
                g.matmul(shift, x)
            })
            .collect();
        let stacked = if taps.len() == 1 {
            taps[0]
        } else {
            g.concat_cols(&taps)
        };
        self.linear.forward(g, stacked)
    }
}

/// `(S·x)[t] = x[t + offset]`, zero outside the sequence.
pub fn shift_matrix(steps: usize, offset: isize) -> Tensor {
    let mut s = Tensor::zeros(steps, steps);
    for t in 0..steps {
        let src = t as isize + offset;
        if (0..steps as isize).contains(&src) {
            s.set(t, src as usize, 1.0);
        }
    }
    s
}

/// Sinusoidal encoding for integer positions `0..len`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..len).map(|p| sinusoid(p as f64, dim)).collect();
    if rows.is_empty() {
        Tensor::zeros(0, dim)
    } else {
        Tensor::from_rows(&rows)
    }
}

/// Sinusoidal encoding of a real-valued position.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}
