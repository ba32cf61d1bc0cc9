//! Parameterized building blocks: affine projections, multi-head
//! self-attention, an LSTM cell and sinusoidal positional encodings.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x·W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), xavier_uniform(rng, in_dim, out_dim))?;
        let b = if bias {
            Some(store.register(&format!("{name}.b"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// One multi-head self-attention application: project to queries, keys and
/// values, attend within each sequence, project the concatenated heads.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        bias: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::GpnError::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(SelfAttention {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim, bias)?,
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim, bias)?,
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim, bias)?,
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim, bias)?,
            heads,
        })
    }

    /// `x` is `[batch·seq, dim]`; sequences are consecutive row blocks.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, seq: usize) -> Result<Var> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let attended = g.attention(q, k, v, seq, self.heads)?;
        self.output.forward(g, store, attended)
    }
}

/// LSTM cell with fused gate weights. Gate blocks are ordered
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(LstmCell {
            w_input: store.register(&format!("{name}.w_x"), xavier_uniform(rng, input, 4 * hidden))?,
            w_hidden: store.register(&format!("{name}.w_h"), xavier_uniform(rng, hidden, 4 * hidden))?,
            bias: store.register(&format!("{name}.b"), Tensor::zeros(&[4 * hidden]))?,
            hidden,
        })
    }

    /// One step over a batch: `x: [b, in]`, `h, c: [b, hidden]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wx = g.param(store, self.w_input);
        let wh = g.param(store, self.w_hidden);
        let b = g.param(store, self.bias);
        let xg = g.matmul(x, wx)?;
        let hg = g.matmul(h, wh)?;
        let sum = g.add(xg, hg)?;
        let gates = g.add_row(sum, b)?;
        let n = self.hidden;
        let i = g.slice_cols(gates, 0, n)?;
        let f = g.slice_cols(gates, n, 2 * n)?;
        let cand = g.slice_cols(gates, 2 * n, 3 * n)?;
        let o = g.slice_cols(gates, 3 * n, 4 * n)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// Sinusoidal positional encoding `[n, dim]`: even columns `sin`, odd `cos`
/// of `pos / 10000^(2i/dim)`.
pub fn sinusoidal_encoding(n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; n * dim];
    for pos in 0..n {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(n, dim, data).expect("encoding shape")
}
