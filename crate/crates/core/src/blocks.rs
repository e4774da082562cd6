//! Reusable attention and feed-forward blocks shared by the backbone, the
//! memory compressor and the fusion layers.

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

/// How an output projection is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutInit {
    Random,
    Zero,
}

pub(crate) fn add_linear(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut SeededRng,
    trainable: bool,
    init: OutInit,
) -> Result<ParamId> {
    let value = match init {
        OutInit::Random => rng.normal_tensor(&[rows, cols], 1.0 / (rows as f64).sqrt()),
        OutInit::Zero => Tensor::zeros(&[rows, cols]),
    };
    store.add(name, value, trainable)
}

pub(crate) fn add_gain(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Result<ParamId> {
    store.add(name, Tensor::full(&[1, d], 1.0), trainable)
}

pub(crate) fn add_bias(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Result<ParamId> {
    store.add(name, Tensor::zeros(&[1, d]), trainable)
}

/// Multi-head attention with a pre-norm on the query side and optionally on
/// the key/value side. No projection biases.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub norm_q: ParamId,
    pub norm_kv: Option<ParamId>,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        norm_kv: bool,
        out: OutInit,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            heads,
            norm_q: add_gain(store, &format!("{prefix}.norm_q"), d, trainable)?,
            norm_kv: if norm_kv {
                Some(add_gain(store, &format!("{prefix}.norm_kv"), d, trainable)?)
            } else {
                None
            },
            wq: add_linear(store, &format!("{prefix}.wq"), d, d, rng, trainable, OutInit::Random)?,
            wk: add_linear(store, &format!("{prefix}.wk"), d, d, rng, trainable, OutInit::Random)?,
            wv: add_linear(store, &format!("{prefix}.wv"), d, d, rng, trainable, OutInit::Random)?,
            wo: add_linear(store, &format!("{prefix}.wo"), d, d, rng, trainable, out)?,
        })
    }

    /// Attention output after the output projection, without residual.
    /// `x` supplies queries and `kv` keys and values.
    pub fn forward(&self, g: &mut Graph, x: Var, kv: Var, bias: Option<&Tensor>) -> Result<Var> {
        Ok(self.attend(g, x, kv, bias)?.0)
    }

    /// Like [`forward`](Self::forward), also returning the raw attention node
    /// (before the output projection) so its weights can be inspected.
    pub fn attend(&self, g: &mut Graph, x: Var, kv: Var, bias: Option<&Tensor>) -> Result<(Var, Var)> {
        let gq = g.param(self.norm_q);
        let xn = g.rms_norm(x, gq, NORM_EPS)?;
        let kvn = match self.norm_kv {
            Some(_) if kv == x => xn,
            Some(id) => {
                let gk = g.param(id);
                g.rms_norm(kv, gk, NORM_EPS)?
            }
            None => kv,
        };
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.linear(xn, wq, None)?;
        let k = g.linear(kvn, wk, None)?;
        let v = g.linear(kvn, wv, None)?;
        let d = g.value(q).cols();
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let a = g.attention(q, k, v, self.heads, scale, bias)?;
        Ok((g.linear(a, wo, None)?, a))
    }

    /// Self-attention residual block `x + Attn(norm(x))`.
    pub fn residual(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.forward(g, x, x, None)?;
        g.add(x, a)
    }
}

/// Pre-norm SiLU feed-forward block.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub norm: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        out: OutInit,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            norm: add_gain(store, &format!("{prefix}.norm"), d, trainable)?,
            w1: add_linear(store, &format!("{prefix}.w1"), d, hidden, rng, trainable, OutInit::Random)?,
            b1: add_bias(store, &format!("{prefix}.b1"), hidden, trainable)?,
            w2: add_linear(store, &format!("{prefix}.w2"), hidden, d, rng, trainable, out)?,
            b2: add_bias(store, &format!("{prefix}.b2"), d, trainable)?,
        })
    }

    /// `x + W2·SiLU(W1·norm(x) + b1) + b2`.
    pub fn residual(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.norm);
        let xn = g.rms_norm(x, gain, NORM_EPS)?;
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.linear(xn, w1, Some(b1))?;
        let h = g.silu(h);
        let y = g.linear(h, w2, Some(b2))?;
        g.add(x, y)
    }
}
