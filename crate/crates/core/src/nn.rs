//! Transformer building blocks evaluated on a [`Session`].

use dsct_tensor::{DetRng, Graph, Mask, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// How the nomination head turns its logits into stream weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nomination {
    /// One-hot forward value, softmax gradient (straight-through).
    Hard,
    /// Plain softmax weights in both directions. Only meant for finite
    /// difference checks, which cannot see through the hard path.
    Soft,
}

/// Stochastic switches for one forward evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub dropout: bool,
    pub gumbel_noise: bool,
    pub nomination: Nomination,
}

impl ForwardMode {
    pub const TRAIN: Self = Self {
        dropout: true,
        gumbel_noise: true,
        nomination: Nomination::Hard,
    };
    pub const INFER: Self = Self {
        dropout: false,
        gumbel_noise: false,
        nomination: Nomination::Hard,
    };
    /// Dropout off, Gumbel noise on: used when sampling captions for SCST.
    pub const SAMPLE: Self = Self {
        dropout: false,
        gumbel_noise: true,
        nomination: Nomination::Hard,
    };
    pub const SOFT: Self = Self {
        dropout: false,
        gumbel_noise: false,
        nomination: Nomination::Soft,
    };
}

/// A graph bound to a parameter store plus the randomness and switches of
/// one forward evaluation.
pub struct Session<'p, T: Scalar> {
    pub g: Graph<T>,
    pub params: &'p ParamStore<T>,
    pub rng: DetRng,
    pub mode: ForwardMode,
    pub keep_prob: f64,
    pub temperature: f64,
}

impl<'p, T: Scalar> Session<'p, T> {
    /// Session that records the tape for a backward pass.
    pub fn train(params: &'p ParamStore<T>, mode: ForwardMode, rng: DetRng) -> Self {
        Self::with_graph(Graph::new(), params, mode, rng)
    }

    /// Session without gradient bookkeeping.
    pub fn infer(params: &'p ParamStore<T>, mode: ForwardMode, rng: DetRng) -> Self {
        Self::with_graph(Graph::inference(), params, mode, rng)
    }

    fn with_graph(g: Graph<T>, params: &'p ParamStore<T>, mode: ForwardMode, rng: DetRng) -> Self {
        Self {
            g,
            params,
            rng,
            mode,
            keep_prob: 1.0,
            temperature: 1.0,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Result<Var> {
        Ok(self.g.param(self.params, id)?)
    }

    /// Dropout with the session's keep probability, active only when the
    /// mode enables it.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let training = self.mode.dropout;
        dropout(&mut self.g, x, self.keep_prob, &mut self.rng, training)
    }
}

/// Inverted dropout: survivors are scaled by `1/keep_prob`.
pub fn dropout<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    keep_prob: f64,
    rng: &mut DetRng,
    training: bool,
) -> Result<Var> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return contract(format!("keep_prob must lie in (0, 1], got {keep_prob}"));
    }
    if !training || keep_prob == 1.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let kept = T::lit(1.0 / keep_prob);
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.uniform() < keep_prob { kept } else { T::zero() })
        .collect();
    let m = g.constant(Tensor::new(&shape, mask)?)?;
    Ok(g.mul(x, m)?)
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_pe<T: Scalar>(seq_len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model == 0 || d_model % 2 != 0 {
        return contract(format!("positional encoding needs an even width, got {d_model}"));
    }
    let mut data = Vec::with_capacity(seq_len * d_model);
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data.push(T::lit(angle.sin()));
            data.push(T::lit(angle.cos()));
        }
    }
    Ok(Tensor::new(&[seq_len, d_model], data)?)
}

/// Adds freshly initialised parameters to a store.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut DetRng,
}

impl<T: Scalar> Init<'_, T> {
    /// Xavier-uniform `rows × cols` matrix.
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = self.rng.uniform_vec(rows * cols, -limit, limit);
        Ok(self.store.add(name, Tensor::new(&[rows, cols], data)?)?)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let data = self.rng.normal_vec(rows * cols, std);
        Ok(self.store.add(name, Tensor::new(&[rows, cols], data)?)?)
    }

    pub fn full(&mut self, name: &str, len: usize, value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(&[len], T::lit(value)))?)
    }
}

/// `x·W (+ b)` with `W: d_in × d_out`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = init.matrix(&format!("{name}.w"), d_in, d_out)?;
        let b = if bias {
            Some(init.full(&format!("{name}.b"), d_out, 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn numel(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.p(self.w)?;
        let y = s.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.p(b)?;
                Ok(s.g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis followed by `·alpha + beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return contract(format!("layer norm epsilon must be positive, got {eps}"));
        }
        Ok(Self {
            alpha: init.full(&format!("{name}.alpha"), d, 1.0)?,
            beta: init.full(&format!("{name}.beta"), d, 0.0)?,
            eps,
        })
    }

    pub fn numel(d: usize) -> usize {
        2 * d
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let d = s.params.get(self.alpha).numel();
        let last = *s.g.shape(x).last().unwrap_or(&0);
        if last != d {
            return Err(dsct_tensor::TensorError::Shape {
                op: "layer_norm",
                lhs: s.g.shape(x).to_vec(),
                rhs: vec![d],
            }
            .into());
        }
        let z = s.g.standardize(x, T::lit(self.eps))?;
        let a = s.p(self.alpha)?;
        let b = s.p(self.beta)?;
        let z = s.g.mul(z, a)?;
        Ok(s.g.add(z, b)?)
    }
}

/// Multi-head attention with bias-free projections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return contract(format!("{heads} heads do not divide d_model {d}"));
        }
        Ok(Self {
            wq: init.matrix(&format!("{name}.wq"), d, d)?,
            wk: init.matrix(&format!("{name}.wk"), d, d)?,
            wv: init.matrix(&format!("{name}.wv"), d, d)?,
            wo: init.matrix(&format!("{name}.wo"), d, d)?,
            heads,
        })
    }

    pub fn numel(d: usize) -> usize {
        4 * d * d
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        q: Var,
        k: Var,
        v: Var,
        mask: &Mask,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (s.p(self.wq)?, s.p(self.wk)?, s.p(self.wv)?, s.p(self.wo)?);
        let q = s.g.matmul(q, wq)?;
        let k = s.g.matmul(k, wk)?;
        let v = s.g.matmul(v, wv)?;
        let a = s.g.attention(q, k, v, self.heads, mask)?;
        Ok(s.g.matmul(a, wo)?)
    }

    /// Self-attention where position `i` sees positions `j <= i`.
    pub fn masked_self<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        self.forward(s, x, x, x, &Mask::Causal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Tanh approximation.
    Gelu,
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            _ => Err(format!("unknown activation {s:?} (expected relu or gelu)")),
        }
    }
}

/// Position-wise feed-forward: `act(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pwff {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl Pwff {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        d: usize,
        d_ff: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(init, &format!("{name}.l1"), d, d_ff, true)?,
            l2: Linear::new(init, &format!("{name}.l2"), d_ff, d, true)?,
            act,
        })
    }

    pub fn numel(d: usize, d_ff: usize) -> usize {
        Linear::numel(d, d_ff, true) + Linear::numel(d_ff, d, true)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = activate(&mut s.g, h, self.act)?;
        self.l2.forward(s, h)
    }
}

pub fn activate<T: Scalar>(g: &mut Graph<T>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => Ok(g.relu(x)?),
        Activation::Gelu => {
            let x2 = g.mul(x, x)?;
            let x3 = g.mul(x2, x)?;
            let c = g.scale(x3, T::lit(0.044715))?;
            let inner = g.add(x, c)?;
            let inner = g.scale(inner, T::lit((2.0 / std::f64::consts::PI).sqrt()))?;
            let t = g.tanh(inner)?;
            let t = g.add_scalar(t, T::one())?;
            let y = g.mul(x, t)?;
            Ok(g.scale(y, T::lit(0.5))?)
        }
    }
}

/// `LN(LN(sub + x; first) + x; second)`: the doubly normalised residual
/// used around every attention sub-layer of the model.
pub fn double_residual<T: Scalar>(
    s: &mut Session<T>,
    sub: Var,
    x: Var,
    first: &LayerNorm,
    second: &LayerNorm,
) -> Result<Var> {
    let sub = s.dropout(sub)?;
    let a = s.g.add(sub, x)?;
    let a = first.forward(s, a)?;
    let b = s.g.add(a, x)?;
    second.forward(s, b)
}

/// `LN(PWFF(m) + m; ln)`.
pub fn ff_residual<T: Scalar>(s: &mut Session<T>, ff: &Pwff, m: Var, ln: &LayerNorm) -> Result<Var> {
    let h = ff.forward(s, m)?;
    let h = s.dropout(h)?;
    let a = s.g.add(h, m)?;
    ln.forward(s, a)
}
