//! Pattern-specific mutual attention encoder.
//!
//! Each layer first consolidates every stream with self-attention and a
//! feed-forward block whose weights are shared by both streams, normalised
//! by layer norms private to the stream. The two streams then query each
//! other through a shared cross-attention.

use dsct_tensor::{Mask, Scalar, Var};

use crate::error::{contract, Result};
use crate::nn::{double_residual, ff_residual, Activation, Attention, Init, LayerNorm, Pwff, Session};

/// Region and segmentation sequences, `N_r × d` and `N_s × d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamPair {
    pub r: Var,
    pub s: Var,
}

/// The weights both streams share in one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedEncoder {
    pub mhsa0: Attention,
    pub mha1: Attention,
    pub pwff: Pwff,
}

impl SharedEncoder {
    fn new<T: Scalar>(init: &mut Init<T>, name: &str, dims: &EncoderDims) -> Result<Self> {
        Ok(Self {
            mhsa0: Attention::new(init, &format!("{name}.mhsa0"), dims.d, dims.heads)?,
            mha1: Attention::new(init, &format!("{name}.mha1"), dims.d, dims.heads)?,
            pwff: Pwff::new(init, &format!("{name}.pwff"), dims.d, dims.d_ff, dims.act)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderDims {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub act: Activation,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsmaeLayer {
    /// Weights applied to the region stream (`[0]`) and to the segmentation
    /// stream (`[1]`). Both entries hold the same parameter ids unless the
    /// layer was built with [`PsmaeLayer::new_unshared`].
    pub shared: [SharedEncoder; 2],
    pub ln_r: [LayerNorm; 5],
    pub ln_s: [LayerNorm; 5],
}

fn five_norms<T: Scalar>(init: &mut Init<T>, name: &str, dims: &EncoderDims) -> Result<[LayerNorm; 5]> {
    let mk = |i: usize, init: &mut Init<T>| LayerNorm::new(init, &format!("{name}{i}"), dims.d, dims.eps);
    Ok([mk(0, init)?, mk(1, init)?, mk(2, init)?, mk(3, init)?, mk(4, init)?])
}

impl PsmaeLayer {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dims: &EncoderDims) -> Result<Self> {
        let shared = SharedEncoder::new(init, name, dims)?;
        Ok(Self {
            shared: [shared.clone(), shared],
            ln_r: five_norms(init, &format!("{name}.ln_r"), dims)?,
            ln_s: five_norms(init, &format!("{name}.ln_s"), dims)?,
        })
    }

    /// A layer whose segmentation stream uses its own copy of the shared
    /// weights, initialised to the same values. Gradients of the copies
    /// isolate each stream's contribution to the shared gradient.
    pub fn new_unshared<T: Scalar>(init: &mut Init<T>, name: &str, dims: &EncoderDims) -> Result<Self> {
        let mut layer = Self::new(init, name, dims)?;
        let copy = SharedEncoder::new(init, &format!("{name}.seg_copy"), dims)?;
        for (src, dst) in layer.shared_ids(0).into_iter().zip(shared_ids(&copy)) {
            let value = init.store.get(src).clone();
            init.store.set(dst, value)?;
        }
        layer.shared[1] = copy;
        Ok(layer)
    }

    pub fn shared_ids(&self, stream: usize) -> Vec<dsct_tensor::ParamId> {
        shared_ids(&self.shared[stream])
    }

    pub fn numel(d: usize, d_ff: usize) -> usize {
        2 * Attention::numel(d) + Pwff::numel(d, d_ff) + 10 * LayerNorm::numel(d)
    }

    fn consolidate_one<T: Scalar>(
        s: &mut Session<T>,
        w: &SharedEncoder,
        ln: &[LayerNorm; 5],
        z: Var,
    ) -> Result<Var> {
        let a = w.mhsa0.forward(s, z, z, z, &Mask::None)?;
        let m = double_residual(s, a, z, &ln[0], &ln[1])?;
        ff_residual(s, &w.pwff, m, &ln[2])
    }

    /// Self-consolidation of both streams; returns the `Ẑ` pair.
    pub fn consolidate<T: Scalar>(&self, s: &mut Session<T>, pair: StreamPair) -> Result<StreamPair> {
        Ok(StreamPair {
            r: Self::consolidate_one(s, &self.shared[0], &self.ln_r, pair.r)?,
            s: Self::consolidate_one(s, &self.shared[1], &self.ln_s, pair.s)?,
        })
    }

    /// Each stream queries the other: the updated stream supplies the query
    /// and the residual, the other stream supplies keys and values.
    pub fn cross_query<T: Scalar>(&self, s: &mut Session<T>, hat: StreamPair) -> Result<StreamPair> {
        let ar = self.shared[0].mha1.forward(s, hat.r, hat.s, hat.s, &Mask::None)?;
        let r = double_residual(s, ar, hat.r, &self.ln_r[3], &self.ln_r[4])?;
        let as_ = self.shared[1].mha1.forward(s, hat.s, hat.r, hat.r, &Mask::None)?;
        let z = double_residual(s, as_, hat.s, &self.ln_s[3], &self.ln_s[4])?;
        Ok(StreamPair { r, s: z })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, pair: StreamPair) -> Result<StreamPair> {
        let hat = self.consolidate(s, pair)?;
        self.cross_query(s, hat)
    }
}

fn shared_ids(w: &SharedEncoder) -> Vec<dsct_tensor::ParamId> {
    let att = |a: &Attention| [a.wq, a.wk, a.wv, a.wo];
    let mut ids = Vec::new();
    ids.extend(att(&w.mhsa0));
    ids.extend(att(&w.mha1));
    ids.push(w.pwff.l1.w);
    ids.extend(w.pwff.l1.b);
    ids.push(w.pwff.l2.w);
    ids.extend(w.pwff.l2.b);
    ids
}

/// Applies the layers in order; the result feeds every decoder layer.
pub fn encode_stack<T: Scalar>(
    layers: &[PsmaeLayer],
    s: &mut Session<T>,
    pair: StreamPair,
) -> Result<StreamPair> {
    if layers.is_empty() {
        return contract("encoder stack needs at least one layer");
    }
    layers.iter().try_fold(pair, |p, layer| layer.forward(s, p))
}
