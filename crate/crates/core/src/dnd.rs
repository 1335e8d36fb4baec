//! Dynamic nomination decoder.
//!
//! Words attend causally to each other, then to each consolidated encoder
//! stream through shared cross-attention and feed-forward weights with
//! private layer norms. A nomination head picks, per word, which of the two
//! stream-conditioned candidates continues to the next layer.

use dsct_tensor::{ParamId, Scalar, Tensor, Var};

use crate::error::{contract, Result};
use crate::nn::{
    double_residual, ff_residual, Activation, Attention, Init, LayerNorm, Linear, Nomination, Pwff,
    Session,
};
use crate::psmae::StreamPair;

/// Which memory a cross-attention branch reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Region = 0,
    Segmentation = 1,
}

/// How the two stream candidates are merged per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FusionHead {
    /// `Linear(d → 2)` producing the nomination logits.
    Nominate(Linear),
    Add,
    /// `(z_r ∥ z_s)·W_c` with `W_c: 2d × d`.
    Concat(Linear),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedDecoder {
    pub mha: Attention,
    pub pwff: Pwff,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderDims {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub act: Activation,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DndLayer {
    pub text: Attention,
    pub ln_t: [LayerNorm; 2],
    /// Cross-attention weights used by the region (`[0]`) and segmentation
    /// (`[1]`) branches; identical ids unless built unshared.
    pub shared: [SharedDecoder; 2],
    pub ln_rs0: LayerNorm,
    pub ln_r: [LayerNorm; 2],
    pub ln_s: [LayerNorm; 2],
    pub fusion: FusionHead,
}

/// Result of merging the two candidates.
pub struct Fused {
    pub z: Var,
    /// Nomination weights (`seq × 2`), present for the nominate head.
    pub psi: Option<Var>,
    pub gamma: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Nominate,
    Add,
    Concat,
}

impl DndLayer {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        dims: &DecoderDims,
        fusion: FusionKind,
    ) -> Result<Self> {
        let d = dims.d;
        let ln = |init: &mut Init<T>, n: &str| LayerNorm::new(init, &format!("{name}.{n}"), d, dims.eps);
        let text = Attention::new(init, &format!("{name}.text"), d, dims.heads)?;
        let ln_t = [ln(init, "ln_t0")?, ln(init, "ln_t1")?];
        let shared = Self::shared_block(init, name, dims)?;
        let ln_rs0 = ln(init, "ln_rs0")?;
        let ln_r = [ln(init, "ln_r0")?, ln(init, "ln_r1")?];
        let ln_s = [ln(init, "ln_s0")?, ln(init, "ln_s1")?];
        let fusion = match fusion {
            FusionKind::Nominate => FusionHead::Nominate(Linear::new(init, &format!("{name}.dnm"), d, 2, true)?),
            FusionKind::Add => FusionHead::Add,
            FusionKind::Concat => FusionHead::Concat(Linear::new(init, &format!("{name}.concat"), 2 * d, d, false)?),
        };
        Ok(Self {
            text,
            ln_t,
            shared: [shared.clone(), shared],
            ln_rs0,
            ln_r,
            ln_s,
            fusion,
        })
    }

    fn shared_block<T: Scalar>(init: &mut Init<T>, name: &str, dims: &DecoderDims) -> Result<SharedDecoder> {
        Ok(SharedDecoder {
            mha: Attention::new(init, &format!("{name}.mha"), dims.d, dims.heads)?,
            pwff: Pwff::new(init, &format!("{name}.pwff"), dims.d, dims.d_ff, dims.act)?,
        })
    }

    /// Like [`DndLayer::new`] but the segmentation branch owns a copy of the
    /// shared weights with identical initial values.
    pub fn new_unshared<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        dims: &DecoderDims,
        fusion: FusionKind,
    ) -> Result<Self> {
        let mut layer = Self::new(init, name, dims, fusion)?;
        let copy = Self::shared_block(init, &format!("{name}.seg_copy"), dims)?;
        for (src, dst) in layer.shared_ids(0).into_iter().zip(shared_ids(&copy)) {
            let value = init.store.get(src).clone();
            init.store.set(dst, value)?;
        }
        layer.shared[1] = copy;
        Ok(layer)
    }

    pub fn shared_ids(&self, stream: usize) -> Vec<ParamId> {
        shared_ids(&self.shared[stream])
    }

    pub fn numel(d: usize, d_ff: usize, fusion: FusionKind) -> usize {
        let head = match fusion {
            FusionKind::Nominate => Linear::numel(d, 2, true),
            FusionKind::Add => 0,
            FusionKind::Concat => Linear::numel(2 * d, d, false),
        };
        2 * Attention::numel(d) + Pwff::numel(d, d_ff) + 7 * LayerNorm::numel(d) + head
    }

    /// Causal self-attention over the words: `Ẑ_t`.
    pub fn text_self_attend<T: Scalar>(&self, s: &mut Session<T>, z_t: Var) -> Result<Var> {
        let a = self.text.masked_self(s, z_t)?;
        double_residual(s, a, z_t, &self.ln_t[0], &self.ln_t[1])
    }

    /// One stream branch: shared cross-attention and feed-forward with the
    /// stream's private norms.
    pub fn cross_attend_stream<T: Scalar>(
        &self,
        s: &mut Session<T>,
        hat_t: Var,
        mem: Var,
        which: Stream,
    ) -> Result<Var> {
        let w = &self.shared[which as usize];
        let ln = match which {
            Stream::Region => &self.ln_r,
            Stream::Segmentation => &self.ln_s,
        };
        let a = w.mha.forward(s, hat_t, mem, mem, &dsct_tensor::Mask::None)?;
        let m = double_residual(s, a, hat_t, &self.ln_rs0, &ln[0])?;
        ff_residual(s, &w.pwff, m, &ln[1])
    }

    pub fn fuse<T: Scalar>(&self, s: &mut Session<T>, z_tr: Var, z_ts: Var) -> Result<Fused> {
        match &self.fusion {
            FusionHead::Nominate(head) => dnm_nominate(s, head, z_tr, z_ts),
            FusionHead::Add => Ok(Fused {
                z: s.g.add(z_tr, z_ts)?,
                psi: None,
                gamma: None,
            }),
            FusionHead::Concat(w) => {
                let cat = s.g.concat_cols(&[z_tr, z_ts])?;
                Ok(Fused {
                    z: w.forward(s, cat)?,
                    psi: None,
                    gamma: None,
                })
            }
        }
    }

    /// Full layer: returns the next word states and this layer's fusion.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, z_t: Var, mem: StreamPair) -> Result<Fused> {
        let hat = self.text_self_attend(s, z_t)?;
        let z_tr = self.cross_attend_stream(s, hat, mem.r, Stream::Region)?;
        let z_ts = self.cross_attend_stream(s, hat, mem.s, Stream::Segmentation)?;
        self.fuse(s, z_tr, z_ts)
    }
}

fn shared_ids(w: &SharedDecoder) -> Vec<ParamId> {
    let mut ids = vec![w.mha.wq, w.mha.wk, w.mha.wv, w.mha.wo, w.pwff.l1.w];
    ids.extend(w.pwff.l1.b);
    ids.push(w.pwff.l2.w);
    ids.extend(w.pwff.l2.b);
    ids
}

/// One-hot rows at the per-row argmax (lowest index wins ties).
pub fn one_hot_argmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let cols = logits.cols();
    let mut out = Tensor::zeros(logits.shape());
    for (i, j) in logits.argmax_rows().into_iter().enumerate() {
        out.data_mut()[i * cols + j] = T::one();
    }
    out
}

/// Nomination between the region candidate `z_tr` and the segmentation
/// candidate `z_ts`.
///
/// `Γ = (z_tr + z_ts)·W + b`. With Gumbel noise enabled, i.i.d. Gumbel(0,1)
/// samples are added to `Γ` first. The forward weights `Ψ` are the one-hot
/// argmax of the (noisy) logits; the gradient flows through
/// `softmax(logits / temperature)`.
pub fn dnm_nominate<T: Scalar>(s: &mut Session<T>, head: &Linear, z_tr: Var, z_ts: Var) -> Result<Fused> {
    if !(s.temperature > 0.0) {
        return contract(format!("Gumbel temperature must be positive, got {}", s.temperature));
    }
    let sum = s.g.add(z_tr, z_ts)?;
    let gamma = head.forward(s, sum)?;
    let logits = if s.mode.gumbel_noise {
        let shape = s.g.shape(gamma).to_vec();
        let n = shape.iter().product();
        let noise: Vec<T> = (0..n).map(|_| T::lit(s.rng.gumbel())).collect();
        let noise = s.g.constant(Tensor::new(&shape, noise)?)?;
        s.g.add(gamma, noise)?
    } else {
        gamma
    };
    let scaled = s.g.scale(logits, T::lit(1.0 / s.temperature))?;
    let soft = s.g.softmax(scaled, 1)?;
    let psi = match s.mode.nomination {
        Nomination::Hard => {
            let hard = one_hot_argmax(s.g.value(logits));
            s.g.straight_through(hard, soft)?
        }
        Nomination::Soft => soft,
    };
    let z = s.g.weighted_pair(z_tr, z_ts, psi)?;
    Ok(Fused {
        z,
        psi: Some(psi),
        gamma: Some(gamma),
    })
}

/// Runs the decoder layers; collects each layer's nomination weights.
pub fn decode_stack<T: Scalar>(
    layers: &[DndLayer],
    s: &mut Session<T>,
    z_t: Var,
    mem: StreamPair,
) -> Result<(Var, Vec<Option<Var>>)> {
    if layers.is_empty() {
        return contract("decoder stack needs at least one layer");
    }
    let mut z = z_t;
    let mut psis = Vec::with_capacity(layers.len());
    for layer in layers {
        let f = layer.forward(s, z, mem)?;
        z = f.z;
        psis.push(f.psi);
    }
    Ok((z, psis))
}
