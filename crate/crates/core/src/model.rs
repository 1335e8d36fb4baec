//! End-to-end captioners: the dual-stream model, its fusion variants and the
//! single-stream baseline.

use std::fmt;
use std::str::FromStr;

use dsct_tensor::{DetRng, Mask, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decode::{self, BeamConfig, Hypothesis};
use crate::dnd::{decode_stack, DecoderDims, DndLayer, FusionKind};
use crate::error::{contract, Error, Result};
use crate::nn::{
    double_residual, ff_residual, sinusoidal_pe, Activation, Attention, ForwardMode, Init, LayerNorm,
    Linear, Pwff, Session,
};
use crate::psmae::{encode_stack, EncoderDims, PsmaeLayer, StreamPair};

/// Which architecture the decoder fuses with (or whether there is a second
/// stream at all).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Dynamic nomination between the two streams.
    Dnm,
    /// Element-wise sum of the two candidates.
    Add,
    /// Concatenation followed by a `2d × d` projection.
    Concat,
    /// Region stream only, plain transformer encoder and decoder.
    Baseline,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [Fusion::Baseline, Fusion::Add, Fusion::Concat, Fusion::Dnm];

    /// Row label used by the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Fusion::Baseline => "baseline",
            Fusion::Add => "psmae_add",
            Fusion::Concat => "psmae_concat",
            Fusion::Dnm => "dsct",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Dnm => "dnm",
            Fusion::Add => "add",
            Fusion::Concat => "concat",
            Fusion::Baseline => "baseline",
        })
    }
}

impl FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dnm" | "dsct" => Ok(Fusion::Dnm),
            "add" | "psmae_add" => Ok(Fusion::Add),
            "concat" | "psmae_concat" => Ok(Fusion::Concat),
            "baseline" => Ok(Fusion::Baseline),
            _ => Err(format!("unknown fusion mode {s:?} (expected dnm, add, concat or baseline)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    /// Temperature reached by linear annealing after `anneal_steps`.
    pub anneal_to: Option<f64>,
    pub anneal_steps: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            anneal_to: None,
            anneal_steps: 0,
        }
    }
}

impl GumbelConfig {
    pub fn temperature_at(&self, step: u64) -> f64 {
        match self.anneal_to {
            Some(end) if self.anneal_steps > 0 => {
                let f = (step as f64 / self.anneal_steps as f64).min(1.0);
                self.temperature + (end - self.temperature) * f
            }
            _ => self.temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub feature_dim_region: usize,
    pub feature_dim_seg: usize,
    pub keep_prob: f64,
    pub beam: usize,
    pub length_alpha: f64,
    pub gumbel: GumbelConfig,
    pub fusion: Fusion,
    pub activation: Activation,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Full-size settings: 512 wide, 8 heads, three encoder and three
    /// decoder layers over 2048-dimensional features.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            d_model: 512,
            heads: 8,
            enc_layers: 3,
            dec_layers: 3,
            d_ff: 2048,
            vocab_size,
            max_len: 20,
            feature_dim_region: 2048,
            feature_dim_seg: 2048,
            keep_prob: 0.9,
            beam: 5,
            length_alpha: 0.0,
            gumbel: GumbelConfig::default(),
            fusion: Fusion::Dnm,
            activation: Activation::Relu,
            ln_eps: 1e-5,
        }
    }

    /// Settings that train on one CPU core in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 128,
            max_len: 12,
            feature_dim_region: 32,
            feature_dim_seg: 32,
            ..Self::full(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("enc_layers and dec_layers must be at least 1".into());
        }
        if self.d_ff == 0 || self.feature_dim_region == 0 || self.feature_dim_seg == 0 {
            return bad("d_ff and feature dims must be positive".into());
        }
        if self.vocab_size <= crate::data::EOS as usize {
            return bad(format!("vocab_size {} leaves no room for reserved ids", self.vocab_size));
        }
        if self.beam == 0 {
            return bad("beam must be at least 1".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep_prob must lie in (0, 1], got {}", self.keep_prob));
        }
        if !(self.gumbel.temperature > 0.0) || self.gumbel.anneal_to.is_some_and(|t| !(t > 0.0)) {
            return bad("Gumbel temperatures must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if !(self.length_alpha >= 0.0) {
            return bad(format!("length_alpha must be non-negative, got {}", self.length_alpha));
        }
        Ok(())
    }

    /// Trainable scalar count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let (d, ff, v) = (self.d_model, self.d_ff, self.vocab_size);
        let proj_r = Linear::numel(self.feature_dim_region, d, true);
        let common = proj_r + v * d + Linear::numel(d, v, true);
        match self.fusion {
            Fusion::Baseline => {
                let enc = Attention::numel(d) + Pwff::numel(d, ff) + 3 * LayerNorm::numel(d);
                let dec = 2 * Attention::numel(d) + Pwff::numel(d, ff) + 5 * LayerNorm::numel(d);
                common + self.enc_layers * enc + self.dec_layers * dec
            }
            f => {
                let proj_s = Linear::numel(self.feature_dim_seg, d, true);
                common
                    + proj_s
                    + self.enc_layers * PsmaeLayer::numel(d, ff)
                    + self.dec_layers * DndLayer::numel(d, ff, fusion_kind(f))
            }
        }
    }
}

fn fusion_kind(f: Fusion) -> FusionKind {
    match f {
        Fusion::Add => FusionKind::Add,
        Fusion::Concat => FusionKind::Concat,
        _ => FusionKind::Nominate,
    }
}

/// Transformer encoder layer of the single-stream baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub att: Attention,
    pub pwff: Pwff,
    pub ln: [LayerNorm; 3],
}

impl EncoderLayer {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, z: Var) -> Result<Var> {
        let a = self.att.forward(s, z, z, z, &Mask::None)?;
        let m = double_residual(s, a, z, &self.ln[0], &self.ln[1])?;
        ff_residual(s, &self.pwff, m, &self.ln[2])
    }
}

/// Transformer decoder layer of the single-stream baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_att: Attention,
    pub cross: Attention,
    pub pwff: Pwff,
    pub ln: [LayerNorm; 5],
}

impl DecoderLayer {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, t: Var, h: Var) -> Result<Var> {
        let a = self.self_att.masked_self(s, t)?;
        let hat = double_residual(s, a, t, &self.ln[0], &self.ln[1])?;
        let c = self.cross.forward(s, hat, h, h, &Mask::None)?;
        let tilde = double_residual(s, c, hat, &self.ln[2], &self.ln[3])?;
        ff_residual(s, &self.pwff, tilde, &self.ln[4])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Dual(Vec<PsmaeLayer>),
    Single(Vec<EncoderLayer>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Dual(Vec<DndLayer>),
    Single(Vec<DecoderLayer>),
}

/// Parameter handles of a model; independent of the scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub proj_r: Linear,
    pub proj_s: Option<Linear>,
    pub embed: ParamId,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Linear,
}

/// Region and segmentation features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<T> {
    pub region: Tensor<T>,
    pub seg: Tensor<T>,
}

impl<T: Scalar> Features<T> {
    pub fn cast<U: Scalar>(&self) -> Features<U> {
        Features {
            region: self.region.cast(),
            seg: self.seg.cast(),
        }
    }
}

/// Decoder outputs of one forward pass.
pub struct Forward {
    /// `seq × vocab` unnormalised scores.
    pub logits: Var,
    /// Per-layer nomination weights (`None` for non-nominating fusions).
    pub psis: Vec<Option<Var>>,
}

/// Encoder output values, reusable across decoding steps.
#[derive(Clone, Debug)]
pub struct Memory<T> {
    pub region: Tensor<T>,
    pub seg: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialised model. Initial values depend only on
    /// `cfg` and `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, false)
    }

    /// A model whose streams hold separate copies of every shared weight.
    /// Only useful for isolating per-stream gradient contributions.
    pub fn new_unshared(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, true)
    }

    fn build(cfg: ModelConfig, seed: u64, unshared: bool) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = DetRng::new(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let ln = |init: &mut Init<T>, name: String| LayerNorm::new(init, &name, d, cfg.ln_eps);
        let proj_r = Linear::new(&mut init, "proj_r", cfg.feature_dim_region, d, true)?;
        let proj_s = match cfg.fusion {
            Fusion::Baseline => None,
            _ => Some(Linear::new(&mut init, "proj_s", cfg.feature_dim_seg, d, true)?),
        };
        let embed = init.normal("embed", cfg.vocab_size, d, (d as f64).powf(-0.5))?;
        let (encoder, decoder) = match cfg.fusion {
            Fusion::Baseline => {
                let mut enc = Vec::new();
                for l in 0..cfg.enc_layers {
                    let n = format!("enc{l}");
                    enc.push(EncoderLayer {
                        att: Attention::new(&mut init, &format!("{n}.att"), d, cfg.heads)?,
                        pwff: Pwff::new(&mut init, &format!("{n}.pwff"), d, ff, cfg.activation)?,
                        ln: [
                            ln(&mut init, format!("{n}.ln0"))?,
                            ln(&mut init, format!("{n}.ln1"))?,
                            ln(&mut init, format!("{n}.ln2"))?,
                        ],
                    });
                }
                let mut dec = Vec::new();
                for l in 0..cfg.dec_layers {
                    let n = format!("dec{l}");
                    dec.push(DecoderLayer {
                        self_att: Attention::new(&mut init, &format!("{n}.text"), d, cfg.heads)?,
                        cross: Attention::new(&mut init, &format!("{n}.mha"), d, cfg.heads)?,
                        pwff: Pwff::new(&mut init, &format!("{n}.pwff"), d, ff, cfg.activation)?,
                        ln: [
                            ln(&mut init, format!("{n}.ln0"))?,
                            ln(&mut init, format!("{n}.ln1"))?,
                            ln(&mut init, format!("{n}.ln2"))?,
                            ln(&mut init, format!("{n}.ln3"))?,
                            ln(&mut init, format!("{n}.ln4"))?,
                        ],
                    });
                }
                (Encoder::Single(enc), Decoder::Single(dec))
            }
            f => {
                let edims = EncoderDims {
                    d,
                    heads: cfg.heads,
                    d_ff: ff,
                    act: cfg.activation,
                    eps: cfg.ln_eps,
                };
                let ddims = DecoderDims {
                    d,
                    heads: cfg.heads,
                    d_ff: ff,
                    act: cfg.activation,
                    eps: cfg.ln_eps,
                };
                let mut enc = Vec::new();
                for l in 0..cfg.enc_layers {
                    let n = format!("psmae{l}");
                    enc.push(if unshared {
                        PsmaeLayer::new_unshared(&mut init, &n, &edims)?
                    } else {
                        PsmaeLayer::new(&mut init, &n, &edims)?
                    });
                }
                let mut dec = Vec::new();
                for l in 0..cfg.dec_layers {
                    let n = format!("dnd{l}");
                    dec.push(if unshared {
                        DndLayer::new_unshared(&mut init, &n, &ddims, fusion_kind(f))?
                    } else {
                        DndLayer::new(&mut init, &n, &ddims, fusion_kind(f))?
                    });
                }
                (Encoder::Dual(enc), Decoder::Dual(dec))
            }
        };
        let head = Linear::new(&mut init, "head", d, cfg.vocab_size, true)?;
        Ok(Self {
            layout: Layout {
                proj_r,
                proj_s,
                embed,
                encoder,
                decoder,
                head,
            },
            cfg,
            params,
        })
    }

    /// Rebuilds a model around stored parameter values, checking that every
    /// name and shape matches what `cfg` requires.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, configuration needs {}",
                params.len(),
                model.params.len()
            )));
        }
        for (_, name, t) in model.params.iter() {
            let src = params
                .id(name)
                .ok_or_else(|| Error::Config(format!("parameter {name} missing")))?;
            if params.get(src).shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, configuration needs {:?}",
                    params.get(src).shape(),
                    t.shape()
                )));
            }
        }
        let mut store = ParamStore::new();
        for (_, name, _) in model.params.iter() {
            let src = params.id(name).expect("checked above");
            store.add(name, params.get(src).clone())?;
        }
        model.params = store;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Session over this model's parameters with dropout and temperature
    /// taken from the configuration.
    pub fn session(&self, mode: ForwardMode, rng: DetRng, record: bool) -> Session<'_, T> {
        let mut s = if record {
            Session::train(&self.params, mode, rng)
        } else {
            Session::infer(&self.params, mode, rng)
        };
        s.keep_prob = self.cfg.keep_prob;
        s.temperature = self.cfg.gumbel.temperature;
        s
    }

    fn project(&self, s: &mut Session<T>, lin: &Linear, x: &Tensor<T>, want: usize) -> Result<Var> {
        if x.ndim() != 2 || x.cols() != want || x.rows() == 0 {
            return contract(format!("feature matrix has shape {:?}, expected N×{want}", x.shape()));
        }
        let x = s.g.constant(x.clone())?;
        let h = lin.forward(s, x)?;
        let h = s.g.relu(h)?;
        s.dropout(h)
    }

    /// Projects the features and runs the encoder.
    pub fn encode(&self, s: &mut Session<T>, feats: &Features<T>) -> Result<StreamPair> {
        let r = self.project(s, &self.layout.proj_r, &feats.region, self.cfg.feature_dim_region)?;
        match (&self.layout.encoder, &self.layout.proj_s) {
            (Encoder::Dual(layers), Some(proj_s)) => {
                let z = self.project(s, proj_s, &feats.seg, self.cfg.feature_dim_seg)?;
                encode_stack(layers, s, StreamPair { r, s: z })
            }
            (Encoder::Single(layers), _) => {
                let h = layers.iter().try_fold(r, |h, l| l.forward(s, h))?;
                Ok(StreamPair { r: h, s: h })
            }
            _ => contract("dual encoder without a segmentation projection"),
        }
    }

    /// `lookup(token)·√d + PE`.
    pub fn embed(&self, s: &mut Session<T>, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() {
            return contract("empty token sequence");
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return contract(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = s.p(self.layout.embed)?;
        let e = s.g.gather_rows(table, &ids)?;
        let e = s.g.scale(e, T::lit((self.cfg.d_model as f64).sqrt()))?;
        let pe = s.g.constant(sinusoidal_pe(tokens.len(), self.cfg.d_model)?)?;
        Ok(s.g.add(e, pe)?)
    }

    /// Decoder pass over `tokens` given an encoded memory.
    pub fn decode(&self, s: &mut Session<T>, mem: StreamPair, tokens: &[u32]) -> Result<Forward> {
        let z = self.embed(s, tokens)?;
        let (out, psis) = match &self.layout.decoder {
            Decoder::Dual(layers) => decode_stack(layers, s, z, mem)?,
            Decoder::Single(layers) => {
                let out = layers.iter().try_fold(z, |t, l| l.forward(s, t, mem.r))?;
                (out, vec![None; layers.len()])
            }
        };
        Ok(Forward {
            logits: self.layout.head.forward(s, out)?,
            psis,
        })
    }

    /// Teacher-forced forward: `tokens` are the decoder inputs (starting
    /// with BOS); row `t` of the logits scores token `t + 1`.
    pub fn forward(&self, s: &mut Session<T>, feats: &Features<T>, tokens: &[u32]) -> Result<Forward> {
        let mem = self.encode(s, feats)?;
        self.decode(s, mem, tokens)
    }

    /// Encoder output values for repeated decoding.
    pub fn memory(&self, feats: &Features<T>, mode: ForwardMode, rng: &mut DetRng) -> Result<Memory<T>> {
        let mut s = self.session(mode, rng.fork(), false);
        let pair = self.encode(&mut s, feats)?;
        Ok(Memory {
            region: s.g.value(pair.r).clone(),
            seg: s.g.value(pair.s).clone(),
        })
    }

    /// Log-probabilities (over the whole vocabulary) of the token that
    /// follows each prefix.
    pub fn next_logprobs(
        &self,
        mem: &Memory<T>,
        prefixes: &[Vec<u32>],
        mode: ForwardMode,
        rng: &mut DetRng,
    ) -> Result<Vec<Vec<f64>>> {
        prefixes
            .iter()
            .map(|prefix| {
                let mut s = self.session(mode, rng.fork(), false);
                let pair = StreamPair {
                    r: s.g.constant(mem.region.clone())?,
                    s: s.g.constant(mem.seg.clone())?,
                };
                let f = self.decode(&mut s, pair, prefix)?;
                let last = s.g.slice_rows(f.logits, prefix.len() - 1, 1)?;
                let lp = s.g.log_softmax(last)?;
                Ok(s.g.value(lp).data().iter().map(|v| v.as_f64()).collect())
            })
            .collect()
    }

    /// Beam search from BOS in the given mode.
    pub fn beam_search(
        &self,
        feats: &Features<T>,
        beam: &BeamConfig,
        mode: ForwardMode,
        rng: &mut DetRng,
    ) -> Result<Vec<Hypothesis>> {
        let mem = self.memory(feats, mode, rng)?;
        decode::beam_search(self.cfg.vocab_size, beam, |prefixes| {
            self.next_logprobs(&mem, prefixes, mode, rng)
        })
    }

    /// Repeated argmax from BOS until EOS or `max_len` tokens.
    pub fn greedy_decode(&self, feats: &Features<T>, max_len: usize) -> Result<Vec<u32>> {
        let mut rng = DetRng::new(0);
        let mem = self.memory(feats, ForwardMode::INFER, &mut rng)?;
        decode::greedy(self.cfg.vocab_size, max_len, |prefix| {
            let mut lp = self.next_logprobs(&mem, &[prefix.to_vec()], ForwardMode::INFER, &mut rng)?;
            Ok(lp.pop().expect("one prefix"))
        })
    }

    /// Beam search with the configured width and length penalty, inference
    /// mode; returns the best caption.
    pub fn caption(&self, feats: &Features<T>) -> Result<Hypothesis> {
        let beam = BeamConfig {
            k: self.cfg.beam,
            max_len: self.cfg.max_len,
            alpha: self.cfg.length_alpha,
        };
        let mut rng = DetRng::new(0);
        let mut hyps = self.beam_search(feats, &beam, ForwardMode::INFER, &mut rng)?;
        Ok(hyps.swap_remove(0))
    }

    /// Per-position nomination choices (`0` region, `1` segmentation) for
    /// every decoder layer, from an inference pass over `tokens`.
    pub fn nominations(&self, feats: &Features<T>, tokens: &[u32]) -> Result<Vec<Vec<usize>>> {
        let mut s = self.session(ForwardMode::INFER, DetRng::new(0), false);
        let f = self.forward(&mut s, feats, tokens)?;
        f.psis
            .iter()
            .map(|p| match p {
                Some(v) => Ok(s.g.value(*v).argmax_rows()),
                None => contract("this fusion mode has no nomination map"),
            })
            .collect()
    }
}
