//! Cross-entropy pretraining, self-critical finetuning, evaluation.

use dsct_tensor::{DetRng, ParamId, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Example, BOS, EOS};
use crate::decode::{BeamConfig, Hypothesis};
use crate::error::{contract, Error, Result};
use crate::metrics::{cider_d_one, IdfTable, ScoreReport};
use crate::model::{Features, Model};
use crate::nn::{ForwardMode, Session};

/// First and second moment estimates per parameter (indexed by
/// [`ParamId::index`]).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let z: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }

    /// One Adam update with learning rate `lr`. Parameters without a
    /// gradient, or whose gradient is identically zero, are left untouched
    /// (moments included).
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return contract("optimiser state does not match the parameter store");
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let (ob1, ob2) = (T::lit(1.0 - ADAM_BETA1), T::lit(1.0 - ADAM_BETA2));
        let step_size = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(ADAM_EPS);
        for (id, g) in grads {
            if g.data().iter().all(|&x| x == T::zero()) {
                continue;
            }
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(*id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                p[j] -= step_size * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `scale · min(step^-0.5, step · warmup^-1.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub scale: f64,
    pub warmup: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.scale * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup: u64,
    /// Multiplies the `d_model^-0.5` schedule scale.
    pub lr_scale: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub scst_steps: u64,
    pub scst_batch: usize,
    pub scst_lr: f64,
    pub scst_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            warmup: 2000,
            lr_scale: 1.0,
            seed: 0,
            checkpoint_every: 500,
            grad_clip: None,
            scst_steps: 300,
            scst_batch: 8,
            scst_lr: 1e-5,
            scst_beam: 5,
        }
    }
}

/// Summed target log-probability and target count for teacher forcing on
/// `caption` (BOS ... EOS).
pub fn caption_logprob<T: Scalar>(
    model: &Model<T>,
    s: &mut Session<T>,
    feats: &Features<T>,
    caption: &[u32],
) -> Result<(Var, usize)> {
    if caption.len() < 2 || caption[0] != BOS {
        return contract("caption must start with BOS and contain a target");
    }
    let f = model.forward(s, feats, &caption[..caption.len() - 1])?;
    let lp = s.g.log_softmax(f.logits)?;
    let targets: Vec<usize> = caption[1..].iter().map(|&t| t as usize).collect();
    let picked = s.g.pick(lp, &targets)?;
    Ok((s.g.sum(picked)?, targets.len()))
}

/// Mean negative log-likelihood per target token over a batch.
pub fn xe_loss<T: Scalar>(
    model: &Model<T>,
    s: &mut Session<T>,
    batch: &[(&Features<T>, &[u32])],
) -> Result<Var> {
    if batch.is_empty() {
        return contract("empty batch");
    }
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (feats, caption) in batch {
        let (lp, n) = caption_logprob(model, s, feats, caption)?;
        count += n;
        total = Some(match total {
            Some(t) => s.g.add(t, lp)?,
            None => lp,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(s.g.scale(total, T::lit(-1.0 / count as f64))?)
}

/// Arithmetic mean of the rewards. Equal rewards return that reward
/// exactly, so their advantages are exactly zero (a rounding residue would
/// otherwise be amplified by Adam's normalisation).
pub fn mean_baseline(rewards: &[f64]) -> f64 {
    match rewards.first() {
        Some(&r) if rewards.iter().all(|&x| x == r) => r,
        _ => rewards.iter().sum::<f64>() / rewards.len() as f64,
    }
}

/// Scales gradients so their global L2 norm is at most `cap`.
fn clip<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], cap: f64) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if norm > cap {
        let f = T::lit(cap / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub reward: Option<f64>,
}

impl StepLog {
    /// `step loss lr [reward]`.
    pub fn line(&self) -> String {
        match self.reward {
            Some(r) => format!("{} {:.6} {:.6e} {:.6}", self.step, self.loss, self.lr, r),
            None => format!("{} {:.6} {:.6e}", self.step, self.loss, self.lr),
        }
    }
}

/// Per-image detail of one SCST step.
#[derive(Clone, Debug, PartialEq)]
pub struct ScstImage {
    pub rewards: Vec<f64>,
    pub baseline: f64,
}

/// Model, optimiser and generator advancing together; everything needed to
/// resume lives in a [`Checkpoint`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub rng: DetRng,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Self {
        Self {
            adam: AdamState::new(&model.params),
            rng: DetRng::with_stream(cfg.seed, 1),
            model,
            step: 0,
            cfg,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = Model::from_params(ck.config, ck.params)?;
        let adam = ck.adam.unwrap_or_else(|| AdamState::new(&model.params));
        Ok(Self {
            model,
            adam,
            step: ck.step,
            rng: DetRng::from_state(ck.rng),
            cfg,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.cfg.clone(),
            params: self.model.params.clone(),
            adam: Some(self.adam.clone()),
            step: self.step,
            rng: self.rng.state(),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            scale: self.cfg.lr_scale * (self.model.cfg.d_model as f64).powf(-0.5),
            warmup: self.cfg.warmup,
        }
    }

    fn apply(&mut self, mut grads: Vec<(ParamId, Tensor<f32>)>, lr: f64) -> Result<()> {
        if let Some(cap) = self.cfg.grad_clip {
            clip(&mut grads, cap);
        }
        self.adam.update(&mut self.model.params, &grads, lr)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return contract("empty dataset");
        }
        if data.vocab_size != self.model.cfg.vocab_size {
            return Err(Error::Config(format!(
                "dataset vocabulary ({}) differs from the model's ({})",
                data.vocab_size, self.model.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// One cross-entropy step on a batch drawn from the generator: random
    /// scenes, each with one of its references chosen at random.
    pub fn xe_step(&mut self, data: &Dataset) -> Result<StepLog> {
        self.check_data(data)?;
        if self.cfg.batch_size == 0 {
            return contract("empty batch");
        }
        let picks: Vec<(usize, usize)> = (0..self.cfg.batch_size)
            .map(|_| {
                let i = self.rng.below(data.len());
                (i, self.rng.below(data.examples[i].refs.len()))
            })
            .collect();
        let step = self.step + 1;
        let lr = self.schedule().lr(step);
        let session_rng = self.rng.fork();
        let (loss, grads) = {
            let mut s = self.model.session(ForwardMode::TRAIN, session_rng, true);
            s.temperature = self.model.cfg.gumbel.temperature_at(step);
            let batch: Vec<(&Features<f32>, &[u32])> = picks
                .iter()
                .map(|&(i, r)| (&data.examples[i].features, data.examples[i].refs[r].as_slice()))
                .collect();
            let loss = xe_loss(&self.model, &mut s, &batch)?;
            s.g.backward(loss)?;
            (s.g.value(loss).item()?.as_f64(), s.g.param_grads())
        };
        self.apply(grads, lr)?;
        self.step = step;
        Ok(StepLog {
            step,
            loss,
            lr,
            reward: None,
        })
    }

    /// One self-critical step. For each sampled image the `k` beam
    /// survivors (decoded with Gumbel noise, without dropout) are rewarded
    /// by `reward`, baselined by the mean reward, and the surrogate
    /// `-(1/k) Σ (r_i - b) log p(y_i)` is averaged over images.
    pub fn scst_step<F>(&mut self, data: &Dataset, mut reward: F) -> Result<(StepLog, Vec<ScstImage>)>
    where
        F: FnMut(&Example, &[u32]) -> Result<f64>,
    {
        self.check_data(data)?;
        let k = self.cfg.scst_beam;
        if k < 2 {
            return contract(format!("SCST needs a beam of at least 2 for a baseline, got {k}"));
        }
        if self.cfg.scst_batch == 0 {
            return contract("empty batch");
        }
        let beam = BeamConfig {
            k,
            max_len: self.model.cfg.max_len,
            alpha: self.model.cfg.length_alpha,
        };
        let picks: Vec<usize> = (0..self.cfg.scst_batch).map(|_| self.rng.below(data.len())).collect();
        let step = self.step + 1;
        let mut samples: Vec<(usize, Vec<Hypothesis>, Vec<f64>)> = Vec::new();
        let mut images = Vec::new();
        for &i in &picks {
            let ex = &data.examples[i];
            let hyps = self
                .model
                .beam_search(&ex.features, &beam, ForwardMode::SAMPLE, &mut self.rng)?;
            let rewards = hyps
                .iter()
                .map(|h| reward(ex, h.words()))
                .collect::<Result<Vec<f64>>>()?;
            let b = mean_baseline(&rewards);
            let adv: Vec<f64> = rewards.iter().map(|r| r - b).collect();
            images.push(ScstImage { rewards, baseline: b });
            samples.push((i, hyps, adv));
        }
        let lr = self.cfg.scst_lr;
        let session_rng = self.rng.fork();
        let (loss, grads) = {
            let mut s = self.model.session(ForwardMode::TRAIN, session_rng, true);
            s.temperature = self.model.cfg.gumbel.temperature_at(step);
            let mut total: Option<Var> = None;
            for (i, hyps, adv) in &samples {
                let feats = &data.examples[*i].features;
                let n = hyps.len() as f64;
                for (h, a) in hyps.iter().zip(adv) {
                    let mut caption = vec![BOS];
                    caption.extend_from_slice(&h.tokens);
                    let (lp, _) = caption_logprob(&self.model, &mut s, feats, &caption)?;
                    let term = s.g.scale(lp, -(*a / n) as f32)?;
                    total = Some(match total {
                        Some(t) => s.g.add(t, term)?,
                        None => term,
                    });
                }
            }
            let total = total.expect("nonempty batch");
            let loss = s.g.scale(total, 1.0 / samples.len() as f32)?;
            s.g.backward(loss)?;
            (s.g.value(loss).item()?.as_f64(), s.g.param_grads())
        };
        self.apply(grads, lr)?;
        self.step = step;
        let mean_reward =
            images.iter().flat_map(|im| im.rewards.iter()).sum::<f64>() / (images.len() * k) as f64;
        Ok((
            StepLog {
                step,
                loss,
                lr,
                reward: Some(mean_reward),
            },
            images,
        ))
    }

    /// Switches to finetuning: fresh optimiser moments.
    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(&self.model.params);
    }
}

/// Reference captions as word-id lists (BOS/EOS stripped).
pub fn reference_words(ex: &Example) -> Vec<Vec<u32>> {
    ex.refs.iter().map(|r| strip(r)).collect()
}

fn strip(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&t| t != BOS && t != EOS).collect()
}

/// CIDEr-D against the image's references, with document frequencies from
/// `corpus` (normally the training split).
pub struct CiderReward {
    idf: IdfTable<u32>,
}

impl CiderReward {
    pub fn new(corpus: &Dataset) -> Result<Self> {
        let refs: Vec<Vec<Vec<u32>>> = corpus.examples.iter().map(reference_words).collect();
        Ok(Self {
            idf: IdfTable::new(&refs)?,
        })
    }

    pub fn reward(&self, ex: &Example, words: &[u32]) -> Result<f64> {
        cider_d_one(words, &reference_words(ex), &self.idf)
    }
}

/// Beam-decodes every example in inference mode and scores it.
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<(ScoreReport, Vec<Vec<u32>>)> {
    if data.is_empty() {
        return contract("empty dataset");
    }
    let mut hyps = Vec::with_capacity(data.len());
    let mut refs = Vec::with_capacity(data.len());
    for ex in &data.examples {
        hyps.push(model.caption(&ex.features)?.words().to_vec());
        refs.push(reference_words(ex));
    }
    Ok((ScoreReport::compute(&hyps, &refs)?, hyps))
}
