mod common;

use common::{micro_config, random_features, session_grad_check, small_corpus};
use dsct::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use dsct::data::{Dataset, Vocab, BOS, EOS};
use dsct::model::{Fusion, Model, ModelConfig};
use dsct::nn::ForwardMode;
use dsct::train::{
    caption_logprob, evaluate, mean_baseline, xe_loss, AdamState, CiderReward, LrSchedule, TrainConfig, Trainer,
};
use dsct::Error;
use dsct_tensor::{DetRng, ParamStore, Tensor};

fn desk_trainer(seed: u64, cfg: TrainConfig) -> Trainer {
    let model = Model::new(ModelConfig::desk(Vocab::desk().len()), seed).unwrap();
    Trainer::new(model, cfg)
}

fn max_param_diff(a: &ParamStore<f32>, b: &ParamStore<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|((_, _, x), (_, _, y))| x.cast::<f64>().max_abs_diff(&y.cast::<f64>()).unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn schedule_warms_up_then_decays() {
    let s = LrSchedule { scale: 0.125, warmup: 100 };
    assert!((s.lr(1) - 0.125 * 100f64.powf(-1.5)).abs() < 1e-15);
    assert!((s.lr(100) - 0.125 * 0.1).abs() < 1e-15);
    assert!((s.lr(400) - 0.125 / 20.0).abs() < 1e-15);
    for step in 1..1000 {
        assert!(s.lr(step) > 0.0);
        if step < 100 {
            assert!(s.lr(step + 1) > s.lr(step));
        } else {
            assert!(s.lr(step + 1) < s.lr(step));
        }
    }
}

#[test]
fn adam_skips_zero_gradients_and_moves_by_lr_first() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
    let b = store.add("b", Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
    let mut adam = AdamState::new(&store);
    let before = store.clone();
    adam.update(&mut store, &[(a, Tensor::zeros(&[2])), (b, Tensor::zeros(&[1]))], 0.1).unwrap();
    assert_eq!(store.get(a), before.get(a));
    assert_eq!(store.get(b), before.get(b));
    assert_eq!(adam.m[0], Tensor::zeros(&[2]));

    assert_eq!(adam.step, 1);

    let mut adam = AdamState::new(&store);
    adam.update(&mut store, &[(a, Tensor::new(&[2], vec![0.5, -4.0]).unwrap())], 0.1).unwrap();
    // Bias-corrected first step is lr · g/|g| up to epsilon.
    assert!((store.get(a).data()[0] - 0.9).abs() < 1e-7);
    assert!((store.get(a).data()[1] + 1.9).abs() < 1e-7);
    assert_eq!(store.get(b), before.get(b));

    let other = ParamStore::<f64>::new();
    let mut wrong = AdamState::new(&other);
    assert!(matches!(wrong.update(&mut store, &[], 0.1), Err(Error::Contract(_))));
}

fn zero_head(model: &mut Model<f64>, eos_bias: f64) {
    let head = model.layout.head.clone();
    let w = Tensor::zeros(model.params.get(head.w).shape());
    model.params.set(head.w, w).unwrap();
    let b = head.b.unwrap();
    let mut bias = Tensor::zeros(model.params.get(b).shape());
    bias.data_mut()[EOS as usize] = eos_bias;
    model.params.set(b, bias).unwrap();
}

#[test]
fn uniform_logits_give_log_vocab_and_confident_logits_give_zero() {
    let cfg = ModelConfig { vocab_size: 4, ..micro_config(Fusion::Dnm) };
    let mut model = Model::<f64>::new(cfg, 1).unwrap();
    zero_head(&mut model, 0.0);
    let feats = random_features(&mut DetRng::new(2), 2, 3, 5);
    let caption = [BOS, 3, 2, EOS];
    let mut s = model.session(ForwardMode::INFER, DetRng::new(0), true);
    let loss = xe_loss(&model, &mut s, &[(&feats, &caption[..])]).unwrap();
    assert!((s.g.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);

    zero_head(&mut model, 60.0);
    let mut s = model.session(ForwardMode::INFER, DetRng::new(0), true);
    let loss = xe_loss(&model, &mut s, &[(&feats, &[BOS, EOS][..])]).unwrap();
    assert!(s.g.value(loss).item().unwrap() < 1e-20);

    assert!(matches!(xe_loss(&model, &mut s, &[]), Err(Error::Contract(_))));
    assert!(matches!(caption_logprob(&model, &mut s, &feats, &[BOS]), Err(Error::Contract(_))));
    assert!(matches!(caption_logprob(&model, &mut s, &feats, &[4, EOS]), Err(Error::Contract(_))));
}

#[test]
fn baseline_is_the_mean_reward() {
    assert_eq!(mean_baseline(&[0.5, 1.0, 1.5]), 1.0);
    assert_eq!(mean_baseline(&[2.0]), 2.0);
    assert_eq!(mean_baseline(&[0.7, 0.7, 0.7]), 0.7);
}

#[test]
fn scst_surrogate_passes_grad_check() {
    let model = Model::<f64>::new(micro_config(Fusion::Dnm), 5).unwrap();
    let feats = random_features(&mut DetRng::new(6), 2, 3, 5);
    let samples: [(&[u32], f64); 3] = [(&[BOS, 4, 5, EOS], 0.7), (&[BOS, 6, EOS], -0.2), (&[BOS, 5, 5, 4, 6], -0.5)];
    let worst = session_grad_check(&model.params, ForwardMode::SOFT, Some(6), |s| {
        let mut total = None;
        for (caption, adv) in samples {
            let (lp, _) = caption_logprob(&model, s, &feats, caption)?;
            let term = s.g.scale(lp, -adv / samples.len() as f64)?;
            total = Some(match total {
                Some(t) => s.g.add(t, term)?,
                None => term,
            });
        }
        Ok(total.unwrap())
    });
    assert!(worst <= 1e-4, "{worst:e}");
}

fn scst_cfg() -> TrainConfig {
    TrainConfig { scst_batch: 2, scst_beam: 3, scst_lr: 1e-3, ..TrainConfig::default() }
}

#[test]
fn scst_baseline_and_translation_invariance() {
    let (train, _) = small_corpus(32, 8, 1);
    let reward = CiderReward::new(&train).unwrap();
    let mut a = desk_trainer(2, scst_cfg());
    let mut b = a.clone();
    let (log_a, images) = a.scst_step(&train, |ex, w| reward.reward(ex, w)).unwrap();
    let (_, shifted) = b.scst_step(&train, |ex, w| Ok(reward.reward(ex, w)? + 5.0)).unwrap();
    for (im, sh) in images.iter().zip(&shifted) {
        assert_eq!(im.rewards.len(), 3);
        assert_eq!(im.baseline, mean_baseline(&im.rewards));
        assert!((sh.baseline - im.baseline - 5.0).abs() < 1e-12);
    }
    assert!(log_a.reward.is_some());
    let diff = max_param_diff(&a.model.params, &b.model.params);
    assert!(diff <= 1e-7, "{diff:e}");
    assert!(max_param_diff(&a.model.params, &desk_trainer(2, scst_cfg()).model.params) > 0.0);
}

#[test]
fn equal_rewards_leave_parameters_unchanged() {
    let (train, _) = small_corpus(16, 4, 3);
    let mut t = desk_trainer(4, scst_cfg());
    let before = t.model.params.clone();
    let (_, images) = t.scst_step(&train, |_, _| Ok(0.7)).unwrap();
    assert!(images.iter().all(|im| im.baseline == 0.7));
    assert_eq!(max_param_diff(&t.model.params, &before), 0.0);
}

#[test]
fn scst_rejects_degenerate_requests() {
    let (train, _) = small_corpus(16, 4, 3);
    let mut t = desk_trainer(4, TrainConfig { scst_beam: 1, ..scst_cfg() });
    assert!(matches!(t.scst_step(&train, |_, _| Ok(0.0)), Err(Error::Contract(_))));
    let mut t = desk_trainer(4, TrainConfig { scst_batch: 0, ..scst_cfg() });
    assert!(matches!(t.scst_step(&train, |_, _| Ok(0.0)), Err(Error::Contract(_))));
    let mut t = desk_trainer(4, TrainConfig { batch_size: 0, ..scst_cfg() });
    assert!(matches!(t.xe_step(&train), Err(Error::Contract(_))));
    let other = Dataset { vocab_size: 99, ..train.clone() };
    assert!(matches!(desk_trainer(4, scst_cfg()).xe_step(&other), Err(Error::Config(_))));
}

#[test]
fn xe_loss_falls_on_small_corpora() {
    let (train64, _) = small_corpus(64, 8, 5);
    let mut t = desk_trainer(6, TrainConfig::default());
    let first = t.xe_step(&train64).unwrap().loss;
    let mut last = first;
    for _ in 1..200 {
        last = t.xe_step(&train64).unwrap().loss;
    }
    assert!(last < first, "{last} vs {first}");

    let (train256, _) = small_corpus(256, 8, 6);
    let mut t = desk_trainer(7, TrainConfig::default());
    let logs: Vec<f64> = (0..500).map(|_| t.xe_step(&train256).unwrap().loss).collect();
    let tail = logs[490..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * logs[0], "step 1 {} vs last ten {tail}", logs[0]);
}

#[test]
fn memorized_training_scenes_score_full_unigram_precision() {
    let (train, _) = small_corpus(8, 4, 8);
    let mut t = desk_trainer(9, TrainConfig { warmup: 100, ..TrainConfig::default() });
    for _ in 0..400 {
        t.xe_step(&train).unwrap();
    }
    let (report, hyps) = evaluate(&t.model, &train).unwrap();
    assert_eq!(report.bleu1, 1.0, "{hyps:?}");
    let (again, hyps2) = evaluate(&t.model, &train).unwrap();
    assert_eq!(report, again);
    assert_eq!(hyps, hyps2);
    let kv = report.to_kv();
    for key in ["bleu1=", "bleu4=", "rougeL=", "ciderD="] {
        assert!(kv.contains(key), "{kv}");
    }
    let empty = Dataset { examples: vec![], ..train };
    assert!(matches!(evaluate(&t.model, &empty), Err(Error::Contract(_))));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let (train, _) = small_corpus(16, 4, 10);
    let mut t = desk_trainer(11, TrainConfig::default());
    for _ in 0..3 {
        t.xe_step(&train).unwrap();
    }
    let ck = t.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.config, ck.config);
    assert_eq!(back.step, 3);
    assert_eq!(back.rng, ck.rng);
    assert_eq!(back.adam, ck.adam);
    for ((_, n1, a), (_, n2, b)) in back.params.iter().zip(ck.params.iter()) {
        assert_eq!(n1, n2);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), bytes);

    let mut version = bytes.clone();
    version[8] ^= 1;
    assert!(matches!(
        Checkpoint::from_bytes(&version),
        Err(Error::Version { expected: CHECKPOINT_VERSION, .. })
    ));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Integrity(_))));
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    assert!(matches!(Checkpoint::from_bytes(b"garbage"), Err(Error::Format(_))));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (train, _) = small_corpus(32, 4, 12);
    let cfg = TrainConfig::default();
    let mut straight = desk_trainer(13, cfg.clone());
    let full: Vec<String> = (0..20).map(|_| straight.xe_step(&train).unwrap().line()).collect();

    let mut first = desk_trainer(13, cfg.clone());
    let mut lines: Vec<String> = (0..10).map(|_| first.xe_step(&train).unwrap().line()).collect();
    let saved = first.checkpoint().to_bytes().unwrap();
    drop(first);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&saved).unwrap(), cfg).unwrap();
    lines.extend((0..10).map(|_| resumed.xe_step(&train).unwrap().line()));

    assert_eq!(lines, full);
    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), straight.checkpoint().to_bytes().unwrap());
}
