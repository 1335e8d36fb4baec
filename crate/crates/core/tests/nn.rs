mod common;

use common::{probe_loss, random, session_grad_check};
use dsct::nn::{
    activate, double_residual, dropout, ff_residual, sinusoidal_pe, Activation, Attention, ForwardMode, Init,
    LayerNorm, Pwff, Session,
};
use dsct::Error;
use dsct_tensor::{DetRng, Graph, Mask, ParamStore, Tensor, TensorError};
use proptest::prelude::*;

const GRAD_TOL: f64 = 1e-4;

fn init<'a>(store: &'a mut ParamStore<f64>, rng: &'a mut DetRng) -> Init<'a, f64> {
    Init { store, rng }
}

fn infer(store: &ParamStore<f64>) -> Session<'_, f64> {
    Session::infer(store, ForwardMode::INFER, DetRng::new(0))
}

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[rows, cols], data).unwrap()
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(0);
    let ln = LayerNorm::new(&mut init(&mut store, &mut rng), "ln", 2, 1e-12).unwrap();
    let mut s = infer(&store);
    let x = s.g.constant(t(2, 2, &[3.0, 3.0, -1.0, 1.0])).unwrap();
    let y = ln.forward(&mut s, x).unwrap();
    let out = s.g.value(y).data().to_vec();
    assert_eq!(&out[..2], &[0.0, 0.0]);
    assert!((out[2] + 1.0).abs() < 1e-9 && (out[3] - 1.0).abs() < 1e-9);

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut init(&mut store, &mut rng), "ln", 3, 1e-5).unwrap();
    store.set(ln.alpha, Tensor::zeros(&[3])).unwrap();
    store.set(ln.beta, Tensor::from_f64(&[3], &[0.5, -2.0, 7.0]).unwrap()).unwrap();
    let mut s = infer(&store);
    let x = s.g.constant(random(&mut rng, 4, 3)).unwrap();
    let y = ln.forward(&mut s, x).unwrap();
    for r in 0..4 {
        assert_eq!(s.g.value(y).row(r), &[0.5, -2.0, 7.0]);
    }
}

#[test]
fn layer_norm_rejects_wrong_width_and_bad_epsilon() {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(0);
    let ln = LayerNorm::new(&mut init(&mut store, &mut rng), "ln", 4, 1e-5).unwrap();
    let mut s = infer(&store);
    let x = s.g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(ln.forward(&mut s, x), Err(Error::Tensor(TensorError::Shape { .. }))));
    let mut store = ParamStore::<f64>::new();
    let bad = LayerNorm::new(&mut init(&mut store, &mut rng), "ln", 4, 0.0);
    assert!(matches!(bad, Err(Error::Contract(_))));
}

#[test]
fn layer_norm_standardizes_each_row() {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(3);
    let ln = LayerNorm::new(&mut init(&mut store, &mut rng), "ln", 8, 1e-12).unwrap();
    let mut s = infer(&store);
    let x = random(&mut rng, 16, 8).map(|v| 5.0 * v + 3.0);
    let x = s.g.constant(x).unwrap();
    let y = ln.forward(&mut s, x).unwrap();
    for r in 0..16 {
        let row = s.g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-9, "row {r} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-6, "row {r} variance {var}");
    }
}

#[test]
fn attention_over_single_key_repeats_projected_value() {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(1);
    let att = Attention::new(&mut init(&mut store, &mut rng), "att", 4, 2).unwrap();
    let mut s = infer(&store);
    let q = s.g.constant(random(&mut rng, 3, 4)).unwrap();
    let kv_t = random(&mut rng, 1, 4);
    let kv = s.g.constant(kv_t.clone()).unwrap();
    let out = att.forward(&mut s, q, kv, kv, &Mask::None).unwrap();
    let want = kv_t.matmul(store.get(att.wv)).unwrap().matmul(store.get(att.wo)).unwrap();
    for r in 0..3 {
        for (a, b) in s.g.value(out).row(r).iter().zip(want.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_average_the_values() {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(2);
    let att = Attention::new(&mut init(&mut store, &mut rng), "att", 4, 2).unwrap();
    // Identical keys projected by W_k are identical, so every head spreads
    // its weight uniformly; values differ.
    let key = random(&mut rng, 1, 4);
    let mut s = infer(&store);
    let q = s.g.constant(random(&mut rng, 2, 4)).unwrap();
    let k = s.g.constant(Tensor::from_rows(&vec![key.row(0).to_vec(); 3]).unwrap()).unwrap();
    let v_t = random(&mut rng, 3, 4);
    let v = s.g.constant(v_t.clone()).unwrap();
    let out = att.forward(&mut s, q, k, v, &Mask::None).unwrap();
    let mean: Vec<f64> = (0..4).map(|c| (0..3).map(|r| v_t.at(r, c)).sum::<f64>() / 3.0).collect();
    let want = t(1, 4, &mean).matmul(store.get(att.wv)).unwrap().matmul(store.get(att.wo)).unwrap();
    for r in 0..2 {
        for (a, b) in s.g.value(out).row(r).iter().zip(want.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn fully_forbidden_row_is_a_contract_error() {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(0);
    let att = Attention::new(&mut init(&mut store, &mut rng), "att", 4, 2).unwrap();
    let mut s = infer(&store);
    let x = s.g.constant(random(&mut rng, 2, 4)).unwrap();
    let mask = Mask::Allow(vec![true, false, false, false]);
    let err = att.forward(&mut s, x, x, x, &mask).unwrap_err();
    assert!(matches!(err, Error::Tensor(TensorError::Contract(_))), "{err}");
    let bad_heads = Attention::new(&mut init(&mut store, &mut rng), "att3", 4, 3);
    assert!(matches!(bad_heads, Err(Error::Contract(_))));
}

#[test]
fn attention_rows_are_distributions_with_exact_zeros() {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(4);
    let att = Attention::new(&mut init(&mut store, &mut rng), "att", 8, 2).unwrap();
    let (lq, lk) = (4, 5);
    let flags: Vec<bool> = (0..lq * lk).map(|i| i % lk == i / lk || (i * 13) % 3 == 0).collect();
    let mut s = infer(&store);
    let q = s.g.constant(random(&mut rng, lq, 8).map(|v| 4.0 * v)).unwrap();
    let kv = s.g.constant(random(&mut rng, lk, 8).map(|v| 4.0 * v)).unwrap();
    let wq = s.p(att.wq).unwrap();
    let wk = s.p(att.wk).unwrap();
    let qp = s.g.matmul(q, wq).unwrap();
    let kp = s.g.matmul(kv, wk).unwrap();
    let a = s.g.attention(qp, kp, kp, 2, &Mask::Allow(flags.clone())).unwrap();
    let probs = s.g.attention_probs(a).unwrap();
    for h in 0..2 {
        for i in 0..lq {
            let row = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() <= 1e-10);
            for (j, &p) in row.iter().enumerate() {
                assert!(p >= 0.0);
                if !flags[i * lk + j] {
                    assert_eq!(p, 0.0, "forbidden weight at head {h} ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn first_position_sees_only_itself() {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(5);
    let att = Attention::new(&mut init(&mut store, &mut rng), "att", 4, 2).unwrap();
    let x_t = random(&mut rng, 4, 4);
    let mut s = infer(&store);
    let x = s.g.constant(x_t.clone()).unwrap();
    let full = att.masked_self(&mut s, x).unwrap();
    let mut s2 = infer(&store);
    let x0 = s2.g.constant(t(1, 4, x_t.row(0))).unwrap();
    let alone = att.masked_self(&mut s2, x0).unwrap();
    assert_eq!(s.g.value(full).row(0), s2.g.value(alone).row(0));
}

#[test]
fn pwff_examples() {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(6);
    let ff = Pwff::new(&mut init(&mut store, &mut rng), "ff", 4, 4, Activation::Relu).unwrap();
    for id in [ff.l1.w, ff.l2.w] {
        store.set(id, Tensor::zeros(&[4, 4])).unwrap();
    }
    let mut s = infer(&store);
    let x = s.g.constant(random(&mut rng, 3, 4)).unwrap();
    let y = ff.forward(&mut s, x).unwrap();
    assert!(s.g.value(y).data().iter().all(|&v| v == 0.0));

    for id in [ff.l1.w, ff.l2.w] {
        store.set(id, Tensor::eye(4)).unwrap();
    }
    let x_t = random(&mut rng, 3, 4).map(f64::abs);
    let mut s = infer(&store);
    let x = s.g.constant(x_t.clone()).unwrap();
    let y = ff.forward(&mut s, x).unwrap();
    assert_eq!(s.g.value(y), &x_t);
}

#[test]
fn gelu_matches_tanh_approximation() {
    let xs = [-3.0, -0.5, 0.0, 0.7, 2.5];
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::from_f64(&[5], &xs).unwrap()).unwrap();
    let y = activate(&mut g, x, Activation::Gelu).unwrap();
    for (&x, &y) in xs.iter().zip(g.value(y).data()) {
        let want = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        assert!((y - want).abs() < 1e-15);
    }
    assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
    assert_eq!(Activation::Relu.to_string(), "relu");
    assert!("swish".parse::<Activation>().is_err());
}

#[test]
fn positional_encoding_examples() {
    let pe = sinusoidal_pe::<f64>(6, 8).unwrap();
    assert_eq!(pe.shape(), &[6, 8]);
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert_eq!(pe.at(1, 0), 1f64.sin());
    assert!((pe.at(3, 3) - (3.0 / 10000f64.powf(2.0 / 8.0)).cos()).abs() < 1e-15);
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(matches!(sinusoidal_pe::<f64>(4, 5), Err(Error::Contract(_))));
}

#[test]
fn dropout_identity_cases_and_range() {
    let mut rng = DetRng::new(0);
    let mut g = Graph::<f64>::inference();
    let x = g.constant(random(&mut rng, 4, 4)).unwrap();
    assert_eq!(dropout(&mut g, x, 1.0, &mut rng, true).unwrap(), x);
    assert_eq!(dropout(&mut g, x, 0.3, &mut rng, false).unwrap(), x);
    for bad in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(dropout(&mut g, x, bad, &mut rng, true), Err(Error::Contract(_))));
    }
}

#[test]
fn dropout_keeps_nine_tenths_and_rescales() {
    let n = 100_000;
    let mut rng = DetRng::new(42);
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::ones(&[n])).unwrap();
    let y = dropout(&mut g, x, 0.9, &mut rng, true).unwrap();
    let vals = g.value(y).data();
    let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((kept - 0.9).abs() <= 0.01, "kept fraction {kept}");
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
}

/// Store with one attention block, one PWFF, two layer norms with
/// non-trivial affine parameters, and a 4×8 input registered as a parameter
/// so the check covers input gradients too.
fn block_store(act: Activation) -> (ParamStore<f64>, Attention, Pwff, [LayerNorm; 2], dsct_tensor::ParamId) {
    let mut store = ParamStore::new();
    let mut rng = DetRng::new(9);
    let mut i = init(&mut store, &mut rng);
    let att = Attention::new(&mut i, "att", 8, 2).unwrap();
    let ff = Pwff::new(&mut i, "ff", 8, 16, act).unwrap();
    let lns = [
        LayerNorm::new(&mut i, "ln0", 8, 1e-5).unwrap(),
        LayerNorm::new(&mut i, "ln1", 8, 1e-5).unwrap(),
    ];
    let x = i.normal("x", 4, 8, 1.0).unwrap();
    for ln in &lns {
        let a = Tensor::new(&[8], rng.normal_vec(8, 0.3)).unwrap().map(|v| v + 1.0);
        let b = Tensor::new(&[8], rng.normal_vec(8, 0.3)).unwrap();
        store.set(ln.alpha, a).unwrap();
        store.set(ln.beta, b).unwrap();
    }
    for id in [ff.l1.b.unwrap(), ff.l2.b.unwrap()] {
        let n = store.get(id).numel();
        store.set(id, Tensor::new(&[n], rng.normal_vec(n, 0.5)).unwrap()).unwrap();
    }
    (store, att, ff, lns, x)
}

#[test]
fn blocks_pass_grad_check() {
    for act in [Activation::Relu, Activation::Gelu] {
        let (store, att, ff, lns, x) = block_store(act);
        let ln = session_grad_check(&store, ForwardMode::SOFT, None, |s| {
            let x = s.p(x)?;
            let y = lns[0].forward(s, x)?;
            probe_loss(s, y)
        });
        assert!(ln <= GRAD_TOL, "layer norm {ln:e}");
        let mhsa = session_grad_check(&store, ForwardMode::SOFT, None, |s| {
            let x = s.p(x)?;
            let y = att.masked_self(s, x)?;
            probe_loss(s, y)
        });
        assert!(mhsa <= GRAD_TOL, "masked self-attention {mhsa:e}");
        let pw = session_grad_check(&store, ForwardMode::SOFT, None, |s| {
            let x = s.p(x)?;
            let y = ff.forward(s, x)?;
            probe_loss(s, y)
        });
        assert!(pw <= GRAD_TOL, "{act} pwff {pw:e}");
        let res = session_grad_check(&store, ForwardMode::SOFT, None, |s| {
            let x = s.p(x)?;
            let a = att.forward(s, x, x, x, &Mask::None)?;
            let m = double_residual(s, a, x, &lns[0], &lns[1])?;
            let y = ff_residual(s, &ff, m, &lns[0])?;
            probe_loss(s, y)
        });
        assert!(res <= GRAD_TOL, "{act} residual stack {res:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_self_attention_is_causal(len in 1usize..=8, t in 0usize..8, seed in any::<u64>()) {
        let t = t % len;
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(seed);
        let att = Attention::new(&mut init(&mut store, &mut rng), "att", 4, 2).unwrap();
        let x_t = random(&mut rng, len, 4);
        let mut bumped = x_t.clone();
        for c in 0..4 {
            bumped.data_mut()[t * 4 + c] += 1.0 + rng.uniform();
        }
        let mut s = infer(&store);
        let a = s.g.constant(x_t).unwrap();
        let b = s.g.constant(bumped).unwrap();
        let ya = att.masked_self(&mut s, a).unwrap();
        let yb = att.masked_self(&mut s, b).unwrap();
        for r in 0..len {
            let same = s.g.value(ya).row(r) == s.g.value(yb).row(r);
            if r < t {
                prop_assert!(same, "row {} changed after perturbing {}", r, t);
            } else {
                prop_assert!(!same, "row {} unchanged after perturbing {}", r, t);
            }
        }
    }
}
