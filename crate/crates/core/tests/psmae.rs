mod common;

use common::{probe_loss, random, session_grad_check};
use dsct::nn::{double_residual, Activation, ForwardMode, Init, Session};
use dsct::psmae::{encode_stack, EncoderDims, PsmaeLayer, StreamPair};
use dsct::Error;
use dsct_tensor::{DetRng, ParamId, ParamStore, Tensor};
use proptest::prelude::*;

fn dims() -> EncoderDims {
    EncoderDims {
        d: 4,
        heads: 2,
        d_ff: 8,
        act: Activation::Relu,
        eps: 1e-5,
    }
}

fn layers(store: &mut ParamStore<f64>, seed: u64, n: usize) -> Vec<PsmaeLayer> {
    let mut rng = DetRng::new(seed);
    let mut init = Init { store, rng: &mut rng };
    (0..n).map(|l| PsmaeLayer::new(&mut init, &format!("enc{l}"), &dims()).unwrap()).collect()
}

/// Gives every layer norm a random affine map so private norms differ.
fn jitter_norms(store: &mut ParamStore<f64>, layer: &PsmaeLayer, rng: &mut DetRng) {
    for ln in layer.ln_r.iter().chain(&layer.ln_s) {
        store.set(ln.alpha, Tensor::new(&[4], rng.normal_vec(4, 0.3)).unwrap().map(|v| v + 1.0)).unwrap();
        store.set(ln.beta, Tensor::new(&[4], rng.normal_vec(4, 0.3)).unwrap()).unwrap();
    }
}

fn infer(store: &ParamStore<f64>) -> Session<'_, f64> {
    Session::infer(store, ForwardMode::INFER, DetRng::new(0))
}

fn pair(s: &mut Session<f64>, r: &Tensor<f64>, z: &Tensor<f64>) -> StreamPair {
    StreamPair {
        r: s.g.constant(r.clone()).unwrap(),
        s: s.g.constant(z.clone()).unwrap(),
    }
}

#[test]
fn shapes_follow_each_stream() {
    let mut store = ParamStore::new();
    let stack = layers(&mut store, 1, 3);
    let mut rng = DetRng::new(2);
    let (r, z) = (random(&mut rng, 2, 4), random(&mut rng, 5, 4));
    let mut s = infer(&store);
    let p = pair(&mut s, &r, &z);
    let hat = stack[0].consolidate(&mut s, p).unwrap();
    assert_eq!((s.g.shape(hat.r), s.g.shape(hat.s)), (&[2, 4][..], &[5, 4][..]));
    let next = stack[0].cross_query(&mut s, hat).unwrap();
    assert_eq!((s.g.shape(next.r), s.g.shape(next.s)), (&[2, 4][..], &[5, 4][..]));
    let out = encode_stack(&stack, &mut s, p).unwrap();
    assert_eq!((s.g.shape(out.r), s.g.shape(out.s)), (&[2, 4][..], &[5, 4][..]));
    assert_eq!(store.numel(), 3 * PsmaeLayer::numel(4, 8));
}

#[test]
fn identical_streams_and_norms_give_identical_outputs() {
    let mut store = ParamStore::new();
    let stack = layers(&mut store, 3, 1);
    let x = random(&mut DetRng::new(4), 3, 4);
    let mut s = infer(&store);
    let p = pair(&mut s, &x, &x);
    let hat = stack[0].consolidate(&mut s, p).unwrap();
    assert_eq!(s.g.value(hat.r), s.g.value(hat.s));
    let next = stack[0].cross_query(&mut s, hat).unwrap();
    assert_eq!(s.g.value(next.r), s.g.value(next.s));
}

#[test]
fn one_layer_stack_is_consolidate_then_cross_query() {
    let mut store = ParamStore::new();
    let stack = layers(&mut store, 5, 1);
    let mut rng = DetRng::new(6);
    jitter_norms(&mut store, &stack[0], &mut rng);
    let (r, z) = (random(&mut rng, 2, 4), random(&mut rng, 3, 4));
    let mut s = infer(&store);
    let p = pair(&mut s, &r, &z);
    let hat = stack[0].consolidate(&mut s, p).unwrap();
    let manual = stack[0].cross_query(&mut s, hat).unwrap();
    let stacked = encode_stack(&stack, &mut s, p).unwrap();
    assert_eq!(s.g.value(manual.r), s.g.value(stacked.r));
    assert_eq!(s.g.value(manual.s), s.g.value(stacked.s));
    assert!(matches!(encode_stack(&[], &mut s, p), Err(Error::Contract(_))));
}

#[test]
fn region_norm_does_not_reach_segmentation_consolidation() {
    let mut store = ParamStore::new();
    let stack = layers(&mut store, 7, 1);
    let mut rng = DetRng::new(8);
    jitter_norms(&mut store, &stack[0], &mut rng);
    let (r, z) = (random(&mut rng, 2, 4), random(&mut rng, 3, 4));
    let run = |store: &ParamStore<f64>| {
        let mut s = infer(store);
        let p = pair(&mut s, &r, &z);
        let hat = stack[0].consolidate(&mut s, p).unwrap();
        (s.g.value(hat.r).clone(), s.g.value(hat.s).clone())
    };
    let before = run(&store);
    let a = stack[0].ln_r[0].alpha;
    let bumped = store.get(a).map(|v| v * 1.7 + 0.1);
    store.set(a, bumped).unwrap();
    let after = run(&store);
    assert_ne!(before.0, after.0);
    assert_eq!(before.1, after.1);
}

#[test]
fn single_segmentation_vector_gets_full_attention() {
    let mut store = ParamStore::new();
    let stack = layers(&mut store, 9, 1);
    let mut rng = DetRng::new(10);
    jitter_norms(&mut store, &stack[0], &mut rng);
    let layer = &stack[0];
    let (hr, hs) = (random(&mut rng, 3, 4), random(&mut rng, 1, 4));
    let mut s = infer(&store);
    let hat = pair(&mut s, &hr, &hs);
    let out = layer.cross_query(&mut s, hat).unwrap();
    // With one key the attention output is W_o·W_v·ẑ_s on every row.
    let w = &layer.shared[0].mha1;
    let v = hs.matmul(store.get(w.wv)).unwrap().matmul(store.get(w.wo)).unwrap();
    let rows = Tensor::from_rows(&vec![v.row(0).to_vec(); 3]).unwrap();
    let sub = s.g.constant(rows).unwrap();
    let want = double_residual(&mut s, sub, hat.r, &layer.ln_r[3], &layer.ln_r[4]).unwrap();
    let diff = s.g.value(out.r).max_abs_diff(s.g.value(want)).unwrap();
    assert!(diff < 1e-12, "{diff:e}");
}

#[test]
fn shared_gradient_is_the_sum_of_stream_gradients() {
    // The unshared build draws the same initial values for the common
    // parameters, then adds a copy of the shared block for the
    // segmentation stream.
    let mut shared_store = ParamStore::new();
    let mut rng = DetRng::new(11);
    let shared = PsmaeLayer::new(&mut Init { store: &mut shared_store, rng: &mut rng }, "enc", &dims()).unwrap();
    let mut split_store = ParamStore::new();
    let mut rng = DetRng::new(11);
    let split = PsmaeLayer::new_unshared(&mut Init { store: &mut split_store, rng: &mut rng }, "enc", &dims()).unwrap();
    assert_eq!(shared.shared_ids(0), shared.shared_ids(1));
    assert_ne!(split.shared_ids(0), split.shared_ids(1));

    let mut rng = DetRng::new(12);
    let (r, z) = (random(&mut rng, 2, 4), random(&mut rng, 3, 4));
    let grads = |store: &ParamStore<f64>, layer: &PsmaeLayer| {
        let mut s = Session::train(store, ForwardMode::INFER, DetRng::new(0));
        let p = pair(&mut s, &r, &z);
        let out = layer.forward(&mut s, p).unwrap();
        let lr = probe_loss(&mut s, out.r).unwrap();
        let ls = probe_loss(&mut s, out.s).unwrap();
        let loss = s.g.add(lr, ls).unwrap();
        s.g.backward(loss).unwrap();
        let all = s.g.param_grads();
        let out_vals = (s.g.value(out.r).clone(), s.g.value(out.s).clone());
        let get = move |id: ParamId| all.iter().find(|(p, _)| *p == id).unwrap().1.clone();
        (get, out_vals)
    };
    let (g_shared, out_shared) = grads(&shared_store, &shared);
    let (g_split, out_split) = grads(&split_store, &split);
    assert_eq!(out_shared, out_split);
    for ((a, b), c) in shared.shared_ids(0).into_iter().zip(split.shared_ids(0)).zip(split.shared_ids(1)) {
        let sum: Vec<f64> = g_split(b).data().iter().zip(g_split(c).data()).map(|(x, y)| x + y).collect();
        let sum = Tensor::new(g_split(b).shape(), sum).unwrap();
        let diff = g_shared(a).max_abs_diff(&sum).unwrap();
        assert!(diff <= 1e-8, "{}: {diff:e}", shared_store.name(a));
        assert!(g_split(c).data().iter().any(|&v| v != 0.0), "segmentation copy got no gradient");
    }
}

#[test]
fn layer_passes_grad_check() {
    let mut store = ParamStore::new();
    let stack = layers(&mut store, 13, 1);
    let mut rng = DetRng::new(14);
    jitter_norms(&mut store, &stack[0], &mut rng);
    let r = store.add("input_r", random(&mut rng, 2, 4)).unwrap();
    let z = store.add("input_s", random(&mut rng, 3, 4)).unwrap();
    let worst = session_grad_check(&store, ForwardMode::SOFT, Some(12), |s| {
        let p = StreamPair { r: s.p(r)?, s: s.p(z)? };
        let out = stack[0].forward(s, p)?;
        let a = probe_loss(s, out.r)?;
        let b = probe_loss(s, out.s)?;
        Ok(s.g.add(a, b)?)
    });
    assert!(worst <= 1e-4, "{worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn region_update_ignores_segmentation_order(seed in any::<u64>(), n_s in 2usize..6) {
        let mut store = ParamStore::new();
        let stack = layers(&mut store, seed, 1);
        let mut rng = DetRng::new(seed ^ 1);
        jitter_norms(&mut store, &stack[0], &mut rng);
        let hr = random(&mut rng, 3, 4);
        let hs = random(&mut rng, n_s, 4);
        let mut order: Vec<usize> = (0..n_s).collect();
        rng.shuffle(&mut order);
        let permuted = Tensor::from_rows(&order.iter().map(|&i| hs.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut s = infer(&store);
        let a = pair(&mut s, &hr, &hs);
        let b = pair(&mut s, &hr, &permuted);
        let ya = stack[0].cross_query(&mut s, a).unwrap();
        let yb = stack[0].cross_query(&mut s, b).unwrap();
        let diff = s.g.value(ya.r).max_abs_diff(s.g.value(yb.r)).unwrap();
        prop_assert!(diff <= 1e-6, "{:e}", diff);
    }
}
