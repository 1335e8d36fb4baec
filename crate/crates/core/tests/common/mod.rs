#![allow(dead_code)]

use std::path::PathBuf;

use dsct::data::{make_split, Dataset, SceneConfig, Vocab};
use dsct::model::{Features, Fusion, ModelConfig};
use dsct::nn::{Activation, ForwardMode, Session};
use dsct_tensor::{grad_check_params, DetRng, Graph, ParamStore, Tensor, Var};
use serde_json::Value;

pub fn fixture(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).expect("fixture present")).expect("fixture is JSON")
}

pub fn tensor(v: &Value) -> Tensor<f64> {
    let shape: Vec<usize> = v["shape"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect();
    let data: Vec<f64> = v["data"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    Tensor::new(&shape, data).unwrap()
}

/// Overwrites every parameter of `store` with the fixture value of the same
/// name; the fixture must name exactly the store's parameters.
pub fn load_params(store: &mut ParamStore<f64>, params: &Value) {
    let map = params.as_object().unwrap();
    assert_eq!(map.len(), store.len(), "fixture and store disagree on parameter count");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let v = map.get(&name).unwrap_or_else(|| panic!("fixture lacks {name}"));
        store.set(id, tensor(v)).unwrap();
    }
}

pub fn store_from(params: &Value) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (name, v) in params.as_object().unwrap() {
        store.add(name.clone(), tensor(v)).unwrap();
    }
    store
}

pub fn assert_close(got: &Tensor<f64>, want: &Tensor<f64>, tol: f64, what: &str) {
    assert_eq!(got.shape(), want.shape(), "{what}: shape");
    let diff = got.max_abs_diff(want).unwrap();
    assert!(diff <= tol, "{what}: max abs diff {diff:e} > {tol:e}");
}

pub fn random(rng: &mut DetRng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(&[rows, cols], rng.normal_vec(rows * cols, 1.0)).unwrap()
}

/// Tiny model: width 4, two heads, three layers each side.
pub fn micro_config(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        d_model: 4,
        heads: 2,
        enc_layers: 3,
        dec_layers: 3,
        d_ff: 8,
        vocab_size: 7,
        max_len: 6,
        feature_dim_region: 5,
        feature_dim_seg: 5,
        keep_prob: 0.9,
        beam: 3,
        activation: Activation::Relu,
        fusion,
        ..ModelConfig::desk(7)
    }
}

pub fn random_features(rng: &mut DetRng, n_r: usize, n_s: usize, dim: usize) -> Features<f64> {
    Features {
        region: random(rng, n_r, dim),
        seg: random(rng, n_s, dim),
    }
}

pub fn small_corpus(n_train: usize, n_val: usize, seed: u64) -> (Dataset, Dataset) {
    make_split(n_train, n_val, seed, &SceneConfig::default(), &Vocab::desk()).unwrap()
}

/// Worst relative gradient error of a loss built through a [`Session`],
/// probing up to `coords` coordinates per parameter.
pub fn session_grad_check<F>(store: &ParamStore<f64>, mode: ForwardMode, coords: Option<usize>, f: F) -> f64
where
    F: Fn(&mut Session<f64>) -> dsct::Result<Var>,
{
    let run = |g: &mut Graph<f64>, params: &ParamStore<f64>| -> dsct_tensor::Result<Var> {
        let mut s = Session::train(params, mode, DetRng::new(7));
        std::mem::swap(&mut s.g, g);
        let out = f(&mut s);
        std::mem::swap(&mut s.g, g);
        out.map_err(|e| match e {
            dsct::Error::Tensor(t) => t,
            other => panic!("loss failed: {other}"),
        })
    };
    grad_check_params(run, store, 1e-6, coords, &mut DetRng::new(11)).unwrap()
}

/// Weighted sum of every entry with fixed pseudo-random weights, so that
/// gradients are not symmetric across coordinates.
pub fn probe_loss(s: &mut Session<f64>, y: Var) -> dsct::Result<Var> {
    let shape = s.g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.4).collect();
    let w = s.g.constant(Tensor::new(&shape, w)?)?;
    let p = s.g.mul(y, w)?;
    Ok(s.g.sum(p)?)
}
