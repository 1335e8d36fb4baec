//! Finite-difference check of a PSMAE layer and a whole micro model.

use dsct::nn::{Activation, ForwardMode, Init, Session};
use dsct::psmae::{EncoderDims, PsmaeLayer, StreamPair};
use dsct::train::xe_loss;
use dsct::{Features, Fusion, Model, ModelConfig};
use dsct_tensor::{grad_check_params, DetRng, Graph, ParamStore, Tensor, Var};

/// Runs `f` inside a recording session whose graph is the checker's.
fn check<F>(store: &ParamStore<f64>, f: F) -> dsct::Result<f64>
where
    F: Fn(&mut Session<f64>) -> dsct::Result<Var>,
{
    let run = |g: &mut Graph<f64>, params: &ParamStore<f64>| {
        let mut s = Session::train(params, ForwardMode::SOFT, DetRng::new(0));
        std::mem::swap(&mut s.g, g);
        let out = f(&mut s);
        std::mem::swap(&mut s.g, g);
        out.map_err(|e| match e {
            dsct::Error::Tensor(t) => t,
            other => panic!("{other}"),
        })
    };
    Ok(grad_check_params(run, store, 1e-6, Some(4), &mut DetRng::new(1))?)
}

fn main() -> dsct::Result<()> {
    let mut rng = DetRng::new(3);
    let mut store = ParamStore::new();
    let dims = EncoderDims { d: 8, heads: 2, d_ff: 16, act: Activation::Gelu, eps: 1e-5 };
    let layer = PsmaeLayer::new(&mut Init { store: &mut store, rng: &mut rng }, "enc", &dims)?;
    let r = store.add("region", Tensor::new(&[3, 8], rng.normal_vec(24, 1.0))?)?;
    let z = store.add("segmentation", Tensor::new(&[4, 8], rng.normal_vec(32, 1.0))?)?;
    let err = check(&store, |s| {
        let pair = StreamPair { r: s.p(r)?, s: s.p(z)? };
        let out = layer.forward(s, pair)?;
        let a = s.g.sum(out.r)?;
        let sq = s.g.mul(out.s, out.s)?;
        let b = s.g.sum(sq)?;
        Ok(s.g.add(a, b)?)
    })?;
    println!("psmae layer: max relative error {err:.2e}");

    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        d_ff: 16,
        feature_dim_region: 6,
        feature_dim_seg: 6,
        ..ModelConfig::desk(9)
    };
    for fusion in Fusion::ALL {
        let model = Model::<f64>::new(ModelConfig { fusion, ..cfg.clone() }, 5)?;
        let feats = Features {
            region: Tensor::new(&[2, 6], rng.normal_vec(12, 1.0))?,
            seg: Tensor::new(&[3, 6], rng.normal_vec(18, 1.0))?,
        };
        let caption = [1, 4, 7, 5, 2];
        let err = check(&model.params, |s| xe_loss(&model, s, &[(&feats, &caption[..])]))?;
        println!("{:<13} {} params, max relative error {err:.2e}", fusion.label(), model.params.numel());
    }
    Ok(())
}
