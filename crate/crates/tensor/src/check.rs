//! Central-difference gradient verification.

use crate::error::{contract, Result, TensorError};
use crate::{DetRng, Graph, ParamStore, Tensor, Var};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone(), false)?;
    let out = f(&mut g, xv)?;
    g.value(out).item()
}

/// Compares `backward` against central differences for every coordinate of
/// `x` and returns the largest `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return contract(format!("grad_check eps must be positive, got {eps}"));
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone(), true)?;
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], but differentiates a loss built from the parameters
/// in `store`. At most `max_coords` randomly chosen coordinates per parameter
/// are probed (`None` probes all of them).
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    eps: f64,
    max_coords: Option<usize>,
    rng: &mut DetRng,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return contract(format!("grad_check eps must be positive, got {eps}"));
    }
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let grads = g.param_grads();
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, s)?;
        g.value(out).item()
    };
    for id in store.ids() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let analytic = grads.iter().find(|(pid, _)| *pid == id).map(|(_, t)| t);
        for i in coords {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            let e = rel_err(a, numeric);
            if e.is_nan() {
                return Err(TensorError::NonFinite("grad_check"));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}
