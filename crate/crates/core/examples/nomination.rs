//! Dynamic stream nomination on hand-made inputs: hard choices, ties,
//! Gumbel sampling and the straight-through gradient.

use dsct::dnd::dnm_nominate;
use dsct::nn::{ForwardMode, Init, Linear, Session};
use dsct_tensor::{DetRng, ParamStore, Tensor};

fn main() -> dsct::Result<()> {
    let mut store = ParamStore::<f64>::new();
    let head = Linear::new(&mut Init { store: &mut store, rng: &mut DetRng::new(0) }, "dnm", 2, 2, true)?;
    // gamma = (z_r + z_s)·W + b with W picking the first feature for the
    // region column and the second for the segmentation column.
    store.set(head.w, Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])?)?;
    store.set(head.b.expect("bias"), Tensor::zeros(&[2]))?;
    let zr = Tensor::from_f64(&[4, 2], &[2.0, 0.0, 0.0, 1.0, 0.5, 0.5, 1.0, -1.0])?;
    let zs = Tensor::from_f64(&[4, 2], &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -3.0, 0.0])?;

    let mut s = Session::infer(&store, ForwardMode::INFER, DetRng::new(0));
    let (a, b) = (s.g.constant(zr.clone())?, s.g.constant(zs.clone())?);
    let f = dnm_nominate(&mut s, &head, a, b)?;
    let (gamma, psi, z) = (s.g.value(f.gamma.unwrap()), s.g.value(f.psi.unwrap()), s.g.value(f.z));
    println!("word  gamma            psi     output");
    for r in 0..4 {
        let tag = if psi.at(r, 0) == 1.0 { "R" } else { "S" };
        println!("{r}     {:>6.2} {:>6.2}    {tag}       {:?}", gamma.at(r, 0), gamma.at(r, 1), z.row(r));
    }

    // With Gumbel noise the region share follows softmax(gamma).
    let n = 10_000;
    let mut s = Session::infer(&store, ForwardMode::SAMPLE, DetRng::new(1));
    let rows = Tensor::from_rows(&vec![vec![0.5, 0.0]; n])?;
    let a = s.g.constant(rows)?;
    let zero = s.g.constant(Tensor::zeros(&[n, 2]))?;
    let f = dnm_nominate(&mut s, &head, a, zero)?;
    let psi = s.g.value(f.psi.unwrap());
    let share = (0..n).filter(|&r| psi.at(r, 0) == 1.0).count() as f64 / n as f64;
    println!("sampled region share {share:.3}, softmax {:.3}", 1.0 / (1.0 + (-0.5f64).exp()));

    // The hard choice passes the soft gradient to both streams.
    let mut s = Session::train(&store, ForwardMode::TRAIN, DetRng::new(2));
    let a = s.g.input(zr, true)?;
    let b = s.g.input(zs, true)?;
    let f = dnm_nominate(&mut s, &head, a, b)?;
    let loss = s.g.sum(f.z)?;
    s.g.backward(loss)?;
    println!("d loss / d z_r row 0: {:?}", s.g.grad(a).unwrap().row(0));
    println!("d loss / d z_s row 0: {:?}", s.g.grad(b).unwrap().row(0));
    Ok(())
}
