//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything is CPU-side and single-threaded per graph: a [`Graph`] records
//! one forward evaluation, [`Graph::backward`] runs the reverse sweep once,
//! and gradients of bound parameters come back keyed by [`ParamId`].
//!
//! ```
//! use dsct_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.input(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(), true).unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
mod error;
mod graph;
mod kernels;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use check::{grad_check, grad_check_params};
pub use error::{Result, TensorError};
pub use graph::{ElemKind, Graph, Mask, Var, MASK_NEG};
pub use params::{ParamId, ParamStore};
pub use rng::{DetRng, RngState};
pub use scalar::Scalar;
pub use tensor::Tensor;
