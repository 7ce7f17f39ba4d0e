//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The engine covers exactly what an attention-based dense prediction
//! network needs: matrix products, masked softmax, fused multi-head
//! attention, layer and batch normalization, strided and transposed
//! convolutions, and the segmentation losses. Values are `f32` for training
//! and `f64` for gradient checking; the element type is a generic parameter
//! of [`Graph`] and [`Tensor`].
//!
//! ```
//! use omg_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod graph;
mod loss;
mod nn;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheck, GradCheckReport};
pub use graph::{Graph, OpKind, OpProfile, Var};
pub use loss::{DICE_SMOOTH, PROB_EPS};
pub use nn::{AttentionShape, AttnMask, BatchStats, BnMode, BLOCKED};
pub use real::{gemm, DType, Layout, Real};
pub use tensor::Tensor;
