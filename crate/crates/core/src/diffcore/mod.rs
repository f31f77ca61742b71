//! Dense reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! walks the record in reverse. Parameters live outside the graph in a
//! [`ParamStore`] and enter it through [`Graph::param`], so one store can
//! feed many independent graphs (one per batch row) whose gradients are then
//! summed in a fixed order.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport, GRAD_CHECK_STEP, GRAD_CHECK_TOL};
pub use graph::{AttnPattern, BackwardFn, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
