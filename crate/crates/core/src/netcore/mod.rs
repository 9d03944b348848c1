//! Differentiable-computation substrate: parameter stores, the gradient
//! tape, Adam, EMA, and a finite-difference oracle.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use gradcheck::{finite_diff_grad, finite_diff_probe, rel_err};
pub use graph::{Gradients, Graph, ParamVars, Var};
pub use optim::{ema_update, OptimizerState};
pub use params::{load_params, save_params, ParamStore};
