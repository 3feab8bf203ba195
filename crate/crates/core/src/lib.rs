//! Derivative-constrained neural network training.
//!
//! * [`autodiff`]: computation graphs differentiable to any order.
//! * [`nn`]: MLPs with the IReLU activation family and optional batch norm.
//! * [`dcloss`]: energy/force and PINN loss builders.
//! * [`pde`]: synthetic datasets with analytic or finite-difference references.
//! * [`trainer`]: Adam, training loops, beta sweeps and ablations.

pub mod autodiff;
pub mod dcloss;
pub mod error;
pub mod nn;
pub mod pde;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, NodeId, Op};
pub use tensor::{Shape, Tensor};
