//! Differentiable building blocks with explicit forward/backward pairs.
//!
//! All reductions accumulate in `f64`; storage follows the tensor's scalar
//! type. Backward functions are hand-derived and checked against central
//! finite differences (see `gradcheck`).

mod batchnorm;
mod conv;
pub mod gradcheck;
mod linear;
mod loss;
mod optim;
mod pool;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, BnMode};
pub use conv::{conv2d_backward, conv2d_forward};
pub use linear::{fc_backward, fc_forward};
pub use loss::{cross_entropy, relu, relu_backward, softmax};
pub use optim::{sgd_step, SgdConfig};
pub use pool::{maxpool_backward, maxpool_forward};
