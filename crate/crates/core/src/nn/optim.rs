//! SGD with momentum and optional weight decay.

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
///
/// The three tensors must share a shape (the ParamGrad contract).
pub fn sgd_step<F: Real>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    velocity: &mut Tensor<F>,
    cfg: &SgdConfig,
) {
    assert_eq!(param.shape(), grad.shape(), "param/grad shape mismatch");
    assert_eq!(param.shape(), velocity.shape(), "param/velocity shape mismatch");
    let p = param.data_mut();
    let v = velocity.data_mut();
    let g = grad.data();
    for i in 0..p.len() {
        let vel = cfg.momentum * v[i].to_f64() + g[i].to_f64() + cfg.weight_decay * p[i].to_f64();
        v[i] = F::from_f64(vel);
        p[i] = F::from_f64(p[i].to_f64() - cfg.lr * vel);
    }
    debug_assert!(p.iter().all(|x| x.is_finite_val()), "non-finite parameter after sgd step");
}
