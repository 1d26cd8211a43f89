//! ReLU activation and softmax cross-entropy.

use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

pub fn relu<F: Real>(input: &Tensor<F>) -> Tensor<F> {
    input.map(|v| if v > F::ZERO { v } else { F::ZERO })
}

/// Masks the gradient wherever the forward input was <= 0.
pub fn relu_backward<F: Real>(grad_out: &Tensor<F>, input: &Tensor<F>) -> Tensor<F> {
    assert_eq!(grad_out.shape(), input.shape());
    let mut out = Tensor::zeros(input.shape());
    let od = out.data_mut();
    for i in 0..input.len() {
        if input.at(i) > F::ZERO {
            od[i] = grad_out.at(i);
        }
    }
    out
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax<F: Real>(logits: &Tensor<F>) -> Tensor<F> {
    assert_eq!(logits.rank(), 2);
    let (b, k) = (logits.dim(0), logits.dim(1));
    let mut out = Tensor::zeros(&[b, k]);
    let src = logits.data();
    let dst = out.data_mut();
    for bi in 0..b {
        let row = &src[bi * k..(bi + 1) * k];
        let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            dst[bi * k + j] = F::from_f64(e / z);
        }
    }
    out
}

/// Mean negative log-likelihood under log-softmax, plus its logit gradient
/// (softmax - onehot) / batch.
pub fn cross_entropy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<(f64, Tensor<F>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(SgnError::Shape(format!(
            "cross_entropy expects b x k logits with b == label count, got {:?} vs {}",
            logits.shape(),
            labels.len()
        )));
    }
    let (b, k) = (logits.dim(0), logits.dim(1));
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(SgnError::Argument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits);
    let mut loss = 0.0f64;
    let mut grad = probs.clone();
    {
        let g = grad.data_mut();
        for (bi, &label) in labels.iter().enumerate() {
            let p = probs.at(bi * k + label).to_f64();
            loss -= p.max(1e-300).ln();
            g[bi * k + label] = F::from_f64(g[bi * k + label].to_f64() - 1.0);
        }
        let inv_b = 1.0 / b as f64;
        for v in g.iter_mut() {
            *v = F::from_f64(v.to_f64() * inv_b);
        }
    }
    loss /= b as f64;
    debug_assert!(loss.is_finite(), "cross-entropy loss is not finite");
    Ok((loss, grad))
}
