//! Per-channel batch normalization for NHWC feature maps.

use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Values cached by the train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<F: Real> {
    pub xhat: Tensor<F>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
    pub mode: BnMode,
}

/// Normalize each channel to zero mean and unit variance over the batch.
///
/// Train mode uses batch statistics and folds them into the running estimates
/// as `running <- (1 - momentum) * running + momentum * batch`. Eval mode
/// normalizes with the running estimates. Output is `gamma * xhat + beta`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<F: Real>(
    input: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running_mean: &mut Tensor<F>,
    running_var: &mut Tensor<F>,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<F>, BnCache<F>)> {
    if input.rank() != 4 {
        return Err(SgnError::Shape("batchnorm expects b x h x w x c input".into()));
    }
    let c = input.dim(3);
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(SgnError::Shape(format!(
            "batchnorm parameter length != channel count {c}"
        )));
    }
    let n = input.len() / c;
    let (mean, var) = match mode {
        BnMode::Train => {
            if input.dim(0) < 2 {
                return Err(SgnError::Argument(
                    "batchnorm train mode needs batch size >= 2".into(),
                ));
            }
            let mut mean = vec![0.0f64; c];
            for (i, v) in input.data().iter().enumerate() {
                mean[i % c] += v.to_f64();
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            let mut var = vec![0.0f64; c];
            for (i, v) in input.data().iter().enumerate() {
                let d = v.to_f64() - mean[i % c];
                var[i % c] += d * d;
            }
            for v in &mut var {
                *v /= n as f64;
            }
            for k in 0..c {
                let rm = running_mean.at(k).to_f64();
                let rv = running_var.at(k).to_f64();
                running_mean.data_mut()[k] = F::from_f64((1.0 - momentum) * rm + momentum * mean[k]);
                running_var.data_mut()[k] = F::from_f64((1.0 - momentum) * rv + momentum * var[k]);
            }
            (mean, var)
        }
        BnMode::Eval => (
            running_mean.data().iter().map(|v| v.to_f64()).collect(),
            running_var.data().iter().map(|v| v.to_f64()).collect(),
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    {
        let xh = xhat.data_mut();
        let od = out.data_mut();
        for (i, v) in input.data().iter().enumerate() {
            let k = i % c;
            let h = (v.to_f64() - mean[k]) * inv_std[k];
            xh[i] = F::from_f64(h);
            od[i] = F::from_f64(gamma.at(k).to_f64() * h + beta.at(k).to_f64());
        }
    }
    Ok((
        out,
        BnCache {
            xhat,
            mean,
            var,
            eps,
            mode,
        },
    ))
}

/// Train-mode chain rule. With biased batch variance the input gradient is
/// dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)).
pub fn batchnorm_backward<F: Real>(
    grad_out: &Tensor<F>,
    cache: &BnCache<F>,
    gamma: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    if cache.mode != BnMode::Train {
        return Err(SgnError::Argument(
            "batchnorm_backward requires a train-mode cache".into(),
        ));
    }
    if grad_out.shape() != cache.xhat.shape() {
        return Err(SgnError::Shape("grad_out shape mismatch with cache".into()));
    }
    let c = grad_out.dim(3);
    let n = grad_out.len() / c;
    let mut sum_d = vec![0.0f64; c];
    let mut sum_dx = vec![0.0f64; c];
    let mut grad_beta_acc = vec![0.0f64; c];
    let g = grad_out.data();
    let xh = cache.xhat.data();
    for i in 0..g.len() {
        let k = i % c;
        let d = g[i].to_f64() * gamma.at(k).to_f64();
        sum_d[k] += d;
        sum_dx[k] += d * xh[i].to_f64();
        grad_beta_acc[k] += g[i].to_f64();
    }
    let mut grad_gamma_acc = vec![0.0f64; c];
    for i in 0..g.len() {
        let k = i % c;
        grad_gamma_acc[k] += g[i].to_f64() * xh[i].to_f64();
    }
    let inv_std: Vec<f64> = cache.var.iter().map(|v| 1.0 / (v + cache.eps).sqrt()).collect();
    let mut grad_input = Tensor::zeros(grad_out.shape());
    {
        let gi = grad_input.data_mut();
        let nf = n as f64;
        for i in 0..g.len() {
            let k = i % c;
            let d = g[i].to_f64() * gamma.at(k).to_f64();
            gi[i] = F::from_f64(
                inv_std[k] / nf * (nf * d - sum_d[k] - xh[i].to_f64() * sum_dx[k]),
            );
        }
    }
    Ok((
        grad_input,
        Tensor::from_vec(&[c], grad_gamma_acc.into_iter().map(F::from_f64).collect())?,
        Tensor::from_vec(&[c], grad_beta_acc.into_iter().map(F::from_f64).collect())?,
    ))
}
