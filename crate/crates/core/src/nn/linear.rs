//! Fully connected layer: out = input . weights + bias.

use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

/// input: b x d, weights: d x k, bias: k -> b x k.
pub fn fc_forward<F: Real>(
    input: &Tensor<F>,
    weights: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    if input.rank() != 2 || weights.rank() != 2 {
        return Err(SgnError::Shape("fc expects 2-d input and weights".into()));
    }
    let (b, d) = (input.dim(0), input.dim(1));
    let (wd, k) = (weights.dim(0), weights.dim(1));
    if d != wd || bias.len() != k {
        return Err(SgnError::Shape(format!(
            "fc shapes inconsistent: input b x {d}, weights {wd} x {k}, bias {}",
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(&[b, k]);
    let w = weights.data();
    let x = input.data();
    let od = out.data_mut();
    for bi in 0..b {
        let row = &x[bi * d..(bi + 1) * d];
        for j in 0..k {
            let mut acc = bias.at(j).to_f64();
            for (t, xv) in row.iter().enumerate() {
                acc += xv.to_f64() * w[t * k + j].to_f64();
            }
            od[bi * k + j] = F::from_f64(acc);
        }
    }
    Ok(out)
}

/// Chain rule for `fc_forward`: (grad_input, grad_weights, grad_bias).
pub fn fc_backward<F: Real>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    weights: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (b, d) = (input.dim(0), input.dim(1));
    let k = weights.dim(1);
    if grad_out.shape() != [b, k] {
        return Err(SgnError::Shape("fc grad_out shape mismatch".into()));
    }
    let mut gi = Tensor::zeros(&[b, d]);
    let mut gw = vec![0.0f64; d * k];
    let mut gb = vec![0.0f64; k];
    let g = grad_out.data();
    let x = input.data();
    let w = weights.data();
    {
        let gid = gi.data_mut();
        for bi in 0..b {
            let g_row = &g[bi * k..(bi + 1) * k];
            let x_row = &x[bi * d..(bi + 1) * d];
            for (j, gv) in g_row.iter().enumerate() {
                gb[j] += gv.to_f64();
            }
            for t in 0..d {
                let mut acc = 0.0f64;
                let w_row = &w[t * k..(t + 1) * k];
                let gw_row = &mut gw[t * k..(t + 1) * k];
                let xv = x_row[t].to_f64();
                for (j, gv) in g_row.iter().enumerate() {
                    let gvf = gv.to_f64();
                    acc += gvf * w_row[j].to_f64();
                    gw_row[j] += gvf * xv;
                }
                gid[bi * d + t] = F::from_f64(acc);
            }
        }
    }
    Ok((
        gi,
        Tensor::from_vec(&[d, k], gw.into_iter().map(F::from_f64).collect())?,
        Tensor::from_vec(&[k], gb.into_iter().map(F::from_f64).collect())?,
    ))
}
