//! Max pooling with argmax routing.

use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

/// Per-window maximum. Ties break to the first occurrence in a row-major scan
/// of the window. The returned indices are linear offsets into the input and
/// drive the backward routing.
pub fn maxpool_forward<F: Real>(
    input: &Tensor<F>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<F>, Vec<u32>)> {
    if input.rank() != 4 {
        return Err(SgnError::Shape("maxpool expects b x h x w x c input".into()));
    }
    let (b, h, w, c) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if window == 0 || stride == 0 {
        return Err(SgnError::Argument("pool window and stride must be >= 1".into()));
    }
    if window > h || window > w {
        return Err(SgnError::Shape(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[b, out_h, out_w, c]);
    let mut argmax = vec![0u32; out.len()];
    let src = input.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for x in 0..out_h {
            for y in 0..out_w {
                for k in 0..c {
                    let mut best_idx = ((bi * h + x * stride) * w + y * stride) * c + k;
                    let mut best = src[best_idx];
                    for i in 0..window {
                        for j in 0..window {
                            let idx = ((bi * h + x * stride + i) * w + y * stride + j) * c + k;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((bi * out_h + x) * out_w + y) * c + k;
                    dst[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Route each output gradient to the input cell recorded by the forward pass.
pub fn maxpool_backward<F: Real>(
    grad_out: &Tensor<F>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Result<Tensor<F>> {
    if grad_out.len() != argmax.len() {
        return Err(SgnError::Shape(
            "grad_out length does not match pooling argmax cache".into(),
        ));
    }
    let mut grad_input = Tensor::<F>::zeros(input_shape);
    let gi = grad_input.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        let i = idx as usize;
        gi[i] = F::from_f64(gi[i].to_f64() + g.to_f64());
    }
    Ok(grad_input)
}
