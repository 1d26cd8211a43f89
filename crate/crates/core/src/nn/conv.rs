//! 2D convolution in NHWC layout with OHWI filters.

use rayon::prelude::*;

use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

/// Samples per work unit when fanning a batch across threads. Fixed so the
/// reduction order (and therefore the bits) never depends on thread count.
const CHUNK: usize = 8;

fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(SgnError::Shape(format!(
            "kernel {kernel} exceeds padded input extent {padded}"
        )));
    }
    let out = (padded - kernel) / stride + 1;
    if out == 0 {
        return Err(SgnError::Shape("non-positive convolution output dim".into()));
    }
    Ok(out)
}

fn check_conv_shapes<F: Real>(
    input: &Tensor<F>,
    filters: &Tensor<F>,
    stride: usize,
) -> Result<(usize, usize)> {
    if input.rank() != 4 || filters.rank() != 4 {
        return Err(SgnError::Shape(
            "conv2d expects input b x h x w x c and filters o x kh x kw x c".into(),
        ));
    }
    if filters.dim(3) != input.dim(3) {
        return Err(SgnError::Shape(format!(
            "filter channel count {} != input channel count {}",
            filters.dim(3),
            input.dim(3)
        )));
    }
    if stride == 0 {
        return Err(SgnError::Argument("stride must be >= 1".into()));
    }
    Ok((filters.dim(1), filters.dim(2)))
}

fn pad_input<F: Real>(input: &Tensor<F>, padding: usize) -> (Vec<F>, usize, usize) {
    let (b, h, w, c) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if padding == 0 {
        return (input.data().to_vec(), ph, pw);
    }
    let mut padded = vec![F::ZERO; b * ph * pw * c];
    let src = input.data();
    for bi in 0..b {
        for y in 0..h {
            let dst_off = ((bi * ph + y + padding) * pw + padding) * c;
            let src_off = (bi * h + y) * w * c;
            padded[dst_off..dst_off + w * c].copy_from_slice(&src[src_off..src_off + w * c]);
        }
    }
    (padded, ph, pw)
}

/// out[b,x,y,o] = bias[o] + sum_{i,j,k} filters[o,i,j,k] * padded[b, x*s+i, y*s+j, k]
pub fn conv2d_forward<F: Real>(
    input: &Tensor<F>,
    filters: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    let (kh, kw) = check_conv_shapes(input, filters, stride)?;
    let (b, h, w, c) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let o_ch = filters.dim(0);
    if bias.len() != o_ch {
        return Err(SgnError::Shape(format!(
            "bias length {} != filter count {}",
            bias.len(),
            o_ch
        )));
    }
    let out_h = output_extent(h, kh, stride, padding)?;
    let out_w = output_extent(w, kw, stride, padding)?;

    let (padded, ph, pw) = pad_input(input, padding);
    let fdata = filters.data();
    let mut out = Tensor::zeros(&[b, out_h, out_w, o_ch]);
    let sample_out = out_h * out_w * o_ch;

    out.data_mut()
        .par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(bi, out_s)| {
            let pad_s = &padded[bi * ph * pw * c..(bi + 1) * ph * pw * c];
            let mut acc_row = vec![0.0f64; out_w];
            for o in 0..o_ch {
                let b0 = bias.at(o).to_f64();
                for x in 0..out_h {
                    acc_row.iter_mut().for_each(|a| *a = b0);
                    for i in 0..kh {
                        let f_row = &fdata[(o * kh + i) * kw * c..(o * kh + i + 1) * kw * c];
                        let in_row = &pad_s[(x * stride + i) * pw * c..(x * stride + i + 1) * pw * c];
                        for (y, acc) in acc_row.iter_mut().enumerate() {
                            let window = &in_row[y * stride * c..y * stride * c + kw * c];
                            let mut s = 0.0f64;
                            for (a, f) in window.iter().zip(f_row) {
                                s += a.to_f64() * f.to_f64();
                            }
                            *acc += s;
                        }
                    }
                    for (y, acc) in acc_row.iter().enumerate() {
                        out_s[(x * out_w + y) * o_ch + o] = F::from_f64(*acc);
                    }
                }
            }
        });
    Ok(out)
}

/// Chain-rule gradients for `conv2d_forward`: returns
/// (grad_input, grad_filters, grad_bias).
pub fn conv2d_backward<F: Real>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    filters: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (kh, kw) = check_conv_shapes(input, filters, stride)?;
    let (b, h, w, c) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let o_ch = filters.dim(0);
    let out_h = output_extent(h, kh, stride, padding)?;
    let out_w = output_extent(w, kw, stride, padding)?;
    if grad_out.shape() != [b, out_h, out_w, o_ch] {
        return Err(SgnError::Shape(format!(
            "grad_out shape {:?} inconsistent with forward output {:?}",
            grad_out.shape(),
            [b, out_h, out_w, o_ch]
        )));
    }

    let (padded, ph, pw) = pad_input(input, padding);
    let fdata = filters.data();
    let gdata = grad_out.data();
    let sample_in = ph * pw * c;
    let sample_out = out_h * out_w * o_ch;
    let fl = filters.len();

    let mut grad_padded = vec![0.0f64; b * sample_in];
    // Per-chunk filter/bias partials, reduced in chunk order afterwards.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_padded
        .par_chunks_mut(CHUNK * sample_in)
        .enumerate()
        .map(|(ci, gpad_chunk)| {
            let mut gf = vec![0.0f64; fl];
            let mut gb = vec![0.0f64; o_ch];
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(b);
            for bi in lo..hi {
                let gpad_s = &mut gpad_chunk[(bi - lo) * sample_in..(bi - lo + 1) * sample_in];
                let pad_s = &padded[bi * sample_in..(bi + 1) * sample_in];
                let g_s = &gdata[bi * sample_out..(bi + 1) * sample_out];
                for x in 0..out_h {
                    for y in 0..out_w {
                        let base = (x * out_w + y) * o_ch;
                        for o in 0..o_ch {
                            let g = g_s[base + o].to_f64();
                            if g == 0.0 {
                                continue;
                            }
                            gb[o] += g;
                            for i in 0..kh {
                                let row = (x * stride + i) * pw * c + y * stride * c;
                                let f_row = &fdata[(o * kh + i) * kw * c..(o * kh + i + 1) * kw * c];
                                let gf_row = &mut gf[(o * kh + i) * kw * c..(o * kh + i + 1) * kw * c];
                                let in_row = &pad_s[row..row + kw * c];
                                let gp_row = &mut gpad_s[row..row + kw * c];
                                for t in 0..kw * c {
                                    gf_row[t] += g * in_row[t].to_f64();
                                    gp_row[t] += g * f_row[t].to_f64();
                                }
                            }
                        }
                    }
                }
            }
            (gf, gb)
        })
        .collect();

    let mut gf_total = vec![0.0f64; fl];
    let mut gb_total = vec![0.0f64; o_ch];
    for (gf, gb) in partials {
        for (t, v) in gf_total.iter_mut().zip(gf) {
            *t += v;
        }
        for (t, v) in gb_total.iter_mut().zip(gb) {
            *t += v;
        }
    }

    // Crop the padding ring off the padded gradient.
    let mut grad_input = Tensor::zeros(&[b, h, w, c]);
    {
        let gi = grad_input.data_mut();
        for bi in 0..b {
            for y in 0..h {
                let src = ((bi * ph + y + padding) * pw + padding) * c;
                let dst = (bi * h + y) * w * c;
                for t in 0..w * c {
                    gi[dst + t] = F::from_f64(grad_padded[src + t]);
                }
            }
        }
    }
    let grad_filters =
        Tensor::from_vec(filters.shape(), gf_total.into_iter().map(F::from_f64).collect())?;
    let grad_bias = Tensor::from_vec(&[o_ch], gb_total.into_iter().map(F::from_f64).collect())?;
    Ok((grad_input, grad_filters, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_grad, max_rel_err};
    use rand::Rng;
    use rand::SeedableRng;

    fn t<F: Real>(shape: &[usize], v: Vec<f64>) -> Tensor<F> {
        Tensor::from_vec(shape, v.into_iter().map(F::from_f64).collect()).unwrap()
    }

    #[test]
    fn hand_evaluated_2x2() {
        let input = t::<f64>(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let filt = t::<f64>(&[1, 2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let bias = t::<f64>(&[1], vec![0.0]);
        let out = conv2d_forward(&input, &filt, &bias, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn identity_1x1_filter_is_identity() {
        let input = t::<f64>(&[1, 3, 3, 1], (0..9).map(|i| i as f64).collect());
        let filt = t::<f64>(&[1, 1, 1, 1], vec![1.0]);
        let bias = t::<f64>(&[1], vec![0.0]);
        let out = conv2d_forward(&input, &filt, &bias, 1, 0).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_filter_yields_bias() {
        let input = t::<f64>(&[1, 3, 3, 2], vec![1.0; 18]);
        let filt = Tensor::<f64>::zeros(&[4, 2, 2, 2]);
        let bias = t::<f64>(&[4], vec![0.5, -1.0, 2.0, 0.0]);
        let out = conv2d_forward(&input, &filt, &bias, 1, 0).unwrap();
        for x in 0..out.dim(1) {
            for y in 0..out.dim(2) {
                for o in 0..4 {
                    assert_eq!(out.at(out.i4(0, x, y, o)), bias.at(o));
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let input = Tensor::<f64>::zeros(&[1, 4, 4, 3]);
        let filt = Tensor::<f64>::zeros(&[2, 3, 3, 2]);
        let bias = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(
            conv2d_forward(&input, &filt, &bias, 1, 0),
            Err(SgnError::Shape(_))
        ));
    }

    #[test]
    fn oversized_kernel_is_shape_error() {
        let input = Tensor::<f64>::zeros(&[1, 2, 2, 1]);
        let filt = Tensor::<f64>::zeros(&[1, 3, 3, 1]);
        let bias = Tensor::<f64>::zeros(&[1]);
        assert!(matches!(
            conv2d_forward(&input, &filt, &bias, 1, 0),
            Err(SgnError::Shape(_))
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let input = Tensor::<f64>::zeros(&[1, 4, 4, 2]);
        let filt = Tensor::<f64>::filled(&[3, 3, 3, 2], 0.3);
        let go = Tensor::<f64>::zeros(&[1, 2, 2, 3]);
        let (gi, gf, gb) = conv2d_backward(&go, &input, &filt, 1, 0).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gf.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_filter_passes_grad_through() {
        let input = t::<f64>(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let filt = t::<f64>(&[1, 1, 1, 1], vec![1.0]);
        let go = t::<f64>(&[1, 2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]);
        let (gi, _, _) = conv2d_backward(&go, &input, &filt, 1, 0).unwrap();
        assert_eq!(gi.data(), go.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let input = t::<f64>(
            &[2, 4, 4, 2],
            (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let filt = t::<f64>(
            &[3, 3, 3, 2],
            (0..54).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let bias = t::<f64>(&[3], vec![0.1, -0.2, 0.3]);
        let weights: Vec<f64> = (0..2 * 4 * 4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |out: &Tensor<f64>| -> f64 {
            out.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };

        let out = conv2d_forward(&input, &filt, &bias, 1, 1).unwrap();
        let go = Tensor::from_vec(out.shape(), weights.clone()).unwrap();
        let (gi, gf, gb) = conv2d_backward(&go, &input, &filt, 1, 1).unwrap();

        let num_gi = finite_diff_grad(
            |x| loss(&conv2d_forward(x, &filt, &bias, 1, 1).unwrap()),
            &input,
            1e-3,
        );
        let num_gf = finite_diff_grad(
            |f| loss(&conv2d_forward(&input, f, &bias, 1, 1).unwrap()),
            &filt,
            1e-3,
        );
        let num_gb = finite_diff_grad(
            |bs| loss(&conv2d_forward(&input, &filt, bs, 1, 1).unwrap()),
            &bias,
            1e-3,
        );
        assert!(max_rel_err(gi.data(), &num_gi) < 1e-4);
        assert!(max_rel_err(gf.data(), &num_gf) < 1e-4);
        assert!(max_rel_err(gb.data(), &num_gb) < 1e-4);
    }

    #[test]
    fn strided_conv_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let input = t::<f64>(
            &[1, 5, 5, 1],
            (0..25).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let filt = t::<f64>(
            &[2, 2, 2, 1],
            (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let bias = t::<f64>(&[2], vec![0.0, 0.0]);
        let out = conv2d_forward(&input, &filt, &bias, 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
        let go = Tensor::<f64>::filled(out.shape(), 1.0);
        let (gi, _, _) = conv2d_backward(&go, &input, &filt, 2, 0).unwrap();
        let num = finite_diff_grad(
            |x| {
                conv2d_forward(x, &filt, &bias, 2, 0)
                    .unwrap()
                    .data()
                    .iter()
                    .sum()
            },
            &input,
            1e-3,
        );
        assert!(max_rel_err(gi.data(), &num) < 1e-4);
    }
}
