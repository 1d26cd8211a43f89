//! Attention head keyed by signature-graph node embeddings.
//!
//! One token per graph node. Keys are projected from the eigenvalue-scaled
//! node embeddings; values from the channel-mean-pooled conv features of the
//! node's patch; queries from those same patch features plus a sinusoidal
//! positional encoding of the node index. Per head the attention matrix is
//! softmax(Q K^T / sqrt(key_dim)); head outputs are concatenated and
//! projected by an output matrix.

use crate::sggraph::SignatureGraph;
use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

use super::{MhaConfig, MhaParams};

/// a (n x k) . b (k x m) -> n x m, f64 accumulation.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * m];
    for r in 0..n {
        for t in 0..k {
            let av = a[r * k + t];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * m..(t + 1) * m];
            let o_row = &mut out[r * m..(r + 1) * m];
            for c in 0..m {
                o_row[c] += av * b_row[c];
            }
        }
    }
    out
}

/// a^T (n x k) . b (n x m) -> k x m.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; k * m];
    for r in 0..n {
        for t in 0..k {
            let av = a[r * k + t];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[r * m..(r + 1) * m];
            let o_row = &mut out[t * m..(t + 1) * m];
            for c in 0..m {
                o_row[c] += av * b_row[c];
            }
        }
    }
    out
}

/// a (n x k) . b^T (m x k) -> n x m.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * m];
    for r in 0..n {
        for c in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[r * k + t] * b[c * k + t];
            }
            out[r * m + c] = acc;
        }
    }
    out
}

/// Standard alternating sin/cos positional encoding of token index `pos`.
pub fn positional_encoding(n: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0f64; n * dim];
    for pos in 0..n {
        for t in 0..dim {
            let exponent = 2.0 * (t / 2) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * dim + t] = if t % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Channel-mean features of each node's patch, flattened row-major to
/// patch_size^2 per node; cells past the map read 0.
pub fn patch_features<F: Real>(map3: &Tensor<F>, graph: &SignatureGraph) -> Vec<f64> {
    let (h, w, c) = (map3.dim(0), map3.dim(1), map3.dim(2));
    let ps = graph.grid.patch_size;
    let n = graph.node_count();
    let mut out = vec![0.0f64; n * ps * ps];
    for (i, node) in graph.nodes.iter().enumerate() {
        let y0 = node.grid_row * ps;
        let x0 = node.grid_col * ps;
        for dy in 0..ps {
            for dx in 0..ps {
                let (y, x) = (y0 + dy, x0 + dx);
                if y >= h || x >= w {
                    continue;
                }
                let mut acc = 0.0f64;
                for k in 0..c {
                    acc += map3.at((y * w + x) * c + k).to_f64();
                }
                out[i * ps * ps + dy * ps + dx] = acc / c as f64;
            }
        }
    }
    out
}

pub struct MhaImageCache {
    pub key_in: Vec<f64>,
    pub query_in: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// head-major n x n attention matrices, each row-stochastic
    pub attn: Vec<f64>,
    pub pre_o: Vec<f64>,
}

pub struct MhaGrads {
    pub d_key_in: Vec<f64>,
    pub d_feat: Vec<f64>,
    pub d_w_q: Vec<f64>,
    pub d_w_k: Vec<f64>,
    pub d_w_v: Vec<f64>,
    pub d_w_o: Vec<f64>,
}

/// Forward pass for one image: `key_in` rows are node embeddings (n x dk_in),
/// `feat` rows are patch features (n x dq_in). Returns the flattened
/// n x value_dim head output.
pub fn mha_forward<F: Real>(
    params: &MhaParams<F>,
    cfg: &MhaConfig,
    key_in: &[f64],
    feat: &[f64],
    n: usize,
    dq_in: usize,
) -> Result<(Vec<f64>, MhaImageCache)> {
    let dk_in = params.w_k.dim(0);
    if key_in.len() != n * dk_in || feat.len() != n * dq_in || params.w_q.dim(0) != dq_in {
        return Err(SgnError::Shape("mha input dims inconsistent with projections".into()));
    }
    let (kd, vd) = (cfg.key_dim, cfg.value_dim);
    let heads = cfg.head_count;
    let (hk, hv) = (kd / heads, vd / heads);
    let wq: Vec<f64> = params.w_q.data().iter().map(|v| v.to_f64()).collect();
    let wk: Vec<f64> = params.w_k.data().iter().map(|v| v.to_f64()).collect();
    let wv: Vec<f64> = params.w_v.data().iter().map(|v| v.to_f64()).collect();
    let wo: Vec<f64> = params.w_o.data().iter().map(|v| v.to_f64()).collect();

    let pe = positional_encoding(n, dq_in);
    let query_in: Vec<f64> = feat.iter().zip(&pe).map(|(f, p)| f + p).collect();

    let q = matmul(&query_in, &wq, n, dq_in, kd);
    let k = matmul(key_in, &wk, n, dk_in, kd);
    let v = matmul(feat, &wv, n, dq_in, vd);

    let scale = (kd as f64).sqrt();
    let mut attn = vec![0.0f64; heads * n * n];
    let mut pre_o = vec![0.0f64; n * vd];
    for h in 0..heads {
        for r in 0..n {
            let q_row = &q[r * kd + h * hk..r * kd + (h + 1) * hk];
            let scores: Vec<f64> = (0..n)
                .map(|c| {
                    let k_row = &k[c * kd + h * hk..c * kd + (h + 1) * hk];
                    q_row.iter().zip(k_row).map(|(a, b)| a * b).sum::<f64>() / scale
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let a_row = &mut attn[(h * n + r) * n..(h * n + r + 1) * n];
            for (c, e) in exps.iter().enumerate() {
                a_row[c] = e / z;
            }
            let o_row = &mut pre_o[r * vd + h * hv..r * vd + (h + 1) * hv];
            for (c, &w) in a_row.iter().enumerate() {
                let v_row = &v[c * vd + h * hv..c * vd + (h + 1) * hv];
                for (t, vv) in v_row.iter().enumerate() {
                    o_row[t] += w * vv;
                }
            }
        }
    }
    let out = matmul(&pre_o, &wo, n, vd, vd);
    Ok((
        out,
        MhaImageCache {
            key_in: key_in.to_vec(),
            query_in,
            q,
            k,
            v,
            attn,
            pre_o,
        },
    ))
}

/// Backward pass for one image; `grad_out` is the flattened n x value_dim
/// gradient of the head output.
pub fn mha_backward<F: Real>(
    params: &MhaParams<F>,
    cfg: &MhaConfig,
    cache: &MhaImageCache,
    grad_out: &[f64],
    n: usize,
    dq_in: usize,
) -> Result<MhaGrads> {
    let dk_in = params.w_k.dim(0);
    let (kd, vd) = (cfg.key_dim, cfg.value_dim);
    let heads = cfg.head_count;
    let (hk, hv) = (kd / heads, vd / heads);
    if grad_out.len() != n * vd {
        return Err(SgnError::Shape("mha grad_out length mismatch".into()));
    }
    let wq: Vec<f64> = params.w_q.data().iter().map(|v| v.to_f64()).collect();
    let wk: Vec<f64> = params.w_k.data().iter().map(|v| v.to_f64()).collect();
    let wv: Vec<f64> = params.w_v.data().iter().map(|v| v.to_f64()).collect();
    let wo: Vec<f64> = params.w_o.data().iter().map(|v| v.to_f64()).collect();

    // out = pre_o . W_o
    let d_w_o = matmul_tn(&cache.pre_o, grad_out, n, vd, vd);
    let d_pre_o = matmul_nt(grad_out, &wo, n, vd, vd);

    let scale = (kd as f64).sqrt();
    let mut d_q = vec![0.0f64; n * kd];
    let mut d_k = vec![0.0f64; n * kd];
    let mut d_v = vec![0.0f64; n * vd];
    for h in 0..heads {
        for r in 0..n {
            let a_row = &cache.attn[(h * n + r) * n..(h * n + r + 1) * n];
            let do_row = &d_pre_o[r * vd + h * hv..r * vd + (h + 1) * hv];
            // dA[r][c] = do_row . V[c], dV[c] += A[r][c] * do_row
            let mut d_a = vec![0.0f64; n];
            for c in 0..n {
                let v_row = &cache.v[c * vd + h * hv..c * vd + (h + 1) * hv];
                d_a[c] = do_row.iter().zip(v_row).map(|(a, b)| a * b).sum();
                let dv_row = &mut d_v[c * vd + h * hv..c * vd + (h + 1) * hv];
                for (t, g) in do_row.iter().enumerate() {
                    dv_row[t] += a_row[c] * g;
                }
            }
            // softmax backward: dS = A * (dA - sum(dA * A))
            let dot: f64 = d_a.iter().zip(a_row).map(|(a, b)| a * b).sum();
            let d_s: Vec<f64> = d_a
                .iter()
                .zip(a_row)
                .map(|(da, a)| a * (da - dot))
                .collect();
            // S[r][c] = Q[r] . K[c] / scale
            let dq_row = &mut d_q[r * kd + h * hk..r * kd + (h + 1) * hk];
            for c in 0..n {
                let g = d_s[c] / scale;
                if g == 0.0 {
                    continue;
                }
                let k_row = &cache.k[c * kd + h * hk..c * kd + (h + 1) * hk];
                for (t, kv) in k_row.iter().enumerate() {
                    dq_row[t] += g * kv;
                }
            }
            let q_row = &cache.q[r * kd + h * hk..r * kd + (h + 1) * hk];
            for c in 0..n {
                let g = d_s[c] / scale;
                if g == 0.0 {
                    continue;
                }
                let dk_row = &mut d_k[c * kd + h * hk..c * kd + (h + 1) * hk];
                for (t, qv) in q_row.iter().enumerate() {
                    dk_row[t] += g * qv;
                }
            }
        }
    }

    let d_w_q = matmul_tn(&cache.query_in, &d_q, n, dq_in, kd);
    let d_w_k = matmul_tn(&cache.key_in, &d_k, n, dk_in, kd);
    // w_v consumed the raw features (query_in minus the positional term)
    let feat: Vec<f64> = {
        let pe = positional_encoding(n, dq_in);
        cache.query_in.iter().zip(&pe).map(|(qi, p)| qi - p).collect()
    };
    let d_w_v = matmul_tn(&feat, &d_v, n, dq_in, vd);
    let d_query_in = matmul_nt(&d_q, &wq, n, kd, dq_in);
    let d_key_in = matmul_nt(&d_k, &wk, n, kd, dk_in);
    let d_value_in = matmul_nt(&d_v, &wv, n, vd, dq_in);
    // d(feat) collects the query and value paths; d(pe) is discarded
    let d_feat: Vec<f64> = d_query_in
        .iter()
        .zip(&d_value_in)
        .map(|(a, b)| a + b)
        .collect();
    Ok(MhaGrads {
        d_key_in,
        d_feat,
        d_w_q,
        d_w_k,
        d_w_v,
        d_w_o,
    })
}
