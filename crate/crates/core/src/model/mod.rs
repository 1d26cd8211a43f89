//! The assembled network: conv blocks, signature-graph taps, optional skip
//! connection and attention head, final classifier.
//!
//! Per image the forward pass runs the blocks sequentially; at every tapped
//! block the pre-pool activation map is channel-aggregated, partitioned,
//! turned into a signature graph, scaled by the eigenvalues of the grid
//! graph's normalized Laplacian, flattened, and concatenated after the CNN
//! feature vector in a fixed declared order.
//!
//! Gradient routing: eigenvalues and extremum-selection indices are constants
//! for a given forward pass (edges depend only on grid geometry, so the
//! eigenvalues genuinely are locally constant); gradients flow through
//! attribute values back to their source cells, mirroring max-pool routing.

mod io;
pub mod mha;
mod train;

pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{evaluate, train_loop, EpochMetrics, TrainConfig};

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, fc_backward,
    fc_forward, maxpool_backward, maxpool_forward, relu, relu_backward, BnCache, BnMode,
};
use crate::sggraph::{
    aggregate_channels, build_signature_graph, partition, ChannelAgg, EdgeMode, Extremum,
    PatchGrid, SignatureGraph,
};
use crate::spectral::decompose_graph;
use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhaConfig {
    pub head_count: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgnConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub class_count: usize,
    pub blocks: Vec<BlockConfig>,
    /// 1-based indices of blocks feeding a signature-graph layer. Empty
    /// disables the branch entirely (plain-CNN baseline).
    pub sg_layers: Vec<usize>,
    pub patch_size: usize,
    pub extremum: Extremum,
    pub mode: EdgeMode,
    pub skip_connection: bool,
    pub link_chains: bool,
    pub channel_agg: ChannelAgg,
    pub eig_offset: f64,
    pub mha: Option<MhaConfig>,
    pub seed: u64,
}

impl SgnConfig {
    /// Desk-scale default: three 3x3 blocks (16/32/64 channels, 2x2 pools),
    /// one signature layer on block 1, horizontal edges over maxima, patch 6.
    pub fn desk_default(
        input_height: usize,
        input_width: usize,
        input_channels: usize,
        class_count: usize,
    ) -> Self {
        SgnConfig {
            input_height,
            input_width,
            input_channels,
            class_count,
            blocks: vec![
                BlockConfig { out_channels: 16, kernel: 3, pool: 2 },
                BlockConfig { out_channels: 32, kernel: 3, pool: 2 },
                BlockConfig { out_channels: 64, kernel: 3, pool: 2 },
            ],
            sg_layers: vec![1],
            patch_size: 6,
            extremum: Extremum::Maxima,
            mode: EdgeMode::Horizontal,
            skip_connection: false,
            link_chains: false,
            channel_agg: ChannelAgg::Mean,
            eig_offset: 0.0,
            mha: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(SgnError::Argument("at least one conv block required".into()));
        }
        if self.patch_size < 2 {
            return Err(SgnError::Argument("patch_size must be >= 2".into()));
        }
        if self.class_count == 0 {
            return Err(SgnError::Argument("class_count must be >= 1".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &b in &self.sg_layers {
            if b == 0 || b > self.blocks.len() {
                return Err(SgnError::Argument(format!(
                    "sg layer {b} out of range 1..={}",
                    self.blocks.len()
                )));
            }
            if !seen.insert(b) {
                return Err(SgnError::Argument(format!("duplicate sg layer {b}")));
            }
        }
        if let Some(mha) = &self.mha {
            if mha.head_count == 0
                || mha.key_dim % mha.head_count != 0
                || mha.value_dim % mha.head_count != 0
            {
                return Err(SgnError::Argument(
                    "mha key_dim and value_dim must be divisible by head_count".into(),
                ));
            }
            if self.sg_layers.is_empty() {
                return Err(SgnError::Argument(
                    "mha head needs at least one signature layer for its keys".into(),
                ));
            }
        }
        for b in &self.blocks {
            if b.kernel == 0 || b.pool == 0 || b.out_channels == 0 {
                return Err(SgnError::Argument("block dims must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Patch size used at a given tap: the configured size shrunk by the
    /// cumulative pooling factor in front of the block, floored at 2 so grid
    /// node counts stay comparable across taps.
    pub fn tap_patch_size(&self, block_1based: usize) -> usize {
        let factor: usize = self.blocks[..block_1based - 1].iter().map(|b| b.pool).product();
        (self.patch_size / factor.max(1)).max(2)
    }
}

/// Geometry of one signature tap, fixed by the config. The eigenvalues of the
/// grid graph's normalized Laplacian depend only on this structure, never on
/// image content, so they are computed once here.
#[derive(Debug, Clone)]
pub struct TapGeometry {
    pub block: usize,
    pub map_height: usize,
    pub map_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub grid: PatchGrid,
    pub eigenvalues: Vec<f64>,
}

/// Parameters of one conv block (conv + batch norm + pooling setup).
#[derive(Debug, Clone)]
pub struct ConvBlockParams<F: Real> {
    pub filters: Tensor<F>,
    pub bias: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
}

#[derive(Debug, Clone)]
pub struct MhaParams<F: Real> {
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
}

/// Segments of the classifier input, in declared concatenation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    /// Flattened output of the last pooled conv block.
    Conv,
    /// Eigenvalue-scaled signature vector of tap `i` (index into taps).
    SgScaled(usize),
    /// Raw pre-scaling attributes of tap `i` (skip connection).
    SgRaw(usize),
    /// Flattened attention-head output.
    Mha,
}

#[derive(Debug, Clone)]
pub struct SgnModel<F: Real> {
    pub config: SgnConfig,
    pub blocks: Vec<ConvBlockParams<F>>,
    pub taps: Vec<TapGeometry>,
    pub fc_w: Tensor<F>,
    pub fc_b: Tensor<F>,
    pub mha: Option<MhaParams<F>>,
}

/// Gradients aligned with [`SgnModel::parameters`] order.
#[derive(Debug, Clone)]
pub struct Gradients<F: Real> {
    pub tensors: Vec<Tensor<F>>,
}

struct BlockForward<F: Real> {
    conv_input: Tensor<F>,
    bn_cache: BnCache<F>,
    relu_input: Tensor<F>,
    tap_shape: Vec<usize>,
    pool_argmax: Vec<u32>,
    pool_out_shape: Vec<usize>,
}

struct TapForward {
    graphs: Vec<SignatureGraph>,
    /// winning channel per pixel, kept only for ChannelAgg::Max backward
    max_channel: Option<Vec<Vec<u16>>>,
    /// per image: n x patch_size^2 channel-mean patch features (attention input)
    patch_feats: Option<Vec<Vec<f64>>>,
}

pub struct ForwardCache<F: Real> {
    blocks: Vec<BlockForward<F>>,
    taps: Vec<TapForward>,
    mha: Option<Vec<mha::MhaImageCache>>,
    pub fc_input: Tensor<F>,
    mode: BnMode,
}

impl<F: Real> ForwardCache<F> {
    /// Hash over every discrete selection made during the forward pass (pool
    /// argmaxes and graph node coordinates). Finite-difference checks use it
    /// to detect argmax flips caused by the probe perturbation.
    pub fn selection_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for b in &self.blocks {
            b.pool_argmax.hash(&mut h);
        }
        for t in &self.taps {
            for g in &t.graphs {
                g.nodes.hash(&mut h);
            }
        }
        h.finish()
    }
}

fn conv_out_extent(input: usize, kernel: usize, padding: usize) -> usize {
    input + 2 * padding - kernel + 1
}

impl<F: Real> SgnModel<F> {
    pub fn new(config: SgnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = |rng: &mut ChaCha8Rng, n: usize, std: f64| -> Vec<F> {
            (0..n)
                .map(|_| F::from_f64(std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)))
                .collect()
        };

        let mut blocks = Vec::new();
        let mut taps = Vec::new();
        let (mut h, mut w, mut c) = (
            config.input_height,
            config.input_width,
            config.input_channels,
        );
        for (bi, bc) in config.blocks.iter().enumerate() {
            let padding = bc.kernel / 2;
            let out_c = bc.out_channels;
            let std = (2.0 / (bc.kernel * bc.kernel * c) as f64).sqrt();
            let filters = Tensor::from_vec(
                &[out_c, bc.kernel, bc.kernel, c],
                normal(&mut rng, out_c * bc.kernel * bc.kernel * c, std),
            )?;
            blocks.push(ConvBlockParams {
                filters,
                bias: Tensor::zeros(&[out_c]),
                gamma: Tensor::filled(&[out_c], F::ONE),
                beta: Tensor::zeros(&[out_c]),
                running_mean: Tensor::zeros(&[out_c]),
                running_var: Tensor::filled(&[out_c], F::ONE),
                kernel: bc.kernel,
                padding,
                pool: bc.pool,
            });
            let (ch, cw) = (
                conv_out_extent(h, bc.kernel, padding),
                conv_out_extent(w, bc.kernel, padding),
            );
            if ch == 0 || cw == 0 {
                return Err(SgnError::Shape(format!("block {} output collapses to zero", bi + 1)));
            }
            if config.sg_layers.contains(&(bi + 1)) {
                let patch = config.tap_patch_size(bi + 1);
                let grid = partition(ch, cw, patch)?;
                let probe = build_signature_graph(
                    &Tensor::<f64>::zeros(&[ch, cw]),
                    patch,
                    config.extremum,
                    config.mode,
                    config.link_chains,
                )?;
                let eigenvalues = decompose_graph(&probe)?.eigenvalues;
                taps.push(TapGeometry {
                    block: bi + 1,
                    map_height: ch,
                    map_width: cw,
                    channels: out_c,
                    patch_size: patch,
                    grid,
                    eigenvalues,
                });
            }
            if bc.pool > ch || bc.pool > cw {
                return Err(SgnError::Shape(format!(
                    "block {} pool window {} exceeds map {}x{}",
                    bi + 1,
                    bc.pool,
                    ch,
                    cw
                )));
            }
            h = (ch - bc.pool) / bc.pool + 1;
            w = (cw - bc.pool) / bc.pool + 1;
            c = out_c;
        }
        // keep taps in sg_layers declaration order (sorted by block index)
        taps.sort_by_key(|t| t.block);

        let conv_flat = h * w * c;
        let mut width = conv_flat;
        for t in &taps {
            width += t.grid.node_count() * t.patch_size;
        }
        if config.skip_connection {
            for t in &taps {
                width += t.grid.node_count() * t.patch_size;
            }
        }
        if let Some(mc) = &config.mha {
            width += taps[0].grid.node_count() * mc.value_dim;
        }

        let fc_std = (2.0 / width as f64).sqrt();
        let fc_w = Tensor::from_vec(
            &[width, config.class_count],
            normal(&mut rng, width * config.class_count, fc_std),
        )?;
        let fc_b = Tensor::zeros(&[config.class_count]);

        let mha = match &config.mha {
            None => None,
            Some(mc) => {
                let ps = taps[0].patch_size;
                let dq = ps * ps;
                Some(MhaParams {
                    w_q: Tensor::from_vec(
                        &[dq, mc.key_dim],
                        normal(&mut rng, dq * mc.key_dim, (1.0 / dq as f64).sqrt()),
                    )?,
                    w_k: Tensor::from_vec(
                        &[ps, mc.key_dim],
                        normal(&mut rng, ps * mc.key_dim, (1.0 / ps as f64).sqrt()),
                    )?,
                    w_v: Tensor::from_vec(
                        &[dq, mc.value_dim],
                        normal(&mut rng, dq * mc.value_dim, (1.0 / dq as f64).sqrt()),
                    )?,
                    w_o: Tensor::from_vec(
                        &[mc.value_dim, mc.value_dim],
                        normal(&mut rng, mc.value_dim * mc.value_dim, (1.0 / mc.value_dim as f64).sqrt()),
                    )?,
                })
            }
        };

        let model = SgnModel {
            config,
            blocks,
            taps,
            fc_w,
            fc_b,
            mha,
        };
        // fc width == conv flat + signature (+ skip, + attention) widths
        assert_eq!(model.classifier_width(), model.fc_w.dim(0));
        Ok(model)
    }

    /// Width of the concatenated classifier input; a pure function of config.
    pub fn classifier_width(&self) -> usize {
        self.segments().iter().map(|(_, w)| w).sum()
    }

    /// Concatenation layout as (segment, width) pairs in declared order:
    /// conv flat, scaled signature vectors per tap, raw attribute vectors per
    /// tap when the skip connection is on, attention output last.
    pub fn segments(&self) -> Vec<(Segment, usize)> {
        let mut out = vec![(Segment::Conv, self.conv_flat_width())];
        for (i, t) in self.taps.iter().enumerate() {
            out.push((Segment::SgScaled(i), t.grid.node_count() * t.patch_size));
        }
        if self.config.skip_connection {
            for (i, t) in self.taps.iter().enumerate() {
                out.push((Segment::SgRaw(i), t.grid.node_count() * t.patch_size));
            }
        }
        if let Some(mc) = &self.config.mha {
            out.push((Segment::Mha, self.taps[0].grid.node_count() * mc.value_dim));
        }
        out
    }

    /// Byte range of a segment within a classifier-input row.
    pub fn segment_range(&self, want: &Segment) -> Option<std::ops::Range<usize>> {
        let mut off = 0;
        for (seg, w) in self.segments() {
            if seg == *want {
                return Some(off..off + w);
            }
            off += w;
        }
        None
    }

    fn conv_flat_width(&self) -> usize {
        let (mut h, mut w, mut c) = (
            self.config.input_height,
            self.config.input_width,
            self.config.input_channels,
        );
        for (bc, bp) in self.config.blocks.iter().zip(&self.blocks) {
            h = (conv_out_extent(h, bc.kernel, bp.padding) - bc.pool) / bc.pool + 1;
            w = (conv_out_extent(w, bc.kernel, bp.padding) - bc.pool) / bc.pool + 1;
            c = bc.out_channels;
        }
        h * w * c
    }

    /// Trainable parameters in a fixed order; gradients and momentum buffers
    /// are aligned with this order. Running BN stats are not trainable.
    pub fn parameters(&self) -> Vec<&Tensor<F>> {
        let mut ps = Vec::new();
        for b in &self.blocks {
            ps.extend([&b.filters, &b.bias, &b.gamma, &b.beta]);
        }
        ps.extend([&self.fc_w, &self.fc_b]);
        if let Some(m) = &self.mha {
            ps.extend([&m.w_q, &m.w_k, &m.w_v, &m.w_o]);
        }
        ps
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut ps: Vec<&mut Tensor<F>> = Vec::new();
        for b in &mut self.blocks {
            ps.push(&mut b.filters);
            ps.push(&mut b.bias);
            ps.push(&mut b.gamma);
            ps.push(&mut b.beta);
        }
        ps.push(&mut self.fc_w);
        ps.push(&mut self.fc_b);
        if let Some(m) = &mut self.mha {
            ps.push(&mut m.w_q);
            ps.push(&mut m.w_k);
            ps.push(&mut m.w_v);
            ps.push(&mut m.w_o);
        }
        ps
    }

    pub fn cast<G: Real>(&self) -> SgnModel<G> {
        SgnModel {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlockParams {
                    filters: b.filters.cast(),
                    bias: b.bias.cast(),
                    gamma: b.gamma.cast(),
                    beta: b.beta.cast(),
                    running_mean: b.running_mean.cast(),
                    running_var: b.running_var.cast(),
                    kernel: b.kernel,
                    padding: b.padding,
                    pool: b.pool,
                })
                .collect(),
            taps: self.taps.clone(),
            fc_w: self.fc_w.cast(),
            fc_b: self.fc_b.cast(),
            mha: self.mha.as_ref().map(|m| MhaParams {
                w_q: m.w_q.cast(),
                w_k: m.w_k.cast(),
                w_v: m.w_v.cast(),
                w_o: m.w_o.cast(),
            }),
        }
    }

    /// Eval-mode pre-pool activation map (h x w x c) of the given 1-based
    /// block for a batch of images. Used by the graph-dump command.
    pub fn feature_map(&mut self, images: &Tensor<F>, block_1based: usize) -> Result<Tensor<F>> {
        if block_1based == 0 || block_1based > self.blocks.len() {
            return Err(SgnError::Argument(format!(
                "layer {block_1based} out of range 1..={}",
                self.blocks.len()
            )));
        }
        let mut x = images.clone();
        for (bi, bp) in self.blocks.iter_mut().enumerate() {
            let z1 = conv2d_forward(&x, &bp.filters, &bp.bias, 1, bp.padding)?;
            let (z2, _) = batchnorm_forward(
                &z1,
                &bp.gamma,
                &bp.beta,
                &mut bp.running_mean,
                &mut bp.running_var,
                BnMode::Eval,
                BN_EPS,
                BN_MOMENTUM,
            )?;
            let z3 = relu(&z2);
            if bi + 1 == block_1based {
                return Ok(z3);
            }
            let (z4, _) = maxpool_forward(&z3, bp.pool, bp.pool)?;
            x = z4;
        }
        unreachable!("validated block index");
    }

    /// Run the stack on a batch; returns logits and every cache backward
    /// needs. Train mode updates BN running statistics.
    pub fn forward(&mut self, images: &Tensor<F>, mode: BnMode) -> Result<(Tensor<F>, ForwardCache<F>)> {
        let cfg = &self.config;
        if images.rank() != 4
            || images.dim(1) != cfg.input_height
            || images.dim(2) != cfg.input_width
            || images.dim(3) != cfg.input_channels
        {
            return Err(SgnError::Shape(format!(
                "batch shape {:?} does not match configured input {}x{}x{}",
                images.shape(),
                cfg.input_height,
                cfg.input_width,
                cfg.input_channels
            )));
        }
        let batch = images.dim(0);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut tap_caches: Vec<TapForward> = Vec::with_capacity(self.taps.len());
        let mut x = images.clone();
        let mut tap_cursor = 0usize;
        let sg_extremum = cfg.extremum;
        let sg_mode = cfg.mode;
        let link = cfg.link_chains;
        let agg = cfg.channel_agg;
        let want_mha = cfg.mha.is_some();

        for (bi, bp) in self.blocks.iter_mut().enumerate() {
            let conv_input = x;
            let z1 = conv2d_forward(&conv_input, &bp.filters, &bp.bias, 1, bp.padding)?;
            let (z2, bn_cache) = batchnorm_forward(
                &z1,
                &bp.gamma,
                &bp.beta,
                &mut bp.running_mean,
                &mut bp.running_var,
                mode,
                BN_EPS,
                BN_MOMENTUM,
            )?;
            let z3 = relu(&z2);
            if tap_cursor < self.taps.len() && self.taps[tap_cursor].block == bi + 1 {
                let geo = &self.taps[tap_cursor];
                let (th, tw, tc) = (geo.map_height, geo.map_width, geo.channels);
                let mut graphs = Vec::with_capacity(batch);
                let mut max_channel = if agg == ChannelAgg::Max {
                    Some(Vec::with_capacity(batch))
                } else {
                    None
                };
                let first_tap = tap_cursor == 0;
                let mut patch_feats = if want_mha && first_tap {
                    Some(Vec::with_capacity(batch))
                } else {
                    None
                };
                for img in 0..batch {
                    let off = img * th * tw * tc;
                    let map3 =
                        Tensor::from_vec(&[th, tw, tc], z3.data()[off..off + th * tw * tc].to_vec())?;
                    let map = aggregate_channels(&map3, agg)?;
                    if let Some(mc) = &mut max_channel {
                        let mut winners = vec![0u16; th * tw];
                        for p in 0..th * tw {
                            let mut best = f64::NEG_INFINITY;
                            for k in 0..tc {
                                let v = map3.at(p * tc + k).to_f64();
                                if v > best {
                                    best = v;
                                    winners[p] = k as u16;
                                }
                            }
                        }
                        mc.push(winners);
                    }
                    let graph =
                        build_signature_graph(&map, geo.patch_size, sg_extremum, sg_mode, link)?;
                    if let Some(pf) = &mut patch_feats {
                        pf.push(mha::patch_features(&map3, &graph));
                    }
                    graphs.push(graph);
                }
                tap_caches.push(TapForward {
                    graphs,
                    max_channel,
                    patch_feats,
                });
                tap_cursor += 1;
            }
            let (z4, pool_argmax) = maxpool_forward(&z3, bp.pool, bp.pool)?;
            block_caches.push(BlockForward {
                conv_input,
                bn_cache,
                relu_input: z2,
                tap_shape: z3.shape().to_vec(),
                pool_argmax,
                pool_out_shape: z4.shape().to_vec(),
            });
            x = z4;
        }

        let conv_flat_w = x.len() / batch;
        let width = self.classifier_width();
        let mut fc_input = Tensor::zeros(&[batch, width]);
        let mut mha_caches = if want_mha { Some(Vec::with_capacity(batch)) } else { None };
        {
            let dst = fc_input.data_mut();
            let conv_data = x.data();
            for img in 0..batch {
                let mut off = img * width;
                dst[off..off + conv_flat_w]
                    .copy_from_slice(&conv_data[img * conv_flat_w..(img + 1) * conv_flat_w]);
                off += conv_flat_w;
                for (geo, tf) in self.taps.iter().zip(&tap_caches) {
                    let graph = &tf.graphs[img];
                    let dec_len = geo.grid.node_count();
                    debug_assert_eq!(graph.node_count(), dec_len);
                    for i in 0..dec_len {
                        let lam = geo.eigenvalues[i] + self.config.eig_offset;
                        for t in 0..geo.patch_size {
                            dst[off] = F::from_f64(lam * graph.attributes[i * geo.patch_size + t]);
                            off += 1;
                        }
                    }
                }
                if self.config.skip_connection {
                    for tf in &tap_caches {
                        let graph = &tf.graphs[img];
                        for &a in &graph.attributes {
                            dst[off] = F::from_f64(a);
                            off += 1;
                        }
                    }
                }
                if let Some(mp) = &self.mha {
                    let mc = self.config.mha.as_ref().expect("mha config");
                    let geo = &self.taps[0];
                    let tf = &tap_caches[0];
                    let graph = &tf.graphs[img];
                    let ps = geo.patch_size;
                    let n = graph.node_count();
                    let mut key_in = vec![0.0f64; n * ps];
                    for i in 0..n {
                        let lam = geo.eigenvalues[i] + self.config.eig_offset;
                        for t in 0..ps {
                            key_in[i * ps + t] = lam * graph.attributes[i * ps + t];
                        }
                    }
                    let feats = &tf.patch_feats.as_ref().expect("patch features cached")[img];
                    let (out, cache) = mha::mha_forward(mp, mc, &key_in, feats, n, ps * ps)?;
                    for v in out {
                        dst[off] = F::from_f64(v);
                        off += 1;
                    }
                    mha_caches.as_mut().expect("mha cache vec").push(cache);
                }
                debug_assert_eq!(off, (img + 1) * width);
            }
        }
        let logits = fc_forward(&fc_input, &self.fc_w, &self.fc_b)?;
        Ok((
            logits,
            ForwardCache {
                blocks: block_caches,
                taps: tap_caches,
                mha: mha_caches,
                fc_input,
                mode,
            },
        ))
    }

    /// Backpropagate from logit gradients to parameter gradients. Selection
    /// indices and eigenvalues are constants; the n x patch_size signature
    /// segment routes back to its source cells like max-pool routing.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_logits: &Tensor<F>) -> Result<Gradients<F>> {
        if cache.mode != BnMode::Train {
            return Err(SgnError::Argument(
                "backward requires caches from a train-mode forward".into(),
            ));
        }
        let batch = grad_logits.dim(0);
        let width = self.classifier_width();
        let (grad_fc_input, grad_fc_w, grad_fc_b) =
            fc_backward(grad_logits, &cache.fc_input, &self.fc_w)?;

        // Split the classifier gradient into its declared segments.
        let segs = self.segments();
        let mut seg_off = Vec::with_capacity(segs.len());
        {
            let mut off = 0;
            for (_, w) in &segs {
                seg_off.push(off);
                off += w;
            }
        }
        let gfi = grad_fc_input.data();

        // Gradient flowing into each block's tap (relu output), accumulated
        // from the pooling path plus any signature/attention routes.
        let mut tap_grads: Vec<Tensor<F>> = cache
            .blocks
            .iter()
            .map(|b| Tensor::zeros(&b.tap_shape))
            .collect();

        // conv segment: reshape into the last pooled map and route through pool
        let last = cache.blocks.len() - 1;
        {
            let conv_w = segs[0].1;
            let mut grad_pool = Tensor::zeros(&cache.blocks[last].pool_out_shape);
            let gp = grad_pool.data_mut();
            for img in 0..batch {
                let src = &gfi[img * width..img * width + conv_w];
                gp[img * conv_w..(img + 1) * conv_w].copy_from_slice(src);
            }
            let routed = maxpool_backward(
                &grad_pool,
                &cache.blocks[last].pool_argmax,
                &cache.blocks[last].tap_shape,
            )?;
            tap_grads[last] = routed;
        }

        // attention segment first: it contributes gradients to the first
        // tap's attributes (through the keys) and patch features.
        let mut mha_grads: Option<(Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>)> = None;
        let mut mha_key_grads: Vec<Vec<f64>> = Vec::new();
        let mut mha_feat_grads: Vec<Vec<f64>> = Vec::new();
        if let Some(mp) = &self.mha {
            let mc = self.config.mha.as_ref().expect("mha config");
            let caches = cache.mha.as_ref().expect("mha caches");
            let geo = &self.taps[0];
            let ps = geo.patch_size;
            let n = geo.grid.node_count();
            let seg_idx = segs.iter().position(|(s, _)| *s == Segment::Mha).expect("mha segment");
            let (mut gq, mut gk, mut gv, mut go) = (
                vec![0.0f64; mp.w_q.len()],
                vec![0.0f64; mp.w_k.len()],
                vec![0.0f64; mp.w_v.len()],
                vec![0.0f64; mp.w_o.len()],
            );
            for img in 0..batch {
                let seg = &gfi[img * width + seg_off[seg_idx]
                    ..img * width + seg_off[seg_idx] + segs[seg_idx].1];
                let seg_f64: Vec<f64> = seg.iter().map(|v| v.to_f64()).collect();
                let out = mha::mha_backward(mp, mc, &caches[img], &seg_f64, n, ps * ps)?;
                for (t, v) in gq.iter_mut().zip(&out.d_w_q) {
                    *t += v;
                }
                for (t, v) in gk.iter_mut().zip(&out.d_w_k) {
                    *t += v;
                }
                for (t, v) in gv.iter_mut().zip(&out.d_w_v) {
                    *t += v;
                }
                for (t, v) in go.iter_mut().zip(&out.d_w_o) {
                    *t += v;
                }
                mha_key_grads.push(out.d_key_in);
                mha_feat_grads.push(out.d_feat);
            }
            mha_grads = Some((
                Tensor::from_vec(mp.w_q.shape(), gq.into_iter().map(F::from_f64).collect())?,
                Tensor::from_vec(mp.w_k.shape(), gk.into_iter().map(F::from_f64).collect())?,
                Tensor::from_vec(mp.w_v.shape(), gv.into_iter().map(F::from_f64).collect())?,
                Tensor::from_vec(mp.w_o.shape(), go.into_iter().map(F::from_f64).collect())?,
            ));
        }

        // signature segments: scaled (and raw skip) gradients back to cells
        for (ti, geo) in self.taps.iter().enumerate() {
            let tf = &cache.taps[ti];
            let block_idx = geo.block - 1;
            let (th, tw, tc) = (geo.map_height, geo.map_width, geo.channels);
            let ps = geo.patch_size;
            let n = geo.grid.node_count();
            let scaled_idx = segs
                .iter()
                .position(|(s, _)| *s == Segment::SgScaled(ti))
                .expect("scaled segment");
            let raw_idx = segs.iter().position(|(s, _)| *s == Segment::SgRaw(ti));
            let gt = tap_grads[block_idx].data_mut();
            for img in 0..batch {
                let graph = &tf.graphs[img];
                for i in 0..n {
                    let lam = geo.eigenvalues[i] + self.config.eig_offset;
                    let node = &graph.nodes[i];
                    if node.y >= th {
                        continue; // attribute row fully in padding
                    }
                    let x0 = node.grid_col * ps;
                    for t in 0..ps {
                        if x0 + t >= tw {
                            break;
                        }
                        let mut g_attr = lam
                            * gfi[img * width + seg_off[scaled_idx] + i * ps + t].to_f64();
                        if let Some(ri) = raw_idx {
                            g_attr += gfi[img * width + seg_off[ri] + i * ps + t].to_f64();
                        }
                        if ti == 0 && !mha_key_grads.is_empty() {
                            g_attr += lam * mha_key_grads[img][i * ps + t];
                        }
                        if g_attr == 0.0 {
                            continue;
                        }
                        let pix = (img * th + node.y) * tw + x0 + t;
                        route_agg_grad(gt, pix * tc, tc, g_attr, &self.config.channel_agg, tf, img, (node.y * tw) + x0 + t);
                    }
                }
                // attention value/query path: channel-mean patch features
                if ti == 0 && !mha_feat_grads.is_empty() {
                    let df = &mha_feat_grads[img];
                    for i in 0..n {
                        let node = &graph.nodes[i];
                        let y0 = node.grid_row * ps;
                        let x0 = node.grid_col * ps;
                        for dy in 0..ps {
                            for dx in 0..ps {
                                let (y, x) = (y0 + dy, x0 + dx);
                                if y >= th || x >= tw {
                                    continue;
                                }
                                let g = df[i * ps * ps + dy * ps + dx] / tc as f64;
                                if g == 0.0 {
                                    continue;
                                }
                                let base = ((img * th + y) * tw + x) * tc;
                                for k in 0..tc {
                                    gt[base + k] = F::from_f64(gt[base + k].to_f64() + g);
                                }
                            }
                        }
                    }
                }
            }
        }

        // walk the blocks top-down
        let mut block_grads: Vec<(Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>)> =
            Vec::with_capacity(self.blocks.len());
        let mut grad_below: Option<Tensor<F>> = None;
        for bi in (0..self.blocks.len()).rev() {
            let bf = &cache.blocks[bi];
            let bp = &self.blocks[bi];
            let mut g_tap = std::mem::replace(&mut tap_grads[bi], Tensor::zeros(&[0]));
            if let Some(extra) = grad_below.take() {
                let gd = g_tap.data_mut();
                for (t, v) in gd.iter_mut().zip(extra.data()) {
                    *t = F::from_f64(t.to_f64() + v.to_f64());
                }
            }
            let g_relu = relu_backward(&g_tap, &bf.relu_input);
            let (g_bn, g_gamma, g_beta) = batchnorm_backward(&g_relu, &bf.bn_cache, &bp.gamma)?;
            let (g_in, g_filt, g_bias) =
                conv2d_backward(&g_bn, &bf.conv_input, &bp.filters, 1, bp.padding)?;
            block_grads.push((g_filt, g_bias, g_gamma, g_beta));
            if bi > 0 {
                // route through the previous block's pooling
                let routed = maxpool_backward(
                    &g_in.reshape(&cache.blocks[bi - 1].pool_out_shape)?,
                    &cache.blocks[bi - 1].pool_argmax,
                    &cache.blocks[bi - 1].tap_shape,
                )?;
                grad_below = Some(routed);
            }
        }
        block_grads.reverse();

        let mut tensors = Vec::new();
        for (gf, gb, gg, gbeta) in block_grads {
            tensors.extend([gf, gb, gg, gbeta]);
        }
        tensors.extend([grad_fc_w, grad_fc_b]);
        if let Some((gq, gk, gv, go)) = mha_grads {
            tensors.extend([gq, gk, gv, go]);
        }
        Ok(Gradients { tensors })
    }
}

/// Distribute a gradient on the aggregated map back across channels.
#[allow(clippy::too_many_arguments)]
fn route_agg_grad<F: Real>(
    gt: &mut [F],
    base: usize,
    channels: usize,
    g: f64,
    agg: &ChannelAgg,
    tf: &TapForward,
    img: usize,
    pixel: usize,
) {
    match agg {
        ChannelAgg::Mean => {
            let share = g / channels as f64;
            for k in 0..channels {
                gt[base + k] = F::from_f64(gt[base + k].to_f64() + share);
            }
        }
        ChannelAgg::Channel(k) => {
            gt[base + k] = F::from_f64(gt[base + k].to_f64() + g);
        }
        ChannelAgg::Max => {
            let winners = tf.max_channel.as_ref().expect("max-agg cache");
            let k = winners[img][pixel] as usize;
            gt[base + k] = F::from_f64(gt[base + k].to_f64() + g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn mnist_like_config() -> SgnConfig {
        SgnConfig::desk_default(28, 28, 1, 10)
    }

    #[test]
    fn classifier_width_is_pure_function_of_config() {
        let model = SgnModel::<f32>::new(mnist_like_config()).unwrap();
        // conv: 28 -> 14 -> 7 -> 3 at 64 channels; sg: 5x5 grid x patch 6
        assert_eq!(model.conv_flat_width(), 3 * 3 * 64);
        assert_eq!(
            model.segment_range(&Segment::SgScaled(0)).unwrap().len(),
            25 * 6
        );
        assert_eq!(model.classifier_width(), 576 + 150);
        assert_eq!(model.fc_w.dim(0), 726);
    }

    #[test]
    fn tap_patch_sizes_shrink_with_pooling() {
        let cfg = mnist_like_config();
        assert_eq!(cfg.tap_patch_size(1), 6);
        assert_eq!(cfg.tap_patch_size(2), 3);
        assert_eq!(cfg.tap_patch_size(3), 2);
    }

    #[test]
    fn all_zero_image_gives_zero_sg_segment_and_bias_logits() {
        let mut model = SgnModel::<f32>::new(mnist_like_config()).unwrap();
        let batch = Tensor::<f32>::zeros(&[1, 28, 28, 1]);
        let (logits, cache) = model.forward(&batch, BnMode::Eval).unwrap();
        let sg = model.segment_range(&Segment::SgScaled(0)).unwrap();
        assert!(cache.fc_input.data()[sg].iter().all(|&v| v == 0.0));
        // fresh model: conv bias 0, bn identity-at-init, fc bias 0
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut model = SgnModel::<f32>::new(mnist_like_config()).unwrap();
        let batch = Tensor::<f32>::from_vec(
            &[1, 28, 28, 1],
            (0..784).map(|i| ((i * 31 % 97) as f32) / 97.0).collect(),
        )
        .unwrap();
        let (a, _) = model.forward(&batch, BnMode::Eval).unwrap();
        let (b, _) = model.forward(&batch, BnMode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn disabled_sg_branch_matches_conv_segment_bitwise() {
        let mut plain_cfg = mnist_like_config();
        plain_cfg.sg_layers.clear();
        let mut plain = SgnModel::<f32>::new(plain_cfg).unwrap();
        let mut sgn = SgnModel::<f32>::new(mnist_like_config()).unwrap();
        let batch = Tensor::<f32>::from_vec(
            &[2, 28, 28, 1],
            (0..2 * 784).map(|i| ((i * 17 % 61) as f32) / 61.0).collect(),
        )
        .unwrap();
        let (_, pc) = plain.forward(&batch, BnMode::Eval).unwrap();
        let (_, sc) = sgn.forward(&batch, BnMode::Eval).unwrap();
        let conv_w = plain.classifier_width();
        for img in 0..2 {
            let a = &pc.fc_input.data()[img * conv_w..(img + 1) * conv_w];
            let b = &sc.fc_input.data()
                [img * sgn.classifier_width()..img * sgn.classifier_width() + conv_w];
            assert_eq!(a, b);
        }
    }

    #[test]
    fn skip_connection_appends_raw_attributes_only() {
        let mut base = SgnModel::<f32>::new(mnist_like_config()).unwrap();
        let mut skip_cfg = mnist_like_config();
        skip_cfg.skip_connection = true;
        let mut skip = SgnModel::<f32>::new(skip_cfg).unwrap();
        assert_eq!(skip.classifier_width(), base.classifier_width() + 150);
        let batch = Tensor::<f32>::from_vec(
            &[1, 28, 28, 1],
            (0..784).map(|i| ((i * 13 % 89) as f32) / 89.0).collect(),
        )
        .unwrap();
        let (_, bc) = base.forward(&batch, BnMode::Eval).unwrap();
        let (_, sc) = skip.forward(&batch, BnMode::Eval).unwrap();
        let shared = base.classifier_width();
        assert_eq!(&bc.fc_input.data()[..shared], &sc.fc_input.data()[..shared]);
        // the raw segment is the attributes without eigenvalue scaling
        let raw = skip.segment_range(&Segment::SgRaw(0)).unwrap();
        let scaled = skip.segment_range(&Segment::SgScaled(0)).unwrap();
        let geo = &skip.taps[0];
        for i in 0..geo.grid.node_count() {
            for t in 0..geo.patch_size {
                let lam = geo.eigenvalues[i] as f32;
                let raw_v = sc.fc_input.data()[raw.start + i * geo.patch_size + t];
                let scaled_v = sc.fc_input.data()[scaled.start + i * geo.patch_size + t];
                assert!((scaled_v - lam * raw_v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mha_head_extends_width_by_node_count_times_value_dim() {
        let mut cfg = mnist_like_config();
        cfg.mha = Some(MhaConfig { head_count: 2, key_dim: 8, value_dim: 8 });
        let mut model = SgnModel::<f32>::new(cfg).unwrap();
        assert_eq!(model.classifier_width(), 726 + 25 * 8);
        let batch = Tensor::<f32>::from_vec(
            &[1, 28, 28, 1],
            (0..784).map(|i| ((i * 7 % 53) as f32) / 53.0).collect(),
        )
        .unwrap();
        let (logits, cache) = model.forward(&batch, BnMode::Eval).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        assert_eq!(cache.fc_input.dim(1), 726 + 200);
    }

    #[test]
    fn zero_logit_grads_give_zero_param_grads() {
        let mut model = SgnModel::<f32>::new(mnist_like_config()).unwrap();
        let batch = Tensor::<f32>::from_vec(
            &[2, 28, 28, 1],
            (0..2 * 784).map(|i| ((i * 29 % 71) as f32) / 71.0).collect(),
        )
        .unwrap();
        let (logits, cache) = model.forward(&batch, BnMode::Train).unwrap();
        let grads = model
            .backward(&cache, &Tensor::zeros(logits.shape()))
            .unwrap();
        for g in &grads.tensors {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_rejects_eval_cache() {
        let mut model = SgnModel::<f32>::new(mnist_like_config()).unwrap();
        let batch = Tensor::<f32>::zeros(&[1, 28, 28, 1]);
        let (logits, cache) = model.forward(&batch, BnMode::Eval).unwrap();
        assert!(matches!(
            model.backward(&cache, &Tensor::zeros(logits.shape())),
            Err(SgnError::Argument(_))
        ));
    }

    #[test]
    fn save_load_round_trip_reproduces_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut cfg = mnist_like_config();
        cfg.mha = Some(MhaConfig { head_count: 2, key_dim: 8, value_dim: 8 });
        cfg.skip_connection = true;
        let mut model = SgnModel::<f32>::new(cfg).unwrap();
        let batch = Tensor::<f32>::from_vec(
            &[1, 28, 28, 1],
            (0..784).map(|i| ((i * 37 % 101) as f32) / 101.0).collect(),
        )
        .unwrap();
        // nudge running stats away from init so they are exercised too
        let _ = model
            .forward(&batch.reshape(&[1, 28, 28, 1]).unwrap(), BnMode::Eval)
            .unwrap();
        save_model(&model, &path).unwrap();
        let mut loaded = load_model(&path).unwrap();
        let (a, _) = model.forward(&batch, BnMode::Eval).unwrap();
        let (b, _) = loaded.forward(&batch, BnMode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
        // save -> load -> save is byte identical
        let path2 = dir.path().join("model2.bin");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_model_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = SgnModel::<f32>::new(mnist_like_config()).unwrap();
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // truncation
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, SgnError::Format(_)), "{err}");

        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_model(&path).unwrap_err().to_string().contains("magic"));

        // version bump
        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_model(&path)
            .unwrap_err()
            .to_string()
            .contains("unsupported model version"));

        // payload corruption -> checksum mismatch
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0xFF;
        std::fs::write(&path, &bad).unwrap();
        assert!(load_model(&path)
            .unwrap_err()
            .to_string()
            .contains("checksum"));
    }

    fn separable_dataset(n: usize) -> Dataset<f32> {
        let mut data = vec![0.0f32; n * 100];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            labels.push(label);
            for y in 0..10 {
                for x in 0..10 {
                    let bright = if label == 0 { y < 5 } else { y >= 5 };
                    let noise = ((i * 31 + y * 7 + x * 3) % 13) as f32 / 130.0;
                    data[i * 100 + y * 10 + x] = if bright { 0.8 + noise } else { noise };
                }
            }
        }
        Dataset::new(
            Tensor::from_vec(&[n, 10, 10, 1], data).unwrap(),
            labels,
            2,
        )
        .unwrap()
    }

    #[test]
    fn lr_zero_leaves_parameters_unchanged_and_loss_constant() {
        let ds = separable_dataset(16);
        let mut model = SgnModel::<f32>::new(SgnConfig::desk_default(10, 10, 1, 2)).unwrap();
        let before: Vec<Tensor<f32>> = model.parameters().into_iter().cloned().collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.0,
            shuffle: false,
            ..TrainConfig::default()
        };
        let metrics = train_loop(&mut model, &ds, &ds, &cfg, |_| {}).unwrap();
        for (a, b) in before.iter().zip(model.parameters()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(metrics[0].train_loss, metrics[1].train_loss);
    }

    #[test]
    fn training_on_separable_data_strictly_decreases_loss() {
        let ds = separable_dataset(32);
        let mut model = SgnModel::<f32>::new(SgnConfig::desk_default(10, 10, 1, 2)).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let metrics = train_loop(&mut model, &ds, &ds, &cfg, |_| {}).unwrap();
        assert!(metrics[1].train_loss < metrics[0].train_loss);
        assert!(metrics[2].train_loss < metrics[1].train_loss);
    }
}
