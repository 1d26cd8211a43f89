//! Signature-graph construction from a feature map.
//!
//! The map is tiled into equal non-overlapping `patch_size x patch_size`
//! patches (padding bottom/right as needed). Each patch contributes exactly
//! one node, placed at the patch's extremum value; the node attribute is the
//! patch-local row containing the extremum. Nodes are connected by chains
//! running along grid rows (horizontal mode) or grid columns (vertical mode).

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extremum {
    Maxima,
    Minima,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    Horizontal,
    Vertical,
}

/// How a multi-channel map is collapsed to a single channel before node
/// selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelAgg {
    Mean,
    Max,
    Channel(usize),
}

/// Tiling of a map into a patch grid, padding bottom/right to a multiple of
/// the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub map_height: usize,
    pub map_width: usize,
}

impl PatchGrid {
    pub fn node_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

/// Node placement: grid cell plus absolute map coordinates. In maxima mode a
/// padded cell can win (padding reads as 0), so `y`/`x` may lie just outside
/// the map while staying inside the patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeCoord {
    pub grid_row: usize,
    pub grid_col: usize,
    pub y: usize,
    pub x: usize,
}

/// Graph over patch extrema: one node per patch, attribute rows of length
/// `patch_size`, undirected chain edges.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureGraph {
    pub grid: PatchGrid,
    pub nodes: Vec<NodeCoord>,
    /// Flattened n x patch_size attribute rows, node-major.
    pub attributes: Vec<f64>,
    /// Undirected edges as (i, j) with i < j, over row-major node indices.
    pub edges: Vec<(usize, usize)>,
    pub mode: EdgeMode,
    pub extremum: Extremum,
}

impl Eq for SignatureGraph {}

impl Hash for SignatureGraph {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.grid.hash(state);
        self.nodes.hash(state);
        for v in &self.attributes {
            v.to_bits().hash(state);
        }
        self.edges.hash(state);
        self.mode.hash(state);
        self.extremum.hash(state);
    }
}

impl SignatureGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn attribute_row(&self, node: usize) -> &[f64] {
        let ps = self.grid.patch_size;
        &self.attributes[node * ps..(node + 1) * ps]
    }

    /// Text dump: header line, then one line per node and per edge.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "mode={} extremum={} patch={}\n",
            match self.mode {
                EdgeMode::Horizontal => "h",
                EdgeMode::Vertical => "v",
            },
            match self.extremum {
                Extremum::Maxima => "max",
                Extremum::Minima => "min",
            },
            self.grid.patch_size
        );
        for (id, n) in self.nodes.iter().enumerate() {
            out.push_str(&format!(
                "node {} {} {} {} {}\n",
                id, n.grid_row, n.grid_col, n.y, n.x
            ));
        }
        for &(a, b) in &self.edges {
            out.push_str(&format!("edge {} {}\n", a, b));
        }
        out
    }
}

/// Tile `map_height x map_width` into ceil-division patches.
pub fn partition(map_height: usize, map_width: usize, patch_size: usize) -> Result<PatchGrid> {
    if patch_size < 2 {
        return Err(SgnError::Argument(format!(
            "patch_size must be >= 2, got {patch_size} (a 1x1 patch has degenerate attributes)"
        )));
    }
    if map_height == 0 || map_width == 0 {
        return Err(SgnError::Shape("cannot partition an empty map".into()));
    }
    let grid_rows = map_height.div_ceil(patch_size);
    let grid_cols = map_width.div_ceil(patch_size);
    Ok(PatchGrid {
        patch_size,
        grid_rows,
        grid_cols,
        pad_bottom: grid_rows * patch_size - map_height,
        pad_right: grid_cols * patch_size - map_width,
        map_height,
        map_width,
    })
}

/// Per patch, the coordinate of its extremum and the patch-local row through
/// that extremum. Padded cells read as 0 in maxima mode and are never
/// selectable in minima mode; attribute positions past the map are 0.
pub fn select_nodes<F: Real>(
    map: &Tensor<F>,
    grid: &PatchGrid,
    extremum: Extremum,
) -> Result<(Vec<NodeCoord>, Vec<f64>)> {
    if map.rank() != 2 || map.dim(0) != grid.map_height || map.dim(1) != grid.map_width {
        return Err(SgnError::Shape(format!(
            "select_nodes expects a {} x {} single-channel map, got {:?}",
            grid.map_height,
            grid.map_width,
            map.shape()
        )));
    }
    let ps = grid.patch_size;
    let (h, w) = (grid.map_height, grid.map_width);
    let mut nodes = Vec::with_capacity(grid.node_count());
    let mut attrs = vec![0.0f64; grid.node_count() * ps];
    for gr in 0..grid.grid_rows {
        for gc in 0..grid.grid_cols {
            let y0 = gr * ps;
            let x0 = gc * ps;
            let mut best: Option<(f64, usize, usize)> = None;
            for dy in 0..ps {
                for dx in 0..ps {
                    let (y, x) = (y0 + dy, x0 + dx);
                    let inside = y < h && x < w;
                    let value = if inside {
                        map.at(map.i2(y, x)).to_f64()
                    } else if extremum == Extremum::Maxima {
                        0.0
                    } else {
                        continue; // padding is not selectable for minima
                    };
                    let better = match (&best, extremum) {
                        (None, _) => true,
                        (Some((bv, _, _)), Extremum::Maxima) => value > *bv,
                        (Some((bv, _, _)), Extremum::Minima) => value < *bv,
                    };
                    if better {
                        best = Some((value, y, x));
                    }
                }
            }
            // minima mode always sees at least one real cell: the grid never
            // produces a patch fully outside the map
            let (_, y, x) = best.expect("patch contains at least one candidate");
            let node_id = nodes.len();
            nodes.push(NodeCoord {
                grid_row: gr,
                grid_col: gc,
                y,
                x,
            });
            if y < h {
                for dx in 0..ps {
                    if x0 + dx < w {
                        attrs[node_id * ps + dx] = map.at(map.i2(y, x0 + dx)).to_f64();
                    }
                }
            }
        }
    }
    Ok((nodes, attrs))
}

/// Chain edges along grid rows (horizontal) or grid columns (vertical).
/// Chains are mutually disconnected; `link_chains` optionally joins chain
/// ends boustrophedon-style into a single path.
pub fn connect(grid: &PatchGrid, mode: EdgeMode, link_chains: bool) -> Vec<(usize, usize)> {
    let (rows, cols) = (grid.grid_rows, grid.grid_cols);
    let id = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    match mode {
        EdgeMode::Horizontal => {
            for r in 0..rows {
                for c in 0..cols.saturating_sub(1) {
                    edges.push((id(r, c), id(r, c + 1)));
                }
            }
            if link_chains {
                for r in 0..rows.saturating_sub(1) {
                    let c = if r % 2 == 0 { cols - 1 } else { 0 };
                    edges.push((id(r, c), id(r + 1, c)));
                }
            }
        }
        EdgeMode::Vertical => {
            for c in 0..cols {
                for r in 0..rows.saturating_sub(1) {
                    edges.push((id(r, c), id(r + 1, c)));
                }
            }
            if link_chains {
                for c in 0..cols.saturating_sub(1) {
                    let r = if c % 2 == 0 { rows - 1 } else { 0 };
                    edges.push((id(r, c), id(r, c + 1)));
                }
            }
        }
    }
    for e in &mut edges {
        if e.0 > e.1 {
            *e = (e.1, e.0);
        }
    }
    edges
}

/// Collapse an h x w x c map to h x w.
pub fn aggregate_channels<F: Real>(map: &Tensor<F>, agg: ChannelAgg) -> Result<Tensor<f64>> {
    if map.rank() == 2 {
        return Ok(map.cast());
    }
    if map.rank() != 3 {
        return Err(SgnError::Shape(format!(
            "aggregate_channels expects h x w (x c), got {:?}",
            map.shape()
        )));
    }
    let (h, w, c) = (map.dim(0), map.dim(1), map.dim(2));
    let mut out = Tensor::zeros(&[h, w]);
    let src = map.data();
    let dst = out.data_mut();
    match agg {
        ChannelAgg::Mean => {
            for p in 0..h * w {
                let mut acc = 0.0f64;
                for k in 0..c {
                    acc += src[p * c + k].to_f64();
                }
                dst[p] = acc / c as f64;
            }
        }
        ChannelAgg::Max => {
            for p in 0..h * w {
                dst[p] = (0..c)
                    .map(|k| src[p * c + k].to_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        ChannelAgg::Channel(k) => {
            if k >= c {
                return Err(SgnError::Argument(format!(
                    "channel {k} out of range for {c}-channel map"
                )));
            }
            for p in 0..h * w {
                dst[p] = src[p * c + k].to_f64();
            }
        }
    }
    Ok(out)
}

/// Full pipeline on a single-channel map: partition, select nodes, connect.
pub fn build_signature_graph<F: Real>(
    map: &Tensor<F>,
    patch_size: usize,
    extremum: Extremum,
    mode: EdgeMode,
    link_chains: bool,
) -> Result<SignatureGraph> {
    let grid = partition(map.dim(0), map.dim(1), patch_size)?;
    let (nodes, attributes) = select_nodes(map, &grid, extremum)?;
    let edges = connect(&grid, mode, link_chains);
    Ok(SignatureGraph {
        grid,
        nodes,
        attributes,
        edges,
        mode,
        extremum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map2(h: usize, w: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[h, w], v).unwrap()
    }

    #[test]
    fn partition_28_by_6_pads_bottom_right() {
        let g = partition(28, 28, 6).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (5, 5));
        assert_eq!((g.pad_bottom, g.pad_right), (2, 2));
    }

    #[test]
    fn partition_96_by_6_is_exact() {
        let g = partition(96, 96, 6).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (16, 16));
        assert_eq!((g.pad_bottom, g.pad_right), (0, 0));
    }

    #[test]
    fn partition_96_by_10_pads_to_100() {
        let g = partition(96, 96, 10).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (10, 10));
        assert_eq!((g.pad_bottom, g.pad_right), (4, 4));
    }

    #[test]
    fn tiny_patch_size_rejected() {
        assert!(matches!(partition(10, 10, 1), Err(SgnError::Argument(_))));
    }

    #[test]
    fn constant_patch_ties_to_local_origin() {
        let g = partition(2, 2, 2).unwrap();
        let (nodes, _) = select_nodes(&map2(2, 2, vec![5.0; 4]), &g, Extremum::Maxima).unwrap();
        assert_eq!((nodes[0].y, nodes[0].x), (0, 0));
    }

    #[test]
    fn maxima_node_and_attribute_row() {
        let g = partition(2, 2, 2).unwrap();
        let (nodes, attrs) =
            select_nodes(&map2(2, 2, vec![1.0, 9.0, 3.0, 4.0]), &g, Extremum::Maxima).unwrap();
        assert_eq!((nodes[0].y, nodes[0].x), (0, 1));
        assert_eq!(&attrs[..2], &[1.0, 9.0]);
    }

    #[test]
    fn minima_node_keeps_extremum_row() {
        let g = partition(2, 2, 2).unwrap();
        let (nodes, attrs) =
            select_nodes(&map2(2, 2, vec![1.0, 9.0, 3.0, 4.0]), &g, Extremum::Minima).unwrap();
        assert_eq!((nodes[0].y, nodes[0].x), (0, 0));
        assert_eq!(&attrs[..2], &[1.0, 9.0]);
    }

    #[test]
    fn minima_never_selects_padding() {
        // 2x3 map, patch 2: right patch has a padded column reading 0 in
        // maxima mode only; all real values are positive
        let m = map2(2, 3, vec![5.0, 6.0, 7.0, 8.0, 9.0, 4.0]);
        let g = partition(2, 3, 2).unwrap();
        let (nodes, _) = select_nodes(&m, &g, Extremum::Minima).unwrap();
        // right patch columns: col 2 only; min over {7.0, 4.0} = 4.0 at (1,2)
        assert_eq!((nodes[1].y, nodes[1].x), (1, 2));
    }

    #[test]
    fn maxima_padding_reads_zero() {
        // all real values negative, so the padded cell (reading 0) wins
        let m = map2(2, 3, vec![-5.0, -6.0, -7.0, -8.0, -9.0, -4.0]);
        let g = partition(2, 3, 2).unwrap();
        let (nodes, attrs) = select_nodes(&m, &g, Extremum::Maxima).unwrap();
        assert_eq!((nodes[1].y, nodes[1].x), (0, 3)); // first padded cell of the patch
        // attribute row: position 0 is the real cell, position 1 past the map
        assert_eq!(&attrs[2..4], &[-7.0, 0.0]);
    }

    #[test]
    fn horizontal_2x3_has_four_edges_two_chains() {
        let g = partition(4, 6, 2).unwrap();
        let edges = connect(&g, EdgeMode::Horizontal, false);
        assert_eq!(edges.len(), 4);
        assert_eq!(edges, vec![(0, 1), (1, 2), (3, 4), (4, 5)]);
    }

    #[test]
    fn vertical_2x3_has_three_edges() {
        let g = partition(4, 6, 2).unwrap();
        let edges = connect(&g, EdgeMode::Vertical, false);
        assert_eq!(edges.len(), 3);
        assert_eq!(edges, vec![(0, 3), (1, 4), (2, 5)]);
    }

    #[test]
    fn singleton_grid_has_no_edges() {
        let g = partition(2, 2, 2).unwrap();
        assert!(connect(&g, EdgeMode::Horizontal, false).is_empty());
    }

    #[test]
    fn linked_chains_form_one_path() {
        let g = partition(6, 6, 2).unwrap();
        let edges = connect(&g, EdgeMode::Horizontal, true);
        // 3x3 grid: 6 chain edges + 2 links = 8 = n - 1
        assert_eq!(edges.len(), 8);
    }

    #[test]
    fn aggregate_single_channel_is_identity() {
        let m = Tensor::<f64>::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = aggregate_channels(&m, ChannelAgg::Mean).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn aggregate_mean_of_two_channels() {
        let m = Tensor::<f64>::from_vec(&[1, 1, 2], vec![2.0, 4.0]).unwrap();
        let a = aggregate_channels(&m, ChannelAgg::Mean).unwrap();
        assert_eq!(a.data(), &[3.0]);
    }

    #[test]
    fn aggregate_channel_pick_and_max() {
        let m = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 5.0, -2.0, 0.5]).unwrap();
        assert_eq!(
            aggregate_channels(&m, ChannelAgg::Channel(1)).unwrap().data(),
            &[5.0, 0.5]
        );
        assert_eq!(
            aggregate_channels(&m, ChannelAgg::Max).unwrap().data(),
            &[5.0, 0.5]
        );
    }

    #[test]
    fn twelve_by_twelve_patch_six() {
        let m = Tensor::<f64>::zeros(&[12, 12]);
        let g = build_signature_graph(&m, 6, Extremum::Maxima, EdgeMode::Horizontal, false)
            .unwrap();
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn construction_is_deterministic_and_hashable() {
        use std::collections::HashSet;
        let m = map2(4, 4, (0..16).map(|i| ((i * 7) % 5) as f64).collect());
        let a = build_signature_graph(&m, 2, Extremum::Maxima, EdgeMode::Vertical, false).unwrap();
        let b = build_signature_graph(&m, 2, Extremum::Maxima, EdgeMode::Vertical, false).unwrap();
        assert_eq!(a, b);
        let mut set = HashSet::new();
        set.insert(a);
        assert!(set.contains(&b));
    }

    #[test]
    fn constant_shift_preserves_structure() {
        let m = map2(6, 6, (0..36).map(|i| ((i * 13) % 17) as f64).collect());
        let shifted = m.map(|v| v + 100.0);
        let a = build_signature_graph(&m, 3, Extremum::Maxima, EdgeMode::Horizontal, false)
            .unwrap();
        let b = build_signature_graph(&shifted, 3, Extremum::Maxima, EdgeMode::Horizontal, false)
            .unwrap();
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.edges, b.edges);
        for (x, y) in a.attributes.iter().zip(&b.attributes) {
            assert!((y - x - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dump_format() {
        let m = map2(2, 4, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        let g = build_signature_graph(&m, 2, Extremum::Maxima, EdgeMode::Horizontal, false)
            .unwrap();
        let dump = g.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "mode=h extremum=max patch=2");
        assert_eq!(lines[1], "node 0 0 0 0 1");
        assert_eq!(lines[2], "node 1 0 1 1 3");
        assert_eq!(lines[3], "edge 0 1");
    }
}
