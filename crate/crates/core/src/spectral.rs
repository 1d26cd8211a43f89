//! Spectral machinery for signature graphs: degree/adjacency/incidence
//! matrices, the combinatorial and normalized (Kirchhoff) Laplacians, a cyclic
//! Jacobi eigensolver, and eigenvalue scaling of node attributes.

use crate::sggraph::SignatureGraph;
use crate::{Result, SgnError};

/// Dense row-major f64 matrix. Small and local on purpose: graphs here stay
/// at or below 16 x 16 grids (256 nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline(always)]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.at(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for t in 0..self.cols {
                let a = self.at(r, t);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * out.cols + c] += a * other.at(t, c);
                }
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaplacianKind {
    Combinatorial,
    Normalized,
}

/// Eigendecomposition of a graph Laplacian: ascending eigenvalues, orthonormal
/// eigenvector columns.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub laplacian: Matrix,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

pub fn node_degrees(graph: &SignatureGraph) -> Vec<usize> {
    let mut deg = vec![0usize; graph.node_count()];
    for &(a, b) in &graph.edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    deg
}

/// Diagonal matrix of incident-edge counts.
pub fn degree_matrix(graph: &SignatureGraph) -> Matrix {
    let deg = node_degrees(graph);
    let n = graph.node_count();
    let mut d = Matrix::zeros(n, n);
    for (i, &k) in deg.iter().enumerate() {
        d.set(i, i, k as f64);
    }
    d
}

/// Boolean symmetric adjacency with zero diagonal.
pub fn adjacency_matrix(graph: &SignatureGraph) -> Matrix {
    let n = graph.node_count();
    let mut a = Matrix::zeros(n, n);
    for &(i, j) in &graph.edges {
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    a
}

/// Edge-by-node incidence with the canonical orientation i < j: +1 at i,
/// -1 at j. Satisfies M^T M = D - A.
pub fn incidence_matrix(graph: &SignatureGraph) -> Matrix {
    let mut m = Matrix::zeros(graph.edges.len(), graph.node_count());
    for (e, &(i, j)) in graph.edges.iter().enumerate() {
        debug_assert!(i < j, "edges must be canonically oriented");
        m.set(e, i, 1.0);
        m.set(e, j, -1.0);
    }
    m
}

/// Graph Laplacian. Combinatorial: D - A. Normalized (Kirchhoff): unit
/// diagonal for nodes of nonzero degree, -1/sqrt(d_i d_j) for adjacent pairs,
/// zero elsewhere (isolated nodes get a zero diagonal).
pub fn laplacian(graph: &SignatureGraph, kind: LaplacianKind) -> Matrix {
    let n = graph.node_count();
    let deg = node_degrees(graph);
    let mut l = Matrix::zeros(n, n);
    match kind {
        LaplacianKind::Combinatorial => {
            for i in 0..n {
                l.set(i, i, deg[i] as f64);
            }
            for &(i, j) in &graph.edges {
                l.set(i, j, -1.0);
                l.set(j, i, -1.0);
            }
        }
        LaplacianKind::Normalized => {
            for i in 0..n {
                if deg[i] != 0 {
                    l.set(i, i, 1.0);
                }
            }
            for &(i, j) in &graph.edges {
                let v = -1.0 / ((deg[i] * deg[j]) as f64).sqrt();
                l.set(i, j, v);
                l.set(j, i, v);
            }
        }
    }
    l
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Converges when the off-diagonal Frobenius norm drops below 1e-12 times the
/// Frobenius norm of the input; errors out after 100 sweeps. Eigenpairs come
/// back sorted ascending with each eigenvector's first nonzero component made
/// positive so serialized decompositions are reproducible.
pub fn eigendecompose(l: &Matrix) -> Result<SpectralDecomposition> {
    let n = l.rows;
    if l.cols != n {
        return Err(SgnError::Argument("eigendecompose needs a square matrix".into()));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (l.at(i, j) - l.at(j, i)).abs() > 1e-10 {
                return Err(SgnError::Argument(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    l.at(i, j),
                    l.at(j, i)
                )));
            }
        }
    }

    let mut a = l.clone();
    let mut v = Matrix::identity(n);
    let norm = l.frobenius();
    let tol = 1e-12 * norm;

    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.at(i, j) * a.at(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut converged = norm == 0.0 || off(&a) <= tol;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= 100 {
            return Err(SgnError::Numeric(format!(
                "jacobi eigensolver did not converge after {sweeps} sweeps (off-norm {})",
                off(&a)
            )));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.at(p, q);
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        sweeps += 1;
        converged = off(&a) <= tol;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.at(i, i).partial_cmp(&a.at(j, j)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.at(i, i)).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let sign = (0..n)
            .map(|k| v.at(k, src))
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, f64::signum);
        for k in 0..n {
            eigenvectors.set(k, dst, sign * v.at(k, src));
        }
    }
    Ok(SpectralDecomposition {
        laplacian: l.clone(),
        eigenvalues,
        eigenvectors,
    })
}

/// Spectral decomposition of a graph's normalized Laplacian.
pub fn decompose_graph(graph: &SignatureGraph) -> Result<SpectralDecomposition> {
    eigendecompose(&laplacian(graph, LaplacianKind::Normalized))
}

/// Scale node attribute rows by eigenvalues: row i of the output is
/// (lambda_i + offset) * x_i, pairing ascending eigenvalues with row-major
/// node construction order. Returns a flattened n x patch_size buffer.
pub fn scale_embeddings(
    graph: &SignatureGraph,
    dec: &SpectralDecomposition,
    eig_offset: f64,
) -> Result<Vec<f64>> {
    let n = graph.node_count();
    if dec.eigenvalues.len() != n {
        return Err(SgnError::Shape(format!(
            "decomposition size {} != node count {n}",
            dec.eigenvalues.len()
        )));
    }
    let ps = graph.grid.patch_size;
    let mut out = vec![0.0f64; n * ps];
    for i in 0..n {
        let lam = dec.eigenvalues[i] + eig_offset;
        for t in 0..ps {
            out[i * ps + t] = lam * graph.attributes[i * ps + t];
        }
    }
    Ok(out)
}

/// Row-major flatten of a scaled embedding matrix; node order is construction
/// order, so this is already the signature vector.
pub fn flatten_signature_vector(scaled: Vec<f64>) -> Vec<f64> {
    scaled
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sggraph::{build_signature_graph, EdgeMode, Extremum};
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;

    /// Path graph 0-1-...-(n-1) wrapped in a SignatureGraph shell.
    fn path_graph(n: usize) -> SignatureGraph {
        let m = Tensor::<f64>::zeros(&[2, 2 * n]);
        build_signature_graph(&m, 2, Extremum::Maxima, EdgeMode::Horizontal, false).unwrap()
    }

    fn isolated_graph(n: usize) -> SignatureGraph {
        let m = Tensor::<f64>::zeros(&[2 * n, 2]);
        build_signature_graph(&m, 2, Extremum::Maxima, EdgeMode::Horizontal, false).unwrap()
    }

    #[test]
    fn degree_of_path_three() {
        let d = degree_matrix(&path_graph(3));
        assert_eq!(d.data, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn degree_of_isolated_node() {
        let d = degree_matrix(&isolated_graph(1));
        assert_eq!(d.data, vec![0.0]);
    }

    #[test]
    fn degrees_of_2x3_horizontal_grid() {
        let m = Tensor::<f64>::zeros(&[4, 6]);
        let g = build_signature_graph(&m, 2, Extremum::Maxima, EdgeMode::Horizontal, false)
            .unwrap();
        let deg = node_degrees(&g);
        assert_eq!(deg, vec![1, 2, 1, 1, 2, 1]);
    }

    #[test]
    fn adjacency_edgeless_and_single_edge() {
        let a0 = adjacency_matrix(&isolated_graph(2));
        assert!(a0.data.iter().all(|&v| v == 0.0));
        let a1 = adjacency_matrix(&path_graph(2));
        assert_eq!(a1.data, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn incidence_single_edge_and_path() {
        let m1 = incidence_matrix(&path_graph(2));
        assert_eq!(m1.data, vec![1.0, -1.0]);
        let m2 = incidence_matrix(&path_graph(3));
        assert_eq!(m2.data, vec![1.0, -1.0, 0.0, 0.0, 1.0, -1.0]);
    }

    #[test]
    fn incidence_identity_on_random_grids() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let rows = rng.random_range(1..6usize);
            let cols = rng.random_range(1..6usize);
            let mode = if rng.random_range(0..2) == 0 {
                EdgeMode::Horizontal
            } else {
                EdgeMode::Vertical
            };
            let m = Tensor::<f64>::zeros(&[rows * 2, cols * 2]);
            let g = build_signature_graph(&m, 2, Extremum::Maxima, mode, false).unwrap();
            let mt_m = incidence_matrix(&g).transpose().matmul(&incidence_matrix(&g));
            let mut d_minus_a = laplacian(&g, LaplacianKind::Combinatorial);
            for i in 0..mt_m.data.len() {
                // exact: entries are small integers
                assert_eq!(mt_m.data[i], d_minus_a.data[i]);
            }
            // also symmetric
            d_minus_a.data = d_minus_a.transpose().data;
            assert_eq!(d_minus_a, laplacian(&g, LaplacianKind::Combinatorial));
        }
    }

    #[test]
    fn combinatorial_laplacian_of_path_three() {
        let l = laplacian(&path_graph(3), LaplacianKind::Combinatorial);
        assert_eq!(
            l.data,
            vec![1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]
        );
    }

    #[test]
    fn normalized_laplacian_off_diagonal() {
        let l = laplacian(&path_graph(3), LaplacianKind::Normalized);
        let expect = -1.0 / 2.0f64.sqrt();
        assert!((l.at(0, 1) - expect).abs() < 1e-15);
        assert!((l.at(1, 2) - expect).abs() < 1e-15);
        assert_eq!(l.at(0, 0), 1.0);
    }

    #[test]
    fn normalized_laplacian_isolated_node_is_zero() {
        let l = laplacian(&isolated_graph(1), LaplacianKind::Normalized);
        assert_eq!(l.data, vec![0.0]);
    }

    #[test]
    fn eigendecompose_diagonal_matrix() {
        let mut l = Matrix::zeros(3, 3);
        l.set(1, 1, 1.0);
        l.set(2, 2, 2.0);
        let dec = eigendecompose(&l).unwrap();
        assert_eq!(dec.eigenvalues, vec![0.0, 1.0, 2.0]);
        assert_eq!(dec.eigenvectors.data, Matrix::identity(3).data);
    }

    #[test]
    fn path_three_normalized_spectrum_is_0_1_2() {
        let dec = decompose_graph(&path_graph(3)).unwrap();
        let expect = [0.0, 1.0, 2.0];
        for (got, want) in dec.eigenvalues.iter().zip(expect) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn rayleigh_identity_on_random_symmetric() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let n = 8;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-1.0..1.0);
                l.set(i, j, v);
                l.set(j, i, v);
            }
        }
        let dec = eigendecompose(&l).unwrap();
        for (i, &lam) in dec.eigenvalues.iter().enumerate() {
            let u: Vec<f64> = (0..n).map(|k| dec.eigenvectors.at(k, i)).collect();
            let lu: Vec<f64> = (0..n)
                .map(|r| (0..n).map(|c| l.at(r, c) * u[c]).sum())
                .collect();
            let rayleigh: f64 = u.iter().zip(&lu).map(|(a, b)| a * b).sum();
            assert!((rayleigh - lam).abs() < 1e-9);
            // eigen-equation residual
            for k in 0..n {
                assert!((lu[k] - lam * u[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn non_symmetric_input_rejected() {
        let mut l = Matrix::zeros(2, 2);
        l.set(0, 1, 1.0);
        assert!(matches!(eigendecompose(&l), Err(SgnError::Argument(_))));
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        let n = 6;
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-2.0..2.0);
                l.set(i, j, v);
                l.set(j, i, v);
            }
        }
        let dec = eigendecompose(&l).unwrap();
        let u = &dec.eigenvectors;
        // U^T U = I
        let utu = u.transpose().matmul(u);
        assert!(utu.max_abs_diff(&Matrix::identity(n)) < 1e-8);
        // U diag(lambda) U^T = L
        let mut ulam = u.clone();
        for r in 0..n {
            for c in 0..n {
                ulam.set(r, c, u.at(r, c) * dec.eigenvalues[c]);
            }
        }
        let rec = ulam.matmul(&u.transpose());
        assert!(rec.max_abs_diff(&l) < 1e-8);
    }

    #[test]
    fn zero_eigenvalue_count_matches_components() {
        for (rows, cols) in [(3usize, 4usize), (1, 1), (4, 1), (2, 5)] {
            let m = Tensor::<f64>::zeros(&[rows * 2, cols * 2]);
            let g = build_signature_graph(&m, 2, Extremum::Maxima, EdgeMode::Horizontal, false)
                .unwrap();
            let dec = decompose_graph(&g).unwrap();
            let zeros = dec.eigenvalues.iter().filter(|v| v.abs() < 1e-9).count();
            assert_eq!(zeros, rows, "horizontal {rows}x{cols} grid");
            for &lam in &dec.eigenvalues {
                assert!(lam > -1e-9 && lam < 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn combinatorial_laplacian_rows_sum_to_zero_and_psd() {
        let m = Tensor::<f64>::zeros(&[6, 8]);
        let g = build_signature_graph(&m, 2, Extremum::Maxima, EdgeMode::Vertical, false).unwrap();
        let l = laplacian(&g, LaplacianKind::Combinatorial);
        for r in 0..l.rows {
            let s: f64 = (0..l.cols).map(|c| l.at(r, c)).sum();
            assert_eq!(s, 0.0);
        }
        let dec = eigendecompose(&l).unwrap();
        assert!(dec.eigenvalues[0] > -1e-9);
    }

    #[test]
    fn scaling_isolated_node_zeroes_its_row() {
        let g = isolated_graph(1);
        let dec = decompose_graph(&g).unwrap();
        let scaled = scale_embeddings(&g, &dec, 0.0).unwrap();
        assert!(scaled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn path_three_scaling_multiplies_rows_by_0_1_2() {
        // build from a map with distinct attribute rows
        let mut vals = vec![0.0f64; 2 * 6];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = (i % 7) as f64 + 1.0;
        }
        let m = Tensor::from_vec(&[2, 6], vals).unwrap();
        let g = build_signature_graph(&m, 2, Extremum::Maxima, EdgeMode::Horizontal, false)
            .unwrap();
        let dec = decompose_graph(&g).unwrap();
        let scaled = scale_embeddings(&g, &dec, 0.0).unwrap();
        for i in 0..3 {
            for t in 0..2 {
                let want = dec.eigenvalues[i] * g.attributes[i * 2 + t];
                assert!((scaled[i * 2 + t] - want).abs() < 1e-12);
            }
        }
        // lowest eigenvalue is 0: first row scales to zero
        assert!(scaled[0].abs() < 1e-12 && scaled[1].abs() < 1e-12);
    }

    #[test]
    fn flatten_is_row_major() {
        assert_eq!(
            flatten_signature_vector(vec![1.0, 2.0, 3.0, 4.0]),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }
}
