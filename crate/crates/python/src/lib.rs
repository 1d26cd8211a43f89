//! Python bindings: signature-graph construction, spectral embeddings, and
//! the full model (train/eval/embed/save/load).

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use sgn_core::data::load_idx_dataset;
use sgn_core::model::{
    evaluate, load_model, save_model, train_loop, MhaConfig, SgnConfig, SgnModel, TrainConfig,
};
use sgn_core::nn::BnMode;
use sgn_core::sggraph::{self, ChannelAgg, EdgeMode, Extremum};
use sgn_core::spectral::{decompose_graph, laplacian, node_degrees, LaplacianKind};
use sgn_core::tensor::Tensor;
use sgn_core::SgnError;

fn to_py_err(e: SgnError) -> PyErr {
    match e {
        SgnError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<EdgeMode> {
    match mode {
        "horizontal" | "h" => Ok(EdgeMode::Horizontal),
        "vertical" | "v" => Ok(EdgeMode::Vertical),
        _ => Err(PyValueError::new_err(format!(
            "mode must be 'horizontal' or 'vertical', got '{mode}'"
        ))),
    }
}

fn parse_extremum(extremum: &str) -> PyResult<Extremum> {
    match extremum {
        "max" | "maxima" => Ok(Extremum::Maxima),
        "min" | "minima" => Ok(Extremum::Minima),
        _ => Err(PyValueError::new_err(format!(
            "extremum must be 'max' or 'min', got '{extremum}'"
        ))),
    }
}

fn rows_to_tensor(map: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    let h = map.len();
    let w = map.first().map_or(0, |r| r.len());
    if h == 0 || w == 0 || map.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("map must be a non-empty rectangular 2-d list"));
    }
    Tensor::from_vec(&[h, w], map.into_iter().flatten().collect()).map_err(to_py_err)
}

/// A signature graph built from a 2-d feature map.
#[pyclass(name = "SignatureGraph")]
struct PyGraph {
    inner: sggraph::SignatureGraph,
}

#[pymethods]
impl PyGraph {
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    /// (grid_row, grid_col, y, x) per node, in construction order.
    fn nodes(&self) -> Vec<(usize, usize, usize, usize)> {
        self.inner
            .nodes
            .iter()
            .map(|n| (n.grid_row, n.grid_col, n.y, n.x))
            .collect()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges.clone()
    }

    fn attributes(&self) -> Vec<Vec<f64>> {
        (0..self.inner.node_count())
            .map(|i| self.inner.attribute_row(i).to_vec())
            .collect()
    }

    fn degrees(&self) -> Vec<usize> {
        node_degrees(&self.inner)
    }

    /// Eigenvalues of the normalized Laplacian, ascending.
    fn eigenvalues(&self) -> PyResult<Vec<f64>> {
        Ok(decompose_graph(&self.inner).map_err(to_py_err)?.eigenvalues)
    }

    /// Dense Laplacian matrix ("normalized" or "combinatorial").
    #[pyo3(signature = (kind = "normalized"))]
    fn laplacian(&self, kind: &str) -> PyResult<Vec<Vec<f64>>> {
        let k = match kind {
            "normalized" => LaplacianKind::Normalized,
            "combinatorial" => LaplacianKind::Combinatorial,
            _ => {
                return Err(PyValueError::new_err(
                    "kind must be 'normalized' or 'combinatorial'",
                ))
            }
        };
        let m = laplacian(&self.inner, k);
        Ok((0..m.rows)
            .map(|r| m.data[r * m.cols..(r + 1) * m.cols].to_vec())
            .collect())
    }

    /// Eigenvalue-scaled attributes flattened into one vector.
    #[pyo3(signature = (eig_offset = 0.0))]
    fn signature_vector(&self, eig_offset: f64) -> PyResult<Vec<f64>> {
        let dec = decompose_graph(&self.inner).map_err(to_py_err)?;
        sgn_core::spectral::scale_embeddings(&self.inner, &dec, eig_offset).map_err(to_py_err)
    }

    fn dump(&self) -> String {
        self.inner.dump()
    }

    fn __repr__(&self) -> String {
        format!(
            "SignatureGraph(nodes={}, edges={}, grid={}x{})",
            self.inner.node_count(),
            self.inner.edges.len(),
            self.inner.grid.grid_rows,
            self.inner.grid.grid_cols
        )
    }
}

/// Build a signature graph from a 2-d map (list of equal-length rows).
#[pyfunction]
#[pyo3(signature = (map, patch_size, extremum = "max", mode = "horizontal", link_chains = false))]
fn build_graph(
    map: Vec<Vec<f64>>,
    patch_size: usize,
    extremum: &str,
    mode: &str,
    link_chains: bool,
) -> PyResult<PyGraph> {
    let tensor = rows_to_tensor(map)?;
    let inner = sggraph::build_signature_graph(
        &tensor,
        patch_size,
        parse_extremum(extremum)?,
        parse_mode(mode)?,
        link_chains,
    )
    .map_err(to_py_err)?;
    Ok(PyGraph { inner })
}

/// The full network.
#[pyclass(name = "SgnModel")]
struct PyModel {
    inner: SgnModel<f32>,
}

impl PyModel {
    fn image_batch(&self, image: Vec<Vec<f64>>) -> PyResult<Tensor<f32>> {
        let t = rows_to_tensor(image)?;
        let cfg = &self.inner.config;
        if cfg.input_channels != 1 || t.dim(0) != cfg.input_height || t.dim(1) != cfg.input_width {
            return Err(PyValueError::new_err(format!(
                "image must be {} x {} (single channel), got {} x {}",
                cfg.input_height,
                cfg.input_width,
                t.dim(0),
                t.dim(1)
            )));
        }
        t.cast::<f32>()
            .reshape(&[1, t.dim(0), t.dim(1), 1])
            .map_err(to_py_err)
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        height,
        width,
        channels,
        classes,
        seed = 0,
        patch_size = 6,
        mode = "horizontal",
        extremum = "max",
        sg_layers = vec![1],
        skip_connection = false,
        mha_heads = 0,
        mha_key_dim = 16,
        mha_value_dim = 16,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        height: usize,
        width: usize,
        channels: usize,
        classes: usize,
        seed: u64,
        patch_size: usize,
        mode: &str,
        extremum: &str,
        sg_layers: Vec<usize>,
        skip_connection: bool,
        mha_heads: usize,
        mha_key_dim: usize,
        mha_value_dim: usize,
    ) -> PyResult<Self> {
        let mut cfg = SgnConfig::desk_default(height, width, channels, classes);
        cfg.seed = seed;
        cfg.patch_size = patch_size;
        cfg.mode = parse_mode(mode)?;
        cfg.extremum = parse_extremum(extremum)?;
        cfg.sg_layers = sg_layers;
        cfg.skip_connection = skip_connection;
        cfg.channel_agg = ChannelAgg::Mean;
        if mha_heads > 0 {
            cfg.mha = Some(MhaConfig {
                head_count: mha_heads,
                key_dim: mha_key_dim,
                value_dim: mha_value_dim,
            });
        }
        let inner = SgnModel::new(cfg).map_err(to_py_err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(std::path::Path::new(path)).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.inner, std::path::Path::new(path)).map_err(to_py_err)
    }

    fn classifier_width(&self) -> usize {
        self.inner.classifier_width()
    }

    fn class_count(&self) -> usize {
        self.inner.config.class_count
    }

    /// Augmented feature vector (classifier input) for one grayscale image.
    fn embed(&mut self, image: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let batch = self.image_batch(image)?;
        let (_, cache) = self.inner.forward(&batch, BnMode::Eval).map_err(to_py_err)?;
        Ok(cache.fc_input.data().iter().map(|v| *v as f64).collect())
    }

    /// Predicted class index for one grayscale image.
    fn predict(&mut self, image: Vec<Vec<f64>>) -> PyResult<usize> {
        let batch = self.image_batch(image)?;
        let (logits, _) = self.inner.forward(&batch, BnMode::Eval).map_err(to_py_err)?;
        Ok(logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap())
    }

    /// Train on an IDX dataset directory; returns one
    /// (epoch, train_loss, test_acc) tuple per epoch.
    #[pyo3(signature = (
        data_dir,
        epochs = 1,
        limit_train = None,
        limit_test = None,
        lr = 0.01,
        batch_size = 64,
        seed = 0,
        threads = 1,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train_idx(
        &mut self,
        data_dir: &str,
        epochs: usize,
        limit_train: Option<usize>,
        limit_test: Option<usize>,
        lr: f64,
        batch_size: usize,
        seed: u64,
        threads: usize,
    ) -> PyResult<Vec<(usize, f64, f64)>> {
        let dir = std::path::Path::new(data_dir);
        let mut train = load_idx_dataset::<f32>(dir, "train").map_err(to_py_err)?;
        let mut test = load_idx_dataset::<f32>(dir, "t10k").map_err(to_py_err)?;
        if let Some(n) = limit_train {
            train = train.limit(n).map_err(to_py_err)?;
        }
        if let Some(m) = limit_test {
            test = test.limit(m).map_err(to_py_err)?;
        }
        let classes = self.inner.config.class_count;
        train.class_count = classes.max(train.class_count);
        test.class_count = classes.max(test.class_count);
        let cfg = TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
            threads,
            ..TrainConfig::default()
        };
        let metrics = train_loop(&mut self.inner, &train, &test, &cfg, |_| {}).map_err(to_py_err)?;
        Ok(metrics
            .into_iter()
            .map(|m| (m.epoch, m.train_loss, m.test_acc))
            .collect())
    }

    /// Eval-mode accuracy on the t10k split of an IDX dataset directory.
    #[pyo3(signature = (data_dir, limit = None))]
    fn eval_idx(&mut self, data_dir: &str, limit: Option<usize>) -> PyResult<f64> {
        let dir = std::path::Path::new(data_dir);
        let mut test = load_idx_dataset::<f32>(dir, "t10k").map_err(to_py_err)?;
        if let Some(m) = limit {
            test = test.limit(m).map_err(to_py_err)?;
        }
        test.class_count = test.class_count.max(self.inner.config.class_count);
        evaluate(&mut self.inner, &test, 256).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "SgnModel(input={}x{}x{}, classes={}, width={})",
            self.inner.config.input_height,
            self.inner.config.input_width,
            self.inner.config.input_channels,
            self.inner.config.class_count,
            self.inner.classifier_width()
        )
    }
}

#[pymodule]
fn sgn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
