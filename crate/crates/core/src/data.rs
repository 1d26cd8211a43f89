//! Dataset ingestion: IDX image/label files, the raw-tensor import format,
//! batching and normalization.
//!
//! IDX files are big-endian regardless of host endianness. Image files carry
//! magic 2051 (0x00000803), label files 2049 (0x00000801). Files ending in
//! `.gz` are decompressed transparently.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};
use crate::{Result, SgnError};

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;

/// Magic of the little-endian raw-tensor import format.
pub const RAW_TENSOR_MAGIC: &[u8; 4] = b"SGT1";

/// Labeled image collection. Pixels are stored in `[0, 1]` unless
/// standardization has been applied.
#[derive(Debug, Clone)]
pub struct Dataset<F: Real> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl<F: Real> Dataset<F> {
    pub fn new(images: Tensor<F>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(SgnError::Shape(format!(
                "dataset images must be count x h x w x c, got rank {}",
                images.rank()
            )));
        }
        if images.dim(0) != labels.len() {
            return Err(SgnError::Shape(format!(
                "image count {} != label count {}",
                images.dim(0),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(SgnError::Format(format!(
                "label {} out of range for {} classes",
                bad, class_count
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn count(&self) -> usize {
        self.images.dim(0)
    }

    /// Image dimensions as (height, width, channels).
    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.images.dim(1), self.images.dim(2), self.images.dim(3))
    }

    /// Keep only the first `n` rows. Deterministic subset selection for fast
    /// runs; a no-op when `n >= count`.
    pub fn limit(&self, n: usize) -> Result<Self> {
        let keep = n.min(self.count());
        let row = self.images.len() / self.count().max(1);
        let mut shape = self.images.shape().to_vec();
        shape[0] = keep;
        let images = Tensor::from_vec(&shape, self.images.data()[..keep * row].to_vec())?;
        Dataset::new(images, self.labels[..keep].to_vec(), self.class_count)
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (_, _, c) = self.image_dims();
        let n = self.images.len() / c;
        let mut mean = vec![0.0f64; c];
        for (i, v) in self.images.data().iter().enumerate() {
            mean[i % c] += v.to_f64();
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; c];
        for (i, v) in self.images.data().iter().enumerate() {
            let d = v.to_f64() - mean[i % c];
            var[i % c] += d * d;
        }
        let std = var
            .into_iter()
            .map(|v| (v / n as f64).max(1e-12).sqrt())
            .collect();
        (mean, std)
    }

    /// In-place per-channel standardization with the given statistics
    /// (typically from the training split).
    pub fn apply_standardization(&mut self, mean: &[f64], std: &[f64]) {
        let (_, _, c) = self.image_dims();
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            *v = F::from_f64((v.to_f64() - mean[i % c]) / std[i % c]);
        }
    }

    /// Standardize in place using this dataset's own statistics; returns them.
    pub fn standardize(&mut self) -> (Vec<f64>, Vec<f64>) {
        let (mean, std) = self.channel_stats();
        self.apply_standardization(&mean, &std);
        (mean, std)
    }
}

/// One minibatch; `indices` point back into the parent dataset.
#[derive(Debug, Clone)]
pub struct Batch<F: Real> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

fn read_u32_be(r: &mut dyn Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| SgnError::Format(format!("truncated file while reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file into a count x rows x cols x 1 tensor with pixel
/// bytes scaled by 1/255.
pub fn load_idx_images<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(SgnError::Format(format!(
            "bad IDX image magic in {}: expected {}, got {}",
            path.display(),
            IDX_IMAGE_MAGIC,
            magic
        )));
    }
    let count = read_u32_be(&mut r, "image count")? as usize;
    let rows = read_u32_be(&mut r, "row count")? as usize;
    let cols = read_u32_be(&mut r, "col count")? as usize;
    let mut payload = vec![0u8; count * rows * cols];
    r.read_exact(&mut payload).map_err(|_| {
        SgnError::Format(format!(
            "truncated IDX image payload in {}: expected {} bytes",
            path.display(),
            count * rows * cols
        ))
    })?;
    let data = payload
        .iter()
        .map(|&b| F::from_f64(b as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[count, rows, cols, 1], data)
}

/// Load an IDX label file into a list of raw byte values.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(SgnError::Format(format!(
            "bad IDX label magic in {}: expected {}, got {}",
            path.display(),
            IDX_LABEL_MAGIC,
            magic
        )));
    }
    let count = read_u32_be(&mut r, "label count")? as usize;
    let mut payload = vec![0u8; count];
    r.read_exact(&mut payload).map_err(|_| {
        SgnError::Format(format!(
            "truncated IDX label payload in {}: expected {} bytes",
            path.display(),
            count
        ))
    })?;
    Ok(payload.into_iter().map(|b| b as usize).collect())
}

/// Resolve `<dir>/<stem>` or `<dir>/<stem>.gz`, whichever exists.
fn resolve_idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(SgnError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} (also tried .gz) in {}", stem, dir.display()),
    )))
}

/// Load `<prefix>-images-idx3-ubyte` plus labels from a directory, inferring
/// the class count from the largest label.
pub fn load_idx_dataset<F: Real>(dir: &Path, prefix: &str) -> Result<Dataset<F>> {
    let images = load_idx_images(&resolve_idx_file(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = load_idx_labels(&resolve_idx_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    let class_count = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(images, labels, class_count)
}

/// Read the raw-tensor import format: magic "SGT1", u32 rank, rank x u32 dims,
/// then a row-major float32 payload, all little-endian.
pub fn load_raw_tensor<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let mut r = open_maybe_gz(path)?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| SgnError::Format("truncated raw-tensor header".into()))?;
    if &magic != RAW_TENSOR_MAGIC {
        return Err(SgnError::Format(format!(
            "bad raw-tensor magic: expected {:?}, got {:?}",
            RAW_TENSOR_MAGIC, magic
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| SgnError::Format("truncated raw-tensor rank".into()))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank == 0 || rank > 8 {
        return Err(SgnError::Format(format!("raw-tensor rank {rank} out of range 1..=8")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)
            .map_err(|_| SgnError::Format("truncated raw-tensor dims".into()))?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * 4];
    r.read_exact(&mut payload).map_err(|_| {
        SgnError::Format(format!("truncated raw-tensor payload: expected {len} floats"))
    })?;
    let data = payload
        .chunks_exact(4)
        .map(|c| F::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Write a tensor in the raw-tensor import format.
pub fn save_raw_tensor<F: Real>(path: &Path, tensor: &Tensor<F>) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + tensor.len() * 4);
    bytes.extend_from_slice(RAW_TENSOR_MAGIC);
    bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    crate::render::write_atomic(path, &bytes)
}

/// Iterator over one epoch of minibatches. Every dataset row appears exactly
/// once; the order is a deterministic function of the seed when shuffling.
pub struct Batches<'a, F: Real> {
    dataset: &'a Dataset<F>,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

pub fn make_batches<F: Real>(
    dataset: &Dataset<F>,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Batches<'_, F>> {
    if batch_size == 0 {
        return Err(SgnError::Argument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.count()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    Ok(Batches {
        dataset,
        order,
        batch_size,
        cursor: 0,
    })
}

impl<F: Real> Iterator for Batches<'_, F> {
    type Item = Batch<F>;

    fn next(&mut self) -> Option<Batch<F>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let row = self.dataset.images.len() / self.dataset.count();
        let mut shape = self.dataset.images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let src = self.dataset.images.data();
        for &i in &indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        Some(Batch {
            images: Tensor::from_vec(&shape, data).expect("batch shape consistent"),
            labels: indices.iter().map(|&i| self.dataset.labels[i]).collect(),
            indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, count: usize, rows: usize, cols: usize, bytes: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(count as u32).to_be_bytes()).unwrap();
        f.write_all(&(rows as u32).to_be_bytes()).unwrap();
        f.write_all(&(cols as u32).to_be_bytes()).unwrap();
        f.write_all(bytes).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn idx_image_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        let bytes: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 256) as u8).collect();
        write_idx_images(&path, 2, 28, 28, &bytes);
        let t: Tensor<f32> = load_idx_images(&path).unwrap();
        assert_eq!(t.shape(), &[2, 28, 28, 1]);
        for (i, v) in t.data().iter().enumerate() {
            assert_eq!(*v, bytes[i] as f32 / 255.0);
        }
    }

    #[test]
    fn pixel_scaling_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        write_idx_images(&path, 1, 1, 2, &[255, 0]);
        let t: Tensor<f64> = load_idx_images(&path).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0]);
    }

    #[test]
    fn wrong_magic_names_expected_and_actual() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        let mut f = File::create(&path).unwrap();
        f.write_all(&1234u32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 12]).unwrap();
        drop(f);
        let err = load_idx_images::<f32>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2051") && msg.contains("1234"), "{msg}");
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs");
        write_idx_images(&path, 2, 28, 28, &[0u8; 100]);
        let err = load_idx_images::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn labels_pass_through_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels");
        write_idx_labels(&path, &[7, 2, 1]);
        assert_eq!(load_idx_labels(&path).unwrap(), vec![7, 2, 1]);
    }

    #[test]
    fn empty_label_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels");
        write_idx_labels(&path, &[]);
        assert_eq!(load_idx_labels(&path).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn gz_files_load_transparently() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.gz");
        let mut enc =
            flate2::write::GzEncoder::new(File::create(&path).unwrap(), Default::default());
        enc.write_all(&IDX_LABEL_MAGIC.to_be_bytes()).unwrap();
        enc.write_all(&3u32.to_be_bytes()).unwrap();
        enc.write_all(&[5, 0, 9]).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_idx_labels(&path).unwrap(), vec![5, 0, 9]);
    }

    #[test]
    fn dataset_rejects_out_of_range_labels() {
        let images = Tensor::<f32>::zeros(&[2, 4, 4, 1]);
        let err = Dataset::new(images, vec![0, 3], 3).unwrap_err();
        assert!(matches!(err, SgnError::Format(_)));
    }

    #[test]
    fn batch_sizes_split_as_expected() {
        let ds = Dataset::new(Tensor::<f32>::zeros(&[10, 2, 2, 1]), vec![0; 10], 1).unwrap();
        let sizes: Vec<usize> = make_batches(&ds, 4, 0, false)
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_gives_identical_order() {
        let ds = Dataset::new(Tensor::<f32>::zeros(&[16, 2, 2, 1]), vec![0; 16], 1).unwrap();
        let a: Vec<usize> = make_batches(&ds, 5, 42, true)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        let b: Vec<usize> = make_batches(&ds, 5, 42, true)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn no_shuffle_keeps_identity_order() {
        let ds = Dataset::new(Tensor::<f32>::zeros(&[6, 2, 2, 1]), vec![0; 6], 1).unwrap();
        let order: Vec<usize> = make_batches(&ds, 4, 7, false)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn epoch_covers_every_row_exactly_once() {
        let ds = Dataset::new(Tensor::<f32>::zeros(&[23, 2, 2, 1]), vec![0; 23], 1).unwrap();
        let mut seen: Vec<usize> = make_batches(&ds, 4, 3, true)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn zero_batch_size_is_an_argument_error() {
        let ds = Dataset::new(Tensor::<f32>::zeros(&[4, 2, 2, 1]), vec![0; 4], 1).unwrap();
        assert!(matches!(
            make_batches(&ds, 0, 0, false),
            Err(SgnError::Argument(_))
        ));
    }

    #[test]
    fn raw_tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sgt");
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 3.5, 0.0, 9.25]).unwrap();
        save_raw_tensor(&path, &t).unwrap();
        let back: Tensor<f32> = load_raw_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn raw_tensor_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sgt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_raw_tensor::<f32>(&path),
            Err(SgnError::Format(_))
        ));
    }

    #[test]
    fn standardize_zeroes_channel_means() {
        let mut ds = Dataset::new(
            Tensor::<f64>::from_vec(&[2, 1, 2, 1], vec![0.0, 1.0, 0.25, 0.75]).unwrap(),
            vec![0, 0],
            1,
        )
        .unwrap();
        ds.standardize();
        let mean: f64 = ds.images.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
