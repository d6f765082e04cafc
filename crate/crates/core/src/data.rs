//! MNIST IDX loading and IID client partitioning.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at position {index} is not a digit class")]
    BadLabel { index: usize, label: u8 },
    #[error("{0}")]
    Argument(String),
}

/// Images as normalised pixel rows plus their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<f32>,
    labels: Vec<u8>,
    features: usize,
}

impl LabeledDataset {
    /// Builds a dataset from row-major pixels already scaled into `[0, 1]`.
    pub fn new(images: Vec<f32>, labels: Vec<u8>, features: usize) -> Result<Self, DataError> {
        if features == 0 {
            return Err(DataError::Argument("feature width must be positive".into()));
        }
        if images.len() != labels.len() * features {
            return Err(DataError::CountMismatch {
                images: images.len() / features,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= NUM_CLASSES)
        {
            return Err(DataError::BadLabel { index, label });
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Argument("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            features,
        })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.features..(i + 1) * self.features]
    }

    /// New dataset holding the given examples, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            images,
            labels,
            features: self.features,
        }
    }

    /// Pixel matrix for the given examples, one row per example.
    pub fn batch_matrix<T: Scalar>(&self, indices: &[usize]) -> Array2<T> {
        let mut out = Array2::zeros((indices.len(), self.features));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
            for (dst, &src) in row.iter_mut().zip(self.image(i)) {
                *dst = T::of(src as f64);
            }
        }
        out
    }

    /// First `limit` examples of a seeded permutation (all of them when `limit >= count`).
    pub fn subsample(&self, limit: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.count()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(limit.min(self.count()));
        self.gather(&order)
    }
}

/// Disjoint per-client shards of a training set.
#[derive(Debug, Clone)]
pub struct ClientPartition {
    pub shards: Vec<LabeledDataset>,
    pub owner_ids: Vec<usize>,
}

impl ClientPartition {
    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Shuffles `ds` under `seed` and cuts it into `n_clients` contiguous shards.
///
/// Shard sizes are `count / n_clients`, with the remainder handed one each to the
/// first shards.
pub fn partition(
    ds: &LabeledDataset,
    n_clients: usize,
    seed: u64,
) -> Result<ClientPartition, DataError> {
    if n_clients == 0 {
        return Err(DataError::Argument("n_clients must be at least 1".into()));
    }
    if n_clients > ds.count() {
        return Err(DataError::Argument(format!(
            "cannot split {} examples among {} clients",
            ds.count(),
            n_clients
        )));
    }
    let mut order: Vec<usize> = (0..ds.count()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = ds.count() / n_clients;
    let extra = ds.count() % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut start = 0;
    for k in 0..n_clients {
        let len = base + usize::from(k < extra);
        shards.push(ds.gather(&order[start..start + len]));
        start += len;
    }
    Ok(ClientPartition {
        shards,
        owner_ids: (0..n_clients).collect(),
    })
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX3 image file. Returns `(pixels scaled to [0,1], count, rows * cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize), DataError> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let features = rows * cols;
    let expected = 16 + count * features;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected]
        .iter()
        .map(|&v| v as f32 / 255.0)
        .collect();
    Ok((pixels, count, features))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    let (images, count, features) = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    LabeledDataset::new(images, labels, features)
}

/// Loads `(train, test)` from a directory holding the four standard MNIST files.
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// Encodes pixels (quantised back to bytes) as an IDX3 image file.
pub fn encode_idx_images(ds: &LabeledDataset, rows: usize, cols: usize) -> Vec<u8> {
    assert_eq!(rows * cols, ds.features, "image geometry does not match feature width");
    let mut out = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.count() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(ds.images.iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(count: usize) -> LabeledDataset {
        let images = (0..count * 4).map(|i| (i % 256) as f32 / 255.0).collect();
        let labels = (0..count).map(|i| (i % 10) as u8).collect();
        LabeledDataset::new(images, labels, 4).unwrap()
    }

    #[test]
    fn zero_magic_is_a_format_error() {
        let mut bytes = vec![0u8; 16];
        bytes.extend([0u8; 4]);
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(DataError::BadMagic { found: 0, .. })
        ));
        assert!(matches!(
            parse_idx_labels(&bytes),
            Err(DataError::BadMagic { found: 0, .. })
        ));
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let ds = toy(3);
        let bytes = encode_idx_images(&ds, 2, 2);
        let err = parse_idx_images(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, DataError::Truncated { expected: 28, found: 27 }));
        let labels = encode_idx_labels(ds.labels());
        assert!(matches!(
            parse_idx_labels(&labels[..9]),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(3);
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, encode_idx_images(&ds, 2, 2)).unwrap();
        fs::write(&lab, encode_idx_labels(&ds.labels()[..2])).unwrap();
        assert!(matches!(
            load_idx(&img, &lab),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(25);
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, encode_idx_images(&ds, 2, 2)).unwrap();
        fs::write(&lab, encode_idx_labels(ds.labels())).unwrap();
        assert_eq!(load_idx(&img, &lab).unwrap(), ds);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_idx(Path::new("/nonexistent/a"), Path::new("/nonexistent/b")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a"));
    }

    #[test]
    fn single_client_keeps_everything() {
        let ds = toy(10);
        let p = partition(&ds, 1, 99).unwrap();
        assert_eq!(p.shards.len(), 1);
        let mut got: Vec<_> = (0..10).map(|i| (p.shards[0].image(i).to_vec(), p.shards[0].labels()[i])).collect();
        let mut want: Vec<_> = (0..10).map(|i| (ds.image(i).to_vec(), ds.labels()[i])).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn remainder_goes_to_first_shards() {
        let p = partition(&toy(10), 3, 1).unwrap();
        let sizes: Vec<_> = p.shards.iter().map(|s| s.count()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(p.owner_ids, vec![0, 1, 2]);
    }

    #[test]
    fn too_many_clients() {
        assert!(matches!(partition(&toy(3), 4, 0), Err(DataError::Argument(_))));
        assert!(matches!(partition(&toy(3), 0, 0), Err(DataError::Argument(_))));
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = toy(50);
        let a = partition(&ds, 4, 7).unwrap();
        let b = partition(&ds, 4, 7).unwrap();
        assert_eq!(a.shards, b.shards);
        let c = partition(&ds, 4, 8).unwrap();
        assert_ne!(a.shards, c.shards);
    }

    #[test]
    fn subsample_takes_prefix_of_permutation() {
        let ds = toy(20);
        let s = ds.subsample(5, 3);
        assert_eq!(s.count(), 5);
        assert_eq!(ds.subsample(100, 3).count(), 20);
    }
}
