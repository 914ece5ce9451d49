//! Example stores, client partitions, minibatch sampling and synthetic
//! tasks with known optima.

mod idx;
mod synth;

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};

pub use idx::{encode_idx, parse_idx, read_idx, write_idx, IdxArray};
pub use synth::{synth_logistic, synth_quadratic, SynthKind, SynthTask};

/// Environment variable naming the directory that holds `mnist/`.
pub const DATA_DIR_ENV: &str = "FLEXSCHED_DATA_DIR";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("IDX parse error at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },
    #[error("dataset not found: expected {expected} (set {DATA_DIR_ENV} to a directory containing mnist/)")]
    Missing { expected: String },
    #[error("inconsistent data: {0}")]
    Mismatch(String),
    #[error("store too small: need {required} examples, have {available}")]
    TooSmall { required: usize, available: usize },
    #[error("client {client} has no examples")]
    EmptyClient { client: usize },
    #[error("design matrix is singular")]
    Singular,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Labels { labels: Vec<u8>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Labels { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feature rows with their targets. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleStore {
    pub features: Array2<f64>,
    pub targets: Targets,
}

impl ExampleStore {
    pub fn new(features: Array2<f64>, targets: Targets) -> Result<Self, DataError> {
        if features.nrows() != targets.len() {
            return Err(DataError::Mismatch(format!("{} feature rows, {} targets", features.nrows(), targets.len())));
        }
        if let Targets::Labels { labels, classes } = &targets {
            if let Some(bad) = labels.iter().find(|l| **l as usize >= *classes) {
                return Err(DataError::Mismatch(format!("label {bad} outside {classes} classes")));
            }
        }
        Ok(Self { features, targets })
    }

    /// Pairs an image tensor with a label vector; pixels scale to `[0, 1]`.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Self, DataError> {
        if labels.dims.len() != 1 || images.len() != labels.len() {
            return Err(DataError::Mismatch(format!("images {:?} vs labels {:?}", images.dims, labels.dims)));
        }
        let dim = images.item_size();
        let pixels = images.data.iter().map(|b| *b as f64 / 255.0).collect();
        let features = Array2::from_shape_vec((images.len(), dim), pixels).expect("payload size checked by parser");
        let classes = labels.data.iter().map(|l| *l as usize + 1).max().unwrap_or(0).max(10);
        Self::new(features, Targets::Labels { labels: labels.data.clone(), classes })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Back to IDX, quantizing features to bytes.
    pub fn to_idx(&self, item_dims: &[usize]) -> Result<(IdxArray, IdxArray), DataError> {
        let Targets::Labels { labels, .. } = &self.targets else {
            return Err(DataError::Invalid("only labelled stores map to IDX".into()));
        };
        if item_dims.iter().product::<usize>() != self.dim() {
            return Err(DataError::Invalid(format!("item shape {item_dims:?} does not match dimension {}", self.dim())));
        }
        let mut dims = vec![self.len()];
        dims.extend_from_slice(item_dims);
        let data = self.features.iter().map(|x| (x * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        Ok((IdxArray { dims, data }, IdxArray { dims: vec![labels.len()], data: labels.clone() }))
    }
}

/// Directory holding `mnist/`: `explicit` if given, else the environment
/// variable, else `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    let plain = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    if plain.is_file() {
        Ok(plain)
    } else if gz.is_file() {
        Ok(gz)
    } else {
        Err(DataError::Missing { expected: format!("{} or {}", plain.display(), gz.display()) })
    }
}

/// Loads the MNIST train and test stores from `<root>/mnist/`.
pub fn load_mnist(root: &Path) -> Result<(ExampleStore, ExampleStore), DataError> {
    let dir = root.join("mnist");
    let load = |prefix: &str| -> Result<ExampleStore, DataError> {
        let images = read_idx(&locate(&dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
        let labels = read_idx(&locate(&dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
        ExampleStore::from_idx(&images, &labels)
    };
    Ok((load("train")?, load("t10k")?))
}

/// Disjoint per-client index sets into one store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub indices: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn sizes(&self) -> Vec<usize> {
        self.indices.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.indices.iter().map(Vec::len).sum()
    }

    pub fn num_clients(&self) -> usize {
        self.indices.len()
    }
}

/// Draws each `D_m` uniformly from `size_range` (inclusive), then deals out
/// disjoint blocks of a shuffled index list.
pub fn partition_iid(
    store_len: usize,
    num_clients: usize,
    size_range: (usize, usize),
    seed: u64,
) -> Result<ClientPartition, DataError> {
    let (lo, hi) = size_range;
    if lo > hi {
        return Err(DataError::Invalid(format!("empty size range [{lo}, {hi}]")));
    }
    let mut rng = rng::stream(seed, Purpose::Partition, 0, 0);
    let sizes: Vec<usize> = (0..num_clients).map(|_| rng.random_range(lo..=hi)).collect();
    partition_with_sizes(store_len, &sizes, seed)
}

/// Disjoint uniformly shuffled blocks of the given sizes.
pub fn partition_with_sizes(store_len: usize, sizes: &[usize], seed: u64) -> Result<ClientPartition, DataError> {
    let required: usize = sizes.iter().sum();
    if required > store_len {
        return Err(DataError::TooSmall { required, available: store_len });
    }
    let mut order: Vec<usize> = (0..store_len).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Partition, 1, 0));
    let mut start = 0;
    let indices = sizes
        .iter()
        .map(|n| {
            let block = order[start..start + n].to_vec();
            start += n;
            block
        })
        .collect();
    Ok(ClientPartition { indices })
}

/// How a client's minibatch is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// `size` draws with replacement.
    Sample { size: usize },
    /// The whole local dataset, in order.
    Full,
}

/// Store indices of one minibatch of client `m`.
pub fn sample_minibatch<R: Rng>(
    partition: &ClientPartition,
    m: usize,
    mode: BatchMode,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    let own = &partition.indices[m];
    if own.is_empty() {
        return Err(DataError::EmptyClient { client: m });
    }
    Ok(match mode {
        BatchMode::Full => own.clone(),
        BatchMode::Sample { size } => {
            if size == 0 {
                return Err(DataError::Invalid("batch size must be positive".into()));
            }
            (0..size).map(|_| own[rng.random_range(0..own.len())]).collect()
        }
    })
}
