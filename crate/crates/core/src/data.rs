//! Labelled feature datasets: a synthetic Gaussian-cluster generator and a
//! reader/writer for the CIFAR-10 binary record layout.
//!
//! A record is one label byte followed by the feature bytes. CIFAR-10 records
//! carry 3072 pixel bytes (three 32x32 channel planes, row-major). Pixels are
//! scaled to `[0, 1]` by dividing by 255.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::Tensor;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
/// Side length after block-average downscaling.
pub const DOWNSCALED_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: length {len} is not a multiple of the {record}-byte record; trailing bytes start at offset {offset}")]
    Length {
        path: PathBuf,
        len: usize,
        record: usize,
        offset: usize,
    },
    #[error("{path}: record {record} has label {label}, expected < {classes}")]
    Label {
        path: PathBuf,
        record: usize,
        label: usize,
        classes: usize,
    },
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelRange { row: usize, label: usize, classes: usize },
    #[error("{0} labels for {1} feature rows")]
    Count(usize, usize),
    #[error("features must be a matrix, got shape {0:?}")]
    Shape(Vec<usize>),
    #[error("record format stores labels in one byte; {0} classes do not fit")]
    TooManyClasses(usize),
    #[error("feature value {value} at row {row} is outside [0, 1]")]
    FeatureRange { row: usize, value: f64 },
    #[error("class {class} has {have} examples, need {need}")]
    ClassTooSmall { class: usize, have: usize, need: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if features.rank() != 2 {
            return Err(DataError::Shape(features.shape().to_vec()));
        }
        if features.rows() != labels.len() {
            return Err(DataError::Count(labels.len(), features.rows()));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (row, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(DataError::LabelRange {
                    row,
                    label,
                    classes: num_classes,
                });
            }
            class_index[label].push(row);
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            class_index,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row ids of each class, ascending.
    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset::new(
            self.features.select_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.num_classes,
        )
        .expect("subset of a valid dataset")
    }

    /// Splits each class into its first `ceil(len * train_fraction)` rows and
    /// the remainder.
    pub fn split_per_class(&self, train_fraction: f64) -> (Dataset, Dataset) {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for rows in &self.class_index {
            let cut = ((rows.len() as f64) * train_fraction).ceil() as usize;
            let cut = cut.min(rows.len());
            train.extend_from_slice(&rows[..cut]);
            test.extend_from_slice(&rows[cut..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }

    pub fn check_min_class_size(&self, need: usize) -> Result<(), DataError> {
        match self.class_index.iter().enumerate().find(|(_, r)| r.len() < need) {
            Some((class, rows)) => Err(DataError::ClassTooSmall {
                class,
                have: rows.len(),
                need,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 400,
            feature_dim: 32,
            cluster_spread: 0.05,
            seed: 7,
        }
    }
}

/// Gaussian clusters around random centers in `[0.2, 0.8]^D`, clamped to
/// `[0, 1]`. Rows are laid out class by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center_dist = Uniform::new(0.2, 0.8).expect("valid range");
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.feature_dim).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.cluster_spread.max(0.0)).expect("non-negative std");
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.feature_dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &c in center {
                let jitter = if spec.cluster_spread > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push((c + jitter).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    let features = Tensor::matrix(n, spec.feature_dim, data).expect("sized above");
    Dataset::new(features, labels, spec.num_classes).expect("labels in range")
}

/// Reads fixed-size records (one label byte, `feature_dim` feature bytes).
pub fn read_records(path: &Path, feature_dim: usize, num_classes: usize) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let record = feature_dim + 1;
    if bytes.len() % record != 0 {
        return Err(DataError::Length {
            path: path.to_path_buf(),
            len: bytes.len(),
            record,
            offset: bytes.len() / record * record,
        });
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * feature_dim);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = usize::from(rec[0]);
        if label >= num_classes {
            return Err(DataError::Label {
                path: path.to_path_buf(),
                record: i,
                label,
                classes: num_classes,
            });
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let features = Tensor::matrix(n, feature_dim, data).expect("sized above");
    Dataset::new(features, labels, num_classes)
}

/// Reads and concatenates CIFAR-10 binary batch files. With `downscale`, each
/// 32x32 channel plane is block-averaged down to 8x8 (192 features).
pub fn read_cifar10<P: AsRef<Path>>(paths: &[P], downscale: bool) -> Result<Dataset, DataError> {
    let dim = if downscale {
        3 * DOWNSCALED_SIDE * DOWNSCALED_SIDE
    } else {
        CIFAR_PIXELS
    };
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for path in paths {
        let part = read_records(path.as_ref(), CIFAR_PIXELS, CIFAR_CLASSES)?;
        labels.extend_from_slice(part.labels());
        if downscale {
            for row in part.features().row_iter() {
                data.extend(downscale_image(row));
            }
        } else {
            data.extend_from_slice(part.features().data());
        }
    }
    let features = Tensor::matrix(labels.len(), dim, data).expect("sized above");
    Dataset::new(features, labels, CIFAR_CLASSES)
}

fn downscale_image(pixels: &[f64]) -> Vec<f64> {
    let block = CIFAR_SIDE / DOWNSCALED_SIDE;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(3 * DOWNSCALED_SIDE * DOWNSCALED_SIDE);
    for ch in 0..3 {
        let src = &pixels[ch * plane..(ch + 1) * plane];
        for by in 0..DOWNSCALED_SIDE {
            for bx in 0..DOWNSCALED_SIDE {
                let mut acc = 0.0;
                for y in by * block..(by + 1) * block {
                    for x in bx * block..(bx + 1) * block {
                        acc += src[y * CIFAR_SIDE + x];
                    }
                }
                out.push(acc / (block * block) as f64);
            }
        }
    }
    out
}

/// Writes `dataset` in the record layout, quantizing features to bytes.
pub fn write_records(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    if dataset.num_classes() > 256 {
        return Err(DataError::TooManyClasses(dataset.num_classes()));
    }
    let mut bytes = Vec::with_capacity(dataset.len() * (dataset.feature_dim() + 1));
    for (row, (&label, features)) in dataset.labels().iter().zip(dataset.features().row_iter()).enumerate() {
        bytes.push(label as u8);
        for &v in features {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::FeatureRange { row, value: v });
            }
            bytes.push((v * 255.0).round() as u8);
        }
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))
}
