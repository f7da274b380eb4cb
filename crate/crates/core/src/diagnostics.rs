//! Post-hoc analysis of an embedding space: SimO-kernel similarity
//! matrices, effective rank, distance and orthogonality statistics, and CSV
//! export for external plotting.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::diff::Tensor;
use crate::model::{encode, ModelError, ModelParams};
use crate::semimetric::{d_double_prime, d_prime, verify_semimetric_with, SemiMetricError, SemiMetricReport};
use crate::simo::{pair_terms, SimoConfig};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("need at least 2 embeddings, got {0}")]
    TooFewEmbeddings(usize),
    #[error("class-mean matrix needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{labels} labels for {rows} embeddings")]
    LabelCount { labels: usize, rows: usize },
    #[error("effective rank is undefined for an all-zero matrix")]
    ZeroMatrix,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    SemiMetric(#[from] SemiMetricError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DiagnosticsError + '_ {
    move |source| DiagnosticsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Pairwise,
    ClassMean,
}

/// Pair function used to fill a similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `|a - b|^2 / (ε + (a . b)^2)`: zero on identical points.
    #[default]
    DPrime,
    /// `(a . b)^2 / (ε + |a - b|^2)`.
    DDoublePrime,
}

/// A square matrix before and after normalization to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub kind: MatrixKind,
    pub kernel: Kernel,
    /// Dataset label of each row: the sample's label, or the class itself.
    pub labels: Vec<usize>,
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

/// Per-class means, ordered by label. Classes without rows are skipped.
pub fn class_means(embeddings: &Tensor, labels: &[usize]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let dim = embeddings.cols();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &label) in embeddings.row_iter().zip(labels) {
        counts[label] += 1;
        for (s, &v) in sums[label].iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut present = Vec::new();
    let mut means = Vec::new();
    for (c, (sum, n)) in sums.into_iter().zip(counts).enumerate() {
        if n > 0 {
            present.push(c);
            means.push(sum.into_iter().map(|s| s / n as f64).collect());
        }
    }
    (present, means)
}

/// Min-max normalization over the off-diagonal entries, clamped to `[0, 1]`.
/// With a constant off-diagonal, positive entries map to 1 and zeros to 0.
pub fn normalize_off_diagonal(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = raw.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, row) in raw.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let range = hi - lo;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let v = raw[i][j];
                    if range > 0.0 && range.is_finite() {
                        ((v - lo) / range).clamp(0.0, 1.0)
                    } else if v > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn kernel_matrix(points: &[Vec<f64>], kernel: Kernel, epsilon: f64) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
    let n = points.len();
    let mut raw = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = match kernel {
                Kernel::DPrime => d_prime(&points[i], &points[j], epsilon)?,
                Kernel::DDoublePrime => d_double_prime(&points[i], &points[j], epsilon)?,
            };
            raw[i][j] = v;
            raw[j][i] = v;
        }
    }
    Ok(raw)
}

pub fn similarity_matrix(
    embeddings: &Tensor,
    labels: &[usize],
    config: &SimoConfig,
    kind: MatrixKind,
    kernel: Kernel,
) -> Result<SimilarityMatrix, DiagnosticsError> {
    if labels.len() != embeddings.rows() {
        return Err(DiagnosticsError::LabelCount {
            labels: labels.len(),
            rows: embeddings.rows(),
        });
    }
    if embeddings.rows() < 2 {
        return Err(DiagnosticsError::TooFewEmbeddings(embeddings.rows()));
    }
    let (row_labels, points) = match kind {
        MatrixKind::Pairwise => (labels.to_vec(), embeddings.row_iter().map(<[f64]>::to_vec).collect()),
        MatrixKind::ClassMean => {
            let (classes, means) = class_means(embeddings, labels);
            if classes.len() < 2 {
                return Err(DiagnosticsError::TooFewClasses(classes.len()));
            }
            (classes, means)
        }
    };
    let raw = kernel_matrix(&points, kernel, config.epsilon)?;
    let normalized = normalize_off_diagonal(&raw);
    Ok(SimilarityMatrix {
        kind,
        kernel,
        labels: row_labels,
        raw,
        normalized,
    })
}

/// `exp` of the Shannon entropy of the singular values normalized to sum 1.
pub fn effective_rank(rows: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    if rows.len() < 2 {
        return Err(DiagnosticsError::TooFewEmbeddings(rows.len()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(SemiMetricError::RaggedVectors.into());
    }
    let m = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    let singular = m.singular_values();
    let total: f64 = singular.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(DiagnosticsError::ZeroMatrix);
    }
    let entropy: f64 = singular
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

/// Writes `label,e0,...` with 17 significant digits per value and returns
/// the embeddings.
pub fn export_embeddings(dataset: &Dataset, params: &ModelParams, path: &Path) -> Result<Tensor, DiagnosticsError> {
    let embeddings = encode(params, dataset.features())?;
    write_embeddings_csv(&embeddings, dataset.labels(), path)?;
    Ok(embeddings)
}

pub fn write_embeddings_csv(embeddings: &Tensor, labels: &[usize], path: &Path) -> Result<(), DiagnosticsError> {
    let mut out = String::from("label");
    for j in 0..embeddings.cols() {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for (row, label) in embeddings.row_iter().zip(labels) {
        out.push_str(&label.to_string());
        for v in row {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_embeddings_csv(path: &Path) -> Result<(Vec<usize>, Tensor), DiagnosticsError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse_err = |line: usize, reason: String| DiagnosticsError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let dim = header.split(',').count() - 1;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let label = fields
            .next()
            .unwrap_or_default()
            .parse::<usize>()
            .map_err(|e| parse_err(i + 2, e.to_string()))?;
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(i + 2, e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != dim {
            return Err(parse_err(i + 2, format!("expected {dim} values, got {}", row.len())));
        }
        labels.push(label);
        rows.push(row);
    }
    let tensor = if rows.is_empty() {
        Tensor::zeros(&[0, dim])
    } else {
        Tensor::from_rows(&rows).map_err(|e| parse_err(0, e.to_string()))?
    };
    Ok((labels, tensor))
}

pub fn write_matrix_csv(matrix: &[Vec<f64>], path: &Path) -> Result<(), DiagnosticsError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    for row in matrix {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(file, "{}", line.join(",")).map_err(io_err(path))?;
    }
    Ok(())
}

/// Distance and orthogonality summary over all sample pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStatistics {
    pub mean_intra_distance: f64,
    pub mean_inter_distance: f64,
    pub mean_inter_squared_dot: f64,
}

/// Means of the squared distance within classes, and of the squared
/// distance and squared dot across classes. Absent pair types give NaN.
pub fn pair_statistics(embeddings: &Tensor, labels: &[usize]) -> PairStatistics {
    let (mut intra, mut n_intra) = (0.0, 0usize);
    let (mut inter, mut inter_dot, mut n_inter) = (0.0, 0.0, 0usize);
    for i in 0..embeddings.rows() {
        for j in i + 1..embeddings.rows() {
            let t = pair_terms(embeddings.row(i), embeddings.row(j)).expect("rows share a width");
            if labels[i] == labels[j] {
                intra += t.d;
                n_intra += 1;
            } else {
                inter += t.d;
                inter_dot += t.o;
                n_inter += 1;
            }
        }
    }
    PairStatistics {
        mean_intra_distance: intra / n_intra as f64,
        mean_inter_distance: inter / n_inter as f64,
        mean_inter_squared_dot: inter_dot / n_inter as f64,
    }
}

/// Largest `(a . b)^2` over distinct class-mean pairs.
pub fn max_class_mean_squared_dot(means: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            worst = worst.max(pair_terms(&means[i], &means[j]).expect("equal widths").o);
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub kernel: Kernel,
    /// Samples drawn for the pairwise matrix.
    pub pairwise_samples: usize,
    /// Random pairs and triples of embeddings for the semi-metric checks.
    pub semimetric_trials: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::DPrime,
            pairwise_samples: 64,
            semimetric_trials: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub kernel: Kernel,
    /// How matrix entries were mapped to `[0, 1]`.
    pub normalization: String,
    pub pairwise_matrix: SimilarityMatrix,
    pub class_mean_matrix: SimilarityMatrix,
    /// Effective rank of the class means.
    pub effective_rank: f64,
    /// Effective rank of all embeddings.
    pub embedding_effective_rank: f64,
    pub mean_intra_distance: f64,
    pub mean_inter_distance: f64,
    pub mean_inter_squared_dot: f64,
    pub max_class_mean_squared_dot: f64,
    pub semimetric: SemiMetricReport,
}

pub const NORMALIZATION_NOTE: &str = "min-max over off-diagonal entries, clamped to [0, 1]";

/// Full report over precomputed embeddings.
pub fn diagnose_embeddings(
    embeddings: &Tensor,
    labels: &[usize],
    simo: &SimoConfig,
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsReport, DiagnosticsError> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(DiagnosticsError::TooFewEmbeddings(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);

    let mut picked = index::sample(&mut rng, n, config.pairwise_samples.clamp(2, n)).into_vec();
    picked.sort_by_key(|&i| (labels[i], i));
    let sample = embeddings.select_rows(&picked);
    let sample_labels: Vec<usize> = picked.iter().map(|&i| labels[i]).collect();
    let pairwise_matrix = similarity_matrix(&sample, &sample_labels, simo, MatrixKind::Pairwise, config.kernel)?;
    let class_mean_matrix = similarity_matrix(embeddings, labels, simo, MatrixKind::ClassMean, config.kernel)?;

    let (_, means) = class_means(embeddings, labels);
    let rows: Vec<Vec<f64>> = embeddings.row_iter().map(<[f64]>::to_vec).collect();
    let stats = pair_statistics(embeddings, labels);

    let semimetric = verify_semimetric_with(
        || rows[rng.random_range(0..n)].clone(),
        embeddings.cols(),
        config.semimetric_trials,
        simo.epsilon,
    );

    Ok(DiagnosticsReport {
        kernel: config.kernel,
        normalization: NORMALIZATION_NOTE.to_string(),
        pairwise_matrix,
        class_mean_matrix,
        effective_rank: effective_rank(&means)?,
        embedding_effective_rank: effective_rank(&rows)?,
        mean_intra_distance: stats.mean_intra_distance,
        mean_inter_distance: stats.mean_inter_distance,
        mean_inter_squared_dot: stats.mean_inter_squared_dot,
        max_class_mean_squared_dot: max_class_mean_squared_dot(&means),
        semimetric,
    })
}

/// Encodes `dataset` and reports on the result.
pub fn diagnose(
    params: &ModelParams,
    dataset: &Dataset,
    simo: &SimoConfig,
    config: &DiagnosticsConfig,
) -> Result<(Tensor, DiagnosticsReport), DiagnosticsError> {
    let embeddings = encode(params, dataset.features())?;
    let report = diagnose_embeddings(&embeddings, dataset.labels(), simo, config)?;
    Ok((embeddings, report))
}
