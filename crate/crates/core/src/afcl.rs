//! Anchor-free contrastive learning with the SimO loss.
//!
//! Each iteration samples `num_classes_per_batch` classes and `k` examples per
//! class, laid out class-major. From one encoded batch three losses are
//! formed and summed:
//!
//! * `l_similar`: SimO with `y = 1` over each class block of `k` rows;
//! * `l_mean_dissimilar`: SimO with `y = olean` over the class means;
//! * `l_dissimilar`: SimO with `y = olean` over `k` cross-class groups, group
//!   `j` holding the `j`-th example of every sampled class.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::model::{encode, Architecture, ModelError, ModelParams, ProbeParams, DEFAULT_PROBE_HIDDEN};
use crate::optim::{Optimizer, OptimizerKind};
use crate::simo::{grouped_loss_var, pair_terms, simo_loss_var, SimoConfig, SimoError};

/// Smallest dataset class count for which "fewer than half of the classes per
/// batch" still leaves room for two classes.
pub const MIN_CLASSES_FOR_FRACTION_RULE: usize = 5;

#[derive(Debug, Error)]
pub enum AfclError {
    #[error("batch_size {batch_size} must be divisible by k {k}")]
    Divisibility { batch_size: usize, k: usize },
    #[error("k must be at least 2 so each class group has a pair, got {0}")]
    GroupTooSmall(usize),
    #[error("a batch needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("{per_batch} classes per batch is not fewer than half of {total} dataset classes")]
    ClassFraction { per_batch: usize, total: usize },
    #[error("{per_batch} classes per batch exceeds the {total} dataset classes")]
    MoreClassesThanDataset { per_batch: usize, total: usize },
    #[error("batch spec expects {spec} dataset classes, dataset has {dataset}")]
    ClassCountMismatch { spec: usize, dataset: usize },
    #[error("non-finite loss at iteration {iteration:?}: {breakdown:?}; pair extrema {extrema:?}")]
    NonFiniteLoss {
        iteration: Option<usize>,
        breakdown: LossBreakdown,
        extrema: PairExtrema,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Simo(#[from] SimoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Class-structured sampling contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub k: usize,
    pub num_classes_per_batch: usize,
    pub total_dataset_classes: usize,
    pub seed: u64,
}

impl BatchSpec {
    /// Validates the sampling contract.
    ///
    /// With at least [`MIN_CLASSES_FOR_FRACTION_RULE`] dataset classes, a
    /// batch must draw fewer than half of them. Smaller datasets cannot
    /// satisfy that with two or more classes per batch, so there the only
    /// requirement is not to exceed the class count.
    pub fn new(batch_size: usize, k: usize, total_dataset_classes: usize, seed: u64) -> Result<Self, AfclError> {
        let num_classes_per_batch = check_shape(batch_size, k)?;
        if num_classes_per_batch > total_dataset_classes {
            return Err(AfclError::MoreClassesThanDataset {
                per_batch: num_classes_per_batch,
                total: total_dataset_classes,
            });
        }
        if total_dataset_classes >= MIN_CLASSES_FOR_FRACTION_RULE
            && num_classes_per_batch >= total_dataset_classes.div_ceil(2)
        {
            return Err(AfclError::ClassFraction {
                per_batch: num_classes_per_batch,
                total: total_dataset_classes,
            });
        }
        Ok(Self {
            batch_size,
            k,
            num_classes_per_batch,
            total_dataset_classes,
            seed,
        })
    }
}

/// Dataset-independent batch checks; returns the classes per batch.
pub fn check_shape(batch_size: usize, k: usize) -> Result<usize, AfclError> {
    if k < 2 {
        return Err(AfclError::GroupTooSmall(k));
    }
    if !batch_size.is_multiple_of(k) {
        return Err(AfclError::Divisibility { batch_size, k });
    }
    let n = batch_size / k;
    if n < 2 {
        return Err(AfclError::TooFewClasses(n));
    }
    Ok(n)
}

/// A class-major sample: rows `[c*k, (c+1)*k)` all belong to `class_ids[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub class_ids: Vec<usize>,
    pub k: usize,
}

impl Batch {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Dataset label of every row.
    pub fn row_labels(&self) -> Vec<usize> {
        self.class_ids.iter().flat_map(|&c| std::iter::repeat_n(c, self.k)).collect()
    }
}

/// Row groups of each class block.
pub fn similar_groups(num_classes: usize, k: usize) -> Vec<Vec<usize>> {
    (0..num_classes).map(|c| (c * k..(c + 1) * k).collect()).collect()
}

/// The `k` cross-class groups: group `j` is `[j, k + j, 2k + j, ...]`, the
/// transpose of the class-major layout.
pub fn dissimilar_groups(num_classes: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k).map(|j| (0..num_classes).map(|c| c * k + j).collect()).collect()
}

fn check_transpose(groups: &[Vec<usize>], num_classes: usize, k: usize) {
    for group in groups {
        let mut classes: Vec<usize> = group.iter().map(|&r| r / k).collect();
        classes.sort_unstable();
        assert_eq!(classes, (0..num_classes).collect::<Vec<_>>(), "dissimilar group must hold one row per class");
    }
}

/// Draws a batch. Fails if any dataset class has fewer than `k` examples.
pub fn sample_batch<R: Rng>(dataset: &Dataset, spec: &BatchSpec, rng: &mut R) -> Result<Batch, AfclError> {
    if dataset.num_classes() != spec.total_dataset_classes {
        return Err(AfclError::ClassCountMismatch {
            spec: spec.total_dataset_classes,
            dataset: dataset.num_classes(),
        });
    }
    dataset.check_min_class_size(spec.k)?;
    let class_ids = index::sample(rng, spec.total_dataset_classes, spec.num_classes_per_batch).into_vec();
    let mut rows = Vec::with_capacity(spec.batch_size);
    for &c in &class_ids {
        let members = &dataset.class_index()[c];
        rows.extend(index::sample(rng, members.len(), spec.k).into_iter().map(|i| members[i]));
    }
    Ok(Batch {
        inputs: dataset.features().select_rows(&rows),
        class_ids,
        k: spec.k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_similar: f64,
    pub l_mean_dissimilar: f64,
    pub l_dissimilar: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_similar, self.l_mean_dissimilar, self.l_dissimilar, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Smallest and largest pair terms of a batch, reported on numeric failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairExtrema {
    pub min_d: f64,
    pub max_d: f64,
    pub min_o: f64,
    pub max_o: f64,
}

fn pair_extrema(embeddings: &Tensor) -> PairExtrema {
    let mut e = PairExtrema {
        min_d: f64::INFINITY,
        max_d: f64::NEG_INFINITY,
        min_o: f64::INFINITY,
        max_o: f64::NEG_INFINITY,
    };
    for i in 0..embeddings.rows() {
        for j in i + 1..embeddings.rows() {
            if let Ok(t) = pair_terms(embeddings.row(i), embeddings.row(j)) {
                e.min_d = e.min_d.min(t.d);
                e.max_d = e.max_d.max(t.d);
                e.min_o = e.min_o.min(t.o);
                e.max_o = e.max_o.max(t.o);
            }
        }
    }
    e
}

/// Tape nodes of the three loss terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct RecordedLoss {
    pub similar: Var,
    pub mean_dissimilar: Var,
    pub dissimilar: Var,
    pub total: Var,
}

impl RecordedLoss {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_similar: tape.value(self.similar).item(),
            l_mean_dissimilar: tape.value(self.mean_dissimilar).item(),
            l_dissimilar: tape.value(self.dissimilar).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Records the three-term loss over class-major `embeddings`.
pub fn record_afcl_loss(
    tape: &mut Tape,
    embeddings: Var,
    num_classes: usize,
    k: usize,
    config: &SimoConfig,
) -> Result<RecordedLoss, AfclError> {
    let rows = tape.value(embeddings).rows();
    if rows != num_classes * k {
        return Err(AfclError::InvalidConfig(format!(
            "{rows} embeddings cannot form {num_classes} classes of {k}"
        )));
    }
    let similar = grouped_loss_var(tape, embeddings, &similar_groups(num_classes, k), 1.0, config)?;

    let means = tape.segment_mean(embeddings, k)?;
    let mean_dissimilar = simo_loss_var(tape, means, config.dissimilar_label(), config)?;

    let groups = dissimilar_groups(num_classes, k);
    if cfg!(debug_assertions) {
        check_transpose(&groups, num_classes, k);
    }
    let dissimilar = grouped_loss_var(tape, embeddings, &groups, config.dissimilar_label(), config)?;

    let partial = tape.add(similar, mean_dissimilar)?;
    let total = tape.add(partial, dissimilar)?;
    Ok(RecordedLoss {
        similar,
        mean_dissimilar,
        dissimilar,
        total,
    })
}

/// Loss breakdown of a batch without updating anything.
pub fn afcl_loss(params: &ModelParams, batch: &Batch, config: &SimoConfig) -> Result<LossBreakdown, AfclError> {
    let embeddings = encode(params, &batch.inputs)?;
    let mut tape = Tape::new();
    let e = tape.constant(embeddings);
    let loss = record_afcl_loss(&mut tape, e, batch.num_classes(), batch.k, config)?;
    Ok(loss.breakdown(&tape))
}

/// One optimization step. Returns the loss measured before the update.
pub fn afcl_step(
    params: &mut ModelParams,
    optimizer: &mut Optimizer,
    batch: &Batch,
    config: &SimoConfig,
) -> Result<LossBreakdown, AfclError> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, true);
    let x = tape.constant(batch.inputs.clone());
    let embeddings = params.forward(&mut tape, &vars, x)?;
    let loss = record_afcl_loss(&mut tape, embeddings, batch.num_classes(), batch.k, config)?;
    let breakdown = loss.breakdown(&tape);
    if !breakdown.is_finite() {
        return Err(AfclError::NonFiniteLoss {
            iteration: None,
            breakdown,
            extrema: pair_extrema(tape.value(embeddings)),
        });
    }
    let mut grads = tape.backward(loss.total)?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
    optimizer.apply(params.tensors_mut(), &grads);
    Ok(breakdown)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub k: usize,
    pub simo: SimoConfig,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub iterations: usize,
    pub log_period: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 96,
            k: 32,
            simo: SimoConfig::default(),
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            iterations: 2000,
            log_period: 10,
            seed: 0,
            hidden: vec![256, 64],
            embed_dim: crate::model::DEFAULT_EMBED_DIM,
        }
    }
}

impl TrainConfig {
    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<(), AfclError> {
        check_shape(self.batch_size, self.k)?;
        self.simo.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(AfclError::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(AfclError::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.log_period == 0 {
            return Err(AfclError::InvalidConfig("log_period must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(AfclError::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_spec(&self, total_dataset_classes: usize) -> Result<BatchSpec, AfclError> {
        BatchSpec::new(self.batch_size, self.k, total_dataset_classes, self.seed)
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture::new(input_dim, self.hidden.clone(), self.embed_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsHistory {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "iteration,l_similar,l_mean_dissimilar,l_dissimilar,total";

impl MetricsHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let l = &r.loss;
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                r.iteration, l.l_similar, l.l_mean_dissimilar, l.l_dissimilar, l.total
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: MetricsHistory,
}

/// RNG for batch sampling, a separate stream from parameter initialization.
pub fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Runs the full training loop.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome, AfclError> {
    train_observed(dataset, config, |_, _, _| {})
}

/// [`train`], calling `observe(iteration, params, loss)` after every step.
pub fn train_observed(
    dataset: &Dataset,
    config: &TrainConfig,
    mut observe: impl FnMut(usize, &ModelParams, &LossBreakdown),
) -> Result<TrainOutcome, AfclError> {
    config.validate()?;
    let spec = config.batch_spec(dataset.num_classes())?;
    dataset.check_min_class_size(spec.k)?;
    let mut params = ModelParams::init(config.architecture(dataset.feature_dim()), config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = batch_rng(config.seed);
    let mut history = MetricsHistory::default();
    for iteration in 1..=config.iterations {
        let batch = sample_batch(dataset, &spec, &mut rng)?;
        let loss = afcl_step(&mut params, &mut optimizer, &batch, &config.simo).map_err(|e| match e {
            AfclError::NonFiniteLoss { breakdown, extrema, .. } => AfclError::NonFiniteLoss {
                iteration: Some(iteration),
                breakdown,
                extrema,
            },
            other => other,
        })?;
        if iteration % config.log_period == 0 {
            log::info!(
                "iter {iteration}: total {:.6e} (similar {:.4e}, mean {:.4e}, dissimilar {:.4e})",
                loss.total,
                loss.l_similar,
                loss.l_mean_dissimilar,
                loss.l_dissimilar
            );
            history.rows.push(MetricsRow { iteration, loss });
        }
        observe(iteration, &params, &loss);
    }
    Ok(TrainOutcome { params, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_PROBE_HIDDEN,
            epochs: 1,
            learning_rate: 0.1,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains a classifier head on fixed embeddings with softmax cross-entropy.
pub fn train_probe(
    embeddings: &Tensor,
    labels: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeParams, AfclError> {
    if labels.is_empty() {
        return Err(AfclError::EmptySplit("train"));
    }
    if config.batch_size == 0 || config.hidden == 0 {
        return Err(AfclError::InvalidConfig("probe batch_size and hidden must be positive".into()));
    }
    let mut probe = ProbeParams::init(embeddings.cols(), config.hidden, num_classes, config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    for _ in 0..config.epochs {
        let order = index::sample(&mut rng, labels.len(), labels.len()).into_vec();
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = probe.record(&mut tape);
            let x = tape.constant(embeddings.select_rows(chunk));
            let logits = probe.forward(&mut tape, &vars, x)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            optimizer.apply(probe.tensors_mut(), &grads);
        }
    }
    Ok(probe)
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn probe_accuracy(probe: &ProbeParams, embeddings: &Tensor, labels: &[usize]) -> Result<f64, AfclError> {
    if labels.is_empty() {
        return Err(AfclError::EmptySplit("evaluation"));
    }
    let logits = crate::model::probe_forward(probe, embeddings)?;
    let correct = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains a probe on the frozen encoder's embeddings of `train` and reports
/// accuracy on both splits.
pub fn linear_probe(
    params: &ModelParams,
    train: &Dataset,
    test: &Dataset,
    config: &ProbeConfig,
) -> Result<ProbeReport, AfclError> {
    if train.is_empty() {
        return Err(AfclError::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(AfclError::EmptySplit("test"));
    }
    let train_e = encode(params, train.features())?;
    let test_e = encode(params, test.features())?;
    let probe = train_probe(&train_e, train.labels(), train.num_classes(), config)?;
    Ok(ProbeReport {
        train_accuracy: probe_accuracy(&probe, &train_e, train.labels())?,
        test_accuracy: probe_accuracy(&probe, &test_e, test.labels())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_dataset(classes: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_classes: classes,
            samples_per_class: 12,
            feature_dim: 6,
            cluster_spread: 0.05,
            seed: 4,
        })
    }

    #[test]
    fn batch_spec_shape_contract() {
        let d = tiny_dataset(5);
        let spec = BatchSpec::new(6, 3, 5, 1).unwrap();
        assert_eq!(spec.num_classes_per_batch, 2);
        let b = sample_batch(&d, &spec, &mut batch_rng(1)).unwrap();
        assert_eq!(b.inputs.shape(), &[6, 6]);
        assert_eq!(b.class_ids.len(), 2);
        assert_ne!(b.class_ids[0], b.class_ids[1]);
        for (row, label) in b.row_labels().iter().enumerate() {
            let expected = b.class_ids[row / 3];
            assert_eq!(*label, expected);
        }
    }

    #[test]
    fn majority_class_sampling_rejected() {
        assert!(matches!(
            BatchSpec::new(12, 2, 10, 0),
            Err(AfclError::ClassFraction { per_batch: 6, total: 10 })
        ));
        // exactly half is not fewer than half
        assert!(BatchSpec::new(10, 2, 10, 0).is_err());
        assert!(BatchSpec::new(8, 2, 10, 0).is_ok());
        // paper-scale default: 96 / 32 = 3 of 10 classes
        assert!(BatchSpec::new(96, 32, 10, 0).is_ok());
    }

    #[test]
    fn small_datasets_waive_fraction_rule() {
        assert!(BatchSpec::new(96, 32, 4, 0).is_ok());
        assert!(BatchSpec::new(96, 32, 3, 0).is_ok());
        assert!(matches!(
            BatchSpec::new(96, 32, 2, 0),
            Err(AfclError::MoreClassesThanDataset { .. })
        ));
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(check_shape(10, 3), Err(AfclError::Divisibility { .. })));
        assert!(matches!(check_shape(3, 3), Err(AfclError::TooFewClasses(1))));
        assert!(matches!(check_shape(4, 1), Err(AfclError::GroupTooSmall(1))));
    }

    #[test]
    fn undersized_class_named() {
        let d = tiny_dataset(5);
        let keep: Vec<usize> = (0..d.len()).filter(|&r| d.labels()[r] != 3 || r % 12 < 2).collect();
        let d = d.subset(&keep);
        let spec = BatchSpec::new(6, 3, 5, 1).unwrap();
        let err = sample_batch(&d, &spec, &mut batch_rng(0)).unwrap_err();
        assert!(matches!(
            err,
            AfclError::Data(DataError::ClassTooSmall { class: 3, have: 2, need: 3 })
        ));
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = tiny_dataset(5);
        let spec = BatchSpec::new(6, 3, 5, 1).unwrap();
        let mut a = batch_rng(9);
        let mut b = batch_rng(9);
        for _ in 0..5 {
            assert_eq!(
                sample_batch(&d, &spec, &mut a).unwrap(),
                sample_batch(&d, &spec, &mut b).unwrap()
            );
        }
    }

    #[test]
    fn dissimilar_groups_transpose_class_major_block() {
        let g = dissimilar_groups(3, 4);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], vec![0, 4, 8]);
        assert_eq!(g[3], vec![3, 7, 11]);
        check_transpose(&g, 3, 4);
        assert_eq!(similar_groups(2, 3), vec![vec![0, 1, 2], vec![3, 4, 5]]);
    }

    #[test]
    fn breakdown_total_is_sum_of_terms() {
        let d = tiny_dataset(5);
        let spec = BatchSpec::new(6, 3, 5, 1).unwrap();
        let batch = sample_batch(&d, &spec, &mut batch_rng(2)).unwrap();
        let params = ModelParams::init(Architecture::new(6, vec![8], 4), 1);
        let l = afcl_loss(&params, &batch, &SimoConfig::default()).unwrap();
        assert_eq!(l.total, l.l_similar + l.l_mean_dissimilar + l.l_dissimilar);
        assert!(l.l_similar >= 0.0 && l.l_mean_dissimilar >= 0.0 && l.l_dissimilar >= 0.0);
    }

    #[test]
    fn constant_encoder_has_zero_similar_loss() {
        let d = tiny_dataset(5);
        let spec = BatchSpec::new(6, 3, 5, 1).unwrap();
        let batch = sample_batch(&d, &spec, &mut batch_rng(2)).unwrap();
        let params = ModelParams::zeros(Architecture::new(6, vec![8], 4));
        let l = afcl_loss(&params, &batch, &SimoConfig::default()).unwrap();
        assert_eq!(l.l_similar, 0.0);
        // every embedding is (0.5, ..): Σd = 0 so each dissimilar term is
        // (1 - olean) Σo / ε over its pair count, with o = 1 for every pair
        let per_group = 0.9 * 1.0 / 1e-6;
        assert!((l.l_mean_dissimilar - per_group).abs() / per_group < 1e-12);
        assert!((l.l_dissimilar - 3.0 * per_group).abs() / per_group < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let d = tiny_dataset(5);
        let config = TrainConfig {
            batch_size: 6,
            k: 3,
            learning_rate: 0.0,
            iterations: 5,
            log_period: 1,
            hidden: vec![8],
            embed_dim: 4,
            ..TrainConfig::default()
        };
        let out = train(&d, &config).unwrap();
        let fresh = ModelParams::init(config.architecture(6), config.seed);
        assert_eq!(out.params, fresh);
        assert_eq!(out.history.rows.len(), 5);
    }

    #[test]
    fn empty_probe_split_rejected() {
        let d = tiny_dataset(5);
        let params = ModelParams::init(Architecture::new(6, vec![8], 4), 1);
        let empty = d.subset(&[]);
        assert!(matches!(
            linear_probe(&params, &d, &empty, &ProbeConfig::default()),
            Err(AfclError::EmptySplit("test"))
        ));
    }

    #[test]
    fn metrics_csv_layout() {
        let h = MetricsHistory {
            rows: vec![MetricsRow {
                iteration: 10,
                loss: LossBreakdown {
                    l_similar: 1.0,
                    l_mean_dissimilar: 0.5,
                    l_dissimilar: 0.25,
                    total: 1.75,
                },
            }],
        };
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "10,1e0,5e-1,2.5e-1,1.75e0");
    }
}
