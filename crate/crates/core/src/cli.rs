//! Command-line entry point. Every run is driven by a JSON [`RunConfig`];
//! the fully resolved config is written next to the outputs so a run can be
//! repeated from that file alone.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data or checkpoint error,
//! 3 numeric failure during training, 4 property-suite failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afcl::{linear_probe, train, AfclError, ProbeConfig, ProbeReport, TrainConfig};
use crate::data::{generate_synthetic, read_cifar10, read_records, write_records, DataError, Dataset, SyntheticSpec};
use crate::diagnostics::{diagnose, write_embeddings_csv, write_matrix_csv, DiagnosticsConfig, DiagnosticsError};
use crate::model::{load_checkpoint, save_checkpoint, ModelError, ModelParams};
use crate::semimetric::{
    check_jl, gram_schmidt, jl_project, orthogonal_construction, verify_orthogonality_bound, verify_semimetric,
    JlCheck, OrthogonalityBound, SemiMetricReport, DEFAULT_JL_CONSTANT,
};
use crate::simo::SimoError;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("property failure: {0}")]
    Property(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Property(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AfclError> for CliError {
    fn from(e: AfclError) -> Self {
        let msg = e.to_string();
        match e {
            AfclError::Data(_) | AfclError::ClassCountMismatch { .. } | AfclError::EmptySplit(_) => CliError::Data(msg),
            AfclError::Model(m) => m.into(),
            AfclError::NonFiniteLoss { .. } | AfclError::Diff(_) => CliError::Numeric(msg),
            AfclError::Simo(SimoError::InvalidConfig(_)) => CliError::Config(msg),
            AfclError::Simo(_) => CliError::Numeric(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Cifar10 {
        files: Vec<PathBuf>,
        #[serde(default = "default_true")]
        downscale: bool,
    },
    Records {
        path: PathBuf,
        feature_dim: usize,
        num_classes: usize,
    },
}

fn default_true() -> bool {
    true
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset, CliError> {
        let dataset = match self {
            DatasetSource::Synthetic(spec) => generate_synthetic(spec),
            DatasetSource::Cifar10 { files, downscale } => read_cifar10(files, *downscale)?,
            DatasetSource::Records {
                path,
                feature_dim,
                num_classes,
            } => read_records(path, *feature_dim, *num_classes)?,
        };
        if dataset.is_empty() {
            return Err(CliError::Data("dataset is empty".into()));
        }
        Ok(dataset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsOptions {
    pub export_embeddings: bool,
    pub write_matrices: bool,
    pub report: DiagnosticsConfig,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self {
            export_embeddings: true,
            write_matrices: true,
            report: DiagnosticsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Per-class fraction of the dataset used for training; the rest is the
    /// held-out probe test split.
    pub train_fraction: f64,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub diagnostics: DiagnosticsOptions,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            train_fraction: 0.8,
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            diagnostics: DiagnosticsOptions::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.probe.batch_size == 0 || self.probe.hidden == 0 {
            return Err(CliError::Config("probe batch_size and hidden must be positive".into()));
        }
        Ok(())
    }

    /// Train and test splits of the configured dataset.
    pub fn splits(&self) -> Result<(Dataset, Dataset), CliError> {
        Ok(self.dataset.load()?.split_per_class(self.train_fraction))
    }
}

#[derive(Debug, Parser)]
#[command(name = "simo", version, about = "SimO loss training, probing and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder and write checkpoint, metrics and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a classifier head on a frozen encoder and report accuracy.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Directory for `probe.json`; the report is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the distance properties, the orthogonal-set bound and JL projection.
    Verify {
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write similarity matrices, statistics and embeddings for a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset in the record format.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output record file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, out, seed } => cmd_train(&config, out.as_deref(), seed).map(|_| ()),
        Command::Probe {
            checkpoint,
            config,
            out,
            seed,
        } => {
            let report = cmd_probe(&checkpoint, &config, out.as_deref(), seed)?;
            print!("{}", to_json(&report));
            Ok(())
        }
        Command::Verify {
            epsilon,
            trials,
            seed,
            dim,
            out,
        } => cmd_verify(
            &VerifyConfig {
                epsilon,
                trials,
                seed,
                dim,
            },
            out.as_deref(),
        )
        .map(|_| ()),
        Command::Diagnose { checkpoint, config, out } => cmd_diagnose(&checkpoint, &config, out.as_deref()),
        Command::GenData { config, out, seed } => cmd_gen_data(config.as_deref(), &out, seed),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

/// Trains from a config file. Returns the output directory.
pub fn cmd_train(config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<PathBuf, CliError> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(out) = out {
        config.output_dir = out.to_path_buf();
    }
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    let (train_split, _) = config.splits()?;
    config.train.batch_spec(train_split.num_classes())?;

    let dir = config.output_dir.clone();
    create_dir(&dir)?;
    write_file(&dir.join(RESOLVED_CONFIG_FILE), to_json(&config))?;
    log::info!(
        "training on {} samples, {} classes, {} iterations",
        train_split.len(),
        train_split.num_classes(),
        config.train.iterations
    );
    let outcome = train(&train_split, &config.train)?;
    save_checkpoint(&outcome.params, &dir.join(CHECKPOINT_FILE))?;
    write_file(&dir.join(METRICS_FILE), outcome.history.to_csv())?;
    Ok(dir)
}

fn load_matching_checkpoint(path: &Path, dataset: &Dataset) -> Result<ModelParams, CliError> {
    let params = load_checkpoint(path)?;
    let expected = params.architecture().input_dim;
    if expected != dataset.feature_dim() {
        return Err(ModelError::WidthMismatch {
            expected,
            found: dataset.feature_dim(),
        }
        .into());
    }
    Ok(params)
}

pub fn cmd_probe(
    checkpoint: &Path,
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<ProbeReport, CliError> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.probe.seed = seed;
    }
    let (train_split, test_split) = config.splits()?;
    let params = load_matching_checkpoint(checkpoint, &train_split)?;
    let report = linear_probe(&params, &train_split, &test_split, &config.probe)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("probe.json"), to_json(&report))?;
    }
    Ok(report)
}

pub fn cmd_diagnose(checkpoint: &Path, config_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let dataset = config.dataset.load()?;
    let params = load_matching_checkpoint(checkpoint, &dataset)?;
    let (embeddings, report) = diagnose(&params, &dataset, &config.train.simo, &config.diagnostics.report)?;
    let dir = out.map_or_else(|| config.output_dir.clone(), Path::to_path_buf);
    create_dir(&dir)?;
    write_file(&dir.join("diagnostics.json"), to_json(&report))?;
    if config.diagnostics.write_matrices {
        write_matrix_csv(&report.pairwise_matrix.normalized, &dir.join("pairwise_matrix.csv"))?;
        write_matrix_csv(&report.class_mean_matrix.normalized, &dir.join("class_mean_matrix.csv"))?;
    }
    if config.diagnostics.export_embeddings {
        write_embeddings_csv(&embeddings, dataset.labels(), &dir.join("embeddings.csv"))?;
    }
    log::info!(
        "effective rank of class means {:.4}, max class-mean squared dot {:.4e}",
        report.effective_rank,
        report.max_class_mean_squared_dot
    );
    Ok(())
}

pub fn cmd_gen_data(config_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = match config_path {
        Some(path) => match RunConfig::load(path)?.dataset {
            DatasetSource::Synthetic(spec) => spec,
            _ => return Err(CliError::Config("gen-data needs a synthetic dataset source".into())),
        },
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let dataset = generate_synthetic(&spec);
    if dataset.is_empty() {
        return Err(CliError::Data("synthetic spec produces no samples".into()));
    }
    write_records(&dataset, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    pub dim: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            trials: 1000,
            seed: 0,
            dim: 8,
        }
    }
}

/// Dimensions covered by the orthogonal-set bound checks.
pub const ORTHOGONALITY_DIMS: std::ops::RangeInclusive<usize> = 3..=16;
pub const ORTHOGONALITY_CONSTRUCTIONS: usize = 100;
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-9;
pub const JL_DISTORTION: f64 = 0.5;
pub const JL_RANDOM_POINTS: usize = 50;
pub const JL_RANDOM_DIM: usize = 10;
pub const JL_ORTHOGONAL_POINTS: usize = 16;
/// Fraction of pairs that must meet each JL bound.
pub const JL_REQUIRED_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalitySuite {
    pub tolerance: f64,
    /// Random bases with decoys; none may exceed its dimension.
    pub constructions: Vec<OrthogonalityBound>,
    /// Plain orthonormal bases; each must report exactly its dimension.
    pub bases: Vec<OrthogonalityBound>,
}

impl OrthogonalitySuite {
    pub fn holds(&self) -> bool {
        self.constructions.iter().all(|c| c.bound_holds)
            && self.bases.iter().all(|b| b.max_mutually_orthogonal_size == b.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlSuite {
    pub distortion: f64,
    pub constant: f64,
    pub random_target_dim: usize,
    /// Random unit vectors: squared-distance distortion bound.
    pub random: JlCheck,
    pub orthogonal_target_dim: usize,
    /// Orthonormal inputs: projected dot-product bound.
    pub orthogonal: JlCheck,
}

impl JlSuite {
    pub fn holds(&self) -> bool {
        self.random.distance_fraction() >= JL_REQUIRED_FRACTION && self.orthogonal.dot_fraction() >= JL_REQUIRED_FRACTION
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub semimetric: SemiMetricReport,
    pub orthogonality: OrthogonalitySuite,
    pub jl: JlSuite,
}

impl VerifyReport {
    /// Names of the failed properties; empty when the suite passes.
    pub fn failures(&self) -> Vec<&'static str> {
        let s = &self.semimetric;
        let mut failed = Vec::new();
        if s.nonnegativity_violations > 0 {
            failed.push("non-negativity");
        }
        if s.symmetry_violations > 0 {
            failed.push("symmetry");
        }
        if s.identity_violations > 0 {
            failed.push("identity of indiscernibles");
        }
        if s.triangle_violation_count == 0 {
            failed.push("expected triangle-inequality violation not found");
        }
        if !self.orthogonality.holds() {
            failed.push("orthogonal-set size bound");
        }
        if !self.jl.holds() {
            failed.push("JL projection bounds");
        }
        failed
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    use rand::Rng;
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Runs every property check. Deterministic in `config.seed`.
pub fn run_verification(config: &VerifyConfig) -> Result<VerifyReport, CliError> {
    if !(config.epsilon > 0.0 && config.epsilon.is_finite()) {
        return Err(CliError::Config(format!("epsilon must be positive, got {}", config.epsilon)));
    }
    if config.dim < 2 {
        return Err(CliError::Config(format!("dim must be at least 2, got {}", config.dim)));
    }
    let property = |e: crate::semimetric::SemiMetricError| CliError::Property(e.to_string());

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let semimetric = verify_semimetric(&mut rng, config.dim, config.trials, config.epsilon);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let dims: Vec<usize> = ORTHOGONALITY_DIMS.collect();
    let mut constructions = Vec::with_capacity(ORTHOGONALITY_CONSTRUCTIONS);
    for i in 0..ORTHOGONALITY_CONSTRUCTIONS {
        let n = dims[i % dims.len()];
        let vectors = orthogonal_construction(&mut rng, n, 4);
        constructions.push(verify_orthogonality_bound(&vectors, ORTHOGONALITY_TOLERANCE).map_err(property)?);
    }
    let mut bases = Vec::with_capacity(dims.len());
    for &n in &dims {
        let raw: Vec<Vec<f64>> = (0..n).map(|_| unit_gaussian(&mut rng, n)).collect();
        bases.push(verify_orthogonality_bound(&gram_schmidt(&raw), ORTHOGONALITY_TOLERANCE).map_err(property)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let points: Vec<Vec<f64>> = (0..JL_RANDOM_POINTS).map(|_| unit_gaussian(&mut rng, JL_RANDOM_DIM)).collect();
    let (projected, random_projector) =
        jl_project(&points, JL_DISTORTION, DEFAULT_JL_CONSTANT, config.seed).map_err(property)?;
    let random = check_jl(&points, &projected, JL_DISTORTION);
    let raw: Vec<Vec<f64>> = (0..JL_ORTHOGONAL_POINTS)
        .map(|_| unit_gaussian(&mut rng, JL_ORTHOGONAL_POINTS))
        .collect();
    let basis = gram_schmidt(&raw);
    let (projected, orthogonal_projector) =
        jl_project(&basis, JL_DISTORTION, DEFAULT_JL_CONSTANT, config.seed.wrapping_add(1)).map_err(property)?;
    let orthogonal = check_jl(&basis, &projected, JL_DISTORTION);

    Ok(VerifyReport {
        config: *config,
        semimetric,
        orthogonality: OrthogonalitySuite {
            tolerance: ORTHOGONALITY_TOLERANCE,
            constructions,
            bases,
        },
        jl: JlSuite {
            distortion: JL_DISTORTION,
            constant: DEFAULT_JL_CONSTANT,
            random_target_dim: random_projector.target_dim,
            random,
            orthogonal_target_dim: orthogonal_projector.target_dim,
            orthogonal,
        },
    })
}

/// Runs the suite, writes `verify.json` under `out` if given, and fails with
/// the names of any broken properties.
pub fn cmd_verify(config: &VerifyConfig, out: Option<&Path>) -> Result<VerifyReport, CliError> {
    let report = run_verification(config)?;
    let json = to_json(&report);
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join("verify.json"), &json)?;
        }
        None => print!("{json}"),
    }
    if let Some(w) = report.semimetric.witness() {
        log::info!("witness triple: {:e} > {:e} (ratio {:e})", w.lhs, w.rhs, w.ratio());
    }
    let failures = report.failures();
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Property(failures.join(", ")))
    }
}
