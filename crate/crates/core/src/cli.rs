//! Command-line front end: `strata-sgd cluster|train|compare|variance|verify`.
//!
//! Settings come from an optional JSON file (`--config`), overridden by
//! flags, with dataset presets filling whatever is still missing. Relative
//! data paths that do not exist are looked up under `$STRATA_SGD_DATA`.
//!
//! Exit statuses: 0 success, 2 usage, 3 input or parse failure, 4 invalid
//! settings, 5 divergence, 6 a bound check failed.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    check_lemma1, check_theorem1, check_theorem2, empirical_variance, exact_stratified_variance,
    exact_uniform_variance, AnalysisError, BoundTrace, CheckConfig, VarianceReport,
};
use crate::data::{align, parse_libsvm, DataError, Dataset};
use crate::objective::{LogisticObjective, Matrix, Model};
use crate::sampling::{RngState, Sampler};
use crate::sgd::{run_from, run_seeds, aggregate, RunConfig, RunMetrics, SamplerKind, SgdError, StepSchedule};
use crate::strata::{
    neyman_allocation, per_class_kmeans, refine_weighted, Allocation, KMeansParams, StrataError, Stratification,
};
use crate::synthetic::random_quadratic;

pub const DATA_ENV: &str = "STRATA_SGD_DATA";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Data { path: PathBuf, source: DataError },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("invalid settings: {0}")]
    Validation(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("bound check failed: {0}")]
    BoundFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data { .. } | CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Validation(_) => 4,
            CliError::Divergence(_) => 5,
            CliError::BoundFailed(_) => 6,
        }
    }
}

impl From<StrataError> for CliError {
    fn from(e: StrataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SgdError> for CliError {
    fn from(e: SgdError) -> Self {
        match e {
            SgdError::Diverged { .. } | SgdError::NonFiniteGradient { .. } => CliError::Divergence(e.to_string()),
            SgdError::Seed { ref source, .. }
                if matches!(**source, SgdError::Diverged { .. } | SgdError::NonFiniteGradient { .. }) =>
            {
                CliError::Divergence(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::NonFinite(_) => CliError::Divergence(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

/// Benchmark settings of a named dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub train_file: &'static str,
    pub test_file: &'static str,
    pub classes: usize,
    pub batch: usize,
    pub lambda: f64,
}

pub const PRESETS: [Preset; 5] = [
    Preset {
        name: "covtype",
        train_file: "covtype.binary",
        test_file: "covtype.binary.t",
        classes: 2,
        batch: 10,
        lambda: 1e-5,
    },
    Preset {
        name: "letter",
        train_file: "letter.scale",
        test_file: "letter.scale.t",
        classes: 26,
        batch: 26,
        lambda: 1e-4,
    },
    Preset {
        name: "mnist",
        train_file: "mnist.scale",
        test_file: "mnist.scale.t",
        classes: 10,
        batch: 10,
        lambda: 1e-4,
    },
    Preset {
        name: "pendigits",
        train_file: "pendigits",
        test_file: "pendigits.t",
        classes: 10,
        batch: 13,
        lambda: 1e-3,
    },
    Preset {
        name: "usps",
        train_file: "usps",
        test_file: "usps.t",
        classes: 10,
        batch: 48,
        lambda: 1e-3,
    },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

#[derive(Debug, Parser)]
#[command(name = "strata-sgd", version, about = "Minibatch SGD with stratified sampling over label-pure clusters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cluster the training set and write the stratification and allocation.
    Cluster(ExperimentArgs),
    /// Train one sampler for each seed and write its metrics.
    Train(ExperimentArgs),
    /// Train uniform and stratified SGD on every seed and compare them.
    Compare(ExperimentArgs),
    /// Exact (and optionally sampled) estimator variance at a model.
    Variance(VarianceArgs),
    /// Check a convergence bound on a synthetic quadratic.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerArg {
    Uniform,
    Stratified,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Uniform => SamplerKind::Uniform,
            SamplerArg::Stratified => SamplerKind::Stratified,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// JSON settings file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Benchmark preset: covtype, letter, mnist, pendigits or usps.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Number of label-pure clusters k (default: min(2m, b)).
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated run seeds (default 1,2,3,4,5).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub save_strat: Option<PathBuf>,
    #[arg(long)]
    pub load_strat: Option<PathBuf>,
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    #[arg(long)]
    pub load_model: Option<PathBuf>,
    /// Sampler for `train` (default stratified).
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    /// `inverse-lambda`, `constant:ETA` or `a-plus-ht:A,H`.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Seed for k-means seeding.
    #[arg(long)]
    pub cluster_seed: Option<u64>,
    /// Passes of the weighted refinement after k-means (0 disables it).
    #[arg(long)]
    pub refine_passes: Option<usize>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    /// Record metrics every this many epochs.
    #[arg(long)]
    pub metric_every: Option<usize>,
    #[arg(long)]
    pub divergence_factor: Option<f64>,
    /// Write zero in the `wall_ms` column.
    #[arg(long)]
    pub no_wall_time: bool,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub dataset: Option<String>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub batch: Option<usize>,
    pub clusters: Option<usize>,
    pub epochs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub sampler: Option<SamplerArg>,
    pub schedule: Option<String>,
    pub cluster_seed: Option<u64>,
    pub refine_passes: Option<usize>,
    pub kmeans_iters: Option<usize>,
    pub metric_every: Option<usize>,
    pub divergence_factor: Option<f64>,
    pub record_wall_time: Option<bool>,
    pub save_strat: Option<PathBuf>,
    pub load_strat: Option<PathBuf>,
    pub save_model: Option<PathBuf>,
    pub load_model: Option<PathBuf>,
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: Option<String>,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub lambda: f64,
    pub batch: usize,
    /// `None` means `min(2m, b)` once `m` is known.
    pub clusters: Option<usize>,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub sampler: SamplerKind,
    pub schedule: StepSchedule,
    pub cluster_seed: u64,
    pub refine_passes: usize,
    pub kmeans_iters: usize,
    pub metric_every: usize,
    pub divergence_factor: f64,
    pub record_wall_time: bool,
    pub save_strat: Option<PathBuf>,
    pub load_strat: Option<PathBuf>,
    pub save_model: Option<PathBuf>,
    pub load_model: Option<PathBuf>,
}

pub fn parse_schedule(spec: &str, lambda: f64) -> Result<StepSchedule, CliError> {
    let bad = || CliError::Usage(format!("unrecognized schedule `{spec}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let schedule = match spec.split_once(':') {
        None if spec == "inverse-lambda" => StepSchedule::InverseLambdaT { lambda },
        Some(("constant", eta)) => StepSchedule::Constant { eta: num(eta)? },
        Some(("a-plus-ht", rest)) => {
            let (a, h) = rest.split_once(',').ok_or_else(bad)?;
            StepSchedule::InverseAPlusHt { a: num(a)?, h: num(h)? }
        }
        _ => return Err(bad()),
    };
    schedule.validate()?;
    Ok(schedule)
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// `path` itself if it exists or is absolute, else `$STRATA_SGD_DATA/path`.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    let joined = data_dir().join(path);
    if joined.exists() {
        joined
    } else {
        path.to_path_buf()
    }
}

impl ExperimentConfig {
    pub fn resolve(args: &ExperimentArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                    path: path.clone(),
                    source,
                })?;
                serde_json::from_str::<ConfigFile>(&text).map_err(|e| CliError::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })?
            }
            None => ConfigFile::default(),
        };
        let dataset = args.dataset.clone().or(file.dataset);
        let preset = match &dataset {
            Some(name) => Some(preset(name).ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
                CliError::Usage(format!("unknown dataset `{name}` (known: {})", names.join(", ")))
            })?),
            None => None,
        };
        let train = args
            .train
            .clone()
            .or(file.train)
            .or_else(|| preset.map(|p| data_dir().join(p.train_file)))
            .ok_or_else(|| CliError::Usage("a training file is required (--train or --dataset)".into()))?;
        let test = args
            .test
            .clone()
            .or(file.test)
            .or_else(|| preset.map(|p| data_dir().join(p.test_file)));
        let lambda = args
            .lambda
            .or(file.lambda)
            .or(preset.map(|p| p.lambda))
            .ok_or_else(|| CliError::Usage("λ is required (--lambda or --dataset)".into()))?;
        let batch = args
            .batch
            .or(file.batch)
            .or(preset.map(|p| p.batch))
            .ok_or_else(|| CliError::Usage("minibatch size is required (--batch or --dataset)".into()))?;
        let schedule = match args.schedule.as_deref().or(file.schedule.as_deref()) {
            Some(spec) => parse_schedule(spec, lambda)?,
            None => StepSchedule::InverseLambdaT { lambda },
        };
        let config = Self {
            dataset,
            train: resolve_data_path(&train),
            test: test.as_deref().map(resolve_data_path),
            lambda,
            batch,
            clusters: args.clusters.or(file.clusters),
            epochs: args.epochs.or(file.epochs).unwrap_or(20),
            seeds: args.seeds.clone().or(file.seeds).unwrap_or_else(|| vec![1, 2, 3, 4, 5]),
            out: args.out.clone().or(file.out),
            sampler: args.sampler.or(file.sampler).unwrap_or(SamplerArg::Stratified).into(),
            schedule,
            cluster_seed: args.cluster_seed.or(file.cluster_seed).unwrap_or(1),
            refine_passes: args.refine_passes.or(file.refine_passes).unwrap_or(10),
            kmeans_iters: args.kmeans_iters.or(file.kmeans_iters).unwrap_or(100),
            metric_every: args.metric_every.or(file.metric_every).unwrap_or(1),
            divergence_factor: args.divergence_factor.or(file.divergence_factor).unwrap_or(1e3),
            record_wall_time: !args.no_wall_time && file.record_wall_time.unwrap_or(true),
            save_strat: args.save_strat.clone().or(file.save_strat),
            load_strat: args.load_strat.clone().or(file.load_strat),
            save_model: args.save_model.clone().or(file.save_model),
            load_model: args.load_model.clone().or(file.load_model),
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("λ must be positive, got {}", self.lambda));
        }
        if self.batch == 0 {
            return bad("minibatch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.clusters == Some(0) {
            return bad("k must be at least 1".into());
        }
        if self.kmeans_iters == 0 {
            return bad("k-means needs at least one iteration".into());
        }
        self.run_config(SamplerKind::Uniform, 1).validate()?;
        Ok(())
    }

    /// Number of clusters for a training set with `m` classes.
    pub fn cluster_count(&self, m: usize) -> usize {
        self.clusters.unwrap_or((2 * m).min(self.batch).max(m))
    }

    pub fn run_config(&self, sampler: SamplerKind, seed: u64) -> RunConfig {
        RunConfig {
            sampler,
            batch: self.batch,
            lambda: self.lambda,
            schedule: self.schedule,
            epochs: self.epochs,
            seed,
            metric_every: self.metric_every,
            divergence_factor: self.divergence_factor,
            record_wall_time: self.record_wall_time,
        }
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            seed: self.cluster_seed,
            max_iters: self.kmeans_iters,
            ..KMeansParams::default()
        }
    }

    fn out_dir(&self) -> Result<Option<&Path>, CliError> {
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir).map_err(|source| CliError::Io {
                path: dir.clone(),
                source,
            })?;
        }
        Ok(self.out.as_deref())
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = fs::File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_libsvm(BufReader::new(file)).map_err(|source| CliError::Data {
        path: path.to_path_buf(),
        source,
    })
}

/// Training set and (aligned) test set. Without a test file the training set doubles as test set.
pub fn load_pair(config: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let train = load_dataset(&config.train)?;
    match &config.test {
        Some(path) => {
            let test = load_dataset(path)?;
            align(train, test).map_err(|source| CliError::Data {
                path: path.clone(),
                source,
            })
        }
        None => Ok((train.clone(), train)),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Model checkpoint: `weights` holds the `classes × dim` matrix row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub classes: usize,
    pub dim: usize,
    pub lambda: f64,
    pub weights: Vec<f64>,
}

impl From<&Model> for ModelFile {
    fn from(m: &Model) -> Self {
        Self {
            classes: m.classes(),
            dim: m.dim(),
            lambda: m.lambda,
            weights: m.weights.as_slice().to_vec(),
        }
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), CliError> {
    let json = serde_json::to_string(&ModelFile::from(model)).expect("model serializes");
    write_file(path, &json)
}

pub fn load_model(path: &Path) -> Result<Model, CliError> {
    let text = read_file(path)?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if file.weights.len() != file.classes * file.dim || file.weights.iter().any(|w| !w.is_finite()) {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} finite weights", file.classes * file.dim),
        });
    }
    Ok(Model {
        weights: Matrix::from_vec(file.classes, file.dim, file.weights),
        lambda: file.lambda,
    })
}

/// Stratification and allocation written by `cluster`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationFile {
    pub batch: usize,
    pub quotas: Vec<usize>,
    pub objective: f64,
    pub surrogate_variance: f64,
}

/// Loads `--load-strat` or clusters the training set.
pub fn stratify(config: &ExperimentConfig, train: &Dataset) -> Result<Stratification, CliError> {
    let m = train.num_classes();
    let k = config.cluster_count(m);
    if k < m {
        return Err(StrataError::TooFewClusters { k, m }.into());
    }
    if let Some(path) = &config.load_strat {
        let strat = Stratification::from_json(&read_file(path)?).map_err(|e| CliError::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        strat.validate(train).map_err(|e| CliError::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        return Ok(strat);
    }
    let strat = per_class_kmeans(train, k, &config.kmeans_params())?;
    let strat = if config.refine_passes > 0 {
        refine_weighted(&strat, train, config.refine_passes)?
    } else {
        strat
    };
    if let Some(path) = &config.save_strat {
        write_file(path, &strat.to_json())?;
    }
    Ok(strat)
}

/// `cluster`: builds the stratification and, when `b ≥ k`, its Neyman allocation.
pub fn cmd_cluster(config: &ExperimentConfig) -> Result<(Stratification, Option<Allocation>), CliError> {
    let train = load_dataset(&config.train)?;
    let strat = stratify(config, &train)?;
    let alloc = if config.batch >= strat.num_clusters() {
        Some(neyman_allocation(&strat, config.batch)?)
    } else {
        None
    };
    if let Some(dir) = config.out_dir()? {
        write_file(&dir.join("strata.json"), &strat.to_json())?;
        if let Some(a) = &alloc {
            let file = AllocationFile {
                batch: config.batch,
                quotas: a.quotas().to_vec(),
                objective: strat.objective(),
                surrogate_variance: strat.surrogate_variance(a.quotas()),
            };
            write_file(
                &dir.join("allocation.json"),
                &serde_json::to_string_pretty(&file).expect("allocation serializes"),
            )?;
        }
    }
    Ok((strat, alloc))
}

fn sampler_name(kind: SamplerKind) -> &'static str {
    match kind {
        SamplerKind::Uniform => "uniform",
        SamplerKind::Stratified => "stratified",
    }
}

fn strata_for(
    config: &ExperimentConfig,
    kind: SamplerKind,
    train: &Dataset,
) -> Result<Option<(Stratification, Allocation)>, CliError> {
    if kind == SamplerKind::Uniform {
        return Ok(None);
    }
    let strat = stratify(config, train)?;
    let alloc = neyman_allocation(&strat, config.batch)?;
    Ok(Some((strat, alloc)))
}

/// `train`: one sampler, every seed. Returns the per-seed metrics.
pub fn cmd_train(config: &ExperimentConfig) -> Result<Vec<(u64, RunMetrics)>, CliError> {
    let (train, test) = load_pair(config)?;
    let strata = strata_for(config, config.sampler, &train)?;
    let init = config.load_model.as_deref().map(load_model).transpose()?;
    let out = config.out_dir()?;
    let name = sampler_name(config.sampler);
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let rc = config.run_config(config.sampler, seed);
        let outcome = run_from(
            &rc,
            &train,
            &test,
            strata.as_ref().map(|(s, a)| (s, a)),
            init.as_ref(),
        )
        .map_err(|e| SgdError::Seed {
            seed,
            source: Box::new(e),
        })?;
        if let Some(dir) = out {
            write_file(&dir.join(format!("{name}_seed{seed}.csv")), &outcome.metrics.to_csv())?;
        }
        if let Some(path) = &config.save_model {
            let model = Model {
                weights: Matrix::from_vec(train.num_classes(), train.dim(), outcome.weights.clone()),
                lambda: config.lambda,
            };
            let path = if config.seeds.len() > 1 {
                path.with_extension(format!("seed{seed}.json"))
            } else {
                path.clone()
            };
            save_model(&model, &path)?;
        }
        results.push((seed, outcome.metrics));
    }
    Ok(results)
}

/// Outcome of one sampler in `compare`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerSummary {
    pub sampler: SamplerKind,
    pub completed_seeds: Vec<u64>,
    /// `(seed, error message)` for runs that aborted.
    pub failures: Vec<(u64, String)>,
    #[serde(skip)]
    pub per_seed: Vec<(u64, RunMetrics)>,
    #[serde(skip)]
    pub mean: RunMetrics,
    #[serde(skip)]
    pub std: RunMetrics,
    pub final_objective: Option<f64>,
    pub final_test_error: Option<f64>,
    pub final_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub config: ExperimentConfig,
    pub clusters: usize,
    pub quotas: Vec<usize>,
    pub samplers: Vec<SamplerSummary>,
    /// Stratified mean variance strictly below uniform at every recorded epoch.
    pub variance_below_every_epoch: bool,
    /// Stratified mean objective at most uniform's at every recorded epoch ≥ 5.
    pub objective_not_above_from_epoch5: bool,
}

impl CompareSummary {
    pub fn sampler(&self, kind: SamplerKind) -> Option<&SamplerSummary> {
        self.samplers.iter().find(|s| s.sampler == kind)
    }
}

/// `compare`: uniform and stratified SGD on every seed.
///
/// A seed that diverges is recorded in the summary while the others run on.
pub fn cmd_compare(config: &ExperimentConfig) -> Result<CompareSummary, CliError> {
    let (train, test) = load_pair(config)?;
    let Some((strat, alloc)) = strata_for(config, SamplerKind::Stratified, &train)? else {
        unreachable!("stratified sampler always yields strata")
    };
    let out = config.out_dir()?;
    let mut samplers = Vec::new();
    for kind in [SamplerKind::Uniform, SamplerKind::Stratified] {
        let rc = config.run_config(kind, 0);
        let strata = (kind == SamplerKind::Stratified).then_some((&strat, &alloc));
        let mut per_seed = Vec::new();
        let mut failures = Vec::new();
        for (seed, res) in run_seeds(&rc, &train, &test, strata, &config.seeds) {
            match res {
                Ok(o) => per_seed.push((seed, o.metrics)),
                Err(e @ (SgdError::Diverged { .. } | SgdError::NonFiniteGradient { .. })) => {
                    failures.push((seed, e.to_string()))
                }
                Err(e) => return Err(e.into()),
            }
        }
        let (mean, std) = aggregate(&per_seed);
        let name = sampler_name(kind);
        if let Some(dir) = out {
            for (seed, m) in &per_seed {
                write_file(&dir.join(format!("{name}_seed{seed}.csv")), &m.to_csv())?;
            }
            if !per_seed.is_empty() {
                write_file(&dir.join(format!("{name}_mean.csv")), &mean.to_csv())?;
                write_file(&dir.join(format!("{name}_std.csv")), &std.to_csv())?;
            }
        }
        let last = mean.last().cloned();
        samplers.push(SamplerSummary {
            sampler: kind,
            completed_seeds: per_seed.iter().map(|(s, _)| *s).collect(),
            failures,
            per_seed,
            mean,
            std,
            final_objective: last.as_ref().map(|r| r.objective),
            final_test_error: last.as_ref().map(|r| r.test_error),
            final_variance: last.as_ref().map(|r| r.variance),
        });
    }
    let (u, s) = (&samplers[0].mean, &samplers[1].mean);
    let complete = !u.records.is_empty() && u.records.len() == s.records.len();
    let variance_below_every_epoch = complete && u.records.iter().zip(&s.records).all(|(a, b)| b.variance < a.variance);
    let objective_not_above_from_epoch5 = complete
        && u.records
            .iter()
            .zip(&s.records)
            .filter(|(a, _)| a.epoch >= 5)
            .all(|(a, b)| b.objective <= a.objective);
    let summary = CompareSummary {
        config: config.clone(),
        clusters: strat.num_clusters(),
        quotas: alloc.quotas().to_vec(),
        samplers,
        variance_below_every_epoch,
        objective_not_above_from_epoch5,
    };
    if let Some(dir) = out {
        write_file(
            &dir.join("summary.json"),
            &serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, Args)]
pub struct VarianceArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Monte Carlo draws per estimator (0 skips sampling).
    #[arg(long, default_value_t = 0)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// `variance`: exact variances of both estimators at the loaded (or zero) model.
pub fn cmd_variance(args: &VarianceArgs) -> Result<VarianceReport, CliError> {
    let config = ExperimentConfig::resolve(&args.experiment)?;
    let train = load_dataset(&config.train)?;
    let model = match &config.load_model {
        Some(path) => {
            let model = load_model(path)?;
            if (model.classes(), model.dim()) != (train.num_classes(), train.dim()) {
                return Err(CliError::Validation(format!(
                    "model is {}x{} but the data needs {}x{}",
                    model.classes(),
                    model.dim(),
                    train.num_classes(),
                    train.dim()
                )));
            }
            model
        }
        None => Model::zeros(train.num_classes(), train.dim(), config.lambda),
    };
    let strat = stratify(&config, &train)?;
    let alloc = neyman_allocation(&strat, config.batch)?;
    let exact_stratified = exact_stratified_variance(&model, &strat, &alloc, &train)?;
    let exact_uniform = exact_uniform_variance(&model, &train, config.batch);
    let (mut empirical_stratified, mut empirical_uniform) = (None, None);
    if args.draws > 0 {
        if args.draws < 2 {
            return Err(CliError::Validation("Monte Carlo needs at least two draws".into()));
        }
        let obj = LogisticObjective::new(&train, model.lambda);
        let w = model.weights.as_slice();
        let strat_sampler = Sampler::stratified(strat.clusters(), alloc.quotas()).map_err(SgdError::from)?;
        let uni_sampler = Sampler::uniform(train.len(), config.batch).map_err(SgdError::from)?;
        let mut rng = RngState::from_seed(args.seed);
        empirical_stratified = Some(
            empirical_variance(&obj, w, |r| strat_sampler.draw(r), args.draws, &mut rng).map_err(SgdError::from)?,
        );
        empirical_uniform = Some(
            empirical_variance(&obj, w, |r| uni_sampler.draw(r), args.draws, &mut rng).map_err(SgdError::from)?,
        );
    }
    let report = VarianceReport {
        exact_stratified,
        exact_uniform,
        empirical_stratified,
        empirical_uniform,
    };
    if let Some(dir) = config.out_dir()? {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(&dir.join("variance.json"), &json)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundArg {
    Theorem1,
    Theorem2,
    Lemma1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    /// Singleton strata, one draw each: `V_t = 0`.
    Zero,
    /// Uniform draws with `--batch`.
    Uniform,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub bound: BoundArg,
    /// Strong-convexity (and smoothness) constant `H`; `gamma = 1/H`.
    #[arg(long, default_value_t = 1.0)]
    pub h: f64,
    /// Constant step (theorem2, lemma1). Defaults: 0.5 for theorem2, gamma for lemma1.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Offset `a` in `1/(a + H t)` (theorem1; lemma1 when given).
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    /// Steps `T` (default 100, or 1000 for theorem1).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Anchors are drawn as `offset + N(0, I)`.
    #[arg(long, default_value_t = 3.0)]
    pub offset: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = NoiseArg::Zero)]
    pub noise: NoiseArg,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub slack: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `verify`: errors with [`CliError::BoundFailed`] when any step violates the bound.
pub fn cmd_verify(args: &VerifyArgs) -> Result<BoundTrace, CliError> {
    if args.n == 0 || args.d == 0 {
        return Err(CliError::Validation("n and d must be positive".into()));
    }
    if !(args.h > 0.0 && args.h.is_finite()) {
        return Err(CliError::Validation("H must be positive".into()));
    }
    let problem = random_quadratic(args.n, args.d, args.h, args.offset, args.seed);
    let steps = args
        .steps
        .unwrap_or(if args.bound == BoundArg::Theorem1 { 1000 } else { 100 });
    let mut check = CheckConfig::zero_variance(args.n, steps);
    check.seed = args.seed;
    check.slack = args.slack;
    check.replicates = args.replicates;
    if args.noise == NoiseArg::Uniform {
        check.clusters = None;
        check.batch = args.batch;
    }
    let trace = match args.bound {
        BoundArg::Theorem2 => check_theorem2(&problem, args.eta.unwrap_or(0.5), &check)?,
        BoundArg::Theorem1 => check_theorem1(&problem, args.a.unwrap_or(1.0), &check)?,
        BoundArg::Lemma1 => {
            let schedule = match (args.eta, args.a) {
                (Some(eta), _) => StepSchedule::Constant { eta },
                (None, Some(a)) => StepSchedule::InverseAPlusHt { a, h: args.h },
                (None, None) => StepSchedule::Constant { eta: problem.gamma() },
            };
            check_lemma1(&problem, &schedule, &check)?
        }
    };
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        let name = match args.bound {
            BoundArg::Theorem1 => "theorem1",
            BoundArg::Theorem2 => "theorem2",
            BoundArg::Lemma1 => "lemma1",
        };
        write_file(&dir.join(format!("{name}.csv")), &trace.to_csv())?;
    }
    match trace.first_failure() {
        None => Ok(trace),
        Some(row) => Err(CliError::BoundFailed(format!(
            "step {}: lhs {:.6e} exceeds bound {:.6e}",
            row.step, row.lhs, row.bound
        ))),
    }
}

fn print_compare(summary: &CompareSummary) {
    for s in &summary.samplers {
        println!(
            "{:<10} seeds ok {:?} failed {:?} final objective {:?} test_error {:?} variance {:?}",
            sampler_name(s.sampler),
            s.completed_seeds,
            s.failures.iter().map(|f| f.0).collect::<Vec<_>>(),
            s.final_objective,
            s.final_test_error,
            s.final_variance
        );
    }
    println!(
        "stratified variance below uniform at every epoch: {}",
        summary.variance_below_every_epoch
    );
    println!(
        "stratified objective not above uniform from epoch 5: {}",
        summary.objective_not_above_from_epoch5
    );
}

/// Parses `args` and runs the chosen subcommand.
pub fn run_cli<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Cluster(a) => ExperimentConfig::resolve(a).and_then(|c| {
            let (strat, alloc) = cmd_cluster(&c)?;
            println!("clusters: {}", strat.num_clusters());
            println!("objective: {:.16e}", strat.objective());
            match &alloc {
                Some(a) => {
                    println!("allocation (b = {}): {:?}", c.batch, a.quotas());
                    println!("surrogate variance: {:.16e}", strat.surrogate_variance(a.quotas()));
                }
                None => println!("no allocation: b = {} is below k = {}", c.batch, strat.num_clusters()),
            }
            Ok(())
        }),
        Command::Train(a) => ExperimentConfig::resolve(a).and_then(|c| {
            for (seed, metrics) in cmd_train(&c)? {
                if let Some(last) = metrics.last() {
                    println!(
                        "seed {seed}: epoch {} objective {:.16e} test_error {:.16e} variance {:.16e}",
                        last.epoch, last.objective, last.test_error, last.variance
                    );
                }
            }
            Ok(())
        }),
        Command::Compare(a) => ExperimentConfig::resolve(a).and_then(|c| {
            let summary = cmd_compare(&c)?;
            print_compare(&summary);
            match summary.samplers.iter().find(|s| !s.failures.is_empty()) {
                Some(s) => Err(CliError::Divergence(format!(
                    "{} sampler: {} seed(s) aborted",
                    sampler_name(s.sampler),
                    s.failures.len()
                ))),
                None => Ok(()),
            }
        }),
        Command::Variance(a) => cmd_variance(a).map(|report| {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }),
        Command::Verify(a) => cmd_verify(a).map(|trace| {
            println!(
                "{:?}: {} steps, {} replicate(s), H = {}, gamma = {}{}",
                trace.kind,
                trace.rows.len(),
                trace.replicates,
                trace.strength,
                trace.gamma,
                trace.alpha.map(|a| format!(", alpha = {a}")).unwrap_or_default()
            );
            println!("pass");
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
