//! Command-line front end. Every command reads one TOML run configuration,
//! resolves CLI overrides into it, and stamps the SHA-256 digest of the
//! resolved configuration into each file it writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::{self, derive_seed, BenchmarkSpec, EvaluationReport, SeedStream};
use crate::conformal::{CalibrationSample, Calibrator, ScoredCalibration, Weighting};
use crate::context::{ContextBox, SystemContext, CONTEXT_DIM};
use crate::cost_model::{DnnProfile, ObjectiveWeights, PowerModel, Slowdown, SystemModel};
use crate::decision::{NeurosurgeonRegression, Strategy};
use crate::error::Error;
use crate::par::Parallelism;
use crate::predictor::{PredictorModel, TrainingConfig};
use crate::shift::{self, GaussianDensity};
use crate::simulator::{
    self, CarbonTrace, DatasetRow, RandomWalk, ScenarioComponents, ScenarioConfig, ScenarioReport,
    TracePattern,
};

pub const EXIT_INVALID_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

pub const TRAINING_FILE: &str = "training.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const REGRESSION_FILE: &str = "neurosurgeon.json";
pub const TRAINING_REPORT_FILE: &str = "training_report.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const REPLAY_COMPARISON_FILE: &str = "replay_comparison.csv";

/// Failure carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_context(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", path.display()),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "carbon-split",
    version,
    about = "Carbon-aware DNN partitioning with conformal uncertainty"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write training, calibration and test datasets plus a manifest.
    Generate(GenerateArgs),
    /// Fit the surrogate and the regression baseline on a generated dataset.
    Train(TrainArgs),
    /// Per-strategy error rate, coverage, interval size and regret.
    Evaluate(EvaluateArgs),
    /// Replay a time-series scenario once per strategy.
    Replay(ReplayArgs),
    /// Carbon-intensity trace utilities.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Fan dataset generation out across threads; output is unchanged.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory written by `generate`; defaults to `--out`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory written by `generate`; defaults to `--out`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory written by `train`; defaults to `--data`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Evaluate only this strategy.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate test points across threads; output is unchanged.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Strategies to replay (repeatable); the config's list when omitted.
    #[arg(long)]
    pub strategy: Vec<Strategy>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    /// Write a synthetic trace from the `[trace]` section.
    Synth(TraceSynthArgs),
    /// Check a trace CSV and print a JSON summary.
    Validate(TraceValidateArgs),
}

#[derive(Debug, Args)]
pub struct TraceSynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraceValidateArgs {
    pub path: PathBuf,
}

/// DNN profile: a built-in by name, or a custom layer table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// `resnet-like-12` or `toy-5` when `layers` is absent.
    pub name: String,
    pub input_size: Option<f64>,
    /// Rows of `[edge_latency_s, server_latency_s, output_size_mb]`.
    pub layers: Option<Vec<[f64; 3]>>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            name: "resnet-like-12".into(),
            input_size: None,
            layers: None,
        }
    }
}

impl ProfileConfig {
    pub fn resolve(&self) -> CliResult<DnnProfile> {
        match (&self.layers, self.input_size) {
            (Some(layers), Some(input)) => {
                let rows: Vec<(f64, f64, f64)> =
                    layers.iter().map(|r| (r[0], r[1], r[2])).collect();
                DnnProfile::from_table(&self.name, input, &rows)
                    .map_err(|e| CliError::config(format!("profile: {e}")))
            }
            (Some(_), None) => Err(CliError::config("profile: `layers` requires `input_size`")),
            (None, _) => match self.name.as_str() {
                "resnet-like-12" => Ok(DnnProfile::resnet_like()),
                "toy-5" => Ok(DnnProfile::toy_five_layer()),
                other => Err(CliError::config(format!(
                    "profile: unknown built-in `{other}` (expected resnet-like-12 or toy-5)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train_contexts: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub noise_rel_std: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train_contexts: 5000,
            n_calibration: 1000,
            n_test: 1000,
            noise_rel_std: 0.02,
        }
    }
}

/// Draws the test set from a Gaussian instead of the calibration box; the
/// evaluation then weights calibration scores by the likelihood ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Mean as fractional positions within the box, per covariate.
    pub toward: [f64; CONTEXT_DIM],
    #[serde(default = "default_shift_rel_std")]
    pub rel_std: f64,
}

fn default_shift_rel_std() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayWeighting {
    Exchangeable,
    /// Gaussian test density centred on the starting context.
    CovariateShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub duration: f64,
    pub tick: f64,
    pub walk: RandomWalk,
    pub initial: Option<SystemContext>,
    pub strategies: Vec<Strategy>,
    pub weighting: ReplayWeighting,
    pub shift_rel_std: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            duration: 86_400.0,
            tick: 86.4,
            walk: RandomWalk::default(),
            initial: None,
            strategies: vec![Strategy::Adaptive, Strategy::Neurosurgeon],
            weighting: ReplayWeighting::Exchangeable,
            shift_rel_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    /// CSV to load instead of synthesizing.
    pub path: Option<PathBuf>,
    pub pattern: TracePattern,
    pub base: f64,
    pub amplitude: f64,
    pub duration: f64,
    pub step: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            path: None,
            pattern: TracePattern::Diurnal,
            base: 400.0,
            amplitude: 250.0,
            duration: 86_400.0,
            step: 300.0,
        }
    }
}

fn default_box() -> ContextBox {
    ContextBox::default_benchmark()
}

/// The whole run configuration, after CLI overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    /// Strategies reported by `evaluate`.
    pub strategies: Vec<Strategy>,
    pub profile: ProfileConfig,
    pub power: PowerModel,
    pub slowdown: Slowdown,
    pub weights: ObjectiveWeights,
    #[serde(default = "default_box")]
    pub context_box: ContextBox,
    pub dataset: DatasetConfig,
    pub shift: Option<ShiftConfig>,
    pub training: TrainingConfig,
    pub scenario: ScenarioSection,
    pub trace: TraceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            alpha: 0.1,
            strategies: Strategy::ALL.to_vec(),
            profile: ProfileConfig::default(),
            power: PowerModel::default(),
            slowdown: Slowdown::default(),
            weights: ObjectiveWeights::default(),
            context_box: default_box(),
            dataset: DatasetConfig::default(),
            shift: None,
            training: TrainingConfig::default(),
            scenario: ScenarioSection::default(),
            trace: TraceConfig::default(),
        }
    }
}

/// The configuration fields that determine generated datasets.
#[derive(Serialize)]
struct DataIdentity<'a> {
    seed: u64,
    system: &'a SystemModel,
    weights: &'a ObjectiveWeights,
    context_box: &'a ContextBox,
    dataset: &'a DatasetConfig,
    shift: &'a Option<ShiftConfig>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: Error| CliError::config(e.to_string());
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        self.system()?;
        self.weights.validate().map_err(bad)?;
        self.context_box.validate().map_err(bad)?;
        self.training.validate().map_err(bad)?;
        self.spec()?.validate().map_err(bad)?;
        if let Some(s) = &self.shift {
            if !(s.rel_std.is_finite() && s.rel_std > 0.0) {
                return Err(CliError::config("shift.rel_std must be > 0"));
            }
            if s.toward.iter().any(|f| !f.is_finite()) {
                return Err(CliError::config("shift.toward must be finite"));
            }
        }
        if self.strategies.is_empty() {
            return Err(CliError::config("`strategies` must not be empty"));
        }
        self.scenario_config().validate().map_err(bad)?;
        if !(self.scenario.shift_rel_std.is_finite() && self.scenario.shift_rel_std > 0.0) {
            return Err(CliError::config("scenario.shift_rel_std must be > 0"));
        }
        if let Some(init) = &self.scenario.initial {
            if !self.context_box.contains(init) {
                return Err(CliError::config(
                    "scenario.initial lies outside context_box",
                ));
            }
        }
        let t = &self.trace;
        if t.path.is_none() {
            if !(t.amplitude >= 0.0 && t.base >= t.amplitude && t.base.is_finite()) {
                return Err(CliError::config("trace needs 0 <= amplitude <= base"));
            }
            if !(t.step > 0.0 && t.duration >= 0.0 && t.duration.is_finite()) {
                return Err(CliError::config("trace needs step > 0 and duration >= 0"));
            }
        }
        Ok(())
    }

    pub fn system(&self) -> CliResult<SystemModel> {
        SystemModel::new(self.profile.resolve()?, self.power, self.slowdown)
            .map_err(|e| CliError::config(e.to_string()))
    }

    pub fn spec(&self) -> CliResult<BenchmarkSpec> {
        Ok(BenchmarkSpec {
            system: self.system()?,
            weights: self.weights,
            context_box: self.context_box,
            n_train_contexts: self.dataset.n_train_contexts,
            n_calibration: self.dataset.n_calibration,
            n_test: self.dataset.n_test,
            noise_rel_std: self.dataset.noise_rel_std,
            training: self.training.clone(),
            seed: self.seed,
        })
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            duration: self.scenario.duration,
            tick: self.scenario.tick,
            walk: self.scenario.walk,
            seed: derive_seed(self.seed, SeedStream::Scenario),
            weights: self.weights,
            alpha: self.alpha,
            initial: self.scenario.initial,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Digest over only the fields that determine the datasets.
    pub fn data_digest(&self) -> CliResult<String> {
        let system = self.system()?;
        let id = DataIdentity {
            seed: self.seed,
            system: &system,
            weights: &self.weights,
            context_box: &self.context_box,
            dataset: &self.dataset,
            shift: &self.shift,
        };
        Ok(sha256_hex(
            serde_json::to_string(&id).expect("serializes").as_bytes(),
        ))
    }

    fn shift_gaussian(&self) -> CliResult<Option<GaussianDensity>> {
        self.shift
            .as_ref()
            .map(|s| {
                benchmark::shifted_gaussian(&self.context_box, s.toward, s.rel_std)
                    .map_err(|e| CliError::config(format!("shift: {e}")))
            })
            .transpose()
    }
}

/// Loads the config, applies overrides and validates.
pub fn resolve_config(args: &ConfigArgs, alpha: Option<f64>) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub num_layers: usize,
    pub training_rows: usize,
    pub calibration: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub training: u64,
    pub calibration: u64,
    pub test: u64,
    pub model: u64,
    pub evaluation: u64,
    pub scenario: u64,
    pub trace: u64,
}

impl DerivedSeeds {
    fn new(root: u64) -> Self {
        Self {
            training: derive_seed(root, SeedStream::Training),
            calibration: derive_seed(root, SeedStream::Calibration),
            test: derive_seed(root, SeedStream::Test),
            model: derive_seed(root, SeedStream::Model),
            evaluation: derive_seed(root, SeedStream::Evaluation),
            scenario: derive_seed(root, SeedStream::Scenario),
            trace: derive_seed(root, SeedStream::Trace),
        }
    }
}

/// Written next to the generated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub data_digest: String,
    pub seed: u64,
    pub seeds: DerivedSeeds,
    pub sizes: DatasetSizes,
    pub system: SystemModel,
    pub weights: ObjectiveWeights,
    pub context_box: ContextBox,
    pub noise_rel_std: f64,
    pub shift: Option<ShiftConfig>,
    pub files: Vec<String>,
}

fn digest_comment(digest: &str) -> Vec<(&'static str, String)> {
    vec![("config_digest", digest.to_string())]
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(io_context(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(io_context(path))?;
    serde_json::from_str(&text).map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", path.display()),
    })
}

/// Runtime error prefixed with the file it concerns.
fn at_path(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| CliError {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", path.display()),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_context(dir))
}

/// Checks that `data_dir` was generated from the same dataset settings.
fn check_manifest(cfg: &RunConfig, data_dir: &Path) -> CliResult<Manifest> {
    let manifest: Manifest = read_json(&data_dir.join(MANIFEST_FILE))?;
    let want = cfg.data_digest()?;
    if manifest.data_digest != want {
        return Err(CliError::config(format!(
            "dataset in {} was generated with different settings (data digest {} vs {})",
            data_dir.display(),
            manifest.data_digest,
            want
        )));
    }
    Ok(manifest)
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<Manifest> {
    let cfg = resolve_config(&args.cfg, None)?;
    let digest = cfg.digest();
    let spec = cfg.spec()?;
    let mode = Parallelism::from_flag(args.parallel);
    let mut data = benchmark::generate(&spec, mode)?;
    if let Some(g) = cfg.shift_gaussian()? {
        data.test = simulator::build_shifted_set(
            &spec.system,
            &spec.weights,
            &g,
            &spec.context_box,
            spec.n_test,
            derive_seed(spec.seed, SeedStream::Test),
            mode,
        )?;
    }
    create_dir(&args.out)?;
    let comments = digest_comment(&digest);
    simulator::write_records(&args.out.join(TRAINING_FILE), &comments, &data.training)?;
    simulator::write_labelled(
        &args.out.join(CALIBRATION_FILE),
        &comments,
        &data.calibration,
    )?;
    simulator::write_labelled(&args.out.join(TEST_FILE), &comments, &data.test)?;
    let manifest = Manifest {
        config_digest: digest,
        data_digest: cfg.data_digest()?,
        seed: cfg.seed,
        seeds: DerivedSeeds::new(cfg.seed),
        sizes: DatasetSizes {
            num_layers: spec.system.num_layers(),
            training_rows: data.training.len(),
            calibration: data.calibration.len(),
            test: data.test.len(),
        },
        system: spec.system,
        weights: cfg.weights,
        context_box: cfg.context_box,
        noise_rel_std: cfg.dataset.noise_rel_std,
        shift: cfg.shift.clone(),
        files: [TRAINING_FILE, CALIBRATION_FILE, TEST_FILE]
            .map(String::from)
            .to_vec(),
    };
    write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReportFile {
    pub config_digest: String,
    pub data_digest: String,
    pub report: crate::predictor::TrainingReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionFile {
    pub config_digest: String,
    pub regression: NeurosurgeonRegression,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainingReportFile> {
    let cfg = resolve_config(&args.cfg, None)?;
    let digest = cfg.digest();
    let data_dir = args.data.clone().unwrap_or_else(|| args.out.clone());
    let manifest = check_manifest(&cfg, &data_dir)?;
    let training_path = data_dir.join(TRAINING_FILE);
    let rows: Vec<DatasetRow> =
        simulator::read_records(&training_path).map_err(at_path(&training_path))?;
    let trained = benchmark::train(&rows, manifest.sizes.num_layers, &cfg.training, cfg.seed)?;
    create_dir(&args.out)?;
    let model_path = args.out.join(MODEL_FILE);
    fs::write(
        &model_path,
        trained.model.to_json_with_digest(Some(&digest))? + "\n",
    )
    .map_err(io_context(&model_path))?;
    write_json(
        &args.out.join(REGRESSION_FILE),
        &RegressionFile {
            config_digest: digest.clone(),
            regression: trained.regression,
        },
    )?;
    let report = TrainingReportFile {
        config_digest: digest,
        data_digest: manifest.data_digest,
        report: trained.report,
    };
    write_json(&args.out.join(TRAINING_REPORT_FILE), &report)?;
    Ok(report)
}

struct Loaded {
    cfg: RunConfig,
    system: SystemModel,
    model: PredictorModel,
    regression: NeurosurgeonRegression,
    calibration: Vec<CalibrationSample>,
    data_dir: PathBuf,
}

fn load_trained(
    cfg: RunConfig,
    data: &Option<PathBuf>,
    model: &Option<PathBuf>,
    out: &Path,
) -> CliResult<Loaded> {
    let data_dir = data.clone().unwrap_or_else(|| out.to_path_buf());
    let model_dir = model.clone().unwrap_or_else(|| data_dir.clone());
    let manifest = check_manifest(&cfg, &data_dir)?;
    let model_path = model_dir.join(MODEL_FILE);
    let model = PredictorModel::load(&model_path).map_err(at_path(&model_path))?;
    let regression: RegressionFile = read_json(&model_dir.join(REGRESSION_FILE))?;
    if model.num_layers != manifest.sizes.num_layers {
        return Err(CliError::config(format!(
            "model has {} layers, dataset has {}",
            model.num_layers, manifest.sizes.num_layers
        )));
    }
    let calibration_path = data_dir.join(CALIBRATION_FILE);
    let calibration =
        simulator::read_labelled(&calibration_path).map_err(at_path(&calibration_path))?;
    Ok(Loaded {
        system: cfg.system()?,
        cfg,
        model,
        regression: regression.regression,
        calibration,
        data_dir,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_digest: String,
    pub weighting: String,
    pub report: EvaluationReport,
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    strategy: &'a str,
    alpha: f64,
    coverage: f64,
    mean_interval_size: f64,
    error_rate: f64,
    fallback_count: usize,
    failures: usize,
    mean_q: f64,
    mean_carbon_g: f64,
    mean_latency_s: f64,
    mean_edge_energy_j: f64,
    mean_q_regret: f64,
    mean_carbon_regret_g: f64,
    mean_latency_regret_s: f64,
    mean_edge_energy_regret_j: f64,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<MetricsFile> {
    let mut cfg = resolve_config(&args.cfg, args.alpha)?;
    if let Some(s) = args.strategy {
        cfg.strategies = vec![s];
    }
    let digest = cfg.digest();
    let loaded = load_trained(cfg, &args.data, &args.model, &args.out)?;
    let cfg = &loaded.cfg;
    let test_path = loaded.data_dir.join(TEST_FILE);
    let test = simulator::read_labelled(&test_path).map_err(at_path(&test_path))?;
    let scored = ScoredCalibration::from_samples(&loaded.model, &loaded.calibration)?;
    let weighting = match cfg.shift_gaussian()? {
        Some(g) => Weighting::CovariateShift {
            test: g.into(),
            calibration: shift::fit_uniform(&loaded.calibration)?,
        },
        None => Weighting::Exchangeable,
    };
    let weighting_name = match weighting {
        Weighting::Exchangeable => "exchangeable",
        Weighting::CovariateShift { .. } => "covariate-shift",
    };
    let calibrator = Calibrator::new(scored, weighting)?;
    let pipeline = benchmark::pipeline(
        &loaded.system,
        cfg.weights,
        &loaded.model,
        &calibrator,
        &loaded.regression,
        cfg.alpha,
    );
    let report = benchmark::evaluate(
        &pipeline,
        &test,
        &cfg.strategies,
        derive_seed(cfg.seed, SeedStream::Evaluation),
        Parallelism::from_flag(args.parallel),
    )?;
    create_dir(&args.out)?;
    let rows: Vec<MetricsRow> = report
        .strategies
        .iter()
        .map(|m| MetricsRow {
            strategy: m.strategy.name(),
            alpha: report.alpha,
            coverage: report.coverage,
            mean_interval_size: report.mean_interval_size,
            error_rate: m.error_rate,
            fallback_count: m.fallback_count,
            failures: m.failures,
            mean_q: m.mean_q,
            mean_carbon_g: m.mean_carbon_g,
            mean_latency_s: m.mean_latency_s,
            mean_edge_energy_j: m.mean_edge_energy_j,
            mean_q_regret: m.mean_q_regret,
            mean_carbon_regret_g: m.mean_carbon_regret_g,
            mean_latency_regret_s: m.mean_latency_regret_s,
            mean_edge_energy_regret_j: m.mean_edge_energy_regret_j,
        })
        .collect();
    simulator::write_records(&args.out.join(METRICS_CSV), &digest_comment(&digest), &rows)?;
    let file = MetricsFile {
        config_digest: digest,
        weighting: weighting_name.into(),
        report,
    };
    write_json(&args.out.join(METRICS_JSON), &file)?;
    Ok(file)
}

fn load_trace(cfg: &RunConfig) -> CliResult<CarbonTrace> {
    let t = &cfg.trace;
    match &t.path {
        Some(p) => simulator::load_carbon_trace(p).map_err(|e| CliError {
            code: EXIT_RUNTIME,
            message: format!("carbon trace {}: {e}", p.display()),
        }),
        None => Ok(simulator::synth_carbon_trace(
            t.pattern,
            t.base,
            t.amplitude,
            t.duration,
            t.step,
            derive_seed(cfg.seed, SeedStream::Trace),
        )?),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayFile {
    pub config_digest: String,
    pub trace_region: String,
    pub aggregates: simulator::ScenarioAggregates,
}

#[derive(Serialize)]
struct ComparisonRow {
    strategy: String,
    ticks: usize,
    failed_ticks: usize,
    fallback_count: usize,
    mean_carbon_g: f64,
    total_carbon_g: f64,
    mean_latency_s: f64,
    mean_edge_energy_j: f64,
    mean_q: f64,
    error_rate: f64,
    mean_interval_size: Option<f64>,
    carbon_ratio_vs_neurosurgeon: Option<f64>,
}

pub fn cmd_replay(args: &ReplayArgs) -> CliResult<Vec<ScenarioReport>> {
    let mut cfg = resolve_config(&args.cfg, args.alpha)?;
    if !args.strategy.is_empty() {
        cfg.scenario.strategies = args.strategy.clone();
    }
    if cfg.scenario.strategies.is_empty() {
        return Err(CliError::config("no strategies to replay"));
    }
    let digest = cfg.digest();
    let trace = load_trace(&cfg)?;
    let loaded = load_trained(cfg, &args.data, &args.model, &args.out)?;
    let cfg = &loaded.cfg;
    let scenario = cfg.scenario_config();
    let scored = ScoredCalibration::from_samples(&loaded.model, &loaded.calibration)?;
    let weighting = match cfg.scenario.weighting {
        ReplayWeighting::Exchangeable => Weighting::Exchangeable,
        ReplayWeighting::CovariateShift => {
            let calibration = shift::fit_uniform(&loaded.calibration)?;
            let start = scenario.initial.unwrap_or_else(|| cfg.context_box.center());
            Weighting::CovariateShift {
                test: shift::fit_gaussian(&start, cfg.scenario.shift_rel_std, &calibration)?.into(),
                calibration,
            }
        }
    };
    let calibrator = Calibrator::new(scored, weighting)?;
    let parts = ScenarioComponents {
        system: &loaded.system,
        model: &loaded.model,
        calibrator: &calibrator,
        regressor: &loaded.regression,
        context_box: cfg.context_box,
        trace: &trace,
    };
    create_dir(&args.out)?;
    let comments = digest_comment(&digest);
    let mut reports = Vec::new();
    for &strategy in &cfg.scenario.strategies {
        let report = simulator::replay_scenario(&scenario, &parts, strategy)?;
        let stem = format!("replay_{}", strategy.name());
        simulator::write_records(
            &args.out.join(format!("{stem}.csv")),
            &comments,
            &report.records,
        )?;
        write_json(
            &args.out.join(format!("{stem}.json")),
            &ReplayFile {
                config_digest: digest.clone(),
                trace_region: trace.region.clone(),
                aggregates: report.aggregates.clone(),
            },
        )?;
        reports.push(report);
    }
    let ns_carbon = reports
        .iter()
        .find(|r| r.aggregates.strategy == Strategy::Neurosurgeon)
        .map(|r| r.aggregates.mean_carbon_g);
    let rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| {
            let a = &r.aggregates;
            ComparisonRow {
                strategy: a.strategy.name().into(),
                ticks: a.ticks,
                failed_ticks: a.failed_ticks,
                fallback_count: a.fallback_count,
                mean_carbon_g: a.mean_carbon_g,
                total_carbon_g: a.total_carbon_g,
                mean_latency_s: a.mean_latency_s,
                mean_edge_energy_j: a.mean_edge_energy_j,
                mean_q: a.mean_q,
                error_rate: a.error_rate,
                mean_interval_size: a.mean_interval_size,
                carbon_ratio_vs_neurosurgeon: ns_carbon
                    .filter(|c| *c > 0.0)
                    .map(|c| a.mean_carbon_g / c),
            }
        })
        .collect();
    simulator::write_records(&args.out.join(REPLAY_COMPARISON_FILE), &comments, &rows)?;
    Ok(reports)
}

pub fn cmd_trace_synth(args: &TraceSynthArgs) -> CliResult<CarbonTrace> {
    let mut cfg = resolve_config(&args.cfg, None)?;
    cfg.trace.path = None;
    let digest = cfg.digest();
    let trace = load_trace(&cfg)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    simulator::write_carbon_trace(&args.out, &trace, &digest_comment(&digest))?;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub region: String,
    pub samples: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub min_intensity: f64,
    pub max_intensity: f64,
    pub mean_intensity: f64,
}

pub fn cmd_trace_validate(args: &TraceValidateArgs) -> CliResult<TraceSummary> {
    let trace = simulator::load_carbon_trace(&args.path).map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", args.path.display()),
    })?;
    let s = trace.samples();
    Ok(TraceSummary {
        region: trace.region.clone(),
        samples: s.len(),
        start_s: s[0].timestamp,
        end_s: s[s.len() - 1].timestamp,
        min_intensity: trace.min_intensity(),
        max_intensity: trace.max_intensity(),
        mean_intensity: s.iter().map(|p| p.intensity).sum::<f64>() / s.len() as f64,
    })
}

/// Runs a parsed command, printing a short JSON summary on success.
pub fn run(cli: Cli) -> CliResult<()> {
    let summary = match &cli.command {
        Command::Generate(a) => {
            let m = cmd_generate(a)?;
            serde_json::json!({ "config_digest": m.config_digest, "sizes": m.sizes })
        }
        Command::Train(a) => serde_json::to_value(cmd_train(a)?).map_err(Error::from)?,
        Command::Evaluate(a) => serde_json::to_value(cmd_evaluate(a)?).map_err(Error::from)?,
        Command::Replay(a) => {
            let reps = cmd_replay(a)?;
            serde_json::to_value(reps.iter().map(|r| &r.aggregates).collect::<Vec<_>>())
                .map_err(Error::from)?
        }
        Command::Trace(TraceCommand::Synth(a)) => {
            let t = cmd_trace_synth(a)?;
            serde_json::json!({ "region": t.region, "samples": t.len() })
        }
        Command::Trace(TraceCommand::Validate(a)) => {
            serde_json::to_value(cmd_trace_validate(a)?).map_err(Error::from)?
        }
    };
    let text = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    // A closed stdout (e.g. piped into `head`) is not a failure of the command.
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}

/// Entry point used by the binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID_CONFIG
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
