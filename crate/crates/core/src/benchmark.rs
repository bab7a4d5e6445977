//! The synthetic benchmark: dataset generation from one root seed, training,
//! and per-strategy evaluation on a labelled test set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{CalibrationSample, Calibrator};
use crate::context::{ContextBox, CONTEXT_DIM};
use crate::cost_model::{
    CostBreakdown, DnnProfile, ObjectiveWeights, PowerModel, Slowdown, SystemModel,
};
use crate::decision::{
    select_from_interval, LayerCostRegressor, NeurosurgeonRegression, Pipeline, Strategy,
};
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::predictor::{self, PredictorModel, QModel, TrainingConfig, TrainingReport};
use crate::shift::GaussianDensity;
use crate::simulator::{self, stream_rng, DatasetRow};

/// Sub-streams of the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedStream {
    Training = 1,
    Calibration = 2,
    Test = 3,
    Model = 4,
    Evaluation = 5,
    Scenario = 6,
    Trace = 7,
}

/// A child seed of `root`, stable across releases.
pub fn derive_seed(root: u64, stream: SeedStream) -> u64 {
    stream_rng(root, stream as u64).random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub system: SystemModel,
    pub weights: ObjectiveWeights,
    pub context_box: ContextBox,
    pub n_train_contexts: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub noise_rel_std: f64,
    pub training: TrainingConfig,
    pub seed: u64,
}

impl BenchmarkSpec {
    /// ResNet-like profile, default power model and weights, 5k/1k/1k contexts.
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            system: SystemModel::new(
                DnnProfile::resnet_like(),
                PowerModel::default(),
                Slowdown::default(),
            )
            .expect("built-in profile is valid"),
            weights: ObjectiveWeights::default(),
            context_box: ContextBox::default_benchmark(),
            n_train_contexts: 5000,
            n_calibration: 1000,
            n_test: 1000,
            noise_rel_std: 0.02,
            training: TrainingConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.dnn.validate()?;
        self.system.power.validate()?;
        self.weights.validate()?;
        self.context_box.validate()?;
        self.training.validate()?;
        if self.n_calibration == 0 || self.n_test == 0 {
            return Err(Error::InvalidParameter(
                "calibration and test sets must be non-empty".into(),
            ));
        }
        if !(self.noise_rel_std.is_finite() && self.noise_rel_std >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise_rel_std must be >= 0, got {}",
                self.noise_rel_std
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub training: Vec<DatasetRow>,
    pub calibration: Vec<CalibrationSample>,
    pub test: Vec<CalibrationSample>,
}

/// Training, calibration and (exchangeable) test sets.
pub fn generate(spec: &BenchmarkSpec, mode: Parallelism) -> Result<Datasets> {
    spec.validate()?;
    let training = simulator::build_training_set(
        &spec.system,
        &spec.weights,
        &spec.context_box,
        spec.n_train_contexts,
        spec.noise_rel_std,
        derive_seed(spec.seed, SeedStream::Training),
        mode,
    )?;
    let calibration = simulator::build_calibration_set(
        &spec.system,
        &spec.weights,
        &spec.context_box,
        spec.n_calibration,
        derive_seed(spec.seed, SeedStream::Calibration),
        mode,
    )?;
    let test = simulator::build_calibration_set(
        &spec.system,
        &spec.weights,
        &spec.context_box,
        spec.n_test,
        derive_seed(spec.seed, SeedStream::Test),
        mode,
    )?;
    Ok(Datasets {
        training,
        calibration,
        test,
    })
}

/// Everything fitted on the training set.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: PredictorModel,
    pub report: TrainingReport,
    pub regression: NeurosurgeonRegression,
}

pub fn train(
    rows: &[DatasetRow],
    num_layers: usize,
    training: &TrainingConfig,
    root_seed: u64,
) -> Result<Trained> {
    let samples: Vec<_> = rows.iter().map(DatasetRow::training_sample).collect();
    let config = TrainingConfig {
        seed: derive_seed(root_seed, SeedStream::Model),
        ..training.clone()
    };
    let (model, report) = predictor::train(&samples, num_layers, &config)?;
    let reg: Vec<_> = rows.iter().map(DatasetRow::regression_sample).collect();
    let regression = NeurosurgeonRegression::fit(&reg, num_layers)?;
    Ok(Trained {
        model,
        report,
        regression,
    })
}

/// Test density centred `toward` the way from the box's lower corner to its
/// upper corner (per dimension), with std `rel_std` times the box range.
pub fn shifted_gaussian(
    bx: &ContextBox,
    toward: [f64; CONTEXT_DIM],
    rel_std: f64,
) -> Result<GaussianDensity> {
    let mean = bx.lerp(toward);
    let ranges = bx.ranges();
    GaussianDensity::new(
        mean.to_array(),
        std::array::from_fn(|i| (rel_std * ranges[i]).powi(2)),
    )
}

/// Fractional position of the expensive corner: slow link, busy devices, low
/// clocks, dirty grid.
pub const HIGH_COST_CORNER: [f64; CONTEXT_DIM] = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: Strategy,
    /// Fraction of test points whose chosen partition is not the optimum.
    pub error_rate: f64,
    pub fallback_count: usize,
    pub failures: usize,
    pub mean_q: f64,
    pub mean_carbon_g: f64,
    pub mean_latency_s: f64,
    pub mean_edge_energy_j: f64,
    pub mean_q_regret: f64,
    pub mean_carbon_regret_g: f64,
    pub mean_latency_regret_s: f64,
    pub mean_edge_energy_regret_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub alpha: f64,
    pub n_test: usize,
    /// Fraction of test points whose optimum lies in the interval.
    pub coverage: f64,
    pub mean_interval_size: f64,
    pub empty_intervals: usize,
    pub strategies: Vec<StrategyMetrics>,
}

impl EvaluationReport {
    pub fn metrics(&self, strategy: Strategy) -> Option<&StrategyMetrics> {
        self.strategies.iter().find(|m| m.strategy == strategy)
    }
}

struct PointOutcome {
    covered: bool,
    interval_size: usize,
    /// Per strategy: `(chosen cost, fallback)` or an error message.
    choices: Vec<std::result::Result<(CostBreakdown, bool), String>>,
    oracle: CostBreakdown,
}

/// Runs every strategy on every test point. The interval for a point is
/// computed once and shared by the interval strategies.
pub fn evaluate<M: QModel + ?Sized>(
    pipeline: &Pipeline<'_, M>,
    test: &[CalibrationSample],
    strategies: &[Strategy],
    seed: u64,
    mode: Parallelism,
) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::InvalidParameter("empty test set".into()));
    }
    let outcomes = par::try_map_range(test.len(), mode, |i| -> Result<PointOutcome> {
        let s = &test[i];
        let decision_seed: u64 = stream_rng(seed, i as u64).random();
        let interval = pipeline
            .calibrator
            .interval(pipeline.model, &s.ctx, pipeline.alpha)?;
        let oracle = pipeline
            .system
            .objective(&s.ctx, &pipeline.weights, s.y_opt)?;
        let choices = strategies
            .iter()
            .map(|&st| {
                let picked = if st.uses_interval() {
                    select_from_interval(st, &interval, pipeline.model, &s.ctx, decision_seed)
                } else {
                    pipeline
                        .decide(st, &s.ctx, decision_seed)
                        .map(|d| (d.partition, d.fallback))
                };
                picked
                    .and_then(|(y, fb)| {
                        Ok((pipeline.system.objective(&s.ctx, &pipeline.weights, y)?, fb))
                    })
                    .map_err(|e| e.to_string())
            })
            .collect();
        Ok(PointOutcome {
            covered: interval.contains(s.y_opt),
            interval_size: interval.len(),
            choices,
            oracle,
        })
    })?;

    let n = test.len() as f64;
    let metrics = strategies
        .iter()
        .enumerate()
        .map(|(k, &strategy)| {
            let ok: Vec<(&CostBreakdown, bool, &CostBreakdown)> = outcomes
                .iter()
                .filter_map(|o| {
                    o.choices[k]
                        .as_ref()
                        .ok()
                        .map(|(c, fb)| (c, *fb, &o.oracle))
                })
                .collect();
            let m = ok.len().max(1) as f64;
            let avg = |f: &dyn Fn(&CostBreakdown, &CostBreakdown) -> f64| {
                ok.iter().map(|(c, _, o)| f(c, o)).fold(0.0, |a, v| a + v) / m
            };
            StrategyMetrics {
                strategy,
                error_rate: ok
                    .iter()
                    .filter(|(c, _, o)| c.partition != o.partition)
                    .count() as f64
                    / m,
                fallback_count: ok.iter().filter(|(_, fb, _)| *fb).count(),
                failures: outcomes.len() - ok.len(),
                mean_q: avg(&|c, _| c.q),
                mean_carbon_g: avg(&|c, _| c.carbon),
                mean_latency_s: avg(&|c, _| c.t_total),
                mean_edge_energy_j: avg(&|c, _| c.e_edge),
                mean_q_regret: avg(&|c, o| c.q - o.q),
                mean_carbon_regret_g: avg(&|c, o| c.carbon - o.carbon),
                mean_latency_regret_s: avg(&|c, o| c.t_total - o.t_total),
                mean_edge_energy_regret_j: avg(&|c, o| c.e_edge - o.e_edge),
            }
        })
        .collect();

    Ok(EvaluationReport {
        alpha: pipeline.alpha,
        n_test: test.len(),
        coverage: outcomes.iter().filter(|o| o.covered).count() as f64 / n,
        mean_interval_size: outcomes.iter().map(|o| o.interval_size as f64).sum::<f64>() / n,
        empty_intervals: outcomes.iter().filter(|o| o.interval_size == 0).count(),
        strategies: metrics,
    })
}

/// Builds a pipeline around borrowed parts.
pub fn pipeline<'a, M: QModel + ?Sized>(
    system: &'a SystemModel,
    weights: ObjectiveWeights,
    model: &'a M,
    calibrator: &'a Calibrator,
    regressor: &'a dyn LayerCostRegressor,
    alpha: f64,
) -> Pipeline<'a, M> {
    Pipeline {
        system,
        weights,
        model,
        calibrator,
        regressor,
        alpha,
    }
}
