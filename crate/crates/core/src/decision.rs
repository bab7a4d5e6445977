//! Picking one partition from a conformal interval, plus the comparison
//! baselines (all-edge, all-server and a bandwidth/load-only regression
//! partitioner).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{Calibrator, PredictionInterval};
use crate::context::SystemContext;
use crate::cost_model::{CostBreakdown, ObjectiveWeights, SystemModel};
use crate::error::{Error, Result};
use crate::predictor::{argmin_first, implicit_argmin, QModel};

fn non_empty(interval: &PredictionInterval) -> Result<()> {
    if interval.is_empty() {
        Err(Error::EmptyInterval)
    } else {
        Ok(())
    }
}

/// Uniformly random member, reproducible for a given seed.
pub fn choose_random(interval: &PredictionInterval, seed: u64) -> Result<usize> {
    non_empty(interval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i = rng.random_range(0..interval.len());
    Ok(interval.members[i].layer)
}

/// Member whose predicted objective is nearest the members' mean.
pub fn choose_mean(interval: &PredictionInterval) -> Result<usize> {
    non_empty(interval)?;
    let mean = interval.members.iter().map(|m| m.predicted_q).sum::<f64>() / interval.len() as f64;
    let dist: Vec<f64> = interval
        .members
        .iter()
        .map(|m| (m.predicted_q - mean).abs())
        .collect();
    Ok(interval.members[argmin_first(&dist)].layer)
}

/// Member with the smallest predicted objective.
pub fn choose_adaptive(interval: &PredictionInterval) -> Result<usize> {
    non_empty(interval)?;
    let q: Vec<f64> = interval.members.iter().map(|m| m.predicted_q).collect();
    Ok(interval.members[argmin_first(&q)].layer)
}

/// Used when the interval is empty: the surrogate's global argmin.
pub fn fallback<M: QModel + ?Sized>(model: &M, ctx: &SystemContext) -> usize {
    let y = implicit_argmin(model, ctx);
    log::info!("empty conformal interval; falling back to predicted argmin y = {y}");
    y
}

/// Every layer on the edge (`y = N`).
pub fn baseline_edge_only(
    system: &SystemModel,
    ctx: &SystemContext,
    weights: &ObjectiveWeights,
) -> Result<CostBreakdown> {
    system.objective(ctx, weights, system.num_layers())
}

/// Every layer on the server (`y = 0`).
pub fn baseline_cloud_only(
    system: &SystemModel,
    ctx: &SystemContext,
    weights: &ObjectiveWeights,
) -> Result<CostBreakdown> {
    system.objective(ctx, weights, 0)
}

/// Predicts end-to-end latency and edge energy of a partition from bandwidth
/// and server utilization alone.
pub trait LayerCostRegressor: Sync {
    fn num_layers(&self) -> usize;

    /// `(latency_s, edge_energy_j)` for partition `y`.
    fn predict(&self, bandwidth: f64, server_util: f64, y: usize) -> Result<(f64, f64)>;
}

/// One observation for fitting [`NeurosurgeonRegression`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionSample {
    pub bandwidth: f64,
    pub server_util: f64,
    pub partition: usize,
    pub latency: f64,
    pub edge_energy: f64,
}

/// Coefficients over the features `[1, 1/B, server_util]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub latency: [f64; 3],
    pub edge_energy: [f64; 3],
}

fn regression_features(bandwidth: f64, server_util: f64) -> [f64; 3] {
    [1.0, 1.0 / bandwidth, server_util]
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Ordinary least squares per partition point. Transmission time is `d/B`,
/// so bandwidth enters through its reciprocal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeurosurgeonRegression {
    fits: Vec<LinearFit>,
}

impl NeurosurgeonRegression {
    /// An unfitted regressor; every prediction errors until [`Self::fit`] is used.
    pub fn unfitted() -> Self {
        Self::default()
    }

    pub fn fit(samples: &[RegressionSample], num_layers: usize) -> Result<Self> {
        let mut fits = Vec::with_capacity(num_layers + 1);
        for y in 0..=num_layers {
            let rows: Vec<&RegressionSample> =
                samples.iter().filter(|s| s.partition == y).collect();
            if rows.len() < 3 {
                return Err(Error::InvalidParameter(format!(
                    "regression for partition {y} needs at least 3 samples, got {}",
                    rows.len()
                )));
            }
            if let Some(bad) = rows.iter().find(|s| !(s.bandwidth > 0.0)) {
                return Err(Error::InvalidContext(format!(
                    "bandwidth must be > 0, got {}",
                    bad.bandwidth
                )));
            }
            let x = DMatrix::from_fn(rows.len(), 3, |r, c| {
                regression_features(rows[r].bandwidth, rows[r].server_util)[c]
            });
            let svd = x.svd(true, true);
            let solve = |target: DVector<f64>| -> Result<[f64; 3]> {
                let beta = svd
                    .solve(&target, 1e-12)
                    .map_err(|e| Error::Data(format!("least squares failed: {e}")))?;
                Ok([beta[0], beta[1], beta[2]])
            };
            fits.push(LinearFit {
                latency: solve(DVector::from_iterator(
                    rows.len(),
                    rows.iter().map(|s| s.latency),
                ))?,
                edge_energy: solve(DVector::from_iterator(
                    rows.len(),
                    rows.iter().map(|s| s.edge_energy),
                ))?,
            });
        }
        Ok(Self { fits })
    }

    pub fn is_fitted(&self) -> bool {
        !self.fits.is_empty()
    }

    pub fn fits(&self) -> &[LinearFit] {
        &self.fits
    }
}

impl LayerCostRegressor for NeurosurgeonRegression {
    fn num_layers(&self) -> usize {
        self.fits.len().saturating_sub(1)
    }

    fn predict(&self, bandwidth: f64, server_util: f64, y: usize) -> Result<(f64, f64)> {
        if !self.is_fitted() {
            return Err(Error::NotFitted("neurosurgeon regression".into()));
        }
        let fit = self.fits.get(y).ok_or(Error::InvalidPartition {
            y,
            layers: self.num_layers(),
        })?;
        let f = regression_features(bandwidth, server_util);
        Ok((dot3(&fit.latency, &f), dot3(&fit.edge_energy, &f)))
    }
}

/// Exact costs with every covariate other than bandwidth and server
/// utilization pinned to `base`.
#[derive(Debug, Clone)]
pub struct GroundTruthRegressor<'a> {
    pub system: &'a SystemModel,
    pub base: SystemContext,
}

impl LayerCostRegressor for GroundTruthRegressor<'_> {
    fn num_layers(&self) -> usize {
        self.system.num_layers()
    }

    fn predict(&self, bandwidth: f64, server_util: f64, y: usize) -> Result<(f64, f64)> {
        let ctx = SystemContext {
            bandwidth,
            server_gpu_util: server_util,
            ..self.base
        };
        let t = self.system.edge_latency(&ctx, y)?
            + self.system.transmission_latency(&ctx, y)?
            + self.system.server_latency(&ctx, y)?;
        Ok((t, self.system.edge_energy(&ctx, y)?))
    }
}

/// Argmin over `y` of predicted `λ1·T + λ2·E_e`. Carbon is not considered.
pub fn baseline_neurosurgeon<R: LayerCostRegressor + ?Sized>(
    regressor: &R,
    weights: &ObjectiveWeights,
    bandwidth: f64,
    server_util: f64,
) -> Result<usize> {
    let q = (0..=regressor.num_layers())
        .map(|y| {
            let (t, e) = regressor.predict(bandwidth, server_util, y)?;
            Ok(weights.lambda1 * t + weights.lambda2 * e)
        })
        .collect::<Result<Vec<f64>>>()?;
    if q.is_empty() {
        return Err(Error::NotFitted("neurosurgeon regression".into()));
    }
    Ok(argmin_first(&q))
}

/// How a partition is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Mean,
    Adaptive,
    EdgeOnly,
    CloudOnly,
    Neurosurgeon,
    /// Exhaustive search over the true cost model; reference only.
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Random,
        Strategy::Mean,
        Strategy::Adaptive,
        Strategy::EdgeOnly,
        Strategy::CloudOnly,
        Strategy::Neurosurgeon,
        Strategy::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Mean => "mean",
            Strategy::Adaptive => "adaptive",
            Strategy::EdgeOnly => "edge-only",
            Strategy::CloudOnly => "cloud-only",
            Strategy::Neurosurgeon => "neurosurgeon",
            Strategy::Oracle => "oracle",
        }
    }

    /// Whether the strategy selects from a conformal interval.
    pub fn uses_interval(self) -> bool {
        matches!(self, Strategy::Random | Strategy::Mean | Strategy::Adaptive)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown strategy `{s}` (expected one of: {})",
                    Strategy::ALL.map(Strategy::name).join(", ")
                ))
            })
    }
}

/// The outcome of one decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub strategy: Strategy,
    pub partition: usize,
    /// Present for interval strategies.
    pub interval: Option<PredictionInterval>,
    /// True when the interval was empty and the predicted argmin was used.
    pub fallback: bool,
}

/// Applies an interval strategy, falling back to the predicted argmin when
/// the interval is empty.
pub fn select_from_interval<M: QModel + ?Sized>(
    strategy: Strategy,
    interval: &PredictionInterval,
    model: &M,
    ctx: &SystemContext,
    seed: u64,
) -> Result<(usize, bool)> {
    let choice = match strategy {
        Strategy::Random => choose_random(interval, seed),
        Strategy::Mean => choose_mean(interval),
        Strategy::Adaptive => choose_adaptive(interval),
        other => {
            return Err(Error::InvalidParameter(format!(
                "strategy `{other}` does not select from an interval"
            )))
        }
    };
    match choice {
        Ok(y) => Ok((y, false)),
        Err(Error::EmptyInterval) => Ok((fallback(model, ctx), true)),
        Err(e) => Err(e),
    }
}

/// Everything needed to run any [`Strategy`] at a context.
pub struct Pipeline<'a, M: QModel + ?Sized> {
    pub system: &'a SystemModel,
    pub weights: ObjectiveWeights,
    pub model: &'a M,
    pub calibrator: &'a Calibrator,
    pub regressor: &'a dyn LayerCostRegressor,
    pub alpha: f64,
}

impl<M: QModel + ?Sized> Pipeline<'_, M> {
    pub fn decide(&self, strategy: Strategy, ctx: &SystemContext, seed: u64) -> Result<Decision> {
        let fixed = |partition| Decision {
            strategy,
            partition,
            interval: None,
            fallback: false,
        };
        Ok(match strategy {
            Strategy::EdgeOnly => fixed(self.system.num_layers()),
            Strategy::CloudOnly => fixed(0),
            Strategy::Neurosurgeon => fixed(baseline_neurosurgeon(
                self.regressor,
                &self.weights,
                ctx.bandwidth,
                ctx.server_gpu_util,
            )?),
            Strategy::Oracle => fixed(self.system.optimal_partition(ctx, &self.weights)?.partition),
            _ => {
                let interval = self.calibrator.interval(self.model, ctx, self.alpha)?;
                let (partition, fallback) =
                    select_from_interval(strategy, &interval, self.model, ctx, seed)?;
                Decision {
                    strategy,
                    partition,
                    interval: Some(interval),
                    fallback,
                }
            }
        })
    }
}
