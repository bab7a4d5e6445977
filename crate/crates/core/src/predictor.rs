//! Implicit surrogate `Q(x, y)`: a small feed-forward regressor from
//! (context, candidate layer) to the objective value.
//!
//! The same surrogate picks partitions (argmin over candidates) and scores
//! calibration points for the conformal layer. Anything implementing
//! [`QModel`] can stand in for it, including the exact cost model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::context::{SystemContext, CONTEXT_DIM};
use crate::cost_model::{ObjectiveWeights, SystemModel};
use crate::error::{Error, Result};

/// Input width: seven covariates plus the normalized layer index.
pub const FEATURE_DIM: usize = CONTEXT_DIM + 1;

/// Bumped whenever [`ModelFile`] changes shape.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// One `(context, candidate, objective)` row of the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub ctx: SystemContext,
    pub y: usize,
    pub q: f64,
}

/// A surrogate objective over candidate partition points.
pub trait QModel: Sync {
    /// Number of DNN layers `N`; candidates are `0..=N`.
    fn num_layers(&self) -> usize;

    fn predict_q(&self, ctx: &SystemContext, y: usize) -> f64;

    /// Predictions for every candidate `0..=N`.
    fn predict_all(&self, ctx: &SystemContext) -> Vec<f64> {
        (0..=self.num_layers())
            .map(|y| self.predict_q(ctx, y))
            .collect()
    }
}

/// `argmin_y Q(ctx, y)` over `0..=N`; ties go to the smaller index.
pub fn implicit_argmin<M: QModel + ?Sized>(model: &M, ctx: &SystemContext) -> usize {
    argmin_first(&model.predict_all(ctx))
}

pub(crate) fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// The exact cost model exposed as a surrogate.
#[derive(Debug, Clone, Copy)]
pub struct OracleModel<'a> {
    pub system: &'a SystemModel,
    pub weights: ObjectiveWeights,
}

impl<'a> OracleModel<'a> {
    pub fn new(system: &'a SystemModel, weights: ObjectiveWeights) -> Self {
        Self { system, weights }
    }
}

impl QModel for OracleModel<'_> {
    fn num_layers(&self) -> usize {
        self.system.num_layers()
    }

    fn predict_q(&self, ctx: &SystemContext, y: usize) -> f64 {
        self.system
            .objective(ctx, &self.weights, y)
            .map(|b| b.q)
            .unwrap_or(f64::INFINITY)
    }
}

/// Predicts the same value everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantModel {
    pub value: f64,
    pub layers: usize,
}

impl QModel for ConstantModel {
    fn num_layers(&self) -> usize {
        self.layers
    }

    fn predict_q(&self, _ctx: &SystemContext, _y: usize) -> f64 {
        self.value
    }
}

/// Per-feature min/max scaling onto `[0, 1]`, clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub min: [f64; FEATURE_DIM],
    pub max: [f64; FEATURE_DIM],
}

impl FeatureNormalizer {
    /// Context extremes observed in `samples`; the layer slot spans `0..=N`.
    pub fn fit(samples: &[TrainingSample], num_layers: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParameter(
                "cannot fit a normalizer on an empty dataset".into(),
            ));
        }
        let mut min = [f64::INFINITY; FEATURE_DIM];
        let mut max = [f64::NEG_INFINITY; FEATURE_DIM];
        for s in samples {
            for (i, v) in s.ctx.to_array().into_iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        min[CONTEXT_DIM] = 0.0;
        max[CONTEXT_DIM] = num_layers as f64;
        Ok(Self { min, max })
    }

    pub fn from_bounds(lower: &SystemContext, upper: &SystemContext, num_layers: usize) -> Self {
        let (lo, hi) = (lower.to_array(), upper.to_array());
        let mut min = [0.0; FEATURE_DIM];
        let mut max = [0.0; FEATURE_DIM];
        min[..CONTEXT_DIM].copy_from_slice(&lo);
        max[..CONTEXT_DIM].copy_from_slice(&hi);
        max[CONTEXT_DIM] = num_layers as f64;
        Self { min, max }
    }

    pub fn featurize(&self, ctx: &SystemContext, y: usize) -> [f64; FEATURE_DIM] {
        let c = ctx.to_array();
        std::array::from_fn(|i| {
            let raw = if i < CONTEXT_DIM { c[i] } else { y as f64 };
            let span = self.max[i] - self.min[i];
            if span > 0.0 {
                ((raw - self.min[i]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch under cosine decay.
    pub final_learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Training fails when held-out `MSE / Var(q)` exceeds this.
    pub max_relative_mse: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 40,
            learning_rate: 2e-3,
            final_learning_rate: 5e-5,
            batch_size: 64,
            seed: 7,
            holdout_fraction: 0.1,
            max_relative_mse: 0.05,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "hidden layer widths must be > 0".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch_size must be > 0".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rates must be > 0".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidParameter(
                "holdout_fraction must lie in (0, 1)".into(),
            ));
        }
        if !(self.max_relative_mse > 0.0) {
            return Err(Error::InvalidParameter(
                "max_relative_mse must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub final_train_loss: f64,
    pub holdout_mse: f64,
    pub holdout_relative_mse: f64,
    pub holdout_r2: f64,
}

/// Dense ReLU network with a linear scalar head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub sizes: Vec<usize>,
    /// `weights[l]` is `sizes[l+1] × sizes[l]`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Network {
    fn init(sizes: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            weights.push((0..fan_in * fan_out).map(|_| normal.sample(rng)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Self {
            sizes,
            weights,
            biases,
        }
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Writes every layer's activations into `acts` (`acts[0]` is the input)
    /// and returns the scalar output.
    fn forward_into(&self, x: &[f64], acts: &mut [Vec<f64>]) -> f64 {
        acts[0].copy_from_slice(x);
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (head, tail) = acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            let w = &self.weights[l];
            for j in 0..fan_out {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let mut z = self.biases[l][j];
                for (wi, xi) in row.iter().zip(input.iter()) {
                    z += wi * xi;
                }
                out[j] = if l < last { z.max(0.0) } else { z };
            }
        }
        acts[self.n_layers()][0]
    }

    fn activation_buffers(&self) -> Vec<Vec<f64>> {
        self.sizes.iter().map(|&s| vec![0.0; s]).collect()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut acts = self.activation_buffers();
        self.forward_into(x, &mut acts)
    }
}

struct Adam {
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &Network) -> Self {
        let zeros = |v: &Vec<Vec<f64>>| v.iter().map(|x| vec![0.0; x.len()]).collect::<Vec<_>>();
        Self {
            m_w: zeros(&net.weights),
            v_w: zeros(&net.weights),
            m_b: zeros(&net.biases),
            v_b: zeros(&net.biases),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Network, g_w: &[Vec<f64>], g_b: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        };
        for l in 0..net.weights.len() {
            update(
                &mut net.weights[l],
                &g_w[l],
                &mut self.m_w[l],
                &mut self.v_w[l],
            );
            update(
                &mut net.biases[l],
                &g_b[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
            );
        }
    }
}

/// Trained surrogate: normalizer, network, and target standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub num_layers: usize,
    pub normalizer: FeatureNormalizer,
    pub network: Network,
    pub target_mean: f64,
    pub target_std: f64,
    pub config: TrainingConfig,
}

impl QModel for PredictorModel {
    fn num_layers(&self) -> usize {
        self.num_layers
    }

    fn predict_q(&self, ctx: &SystemContext, y: usize) -> f64 {
        let x = self.normalizer.featurize(ctx, y);
        self.target_mean + self.target_std * self.network.forward(&x)
    }

    fn predict_all(&self, ctx: &SystemContext) -> Vec<f64> {
        let mut acts = self.network.activation_buffers();
        (0..=self.num_layers)
            .map(|y| {
                let x = self.normalizer.featurize(ctx, y);
                self.target_mean + self.target_std * self.network.forward_into(&x, &mut acts)
            })
            .collect()
    }
}

/// Minimum training-set size accepted by [`train`].
pub const MIN_TRAINING_SAMPLES: usize = 100;

/// Fits the surrogate on `samples`. Deterministic for a fixed config seed.
///
/// Rows are split 90/10 (by default) into train and held-out slices with the
/// config seed; the held-out relative MSE must come in under
/// `config.max_relative_mse` or [`Error::TrainingFailure`] is returned.
pub fn train(
    samples: &[TrainingSample],
    num_layers: usize,
    config: &TrainingConfig,
) -> Result<(PredictorModel, TrainingReport)> {
    config.validate()?;
    if samples.len() < MIN_TRAINING_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "training needs at least {MIN_TRAINING_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples
        .iter()
        .find(|s| !s.q.is_finite() || s.y > num_layers)
    {
        return Err(Error::InvalidParameter(format!(
            "invalid training sample (y = {}, q = {})",
            bad.y, bad.q
        )));
    }

    let normalizer = FeatureNormalizer::fit(samples, num_layers)?;
    let n = samples.len() as f64;
    let target_mean = samples.iter().map(|s| s.q).sum::<f64>() / n;
    let variance = samples
        .iter()
        .map(|s| (s.q - target_mean).powi(2))
        .sum::<f64>()
        / n;
    // A constant target is fitted exactly by scaling the network output to zero.
    let target_std = variance.sqrt();
    let fit_scale = if target_std > 0.0 { target_std } else { 1.0 };

    let features: Vec<[f64; FEATURE_DIM]> = samples
        .iter()
        .map(|s| normalizer.featurize(&s.ctx, s.y))
        .collect();
    let targets: Vec<f64> = samples
        .iter()
        .map(|s| (s.q - target_mean) / fit_scale)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_holdout = ((samples.len() as f64) * config.holdout_fraction)
        .round()
        .max(1.0) as usize;
    let (holdout, train_idx) = order.split_at(n_holdout);
    let mut train_idx = train_idx.to_vec();

    let mut sizes = vec![FEATURE_DIM];
    sizes.extend(&config.hidden);
    sizes.push(1);
    let mut net = Network::init(sizes, &mut rng);
    let mut adam = Adam::new(&net);

    let mut acts = net.activation_buffers();
    let mut deltas: Vec<Vec<f64>> = net.sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut g_w: Vec<Vec<f64>> = net.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut g_b: Vec<Vec<f64>> = net.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let layers = net.n_layers();
    let mut final_train_loss = f64::NAN;

    for epoch in 0..config.epochs {
        let progress = if config.epochs > 1 {
            epoch as f64 / (config.epochs - 1) as f64
        } else {
            1.0
        };
        let lr = config.final_learning_rate
            + 0.5
                * (config.learning_rate - config.final_learning_rate)
                * (1.0 + (std::f64::consts::PI * progress).cos());
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;

        for batch in train_idx.chunks(config.batch_size) {
            g_w.iter_mut().for_each(|g| g.fill(0.0));
            g_b.iter_mut().for_each(|g| g.fill(0.0));
            let scale = 2.0 / batch.len() as f64;

            for &i in batch {
                let out = net.forward_into(&features[i], &mut acts);
                let err = out - targets[i];
                loss_sum += err * err;
                deltas[layers][0] = scale * err;

                for l in (0..layers).rev() {
                    let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
                    let w = &net.weights[l];
                    let (lower, upper) = deltas.split_at_mut(l + 1);
                    let d_out = &upper[0];
                    let input = &acts[l];
                    let gw = &mut g_w[l];
                    for j in 0..fan_out {
                        let d = d_out[j];
                        if d == 0.0 {
                            continue;
                        }
                        g_b[l][j] += d;
                        let row = &mut gw[j * fan_in..(j + 1) * fan_in];
                        for (g, x) in row.iter_mut().zip(input.iter()) {
                            *g += d * x;
                        }
                    }
                    if l > 0 {
                        let d_in = &mut lower[l];
                        d_in.fill(0.0);
                        for j in 0..fan_out {
                            let d = d_out[j];
                            if d == 0.0 {
                                continue;
                            }
                            let row = &w[j * fan_in..(j + 1) * fan_in];
                            for (di, wi) in d_in.iter_mut().zip(row.iter()) {
                                *di += d * wi;
                            }
                        }
                        for (di, a) in d_in.iter_mut().zip(input.iter()) {
                            if *a <= 0.0 {
                                *di = 0.0;
                            }
                        }
                    }
                }
            }
            adam.step(&mut net, &g_w, &g_b, lr);
        }
        final_train_loss = loss_sum / train_idx.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:.3e} standardized train mse {final_train_loss:.4e}");
    }

    let model = PredictorModel {
        num_layers,
        normalizer,
        network: net,
        target_mean,
        target_std,
        config: config.clone(),
    };

    let holdout_q: Vec<f64> = holdout.iter().map(|&i| samples[i].q).collect();
    let ho_mean = holdout_q.iter().sum::<f64>() / holdout_q.len() as f64;
    let ho_var =
        holdout_q.iter().map(|q| (q - ho_mean).powi(2)).sum::<f64>() / holdout_q.len() as f64;
    let holdout_mse = holdout
        .iter()
        .map(|&i| (model.predict_q(&samples[i].ctx, samples[i].y) - samples[i].q).powi(2))
        .sum::<f64>()
        / holdout.len() as f64;
    let holdout_relative_mse = if ho_var > 0.0 {
        holdout_mse / ho_var
    } else {
        holdout_mse
    };
    let report = TrainingReport {
        epochs: config.epochs,
        n_train: train_idx.len(),
        n_holdout: holdout.len(),
        final_train_loss,
        holdout_mse,
        holdout_relative_mse,
        holdout_r2: 1.0 - holdout_relative_mse,
    };

    if !(holdout_relative_mse <= config.max_relative_mse) {
        return Err(Error::TrainingFailure {
            relative_mse: holdout_relative_mse,
            threshold: config.max_relative_mse,
            epochs: config.epochs,
            train_loss: final_train_loss,
        });
    }
    Ok((model, report))
}

/// On-disk form of a [`PredictorModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    /// Digest of the run configuration that produced the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub model: PredictorModel,
}

impl PredictorModel {
    pub fn to_json(&self) -> Result<String> {
        self.to_json_with_digest(None)
    }

    pub fn to_json_with_digest(&self, config_digest: Option<&str>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            config_digest: config_digest.map(str::to_owned),
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Data("model file lacks a schema_version".into()))?;
        if found != u64::from(MODEL_SCHEMA_VERSION) {
            return Err(Error::SchemaMismatch {
                expected: MODEL_SCHEMA_VERSION,
                found: found as u32,
            });
        }
        let file: ModelFile = serde_json::from_value(value)?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextBox;
    use rand::Rng;

    fn random_ctx(rng: &mut ChaCha8Rng, bx: &ContextBox) -> SystemContext {
        let frac: [f64; CONTEXT_DIM] = std::array::from_fn(|_| rng.random::<f64>());
        bx.lerp(frac)
    }

    #[test]
    fn featurize_extremes_and_midpoint() {
        let bx = ContextBox::default_benchmark();
        let norm = FeatureNormalizer::from_bounds(&bx.lower, &bx.upper, 12);
        assert_eq!(norm.featurize(&bx.lower, 0), [0.0; FEATURE_DIM]);
        assert_eq!(norm.featurize(&bx.upper, 12), [1.0; FEATURE_DIM]);
        let mid = norm.featurize(&bx.center(), 6);
        for v in mid {
            assert!((v - 0.5).abs() < 1e-12, "{mid:?}");
        }
    }

    #[test]
    fn featurize_clamps_out_of_range() {
        let bx = ContextBox::default_benchmark();
        let norm = FeatureNormalizer::from_bounds(&bx.lower, &bx.upper, 12);
        let mut far = bx.upper;
        far.bandwidth = 1e6;
        far.carbon_intensity = -50.0;
        let f = norm.featurize(&far, 12);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[6], 0.0);
    }

    #[test]
    fn constant_target_is_reproduced() {
        let bx = ContextBox::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<TrainingSample> = (0..400)
            .map(|i| TrainingSample {
                ctx: random_ctx(&mut rng, &bx),
                y: i % 6,
                q: 3.25,
            })
            .collect();
        let config = TrainingConfig {
            epochs: 30,
            ..TrainingConfig::default()
        };
        let (model, _) = train(&samples, 5, &config).unwrap();
        for _ in 0..50 {
            let ctx = random_ctx(&mut rng, &bx);
            let y = rng.random_range(0..=5);
            assert!((model.predict_q(&ctx, y) - 3.25).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_target_reaches_high_r2() {
        let bx = ContextBox::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<TrainingSample> = (0..1000)
            .map(|_| {
                let ctx = random_ctx(&mut rng, &bx);
                TrainingSample {
                    ctx,
                    y: rng.random_range(0..=5),
                    q: 0.5 + 0.01 * ctx.carbon_intensity,
                }
            })
            .collect();
        let config = TrainingConfig {
            epochs: 60,
            ..TrainingConfig::default()
        };
        let (_, report) = train(&samples, 5, &config).unwrap();
        assert!(report.holdout_r2 > 0.99, "{report:?}");
    }

    #[test]
    fn training_is_reproducible() {
        let bx = ContextBox::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<TrainingSample> = (0..300)
            .map(|_| {
                let ctx = random_ctx(&mut rng, &bx);
                TrainingSample {
                    ctx,
                    y: 2,
                    q: ctx.bandwidth.sqrt(),
                }
            })
            .collect();
        let config = TrainingConfig {
            epochs: 5,
            max_relative_mse: 10.0,
            ..TrainingConfig::default()
        };
        let (a, ra) = train(&samples, 5, &config).unwrap();
        let (b, rb) = train(&samples, 5, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn non_convergence_is_reported() {
        let bx = ContextBox::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Pure noise targets cannot be fit.
        let samples: Vec<TrainingSample> = (0..500)
            .map(|_| TrainingSample {
                ctx: random_ctx(&mut rng, &bx),
                y: 0,
                q: rng.random::<f64>(),
            })
            .collect();
        let config = TrainingConfig {
            epochs: 2,
            ..TrainingConfig::default()
        };
        assert!(matches!(
            train(&samples, 5, &config),
            Err(Error::TrainingFailure { .. })
        ));
    }

    #[test]
    fn too_few_samples_rejected() {
        let bx = ContextBox::default_benchmark();
        let s = vec![
            TrainingSample {
                ctx: bx.center(),
                y: 0,
                q: 1.0
            };
            99
        ];
        assert!(train(&s, 5, &TrainingConfig::default()).is_err());
    }

    #[test]
    fn argmin_ties_and_oracle_stub() {
        let bx = ContextBox::default_benchmark();
        let constant = ConstantModel {
            value: 1.0,
            layers: 7,
        };
        assert_eq!(implicit_argmin(&constant, &bx.center()), 0);

        let system = SystemModel::new(
            crate::cost_model::DnnProfile::resnet_like(),
            crate::cost_model::PowerModel::default(),
            crate::cost_model::Slowdown::default(),
        )
        .unwrap();
        let weights = ObjectiveWeights::default();
        let oracle = OracleModel::new(&system, weights);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let ctx = random_ctx(&mut rng, &bx);
            assert_eq!(
                implicit_argmin(&oracle, &ctx),
                system.optimal_partition(&ctx, &weights).unwrap().partition
            );
        }
    }

    #[test]
    fn model_file_round_trip_and_version_check() {
        let bx = ContextBox::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples: Vec<TrainingSample> = (0..200)
            .map(|_| {
                let ctx = random_ctx(&mut rng, &bx);
                TrainingSample {
                    ctx,
                    y: 1,
                    q: ctx.edge_gpu_util,
                }
            })
            .collect();
        let config = TrainingConfig {
            epochs: 3,
            max_relative_mse: 10.0,
            ..TrainingConfig::default()
        };
        let (model, _) = train(&samples, 5, &config).unwrap();
        let text = model.to_json().unwrap();
        let back = PredictorModel::from_json(&text).unwrap();
        let ctx = random_ctx(&mut rng, &bx);
        for y in 0..=5 {
            assert_eq!(
                model.predict_q(&ctx, y).to_bits(),
                back.predict_q(&ctx, y).to_bits()
            );
        }

        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
        assert!(matches!(
            PredictorModel::from_json(&bumped),
            Err(Error::SchemaMismatch {
                expected: 1,
                found: 99
            })
        ));
    }
}
