//! Split conformal intervals over candidate partition points.
//!
//! The surrogate itself is the score: a calibration point `(x, y_opt)` scores
//! `Q(x, y_opt)`. Scores are sorted once with a `+∞` sentinel appended. For a
//! test context the threshold `q̂` is the `1 − α` quantile of the (possibly
//! likelihood-ratio weighted) score distribution, and the interval is every
//! candidate whose predicted objective is at most `q̂`.
//!
//! Quantile convention: the smallest score whose cumulative mass is at least
//! `1 − α`, with tied scores accumulated together before the comparison.

use serde::{Deserialize, Serialize};

use crate::context::SystemContext;
use crate::error::{Error, Result};
use crate::predictor::QModel;
use crate::shift::{self, CovariateDensity, TestDensity, UniformBoxDensity};

/// Accumulated rounding tolerated when comparing cumulative mass to `1 − α`.
pub const MASS_TOL: f64 = 1e-12;

/// A calibration context labelled with its true optimal partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub ctx: SystemContext,
    pub y_opt: usize,
}

/// Nonconformity score `Q(x, y_opt)`.
pub fn nonconformity_score<M: QModel + ?Sized>(model: &M, sample: &CalibrationSample) -> f64 {
    model.predict_q(&sample.ctx, sample.y_opt)
}

/// Calibration scores sorted non-decreasing with a trailing `+∞` sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCalibration {
    scores: Vec<f64>,
    contexts: Vec<SystemContext>,
}

impl ScoredCalibration {
    /// Sorts `(score, context)` pairs by score and appends the sentinel.
    pub fn new(scores: Vec<f64>, contexts: Vec<SystemContext>) -> Result<Self> {
        if scores.len() != contexts.len() {
            return Err(Error::InvalidParameter(format!(
                "{} scores for {} contexts",
                scores.len(),
                contexts.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "nonconformity scores must be finite, got {bad}"
            )));
        }
        let mut pairs: Vec<(f64, SystemContext)> = scores.into_iter().zip(contexts).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (mut scores, contexts): (Vec<f64>, Vec<SystemContext>) = pairs.into_iter().unzip();
        scores.push(f64::INFINITY);
        Ok(Self { scores, contexts })
    }

    /// Scores every calibration sample with `model`.
    pub fn from_samples<M: QModel + ?Sized>(
        model: &M,
        samples: &[CalibrationSample],
    ) -> Result<Self> {
        Self::new(
            samples
                .iter()
                .map(|s| nonconformity_score(model, s))
                .collect(),
            samples.iter().map(|s| s.ctx).collect(),
        )
    }

    /// Sorted scores including the trailing sentinel.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Calibration contexts aligned with the finite scores.
    pub fn contexts(&self) -> &[SystemContext] {
        &self.contexts
    }

    /// Number of calibration points `|D_c|` (sentinel excluded).
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Equal mass `1 / (n + 1)` on every calibration score and the sentinel.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / (n as f64 + 1.0); n + 1]
}

/// `q̂` under equal point masses: the `⌈(1 − α)(n + 1)⌉`-th smallest score,
/// or `+∞` when that rank exceeds `n`.
pub fn vanilla_quantile(scored: &ScoredCalibration, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let total = scored.scores.len() as f64;
    let target = 1.0 - alpha - MASS_TOL;
    let k = (1..=scored.scores.len())
        .find(|&k| k as f64 / total >= target)
        .unwrap_or(scored.scores.len());
    Ok(scored.scores[k - 1])
}

/// `q̂` under arbitrary point masses aligned with [`ScoredCalibration::scores`]
/// (the last weight sits on the `+∞` sentinel).
pub fn weighted_quantile(scored: &ScoredCalibration, weights: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if weights.len() != scored.scores.len() {
        return Err(Error::InvalidWeights(format!(
            "expected {} weights (including sentinel), got {}",
            scored.scores.len(),
            weights.len()
        )));
    }
    shift::check_weights(weights)?;
    let target = 1.0 - alpha - MASS_TOL;
    let scores = &scored.scores;
    let mut cumulative = 0.0;
    let mut i = 0;
    while i < scores.len() {
        let v = scores[i];
        while i < scores.len() && scores[i] == v {
            cumulative += weights[i];
            i += 1;
        }
        if cumulative >= target {
            return Ok(v);
        }
    }
    Ok(f64::INFINITY)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalMember {
    pub layer: usize,
    pub predicted_q: f64,
}

/// Candidate partitions whose predicted objective is at most `q_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    /// Sorted by layer index.
    pub members: Vec<IntervalMember>,
    pub q_hat: f64,
    pub alpha: f64,
}

impl PredictionInterval {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.members.iter().any(|m| m.layer == layer)
    }

    pub fn layers(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.layer).collect()
    }

    /// Thresholds precomputed predictions (indexed by layer) at `q_hat`.
    pub fn from_predictions(predictions: &[f64], q_hat: f64, alpha: f64) -> Self {
        let members = predictions
            .iter()
            .enumerate()
            .filter(|(_, q)| **q <= q_hat)
            .map(|(layer, &predicted_q)| IntervalMember { layer, predicted_q })
            .collect();
        Self {
            members,
            q_hat,
            alpha,
        }
    }
}

/// Interval for `ctx_test` with `q̂` taken from `weights`.
pub fn build_interval<M: QModel + ?Sized>(
    model: &M,
    scored: &ScoredCalibration,
    weights: &[f64],
    ctx_test: &SystemContext,
    alpha: f64,
) -> Result<PredictionInterval> {
    let q_hat = weighted_quantile(scored, weights, alpha)?;
    Ok(PredictionInterval::from_predictions(
        &model.predict_all(ctx_test),
        q_hat,
        alpha,
    ))
}

/// How calibration scores are weighted for a test point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)]
pub enum Weighting {
    /// Equal masses; plain split conformal.
    Exchangeable,
    /// Likelihood-ratio masses for test contexts drawn from `test` while
    /// calibration contexts came from `calibration`.
    CovariateShift {
        test: TestDensity,
        calibration: UniformBoxDensity,
    },
}

/// Sorted calibration scores plus whatever per-point weighting state can be
/// computed ahead of test time.
#[derive(Debug, Clone)]
pub struct Calibrator {
    scored: ScoredCalibration,
    weighting: Weighting,
    /// `log w(X_i)` aligned with the sorted scores; empty when exchangeable.
    calib_log_ratios: Vec<f64>,
}

impl Calibrator {
    pub fn new(scored: ScoredCalibration, weighting: Weighting) -> Result<Self> {
        let calib_log_ratios = match &weighting {
            Weighting::Exchangeable => Vec::new(),
            Weighting::CovariateShift { test, calibration } => scored
                .contexts()
                .iter()
                .map(|c| shift::log_likelihood_ratio(test, calibration, c))
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            scored,
            weighting,
            calib_log_ratios,
        })
    }

    pub fn exchangeable(scored: ScoredCalibration) -> Self {
        Self {
            scored,
            weighting: Weighting::Exchangeable,
            calib_log_ratios: Vec::new(),
        }
    }

    pub fn scored(&self) -> &ScoredCalibration {
        &self.scored
    }

    pub fn weighting(&self) -> &Weighting {
        &self.weighting
    }

    /// Point masses (sentinel last) for a test context.
    pub fn weights_for(&self, ctx_test: &SystemContext) -> Result<Vec<f64>> {
        match &self.weighting {
            Weighting::Exchangeable => Ok(uniform_weights(self.scored.len())),
            Weighting::CovariateShift { test, calibration } => {
                let log_w_test = shift::log_likelihood_ratio(test, calibration, ctx_test)?;
                shift::normalized_weights_from_log(&self.calib_log_ratios, log_w_test)
            }
        }
    }

    pub fn q_hat(&self, ctx_test: &SystemContext, alpha: f64) -> Result<f64> {
        match self.weighting {
            Weighting::Exchangeable => vanilla_quantile(&self.scored, alpha),
            Weighting::CovariateShift { .. } => {
                weighted_quantile(&self.scored, &self.weights_for(ctx_test)?, alpha)
            }
        }
    }

    pub fn interval<M: QModel + ?Sized>(
        &self,
        model: &M,
        ctx_test: &SystemContext,
        alpha: f64,
    ) -> Result<PredictionInterval> {
        let q_hat = self.q_hat(ctx_test, alpha)?;
        Ok(PredictionInterval::from_predictions(
            &model.predict_all(ctx_test),
            q_hat,
            alpha,
        ))
    }

    /// Log-density of the test distribution, when one is configured.
    pub fn test_log_density(&self, x: &SystemContext) -> Option<f64> {
        match &self.weighting {
            Weighting::Exchangeable => None,
            Weighting::CovariateShift { test, .. } => Some(test.log_density(x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{ContextBox, CONTEXT_DIM};
    use crate::cost_model::{DnnProfile, ObjectiveWeights, PowerModel, Slowdown, SystemModel};
    use crate::predictor::{ConstantModel, OracleModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dummy_ctxs(n: usize) -> Vec<SystemContext> {
        vec![ContextBox::default_benchmark().center(); n]
    }

    fn scored(scores: &[f64]) -> ScoredCalibration {
        ScoredCalibration::new(scores.to_vec(), dummy_ctxs(scores.len())).unwrap()
    }

    #[test]
    fn sorting_and_sentinel() {
        let s = scored(&[0.3, 0.1, 0.2]);
        assert_eq!(s.scores(), &[0.1, 0.2, 0.3, f64::INFINITY]);
        assert_eq!(s.len(), 3);
        assert!(ScoredCalibration::new(vec![f64::NAN], dummy_ctxs(1)).is_err());
    }

    #[test]
    fn vanilla_examples() {
        let s = scored(&[0.1, 0.2, 0.3]);
        assert_eq!(vanilla_quantile(&s, 0.25).unwrap(), 0.3);
        assert_eq!(vanilla_quantile(&s, 0.1).unwrap(), f64::INFINITY);
        assert_eq!(vanilla_quantile(&s, 0.999).unwrap(), 0.1);
        assert!(vanilla_quantile(&s, 0.0).is_err());
        assert!(vanilla_quantile(&s, 1.0).is_err());
    }

    #[test]
    fn weighted_examples() {
        let s = scored(&[0.1, 0.2, 0.3]);
        assert_eq!(weighted_quantile(&s, &[0.25; 4], 0.5).unwrap(), 0.2);
        for alpha in [0.01, 0.1, 0.25, 0.3, 0.5, 0.74, 0.76, 0.99] {
            assert_eq!(
                weighted_quantile(&s, &uniform_weights(3), alpha).unwrap(),
                vanilla_quantile(&s, alpha).unwrap()
            );
            assert_eq!(
                weighted_quantile(&s, &[0.0, 0.0, 0.0, 1.0], alpha).unwrap(),
                f64::INFINITY
            );
        }
        assert!(weighted_quantile(&s, &[0.3; 4], 0.5).is_err());
        assert!(weighted_quantile(&s, &[0.5; 2], 0.5).is_err());
    }

    #[test]
    fn tied_scores_accumulate_together() {
        let s = scored(&[0.1, 0.2, 0.2, 0.4]);
        // Mass 0.2 each; 0.2 is reached at cumulative 0.6.
        assert_eq!(weighted_quantile(&s, &[0.2; 5], 0.5).unwrap(), 0.2);
        assert_eq!(weighted_quantile(&s, &[0.2; 5], 0.35).unwrap(), 0.4);
    }

    #[test]
    fn interval_extremes() {
        let model = ConstantModel {
            value: 1.0,
            layers: 5,
        };
        let ctx = ContextBox::default_benchmark().center();
        let s = scored(&[0.1, 0.2, 0.3]);
        // q̂ = +∞ contains everything.
        let i = build_interval(&model, &s, &uniform_weights(3), &ctx, 0.1).unwrap();
        assert_eq!(i.layers(), vec![0, 1, 2, 3, 4, 5]);
        // q̂ = 0.3 lies below every prediction.
        let i = build_interval(&model, &s, &uniform_weights(3), &ctx, 0.25).unwrap();
        assert!(i.is_empty());
        assert_eq!(i.q_hat, 0.3);
    }

    #[test]
    fn scores_from_models() {
        let bx = ContextBox::default_benchmark();
        let system = SystemModel::new(
            DnnProfile::resnet_like(),
            PowerModel::default(),
            Slowdown::default(),
        )
        .unwrap();
        let weights = ObjectiveWeights::default();
        let oracle = OracleModel::new(&system, weights);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let ctx = bx.lerp(std::array::from_fn(|_| rng.random::<f64>()));
            let best = system.optimal_partition(&ctx, &weights).unwrap();
            let sample = CalibrationSample {
                ctx,
                y_opt: best.partition,
            };
            assert_eq!(nonconformity_score(&oracle, &sample), best.q);
            let c = ConstantModel {
                value: 2.5,
                layers: 12,
            };
            assert_eq!(nonconformity_score(&c, &sample), 2.5);
        }
    }

    #[test]
    fn exchangeable_oracle_coverage() {
        // Monte-Carlo check of marginal coverage with the exact model as the
        // surrogate: fresh calibration + test draws per trial.
        let bx = ContextBox::default_benchmark();
        let system = SystemModel::new(
            DnnProfile::resnet_like(),
            PowerModel::default(),
            Slowdown::default(),
        )
        .unwrap();
        let weights = ObjectiveWeights::default();
        let oracle = OracleModel::new(&system, weights);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let draw = |rng: &mut ChaCha8Rng| {
            let ctx = bx.lerp(std::array::from_fn(|_| rng.random::<f64>()));
            CalibrationSample {
                ctx,
                y_opt: system.optimal_partition(&ctx, &weights).unwrap().partition,
            }
        };
        let trials = 1000;
        let mut covered = 0;
        for _ in 0..trials {
            let calib: Vec<CalibrationSample> = (0..50).map(|_| draw(&mut rng)).collect();
            let cal =
                Calibrator::exchangeable(ScoredCalibration::from_samples(&oracle, &calib).unwrap());
            let test = draw(&mut rng);
            if cal
                .interval(&oracle, &test.ctx, 0.1)
                .unwrap()
                .contains(test.y_opt)
            {
                covered += 1;
            }
        }
        let rate = covered as f64 / trials as f64;
        assert!(rate >= 0.87, "coverage {rate}");
    }

    #[test]
    fn identical_densities_reproduce_vanilla() {
        let bx = UniformBoxDensity::new([0.0; CONTEXT_DIM], [1.0; CONTEXT_DIM]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut pt = || SystemContext::from_array(std::array::from_fn(|_| rng.random::<f64>()));
        let ctxs: Vec<SystemContext> = (0..25).map(|_| pt()).collect();
        let raw: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 * 0.3).collect();
        let s = ScoredCalibration::new(raw, ctxs).unwrap();
        let vanilla = Calibrator::exchangeable(s.clone());
        let weighted = Calibrator::new(
            s,
            Weighting::CovariateShift {
                test: bx.clone().into(),
                calibration: bx,
            },
        )
        .unwrap();
        for _ in 0..20 {
            let x = pt();
            assert_eq!(weighted.weights_for(&x).unwrap(), uniform_weights(25));
            for alpha in [0.05, 0.1, 0.2, 0.5] {
                assert_eq!(
                    weighted.q_hat(&x, alpha).unwrap(),
                    vanilla.q_hat(&x, alpha).unwrap()
                );
            }
        }
    }

    #[test]
    fn shift_weights_favour_nearby_calibration_points() {
        let bx = UniformBoxDensity::new([0.0; CONTEXT_DIM], [1.0; CONTEXT_DIM]).unwrap();
        let near = SystemContext::from_array([0.9; CONTEXT_DIM]);
        let far = SystemContext::from_array([0.1; CONTEXT_DIM]);
        let s = ScoredCalibration::new(vec![1.0, 2.0], vec![far, near]).unwrap();
        let test = shift::fit_gaussian(&near, 0.2, &bx).unwrap();
        let cal = Calibrator::new(
            s,
            Weighting::CovariateShift {
                test: test.into(),
                calibration: bx,
            },
        )
        .unwrap();
        let w = cal.weights_for(&near).unwrap();
        assert!(w[1] > w[0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantile_monotone_in_alpha(
            raw in prop::collection::vec(0.0f64..10.0, 1..30),
            a in 0.01f64..0.99,
            b in 0.01f64..0.99,
        ) {
            let s = scored(&raw);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(vanilla_quantile(&s, lo).unwrap() >= vanilla_quantile(&s, hi).unwrap());
        }

        #[test]
        fn uniform_weights_reduce_to_vanilla(
            raw in prop::collection::vec(0.0f64..10.0, 1..60),
            alpha in 0.001f64..0.999,
        ) {
            let s = scored(&raw);
            prop_assert_eq!(
                weighted_quantile(&s, &uniform_weights(raw.len()), alpha).unwrap(),
                vanilla_quantile(&s, alpha).unwrap()
            );
        }

        #[test]
        fn permutation_invariance(
            raw in prop::collection::vec(0.0f64..10.0, 2..30),
            alpha in 0.01f64..0.99,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = raw.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                vanilla_quantile(&scored(&raw), alpha).unwrap(),
                vanilla_quantile(&scored(&shuffled), alpha).unwrap()
            );
        }

        #[test]
        fn interval_membership_nested(
            preds in prop::collection::vec(0.0f64..10.0, 2..14),
            raw in prop::collection::vec(0.0f64..10.0, 1..40),
            a in 0.01f64..0.99,
            b in 0.01f64..0.99,
        ) {
            let s = scored(&raw);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let wide = PredictionInterval::from_predictions(&preds, vanilla_quantile(&s, lo).unwrap(), lo);
            let narrow = PredictionInterval::from_predictions(&preds, vanilla_quantile(&s, hi).unwrap(), hi);
            for m in &narrow.members {
                prop_assert!(wide.contains(m.layer));
            }
            for m in &wide.members {
                prop_assert!(m.predicted_q <= wide.q_hat);
            }
        }
    }
}
