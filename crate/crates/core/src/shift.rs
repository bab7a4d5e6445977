//! Covariate densities for calibration and test contexts, and the
//! likelihood-ratio weights that correct conformal quantiles under shift.
//!
//! Densities are evaluated in log space. Ratios are only exponentiated after
//! subtracting the largest log-ratio, so seven-dimensional products do not
//! underflow.

use serde::{Deserialize, Serialize};

use crate::context::{ContextBox, SystemContext, CONTEXT_DIM, CONTEXT_FIELDS};
use crate::error::{Error, Result};

/// Tolerance on `Σ weights = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Margin added on each side of a fitted box, as a fraction of the observed range.
pub const UNIFORM_FIT_MARGIN: f64 = 0.01;

pub trait CovariateDensity {
    /// Natural log of the density at `x`; `-inf` where the density vanishes.
    fn log_density(&self, x: &SystemContext) -> f64;
}

/// Independent uniform distribution over a strict box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBoxDensity {
    pub lower: [f64; CONTEXT_DIM],
    pub upper: [f64; CONTEXT_DIM],
}

impl UniformBoxDensity {
    pub fn new(lower: [f64; CONTEXT_DIM], upper: [f64; CONTEXT_DIM]) -> Result<Self> {
        for i in 0..CONTEXT_DIM {
            if !(lower[i].is_finite() && upper[i].is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite bound in `{}`",
                    CONTEXT_FIELDS[i]
                )));
            }
            if lower[i] >= upper[i] {
                return Err(Error::DegenerateDimension(CONTEXT_FIELDS[i]));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_box(bx: &ContextBox) -> Result<Self> {
        Self::new(bx.lower_array(), bx.upper_array())
    }

    /// Observed per-dimension extremes, widened by 1% of the range on each side.
    pub fn fit<'a, I>(contexts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SystemContext>,
    {
        let mut lower = [f64::INFINITY; CONTEXT_DIM];
        let mut upper = [f64::NEG_INFINITY; CONTEXT_DIM];
        let mut count = 0usize;
        for ctx in contexts {
            count += 1;
            for (i, v) in ctx.to_array().into_iter().enumerate() {
                lower[i] = lower[i].min(v);
                upper[i] = upper[i].max(v);
            }
        }
        if count < 2 {
            return Err(Error::InvalidParameter(format!(
                "fitting a uniform box needs at least 2 samples, got {count}"
            )));
        }
        for i in 0..CONTEXT_DIM {
            let range = upper[i] - lower[i];
            if range <= 0.0 {
                return Err(Error::DegenerateDimension(CONTEXT_FIELDS[i]));
            }
            lower[i] -= UNIFORM_FIT_MARGIN * range;
            upper[i] += UNIFORM_FIT_MARGIN * range;
        }
        Self::new(lower, upper)
    }

    pub fn ranges(&self) -> [f64; CONTEXT_DIM] {
        std::array::from_fn(|i| self.upper[i] - self.lower[i])
    }

    pub fn contains(&self, x: &SystemContext) -> bool {
        self.outside_dimension(x).is_none()
    }

    fn outside_dimension(&self, x: &SystemContext) -> Option<(usize, f64)> {
        x.to_array()
            .into_iter()
            .enumerate()
            .find(|&(i, v)| !(v >= self.lower[i] && v <= self.upper[i]))
    }

    /// Errors with the offending dimension when `x` is outside the box.
    pub fn check_support(&self, x: &SystemContext) -> Result<()> {
        match self.outside_dimension(x) {
            None => Ok(()),
            Some((i, v)) => Err(Error::OutsideSupport {
                dimension: CONTEXT_FIELDS[i],
                value: v,
                lower: self.lower[i],
                upper: self.upper[i],
            }),
        }
    }

    pub fn to_box(&self) -> ContextBox {
        ContextBox {
            lower: SystemContext::from_array(self.lower),
            upper: SystemContext::from_array(self.upper),
        }
    }
}

impl CovariateDensity for UniformBoxDensity {
    fn log_density(&self, x: &SystemContext) -> f64 {
        if self.contains(x) {
            -self.ranges().iter().map(|r| r.ln()).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Diagonal-covariance multivariate normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDensity {
    pub mean: [f64; CONTEXT_DIM],
    pub variance: [f64; CONTEXT_DIM],
}

impl GaussianDensity {
    pub fn new(mean: [f64; CONTEXT_DIM], variance: [f64; CONTEXT_DIM]) -> Result<Self> {
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter(
                "gaussian mean must be finite".into(),
            ));
        }
        if variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(
                "gaussian variances must be finite and > 0".into(),
            ));
        }
        Ok(Self { mean, variance })
    }

    pub fn std_dev(&self) -> [f64; CONTEXT_DIM] {
        std::array::from_fn(|i| self.variance[i].sqrt())
    }

    /// Log-density of the `i`-th marginal at `v`.
    pub fn log_density_component(&self, i: usize, v: f64) -> f64 {
        let var = self.variance[i];
        let d = v - self.mean[i];
        -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
    }
}

impl CovariateDensity for GaussianDensity {
    fn log_density(&self, x: &SystemContext) -> f64 {
        x.to_array()
            .into_iter()
            .enumerate()
            .map(|(i, v)| self.log_density_component(i, v))
            .sum()
    }
}

/// Test-time covariate density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TestDensity {
    Uniform(UniformBoxDensity),
    Gaussian(GaussianDensity),
}

impl CovariateDensity for TestDensity {
    fn log_density(&self, x: &SystemContext) -> f64 {
        match self {
            TestDensity::Uniform(d) => d.log_density(x),
            TestDensity::Gaussian(d) => d.log_density(x),
        }
    }
}

impl From<GaussianDensity> for TestDensity {
    fn from(d: GaussianDensity) -> Self {
        TestDensity::Gaussian(d)
    }
}

impl From<UniformBoxDensity> for TestDensity {
    fn from(d: UniformBoxDensity) -> Self {
        TestDensity::Uniform(d)
    }
}

/// Fits the calibration density: a uniform box around the calibration contexts.
pub fn fit_uniform(samples: &[crate::conformal::CalibrationSample]) -> Result<UniformBoxDensity> {
    UniformBoxDensity::fit(samples.iter().map(|s| &s.ctx))
}

/// Test density from a single context measurement: mean at the measurement,
/// per-dimension std of `rel_std` times the box range.
pub fn fit_gaussian(
    measurement: &SystemContext,
    rel_std: f64,
    bx: &UniformBoxDensity,
) -> Result<GaussianDensity> {
    if !(rel_std.is_finite() && rel_std > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rel_std must be > 0, got {rel_std}"
        )));
    }
    let ranges = bx.ranges();
    GaussianDensity::new(
        measurement.to_array(),
        std::array::from_fn(|i| (rel_std * ranges[i]).powi(2)),
    )
}

/// `log w(x) = log P̃(x) − log P(x)`; errors outside the calibration support.
pub fn log_likelihood_ratio<D: CovariateDensity + ?Sized>(
    test_density: &D,
    calib_density: &UniformBoxDensity,
    x: &SystemContext,
) -> Result<f64> {
    calib_density.check_support(x)?;
    Ok(test_density.log_density(x) - calib_density.log_density(x))
}

/// `w(x) = P̃(x) / P(x)`.
pub fn likelihood_ratio<D: CovariateDensity + ?Sized>(
    test_density: &D,
    calib_density: &UniformBoxDensity,
    x: &SystemContext,
) -> Result<f64> {
    Ok(log_likelihood_ratio(test_density, calib_density, x)?.exp())
}

/// Normalizes raw ratios into point masses: `w_i / (Σ w_j + w_test)` for each
/// calibration point, followed by `w_test / (same)` for the `+∞` sentinel.
pub fn normalized_weights(w_calib: &[f64], w_test: f64) -> Result<Vec<f64>> {
    if w_calib
        .iter()
        .chain(std::iter::once(&w_test))
        .any(|w| !(w.is_finite() && *w >= 0.0))
    {
        return Err(Error::InvalidWeights(
            "likelihood ratios must be finite and >= 0".into(),
        ));
    }
    let total: f64 = w_calib.iter().sum::<f64>() + w_test;
    if !(total > 0.0) {
        return Err(Error::InvalidWeights(
            "at least one likelihood ratio must be positive".into(),
        ));
    }
    Ok(w_calib
        .iter()
        .chain(std::iter::once(&w_test))
        .map(|w| w / total)
        .collect())
}

/// [`normalized_weights`] from log-ratios, stable when every ratio would
/// underflow in linear space.
pub fn normalized_weights_from_log(log_w_calib: &[f64], log_w_test: f64) -> Result<Vec<f64>> {
    let all = || {
        log_w_calib
            .iter()
            .copied()
            .chain(std::iter::once(log_w_test))
    };
    if all().any(|l| l.is_nan() || l == f64::INFINITY) {
        return Err(Error::InvalidWeights(
            "log-ratios must be < +inf and not NaN".into(),
        ));
    }
    let max = all().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidWeights(
            "at least one likelihood ratio must be positive".into(),
        ));
    }
    let shifted: Vec<f64> = log_w_calib.iter().map(|l| (l - max).exp()).collect();
    normalized_weights(&shifted, (log_w_test - max).exp())
}

pub fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidWeights(
            "weights must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidWeights(format!(
            "weights must sum to 1 within {WEIGHT_SUM_TOL:e}, got {sum}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> UniformBoxDensity {
        UniformBoxDensity::new([0.0; CONTEXT_DIM], [1.0; CONTEXT_DIM]).unwrap()
    }

    fn ctx(v: f64) -> SystemContext {
        SystemContext::from_array([v; CONTEXT_DIM])
    }

    #[test]
    fn fit_uniform_two_points() {
        let a = SystemContext::from_array([1.0, 0.1, 0.2, 300.0, 0.0, 500.0, 100.0]);
        let b = SystemContext::from_array([11.0, 0.5, 0.4, 900.0, 0.5, 1500.0, 700.0]);
        let d = UniformBoxDensity::fit([&a, &b]).unwrap();
        assert_relative_eq!(d.lower[0], 0.9, max_relative = 1e-12);
        assert_relative_eq!(d.upper[0], 11.1, max_relative = 1e-12);
        assert_relative_eq!(d.lower[6], 94.0, max_relative = 1e-12);
        assert_relative_eq!(d.upper[6], 706.0, max_relative = 1e-12);
        assert!(d.contains(&a) && d.contains(&b));
    }

    #[test]
    fn fit_uniform_degenerate_and_small() {
        let a = SystemContext::from_array([1.0, 0.1, 0.2, 300.0, 0.0, 500.0, 100.0]);
        let mut b = SystemContext::from_array([11.0, 0.5, 0.4, 900.0, 0.5, 1500.0, 700.0]);
        b.edge_gpu_util = a.edge_gpu_util;
        assert!(matches!(
            UniformBoxDensity::fit([&a, &b]),
            Err(Error::DegenerateDimension("edge_gpu_util"))
        ));
        assert!(UniformBoxDensity::fit([&a]).is_err());
    }

    #[test]
    fn fit_uniform_recovers_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<SystemContext> = (0..1000)
            .map(|_| SystemContext::from_array(std::array::from_fn(|_| rng.random::<f64>())))
            .collect();
        let d = UniformBoxDensity::fit(&pts).unwrap();
        for i in 0..CONTEXT_DIM {
            assert!(d.lower[i].abs() < 0.02, "{:?}", d.lower);
            assert!((d.upper[i] - 1.0).abs() < 0.02, "{:?}", d.upper);
        }
    }

    #[test]
    fn gaussian_construction_and_mode() {
        let bx = UniformBoxDensity::new([0.0; 7], [2.0, 1.0, 1.0, 10.0, 1.0, 4.0, 100.0]).unwrap();
        let center = SystemContext::from_array(std::array::from_fn(|i| bx.upper[i] / 2.0));
        let g = fit_gaussian(&center, 0.1, &bx).unwrap();
        assert_eq!(g.mean, center.to_array());
        for (s, r) in g.std_dev().iter().zip(bx.ranges()) {
            assert_relative_eq!(*s, 0.1 * r, max_relative = 1e-12);
        }
        let at_mean = g.log_density(&center);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = SystemContext::from_array(std::array::from_fn(|i| {
                rng.random::<f64>() * bx.upper[i]
            }));
            assert!(g.log_density(&p) < at_mean);
        }
        assert!(fit_gaussian(&center, 0.0, &bx).is_err());
    }

    #[test]
    fn gaussian_log_density_closed_form() {
        // Unit box, std 0.1 per dimension, evaluated at the mean:
        // 7 · (−½ ln(2π · 0.01)).
        let g = fit_gaussian(&ctx(0.5), 0.1, &unit_box()).unwrap();
        let expected = 7.0 * (-0.5 * (2.0 * std::f64::consts::PI * 0.01).ln());
        assert_relative_eq!(g.log_density(&ctx(0.5)), expected, max_relative = 1e-12);
    }

    #[test]
    fn ratio_is_one_for_identical_distributions() {
        let bx = unit_box();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = SystemContext::from_array(std::array::from_fn(|_| rng.random::<f64>()));
            assert_eq!(likelihood_ratio(&bx, &bx, &p).unwrap(), 1.0);
        }
    }

    #[test]
    fn ratio_maximal_at_mean_and_matches_one_dim_value() {
        let bx = unit_box();
        let g = fit_gaussian(&ctx(0.5), 0.1, &bx).unwrap();
        // One marginal: N(0.5, 0.1²) density at 0.5 over U[0,1] density 1.
        let one_dim = g.log_density_component(0, 0.5).exp();
        assert_relative_eq!(one_dim, 3.989422804014327, max_relative = 1e-12);
        let w_mean = likelihood_ratio(&g, &bx, &ctx(0.5)).unwrap();
        assert_relative_eq!(w_mean, one_dim.powi(7), max_relative = 1e-10);
        assert!(likelihood_ratio(&g, &bx, &ctx(0.4)).unwrap() < w_mean);
        assert!(likelihood_ratio(&g, &bx, &ctx(0.9)).unwrap() < w_mean);
    }

    #[test]
    fn ratio_outside_support_errors() {
        let bx = unit_box();
        let g = fit_gaussian(&ctx(0.5), 0.1, &bx).unwrap();
        let mut p = ctx(0.5);
        p.carbon_intensity = 1.5;
        assert!(matches!(
            likelihood_ratio(&g, &bx, &p),
            Err(Error::OutsideSupport {
                dimension: "carbon_intensity",
                ..
            })
        ));
    }

    #[test]
    fn normalized_weight_examples() {
        let w = normalized_weights(&[1.0, 2.0, 3.0], 4.0).unwrap();
        for (a, b) in w.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
        let w = normalized_weights(&[2.5; 4], 2.5).unwrap();
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let w = normalized_weights(&[1.0, 1.0], 0.0).unwrap();
        assert_eq!(w[2], 0.0);
        assert!(normalized_weights(&[0.0, 0.0], 0.0).is_err());
        assert!(normalized_weights(&[1.0, -1.0], 1.0).is_err());
    }

    #[test]
    fn log_domain_survives_underflow() {
        let w = normalized_weights_from_log(&[-2000.0, -2001.0], -2000.0).unwrap();
        let e = (-1.0f64).exp();
        assert_relative_eq!(w[0], 1.0 / (2.0 + e), max_relative = 1e-12);
        assert_relative_eq!(w[1], e / (2.0 + e), max_relative = 1e-12);
        check_weights(&w).unwrap();
        assert!(normalized_weights_from_log(&[f64::NEG_INFINITY], f64::NEG_INFINITY).is_err());
    }

    proptest::proptest! {
        #[test]
        fn weights_sum_to_one_and_are_scale_invariant(
            raw in proptest::collection::vec(0.0f64..1e3, 1..40),
            test in 0.0f64..1e3,
            scale in 1e-6f64..1e6,
        ) {
            proptest::prop_assume!(raw.iter().sum::<f64>() + test > 0.0);
            let w = normalized_weights(&raw, test).unwrap();
            proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_SUM_TOL);
            let scaled: Vec<f64> = raw.iter().map(|v| v * scale).collect();
            let ws = normalized_weights(&scaled, test * scale).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300) + 1e-15);
            }
        }
    }
}
