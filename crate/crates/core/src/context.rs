//! System context covariates and the box they range over.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of dynamic covariates in a [`SystemContext`].
pub const CONTEXT_DIM: usize = 7;

/// Column names, in [`SystemContext::to_array`] order.
pub const CONTEXT_FIELDS: [&str; CONTEXT_DIM] = [
    "bandwidth_mbps",
    "server_gpu_util",
    "edge_gpu_util",
    "edge_gpu_freq_mhz",
    "edge_cpu_util",
    "edge_cpu_freq_mhz",
    "carbon_intensity",
];

/// The dynamic state of the edge/server system at decision time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemContext {
    /// Edge-to-server bandwidth, Mb/s.
    pub bandwidth: f64,
    pub server_gpu_util: f64,
    pub edge_gpu_util: f64,
    /// MHz.
    pub edge_gpu_freq: f64,
    pub edge_cpu_util: f64,
    /// MHz.
    pub edge_cpu_freq: f64,
    /// gCO2/kWh of the local grid.
    pub carbon_intensity: f64,
}

impl SystemContext {
    pub fn to_array(&self) -> [f64; CONTEXT_DIM] {
        [
            self.bandwidth,
            self.server_gpu_util,
            self.edge_gpu_util,
            self.edge_gpu_freq,
            self.edge_cpu_util,
            self.edge_cpu_freq,
            self.carbon_intensity,
        ]
    }

    pub fn from_array(v: [f64; CONTEXT_DIM]) -> Self {
        Self {
            bandwidth: v[0],
            server_gpu_util: v[1],
            edge_gpu_util: v[2],
            edge_gpu_freq: v[3],
            edge_cpu_util: v[4],
            edge_cpu_freq: v[5],
            carbon_intensity: v[6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidContext(msg));
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return bad(format!("non-finite field in {self:?}"));
        }
        if self.bandwidth <= 0.0 {
            return bad(format!("bandwidth must be > 0, got {}", self.bandwidth));
        }
        for (name, u) in [
            ("server_gpu_util", self.server_gpu_util),
            ("edge_gpu_util", self.edge_gpu_util),
            ("edge_cpu_util", self.edge_cpu_util),
        ] {
            if !(0.0..=1.0).contains(&u) {
                return bad(format!("{name} must lie in [0, 1], got {u}"));
            }
        }
        if self.edge_gpu_freq <= 0.0 || self.edge_cpu_freq <= 0.0 {
            return bad("frequencies must be > 0".to_string());
        }
        if self.carbon_intensity < 0.0 {
            return bad(format!(
                "carbon intensity must be >= 0, got {}",
                self.carbon_intensity
            ));
        }
        Ok(())
    }
}

/// Axis-aligned bounds over the seven covariates. A bound may be collapsed
/// (`lower == upper`) for sampling; densities require a strict box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextBox {
    pub lower: SystemContext,
    pub upper: SystemContext,
}

impl ContextBox {
    pub fn new(lower: SystemContext, upper: SystemContext) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.lower.validate()?;
        self.upper.validate()?;
        for (i, (lo, hi)) in self
            .lower
            .to_array()
            .into_iter()
            .zip(self.upper.to_array())
            .enumerate()
        {
            if lo > hi {
                return Err(Error::InvalidContext(format!(
                    "box lower bound exceeds upper bound in `{}` ({lo} > {hi})",
                    CONTEXT_FIELDS[i]
                )));
            }
        }
        Ok(())
    }

    /// The covariate ranges used by the default benchmark.
    pub fn default_benchmark() -> Self {
        Self {
            lower: SystemContext {
                bandwidth: 4.0,
                server_gpu_util: 0.0,
                edge_gpu_util: 0.0,
                edge_gpu_freq: 307.2,
                edge_cpu_util: 0.0,
                edge_cpu_freq: 102.0,
                carbon_intensity: 100.0,
            },
            upper: SystemContext {
                bandwidth: 40.0,
                server_gpu_util: 0.9,
                edge_gpu_util: 0.9,
                edge_gpu_freq: 921.6,
                edge_cpu_util: 0.9,
                edge_cpu_freq: 1479.0,
                carbon_intensity: 700.0,
            },
        }
    }

    pub fn lower_array(&self) -> [f64; CONTEXT_DIM] {
        self.lower.to_array()
    }

    pub fn upper_array(&self) -> [f64; CONTEXT_DIM] {
        self.upper.to_array()
    }

    pub fn ranges(&self) -> [f64; CONTEXT_DIM] {
        let (lo, hi) = (self.lower_array(), self.upper_array());
        std::array::from_fn(|i| hi[i] - lo[i])
    }

    pub fn center(&self) -> SystemContext {
        let (lo, hi) = (self.lower_array(), self.upper_array());
        SystemContext::from_array(std::array::from_fn(|i| 0.5 * (lo[i] + hi[i])))
    }

    /// Point at fractional position `frac[i]` (0 = lower, 1 = upper) per dimension.
    pub fn lerp(&self, frac: [f64; CONTEXT_DIM]) -> SystemContext {
        let (lo, hi) = (self.lower_array(), self.upper_array());
        SystemContext::from_array(std::array::from_fn(|i| lo[i] + frac[i] * (hi[i] - lo[i])))
    }

    pub fn contains(&self, ctx: &SystemContext) -> bool {
        let (lo, hi, x) = (self.lower_array(), self.upper_array(), ctx.to_array());
        (0..CONTEXT_DIM).all(|i| x[i] >= lo[i] && x[i] <= hi[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip_preserves_order() {
        let c = ContextBox::default_benchmark().center();
        assert_eq!(SystemContext::from_array(c.to_array()), c);
        assert_eq!(c.to_array()[0], c.bandwidth);
        assert_eq!(c.to_array()[6], c.carbon_intensity);
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut c = ContextBox::default_benchmark().center();
        c.bandwidth = 0.0;
        assert!(c.validate().is_err());
        let mut c = ContextBox::default_benchmark().center();
        c.edge_gpu_util = 1.2;
        assert!(c.validate().is_err());
        let mut c = ContextBox::default_benchmark().center();
        c.carbon_intensity = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn inverted_box_rejected() {
        let b = ContextBox::default_benchmark();
        assert!(ContextBox::new(b.upper, b.lower).is_err());
        assert!(ContextBox::new(b.lower, b.lower).is_ok());
    }
}
