//! Analytic per-frame latency, energy and carbon model for every partition
//! point of a layered DNN, and the exhaustive optimal-partition oracle.
//!
//! Partition index `y` ranges over `0..=N`. Layers `1..=y` run on the edge,
//! the output of layer `y` crosses the link (`y = 0` sends the raw input,
//! `y = N` sends the final result back), and layers `y+1..=N` run on the
//! server.

use serde::{Deserialize, Serialize};

use crate::context::SystemContext;
use crate::error::{Error, Result};

/// Joules per kilowatt-hour.
pub const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// 1-based layer id.
    pub index: usize,
    /// Seconds at reference edge conditions.
    pub base_edge_latency: f64,
    /// Seconds on an idle server.
    pub base_server_latency: f64,
    /// Megabits produced by this layer.
    pub output_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnProfile {
    pub name: String,
    /// Raw frame size in megabits, sent when partitioning before layer 1.
    pub input_size: f64,
    pub layers: Vec<LayerProfile>,
}

impl DnnProfile {
    /// Builds a profile from `(edge_s, server_s, output_mb)` triples, numbering
    /// layers from 1.
    pub fn from_table(name: &str, input_size: f64, rows: &[(f64, f64, f64)]) -> Result<Self> {
        let layers = rows
            .iter()
            .enumerate()
            .map(|(i, &(e, s, d))| LayerProfile {
                index: i + 1,
                base_edge_latency: e,
                base_server_latency: s,
                output_size: d,
            })
            .collect();
        let p = Self {
            name: name.to_string(),
            input_size,
            layers,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidProfile("profile has no layers".into()));
        }
        if !(self.input_size.is_finite() && self.input_size >= 0.0) {
            return Err(Error::InvalidProfile(format!(
                "input size must be finite and >= 0, got {}",
                self.input_size
            )));
        }
        for (pos, l) in self.layers.iter().enumerate() {
            if l.index != pos + 1 {
                return Err(Error::InvalidProfile(format!(
                    "layer indices must be 1..N contiguous; position {} has index {}",
                    pos + 1,
                    l.index
                )));
            }
            for (name, v) in [
                ("base_edge_latency", l.base_edge_latency),
                ("base_server_latency", l.base_server_latency),
                ("output_size", l.output_size),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::InvalidProfile(format!(
                        "layer {}: {name} must be finite and >= 0, got {v}",
                        l.index
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of layers `N`.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of candidate partition points, `N + 1`.
    pub fn num_candidates(&self) -> usize {
        self.layers.len() + 1
    }

    /// Megabits crossing the link when partitioning at `y`.
    pub fn transfer_size(&self, y: usize) -> Result<f64> {
        self.check_partition(y)?;
        Ok(if y == 0 {
            self.input_size
        } else {
            self.layers[y - 1].output_size
        })
    }

    pub fn check_partition(&self, y: usize) -> Result<()> {
        if y > self.layers.len() {
            return Err(Error::InvalidPartition {
                y,
                layers: self.layers.len(),
            });
        }
        Ok(())
    }

    /// Five-layer toy network used throughout the tests.
    ///
    /// | layer | edge s | server s | output Mb |
    /// |-------|--------|----------|-----------|
    /// | input |        |          | 8         |
    /// | 1     | 0.02   | 0.002    | 4         |
    /// | 2     | 0.03   | 0.003    | 2         |
    /// | 3     | 0.04   | 0.004    | 1         |
    /// | 4     | 0.05   | 0.005    | 0.5       |
    /// | 5     | 0.06   | 0.006    | 0.1       |
    pub fn toy_five_layer() -> Self {
        Self::from_table(
            "toy-5",
            8.0,
            &[
                (0.02, 0.002, 4.0),
                (0.03, 0.003, 2.0),
                (0.04, 0.004, 1.0),
                (0.05, 0.005, 0.5),
                (0.06, 0.006, 0.1),
            ],
        )
        .expect("static profile is valid")
    }

    /// Twelve-stage profile shaped like a small residual CNN on an embedded
    /// GPU: an expensive stem whose activation outgrows the input, residual
    /// stages that shrink activations, a pooling layer and a classifier head.
    pub fn resnet_like() -> Self {
        Self::from_table(
            "resnet-like-12",
            1.2,
            &[
                (0.030, 0.0020, 3.2),
                (0.012, 0.0008, 0.8),
                (0.028, 0.0018, 0.8),
                (0.028, 0.0018, 0.8),
                (0.024, 0.0016, 0.4),
                (0.024, 0.0016, 0.4),
                (0.022, 0.0015, 0.2),
                (0.022, 0.0015, 0.2),
                (0.020, 0.0014, 0.1),
                (0.020, 0.0014, 0.1),
                (0.004, 0.0003, 0.016),
                (0.002, 0.0002, 0.032),
            ],
        )
        .expect("static profile is valid")
    }
}

/// Power draws of the edge device, its radio, and the server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerModel {
    pub p_cpu_base: f64,
    pub p_gpu_base: f64,
    pub p_others: f64,
    /// W per unit utilization.
    pub cpu_util_slope: f64,
    pub gpu_util_slope: f64,
    /// W per MHz above `freq_ref_gpu` (negative offsets lower the draw).
    pub gpu_freq_slope: f64,
    /// Radio draw while transmitting, W.
    pub p_net: f64,
    pub p_server_base: f64,
    pub server_util_slope: f64,
    pub freq_ref_gpu: f64,
    pub freq_ref_cpu: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            p_cpu_base: 1.5,
            p_gpu_base: 2.5,
            p_others: 1.0,
            cpu_util_slope: 1.0,
            gpu_util_slope: 2.0,
            gpu_freq_slope: 0.003,
            p_net: 1.2,
            p_server_base: 250.0,
            server_util_slope: 100.0,
            freq_ref_gpu: 921.6,
            freq_ref_cpu: 1479.0,
        }
    }
}

impl PowerModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_cpu_base", self.p_cpu_base),
            ("p_gpu_base", self.p_gpu_base),
            ("p_others", self.p_others),
            ("cpu_util_slope", self.cpu_util_slope),
            ("gpu_util_slope", self.gpu_util_slope),
            ("p_net", self.p_net),
            ("p_server_base", self.p_server_base),
            ("server_util_slope", self.server_util_slope),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "power model `{name}` must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.gpu_freq_slope.is_finite() {
            return Err(Error::InvalidParameter(
                "gpu_freq_slope must be finite".into(),
            ));
        }
        if !(self.freq_ref_gpu > 0.0 && self.freq_ref_cpu > 0.0) {
            return Err(Error::InvalidParameter(
                "reference frequencies must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// CPU draw under `ctx`, W.
    pub fn cpu_power(&self, ctx: &SystemContext) -> f64 {
        self.p_cpu_base + self.cpu_util_slope * ctx.edge_cpu_util
    }

    /// GPU draw under `ctx`, clamped at zero, W.
    pub fn gpu_power(&self, ctx: &SystemContext) -> f64 {
        (self.p_gpu_base
            + self.gpu_util_slope * ctx.edge_gpu_util
            + self.gpu_freq_slope * (ctx.edge_gpu_freq - self.freq_ref_gpu))
            .max(0.0)
    }

    /// Total edge draw while computing, W.
    pub fn edge_power(&self, ctx: &SystemContext) -> f64 {
        self.cpu_power(ctx) + self.gpu_power(ctx) + self.p_others
    }

    pub fn server_power(&self, ctx: &SystemContext) -> f64 {
        self.p_server_base + self.server_util_slope * ctx.server_gpu_util
    }
}

/// Contention coefficients applied to profiled layer latencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Slowdown {
    /// `k_g`: edge slowdown per unit GPU utilization.
    pub edge_gpu_util: f64,
    /// `k_c`: edge slowdown per unit CPU utilization.
    pub edge_cpu_util: f64,
    /// `k_s`: server slowdown per unit GPU utilization.
    pub server_gpu_util: f64,
}

impl Default for Slowdown {
    fn default() -> Self {
        Self {
            edge_gpu_util: 1.0,
            edge_cpu_util: 0.5,
            server_gpu_util: 1.0,
        }
    }
}

/// Preference weights over latency, edge energy and carbon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl ObjectiveWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidWeights(format!(
                "objective weights must be finite and >= 0, got {l:?}"
            )));
        }
        if l.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidWeights(
                "objective weights must not all be zero".into(),
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda1: self.lambda1 * c,
            lambda2: self.lambda2 * c,
            lambda3: self.lambda3 * c,
        }
    }
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.05,
            lambda3: 1500.0,
        }
    }
}

/// Every cost component for one (context, partition) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub partition: usize,
    pub t_edge: f64,
    pub t_trans: f64,
    pub t_server: f64,
    pub t_total: f64,
    pub e_edge: f64,
    pub e_trans: f64,
    pub e_server: f64,
    /// Grams of CO2.
    pub carbon: f64,
    pub q: f64,
}

impl CostBreakdown {
    pub fn total_energy(&self) -> f64 {
        self.e_edge + self.e_trans + self.e_server
    }
}

/// A DNN profile bound to the power and contention models of one deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub dnn: DnnProfile,
    pub power: PowerModel,
    #[serde(default)]
    pub slowdown: Slowdown,
}

impl SystemModel {
    pub fn new(dnn: DnnProfile, power: PowerModel, slowdown: Slowdown) -> Result<Self> {
        dnn.validate()?;
        power.validate()?;
        Ok(Self {
            dnn,
            power,
            slowdown,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.dnn.num_layers()
    }

    fn edge_scale(&self, ctx: &SystemContext) -> f64 {
        (self.power.freq_ref_gpu / ctx.edge_gpu_freq)
            * (1.0
                + self.slowdown.edge_gpu_util * ctx.edge_gpu_util
                + self.slowdown.edge_cpu_util * ctx.edge_cpu_util)
    }

    fn server_scale(&self, ctx: &SystemContext) -> f64 {
        1.0 + self.slowdown.server_gpu_util * ctx.server_gpu_util
    }

    /// `T_e`: layers `1..=y` on the edge, seconds.
    pub fn edge_latency(&self, ctx: &SystemContext, y: usize) -> Result<f64> {
        self.dnn.check_partition(y)?;
        // fold from +0.0: an empty f64 sum is -0.0
        let base = self.dnn.layers[..y]
            .iter()
            .fold(0.0, |acc, l| acc + l.base_edge_latency);
        Ok(base * self.edge_scale(ctx))
    }

    /// `T_t = d_y / B`, seconds.
    pub fn transmission_latency(&self, ctx: &SystemContext, y: usize) -> Result<f64> {
        let d = self.dnn.transfer_size(y)?;
        if !(ctx.bandwidth > 0.0) {
            return Err(Error::InvalidContext(format!(
                "bandwidth must be > 0, got {}",
                ctx.bandwidth
            )));
        }
        Ok(d / ctx.bandwidth)
    }

    /// `T_s`: layers `y+1..=N` on the server, seconds.
    pub fn server_latency(&self, ctx: &SystemContext, y: usize) -> Result<f64> {
        self.dnn.check_partition(y)?;
        // Accumulate from the tail so the sum is monotone in `y`.
        let base = self.dnn.layers[y..]
            .iter()
            .rev()
            .fold(0.0, |acc, l| l.base_server_latency + acc);
        Ok(base * self.server_scale(ctx))
    }

    /// `E_e = (p_cpu + p_gpu + p_others) · T_e`, joules.
    pub fn edge_energy(&self, ctx: &SystemContext, y: usize) -> Result<f64> {
        Ok(self.power.edge_power(ctx) * self.edge_latency(ctx, y)?)
    }

    /// `E_t = p_net · T_t`, joules.
    pub fn transmission_energy(&self, ctx: &SystemContext, y: usize) -> Result<f64> {
        Ok(self.power.p_net * self.transmission_latency(ctx, y)?)
    }

    /// `E_s = p_server(ctx) · T_s`, joules.
    pub fn server_energy(&self, ctx: &SystemContext, y: usize) -> Result<f64> {
        Ok(self.power.server_power(ctx) * self.server_latency(ctx, y)?)
    }

    /// `C = (E_e + E_t + E_s) · ci`, grams of CO2.
    pub fn carbon_footprint(&self, ctx: &SystemContext, y: usize) -> Result<f64> {
        let e = self.edge_energy(ctx, y)?
            + self.transmission_energy(ctx, y)?
            + self.server_energy(ctx, y)?;
        Ok(carbon_grams(e, ctx.carbon_intensity))
    }

    /// Full breakdown with `q = λ1·T + λ2·E_e + λ3·C`.
    pub fn objective(
        &self,
        ctx: &SystemContext,
        weights: &ObjectiveWeights,
        y: usize,
    ) -> Result<CostBreakdown> {
        let t_edge = self.edge_latency(ctx, y)?;
        let t_trans = self.transmission_latency(ctx, y)?;
        let t_server = self.server_latency(ctx, y)?;
        let t_total = t_edge + t_trans + t_server;
        let e_edge = self.power.edge_power(ctx) * t_edge;
        let e_trans = self.power.p_net * t_trans;
        let e_server = self.power.server_power(ctx) * t_server;
        let carbon = carbon_grams(e_edge + e_trans + e_server, ctx.carbon_intensity);
        let q = weights.lambda1 * t_total + weights.lambda2 * e_edge + weights.lambda3 * carbon;
        Ok(CostBreakdown {
            partition: y,
            t_edge,
            t_trans,
            t_server,
            t_total,
            e_edge,
            e_trans,
            e_server,
            carbon,
            q,
        })
    }

    /// Breakdowns for every candidate `0..=N`, in order.
    pub fn all_objectives(
        &self,
        ctx: &SystemContext,
        weights: &ObjectiveWeights,
    ) -> Result<Vec<CostBreakdown>> {
        (0..=self.num_layers())
            .map(|y| self.objective(ctx, weights, y))
            .collect()
    }

    /// Exhaustive argmin of `q` over `0..=N`; ties go to the smaller index.
    pub fn optimal_partition(
        &self,
        ctx: &SystemContext,
        weights: &ObjectiveWeights,
    ) -> Result<CostBreakdown> {
        let mut best: Option<CostBreakdown> = None;
        for y in 0..=self.num_layers() {
            let b = self.objective(ctx, weights, y)?;
            if best.is_none_or(|cur| b.q < cur.q) {
                best = Some(b);
            }
        }
        Ok(best.expect("profile has at least one candidate"))
    }
}

/// Converts joules at `intensity` gCO2/kWh into grams of CO2.
pub fn carbon_grams(joules: f64, intensity: f64) -> f64 {
    joules / JOULES_PER_KWH * intensity
}
