//! Synthetic contexts, carbon-intensity traces, datasets and scenario replay.
//!
//! Dataset builders fan out over contexts. Each context draws from its own
//! ChaCha stream (`seed`, stream = context index), so sequential and parallel
//! runs produce identical rows.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::conformal::{CalibrationSample, Calibrator};
use crate::context::{ContextBox, SystemContext, CONTEXT_DIM};
use crate::cost_model::{ObjectiveWeights, SystemModel};
use crate::decision::{LayerCostRegressor, Pipeline, RegressionSample, Strategy};
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::predictor::{QModel, TrainingSample};
use crate::shift::GaussianDensity;

/// Attempts allowed when rejection-sampling a shifted context into the box.
pub const MAX_REJECTION_ATTEMPTS: usize = 1000;

/// Seconds after midnight at which the diurnal trace peaks.
pub const DIURNAL_PEAK_S: f64 = 2.0 * 3600.0;

const DAY_S: f64 = 86_400.0;

/// Fresh generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Each dimension independently uniform within `bx`.
pub fn sample_context_uniform<R: Rng + ?Sized>(bx: &ContextBox, rng: &mut R) -> SystemContext {
    bx.lerp(std::array::from_fn(|_| rng.random::<f64>()))
}

/// Draws from `gaussian`, rejecting draws outside `bx`.
pub fn sample_context_shifted<R: Rng + ?Sized>(
    gaussian: &GaussianDensity,
    bx: &ContextBox,
    rng: &mut R,
) -> Result<SystemContext> {
    let sd = gaussian.std_dev();
    let normals: Vec<Normal<f64>> = (0..CONTEXT_DIM)
        .map(|i| {
            Normal::new(gaussian.mean[i], sd[i])
                .map_err(|e| Error::InvalidParameter(format!("gaussian component {i}: {e}")))
        })
        .collect::<Result<_>>()?;
    for _ in 0..MAX_REJECTION_ATTEMPTS {
        let x = SystemContext::from_array(std::array::from_fn(|i| normals[i].sample(rng)));
        if bx.contains(&x) {
            return Ok(x);
        }
    }
    Err(Error::SamplingExhausted {
        attempts: MAX_REJECTION_ATTEMPTS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub timestamp: f64,
    pub intensity: f64,
}

/// Carbon intensity over time for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonTrace {
    pub region: String,
    samples: Vec<TracePoint>,
}

impl CarbonTrace {
    pub fn new(region: impl Into<String>, samples: Vec<TracePoint>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("carbon trace has no samples".into()));
        }
        for (i, p) in samples.iter().enumerate() {
            let row = i + 1;
            if !(p.timestamp.is_finite() && p.intensity.is_finite()) {
                return Err(Error::TraceRow {
                    row,
                    message: "non-finite value".into(),
                });
            }
            if p.intensity < 0.0 {
                return Err(Error::TraceRow {
                    row,
                    message: format!("negative intensity {}", p.intensity),
                });
            }
            if i > 0 && p.timestamp <= samples[i - 1].timestamp {
                return Err(Error::TraceRow {
                    row,
                    message: format!(
                        "timestamp {} does not increase (previous {})",
                        p.timestamp,
                        samples[i - 1].timestamp
                    ),
                });
            }
        }
        Ok(Self {
            region: region.into(),
            samples,
        })
    }

    pub fn samples(&self) -> &[TracePoint] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Linear interpolation, held constant beyond either end.
    pub fn intensity_at(&self, t: f64) -> f64 {
        let s = &self.samples;
        let k = s.partition_point(|p| p.timestamp <= t);
        if k == 0 {
            return s[0].intensity;
        }
        if k == s.len() {
            return s[k - 1].intensity;
        }
        let (a, b) = (s[k - 1], s[k]);
        let f = (t - a.timestamp) / (b.timestamp - a.timestamp);
        a.intensity + f * (b.intensity - a.intensity)
    }

    pub fn min_intensity(&self) -> f64 {
        self.samples
            .iter()
            .map(|p| p.intensity)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_intensity(&self) -> f64 {
        self.samples
            .iter()
            .map(|p| p.intensity)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TracePattern {
    /// 24 h sinusoid peaking at [`DIURNAL_PEAK_S`].
    Diurnal,
    /// Occasional jumps to a uniform level in `base ± amplitude`.
    Volatile,
    /// `base` plus noise of at most 5% of `amplitude`.
    Stable,
}

impl TracePattern {
    pub fn name(self) -> &'static str {
        match self {
            TracePattern::Diurnal => "diurnal",
            TracePattern::Volatile => "volatile",
            TracePattern::Stable => "stable",
        }
    }
}

impl fmt::Display for TracePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TracePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diurnal" => Ok(TracePattern::Diurnal),
            "volatile" => Ok(TracePattern::Volatile),
            "stable" => Ok(TracePattern::Stable),
            _ => Err(Error::InvalidParameter(format!(
                "unknown trace pattern `{s}` (expected diurnal, volatile or stable)"
            ))),
        }
    }
}

/// Per-step probability of a level change in a volatile trace.
const VOLATILE_JUMP_PROB: f64 = 0.1;
const STABLE_NOISE_FRAC: f64 = 0.05;

/// Samples at `0, step, 2·step, …` up to `duration` seconds.
pub fn synth_carbon_trace(
    pattern: TracePattern,
    base: f64,
    amplitude: f64,
    duration: f64,
    step: f64,
    seed: u64,
) -> Result<CarbonTrace> {
    if !(base.is_finite() && amplitude.is_finite() && amplitude >= 0.0 && base >= amplitude) {
        return Err(Error::InvalidParameter(format!(
            "trace needs 0 <= amplitude <= base, got base {base}, amplitude {amplitude}"
        )));
    }
    if !(step.is_finite() && step > 0.0 && duration.is_finite() && duration >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "trace needs step > 0 and duration >= 0, got step {step}, duration {duration}"
        )));
    }
    let n = (duration / step).floor() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = base;
    let samples = (0..n)
        .map(|k| {
            let t = k as f64 * step;
            let intensity = match pattern {
                TracePattern::Diurnal => {
                    base + amplitude
                        * (2.0 * std::f64::consts::PI * (t - DIURNAL_PEAK_S) / DAY_S).cos()
                }
                TracePattern::Volatile => {
                    if amplitude > 0.0 && rng.random::<f64>() < VOLATILE_JUMP_PROB {
                        level = rng.random_range(base - amplitude..=base + amplitude);
                    }
                    level
                }
                TracePattern::Stable => {
                    let noise = STABLE_NOISE_FRAC * amplitude;
                    if noise > 0.0 {
                        base + rng.random_range(-noise..=noise)
                    } else {
                        base
                    }
                }
            };
            TracePoint {
                timestamp: t,
                intensity: intensity.max(0.0),
            }
        })
        .collect();
    CarbonTrace::new(pattern.name(), samples)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    timestamp_s: f64,
    intensity_gco2_per_kwh: f64,
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader)
}

/// Parses `timestamp_s,intensity_gco2_per_kwh` rows; `#` lines are skipped.
pub fn parse_carbon_trace<R: Read>(reader: R, region: &str) -> Result<CarbonTrace> {
    let mut rdr = csv_reader(reader);
    let mut samples = Vec::new();
    for (i, rec) in rdr.deserialize::<TraceRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::TraceRow {
            row: i + 1,
            message: e.to_string(),
        })?;
        samples.push(TracePoint {
            timestamp: rec.timestamp_s,
            intensity: rec.intensity_gco2_per_kwh,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("carbon trace `{region}` has no rows")));
    }
    CarbonTrace::new(region, samples)
}

/// Loads a trace CSV; the region label is the file stem.
pub fn load_carbon_trace(path: &Path) -> Result<CarbonTrace> {
    let region = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_carbon_trace(File::open(path)?, &region)
}

/// Writes a trace CSV, preceded by `# key: value` comment lines.
pub fn write_carbon_trace(
    path: &Path,
    trace: &CarbonTrace,
    comments: &[(&str, String)],
) -> Result<()> {
    let rows: Vec<TraceRecord> = trace
        .samples
        .iter()
        .map(|p| TraceRecord {
            timestamp_s: p.timestamp,
            intensity_gco2_per_kwh: p.intensity,
        })
        .collect();
    write_records(path, comments, &rows)
}

/// Writes serde records as CSV with a header row, preceded by comment lines.
pub fn write_records<T: Serialize>(
    path: &Path,
    comments: &[(&str, String)],
    rows: &[T],
) -> Result<()> {
    let mut file = File::create(path)?;
    for (k, v) in comments {
        writeln!(file, "# {k}: {v}")?;
    }
    let mut wtr = csv::Writer::from_writer(file);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads CSV records written by [`write_records`].
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv_reader(File::open(path)?);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<T>().enumerate() {
        out.push(rec.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// One training row: a context, a partition, its true cost components and
/// the (possibly noisy) objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub bandwidth_mbps: f64,
    pub server_gpu_util: f64,
    pub edge_gpu_util: f64,
    pub edge_gpu_freq_mhz: f64,
    pub edge_cpu_util: f64,
    pub edge_cpu_freq_mhz: f64,
    pub carbon_intensity: f64,
    pub partition_point: usize,
    pub latency_s: f64,
    pub edge_energy_j: f64,
    pub trans_energy_j: f64,
    pub server_energy_j: f64,
    pub q: f64,
}

impl DatasetRow {
    pub fn ctx(&self) -> SystemContext {
        SystemContext {
            bandwidth: self.bandwidth_mbps,
            server_gpu_util: self.server_gpu_util,
            edge_gpu_util: self.edge_gpu_util,
            edge_gpu_freq: self.edge_gpu_freq_mhz,
            edge_cpu_util: self.edge_cpu_util,
            edge_cpu_freq: self.edge_cpu_freq_mhz,
            carbon_intensity: self.carbon_intensity,
        }
    }

    pub fn training_sample(&self) -> TrainingSample {
        TrainingSample {
            ctx: self.ctx(),
            y: self.partition_point,
            q: self.q,
        }
    }

    pub fn regression_sample(&self) -> RegressionSample {
        RegressionSample {
            bandwidth: self.bandwidth_mbps,
            server_util: self.server_gpu_util,
            partition: self.partition_point,
            latency: self.latency_s,
            edge_energy: self.edge_energy_j,
        }
    }
}

/// A context labelled with its optimal partition, as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelledRow {
    pub bandwidth_mbps: f64,
    pub server_gpu_util: f64,
    pub edge_gpu_util: f64,
    pub edge_gpu_freq_mhz: f64,
    pub edge_cpu_util: f64,
    pub edge_cpu_freq_mhz: f64,
    pub carbon_intensity: f64,
    pub y_opt: usize,
}

impl From<&CalibrationSample> for LabelledRow {
    fn from(s: &CalibrationSample) -> Self {
        let c = s.ctx;
        Self {
            bandwidth_mbps: c.bandwidth,
            server_gpu_util: c.server_gpu_util,
            edge_gpu_util: c.edge_gpu_util,
            edge_gpu_freq_mhz: c.edge_gpu_freq,
            edge_cpu_util: c.edge_cpu_util,
            edge_cpu_freq_mhz: c.edge_cpu_freq,
            carbon_intensity: c.carbon_intensity,
            y_opt: s.y_opt,
        }
    }
}

impl From<LabelledRow> for CalibrationSample {
    fn from(r: LabelledRow) -> Self {
        Self {
            ctx: SystemContext {
                bandwidth: r.bandwidth_mbps,
                server_gpu_util: r.server_gpu_util,
                edge_gpu_util: r.edge_gpu_util,
                edge_gpu_freq: r.edge_gpu_freq_mhz,
                edge_cpu_util: r.edge_cpu_util,
                edge_cpu_freq: r.edge_cpu_freq_mhz,
                carbon_intensity: r.carbon_intensity,
            },
            y_opt: r.y_opt,
        }
    }
}

pub fn write_labelled(
    path: &Path,
    comments: &[(&str, String)],
    samples: &[CalibrationSample],
) -> Result<()> {
    let rows: Vec<LabelledRow> = samples.iter().map(LabelledRow::from).collect();
    write_records(path, comments, &rows)
}

pub fn read_labelled(path: &Path) -> Result<Vec<CalibrationSample>> {
    Ok(read_records::<LabelledRow>(path)?
        .into_iter()
        .map(CalibrationSample::from)
        .collect())
}

/// `n_contexts × (N + 1)` rows. Every row carries the true cost components;
/// `q` is the true objective times `1 + ε`, `ε ~ N(0, noise_rel_std)`.
pub fn build_training_set(
    system: &SystemModel,
    weights: &ObjectiveWeights,
    bx: &ContextBox,
    n_contexts: usize,
    noise_rel_std: f64,
    seed: u64,
    mode: Parallelism,
) -> Result<Vec<DatasetRow>> {
    if !(noise_rel_std.is_finite() && noise_rel_std >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise_rel_std must be >= 0, got {noise_rel_std}"
        )));
    }
    bx.validate()?;
    let noise = Normal::new(0.0, noise_rel_std)
        .map_err(|e| Error::InvalidParameter(format!("noise distribution: {e}")))?;
    let per_context = par::try_map_range(n_contexts, mode, |i| -> Result<Vec<DatasetRow>> {
        let mut rng = stream_rng(seed, i as u64);
        let c = sample_context_uniform(bx, &mut rng);
        system
            .all_objectives(&c, weights)?
            .into_iter()
            .map(|b| {
                let eps = if noise_rel_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                Ok(DatasetRow {
                    bandwidth_mbps: c.bandwidth,
                    server_gpu_util: c.server_gpu_util,
                    edge_gpu_util: c.edge_gpu_util,
                    edge_gpu_freq_mhz: c.edge_gpu_freq,
                    edge_cpu_util: c.edge_cpu_util,
                    edge_cpu_freq_mhz: c.edge_cpu_freq,
                    carbon_intensity: c.carbon_intensity,
                    partition_point: b.partition,
                    latency_s: b.t_total,
                    edge_energy_j: b.e_edge,
                    trans_energy_j: b.e_trans,
                    server_energy_j: b.e_server,
                    q: b.q * (1.0 + eps),
                })
            })
            .collect()
    })?;
    Ok(per_context.into_iter().flatten().collect())
}

/// Labels each context with its exact optimal partition.
pub fn label_contexts(
    system: &SystemModel,
    weights: &ObjectiveWeights,
    contexts: &[SystemContext],
    mode: Parallelism,
) -> Result<Vec<CalibrationSample>> {
    par::try_map_range(contexts.len(), mode, |i| {
        let ctx = contexts[i];
        Ok(CalibrationSample {
            ctx,
            y_opt: system.optimal_partition(&ctx, weights)?.partition,
        })
    })
}

/// `n` uniform contexts labelled by exhaustive search.
pub fn build_calibration_set(
    system: &SystemModel,
    weights: &ObjectiveWeights,
    bx: &ContextBox,
    n: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<Vec<CalibrationSample>> {
    bx.validate()?;
    let contexts = par::map_range(n, mode, |i| {
        sample_context_uniform(bx, &mut stream_rng(seed, i as u64))
    });
    label_contexts(system, weights, &contexts, mode)
}

/// `n` contexts from `gaussian` truncated to `bx`, labelled by exhaustive search.
pub fn build_shifted_set(
    system: &SystemModel,
    weights: &ObjectiveWeights,
    gaussian: &GaussianDensity,
    bx: &ContextBox,
    n: usize,
    seed: u64,
    mode: Parallelism,
) -> Result<Vec<CalibrationSample>> {
    bx.validate()?;
    let contexts = par::try_map_range(n, mode, |i| {
        sample_context_shifted(gaussian, bx, &mut stream_rng(seed, i as u64))
    })?;
    label_contexts(system, weights, &contexts, mode)
}

/// A link with fixed one-way setup latency and constant bandwidth; round-trip
/// times are multiplied by `1 + U(-jitter, jitter)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimLink {
    /// Mb/s.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
    pub jitter: f64,
}

impl SimLink {
    pub fn noiseless(bandwidth: f64, latency: f64) -> Self {
        Self {
            bandwidth,
            latency,
            jitter: 0.0,
        }
    }

    /// Response time for a `size`-megabit probe.
    pub fn round_trip<R: Rng + ?Sized>(&self, size: f64, rng: &mut R) -> f64 {
        let rtt = self.latency + size / self.bandwidth;
        if self.jitter > 0.0 {
            rtt * (1.0 + rng.random_range(-self.jitter..=self.jitter))
        } else {
            rtt
        }
    }
}

/// Two-probe estimate `(large − small) / (rtt_large − rtt_small)`.
pub fn estimate_bandwidth<R: Rng + ?Sized>(
    link: &SimLink,
    small_packet: f64,
    large_packet: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(link.bandwidth > 0.0 && link.latency >= 0.0 && (0.0..1.0).contains(&link.jitter)) {
        return Err(Error::InvalidParameter(format!("invalid link {link:?}")));
    }
    if !(small_packet > 0.0 && large_packet > small_packet) {
        return Err(Error::InvalidParameter(format!(
            "probe sizes must satisfy 0 < small < large, got {small_packet} and {large_packet}"
        )));
    }
    let dt = link.round_trip(large_packet, rng) - link.round_trip(small_packet, rng);
    if !(dt > 0.0) {
        return Err(Error::Data(format!(
            "non-positive response-time difference {dt}; probes too close in size"
        )));
    }
    Ok((large_packet - small_packet) / dt)
}

/// Per-tick random walk with reflection at the box faces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomWalk {
    /// Step standard deviation per dimension, as a fraction of the box range.
    pub step_rel: [f64; CONTEXT_DIM],
}

impl Default for RandomWalk {
    fn default() -> Self {
        Self {
            step_rel: [0.1; CONTEXT_DIM],
        }
    }
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    // Fold into one period of width 2·span, then mirror the upper half.
    let m = (v - lo).rem_euclid(2.0 * span);
    v = if m <= span { lo + m } else { hi - (m - span) };
    v.clamp(lo, hi)
}

impl RandomWalk {
    pub fn validate(&self) -> Result<()> {
        if self.step_rel.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "random-walk steps must be finite and >= 0, got {:?}",
                self.step_rel
            )));
        }
        Ok(())
    }

    pub fn step<R: Rng + ?Sized>(
        &self,
        ctx: &SystemContext,
        bx: &ContextBox,
        rng: &mut R,
    ) -> SystemContext {
        let (lo, hi, ranges, x) = (
            bx.lower_array(),
            bx.upper_array(),
            bx.ranges(),
            ctx.to_array(),
        );
        SystemContext::from_array(std::array::from_fn(|i| {
            let sd = self.step_rel[i] * ranges[i];
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            reflect(x[i] + sd * z, lo[i], hi[i])
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Seconds.
    pub duration: f64,
    /// Seconds between decisions.
    pub tick: f64,
    #[serde(default)]
    pub walk: RandomWalk,
    pub seed: u64,
    #[serde(default)]
    pub weights: ObjectiveWeights,
    pub alpha: f64,
    /// Starting context; the box center when absent.
    #[serde(default)]
    pub initial: Option<SystemContext>,
}

impl ScenarioConfig {
    /// A zero duration is allowed and yields an empty report.
    pub fn validate(&self) -> Result<()> {
        if !(self.tick.is_finite() && self.tick > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tick must be > 0, got {}",
                self.tick
            )));
        }
        if !(self.duration.is_finite() && (self.duration == 0.0 || self.duration >= self.tick)) {
            return Err(Error::InvalidParameter(format!(
                "duration must be 0 or >= tick, got {} (tick {})",
                self.duration, self.tick
            )));
        }
        self.walk.validate()?;
        self.weights.validate()
    }

    /// `⌊duration / tick⌋`, tolerant of rounding in the division
    /// (`86400 / 86.4` evaluates just below 1000).
    pub fn num_ticks(&self) -> usize {
        let r = self.duration / self.tick;
        let n = r.round();
        if (r - n).abs() <= 1e-9 * n.max(1.0) {
            n as usize
        } else {
            r.floor() as usize
        }
    }
}

/// The trained parts a replay runs against.
pub struct ScenarioComponents<'a, M: QModel + ?Sized> {
    pub system: &'a SystemModel,
    pub model: &'a M,
    pub calibrator: &'a Calibrator,
    pub regressor: &'a dyn LayerCostRegressor,
    /// Contexts walk inside this box.
    pub context_box: ContextBox,
    pub trace: &'a CarbonTrace,
}

/// One tick of a replay. Cost columns are empty when the decision failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub time_s: f64,
    pub bandwidth_mbps: f64,
    pub server_gpu_util: f64,
    pub edge_gpu_util: f64,
    pub edge_gpu_freq_mhz: f64,
    pub edge_cpu_util: f64,
    pub edge_cpu_freq_mhz: f64,
    pub carbon_intensity: f64,
    pub partition: Option<usize>,
    pub oracle_partition: usize,
    pub interval_size: Option<usize>,
    pub fallback: bool,
    pub latency_s: Option<f64>,
    pub edge_energy_j: Option<f64>,
    pub carbon_g: Option<f64>,
    pub q: Option<f64>,
    pub oracle_q: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAggregates {
    pub strategy: Strategy,
    pub ticks: usize,
    pub failed_ticks: usize,
    pub fallback_count: usize,
    pub mean_carbon_g: f64,
    pub total_carbon_g: f64,
    pub mean_latency_s: f64,
    pub mean_edge_energy_j: f64,
    pub mean_q: f64,
    pub mean_oracle_q: f64,
    /// Fraction of decided ticks whose partition differs from the oracle's.
    pub error_rate: f64,
    pub mean_interval_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub records: Vec<TickRecord>,
    pub aggregates: ScenarioAggregates,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Context walk and strategy randomness use separate streams of
/// `scenario.seed`, so every strategy sees the same contexts.
pub fn replay_scenario<M: QModel + ?Sized>(
    scenario: &ScenarioConfig,
    parts: &ScenarioComponents<'_, M>,
    strategy: Strategy,
) -> Result<ScenarioReport> {
    scenario.validate()?;
    let bx = &parts.context_box;
    bx.validate()?;
    let pipeline = Pipeline {
        system: parts.system,
        weights: scenario.weights,
        model: parts.model,
        calibrator: parts.calibrator,
        regressor: parts.regressor,
        alpha: scenario.alpha,
    };
    let mut ctx_rng = stream_rng(scenario.seed, 0);
    let mut strat_rng = stream_rng(scenario.seed, 1);
    let mut ctx = scenario.initial.unwrap_or_else(|| bx.center());
    let mut records = Vec::with_capacity(scenario.num_ticks());

    for tick in 0..scenario.num_ticks() {
        let time_s = tick as f64 * scenario.tick;
        ctx = scenario.walk.step(&ctx, bx, &mut ctx_rng);
        ctx.carbon_intensity = parts.trace.intensity_at(time_s);
        let decision_seed: u64 = strat_rng.random();
        let oracle = parts.system.optimal_partition(&ctx, &scenario.weights)?;

        let mut rec = TickRecord {
            tick,
            time_s,
            bandwidth_mbps: ctx.bandwidth,
            server_gpu_util: ctx.server_gpu_util,
            edge_gpu_util: ctx.edge_gpu_util,
            edge_gpu_freq_mhz: ctx.edge_gpu_freq,
            edge_cpu_util: ctx.edge_cpu_util,
            edge_cpu_freq_mhz: ctx.edge_cpu_freq,
            carbon_intensity: ctx.carbon_intensity,
            partition: None,
            oracle_partition: oracle.partition,
            interval_size: None,
            fallback: false,
            latency_s: None,
            edge_energy_j: None,
            carbon_g: None,
            q: None,
            oracle_q: oracle.q,
            error: None,
        };
        let outcome = pipeline
            .decide(strategy, &ctx, decision_seed)
            .and_then(|d| {
                let cost = parts
                    .system
                    .objective(&ctx, &scenario.weights, d.partition)?;
                Ok((d, cost))
            });
        match outcome {
            Ok((d, cost)) => {
                rec.partition = Some(d.partition);
                rec.interval_size = d.interval.as_ref().map(|iv| iv.len());
                rec.fallback = d.fallback;
                rec.latency_s = Some(cost.t_total);
                rec.edge_energy_j = Some(cost.e_edge);
                rec.carbon_g = Some(cost.carbon);
                rec.q = Some(cost.q);
            }
            Err(e) => {
                log::warn!("tick {tick}: {strategy} failed: {e}");
                rec.error = Some(e.to_string());
            }
        }
        records.push(rec);
    }

    let ok: Vec<&TickRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let sizes: Vec<f64> = ok
        .iter()
        .filter_map(|r| r.interval_size.map(|s| s as f64))
        .collect();
    let aggregates = ScenarioAggregates {
        strategy,
        ticks: records.len(),
        failed_ticks: records.len() - ok.len(),
        fallback_count: ok.iter().filter(|r| r.fallback).count(),
        mean_carbon_g: mean(ok.iter().filter_map(|r| r.carbon_g)),
        total_carbon_g: ok.iter().filter_map(|r| r.carbon_g).fold(0.0, |a, c| a + c),
        mean_latency_s: mean(ok.iter().filter_map(|r| r.latency_s)),
        mean_edge_energy_j: mean(ok.iter().filter_map(|r| r.edge_energy_j)),
        mean_q: mean(ok.iter().filter_map(|r| r.q)),
        mean_oracle_q: mean(ok.iter().map(|r| r.oracle_q)),
        error_rate: mean(ok.iter().map(|r| {
            if r.partition == Some(r.oracle_partition) {
                0.0
            } else {
                1.0
            }
        })),
        mean_interval_size: if sizes.is_empty() {
            None
        } else {
            Some(mean(sizes.into_iter()))
        },
    };
    Ok(ScenarioReport {
        records,
        aggregates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::{DnnProfile, PowerModel, Slowdown};
    use crate::decision::GroundTruthRegressor;
    use crate::predictor::OracleModel;
    use crate::shift::UniformBoxDensity;

    fn system() -> SystemModel {
        SystemModel::new(
            DnnProfile::resnet_like(),
            PowerModel::default(),
            Slowdown::default(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_sampling_collapsed_reproducible_and_centered() {
        let c = ContextBox::default_benchmark().center();
        let point = ContextBox::new(c, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_context_uniform(&point, &mut rng), c);

        let bx = ContextBox::default_benchmark();
        let a = sample_context_uniform(&bx, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_context_uniform(&bx, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);

        let n = 10_000;
        let mut sum = [0.0; CONTEXT_DIM];
        for _ in 0..n {
            let x = sample_context_uniform(&bx, &mut rng);
            assert!(bx.contains(&x));
            for (s, v) in sum.iter_mut().zip(x.to_array()) {
                *s += v;
            }
        }
        let (center, ranges) = (bx.center().to_array(), bx.ranges());
        for i in 0..CONTEXT_DIM {
            assert!((sum[i] / n as f64 - center[i]).abs() <= 0.02 * ranges[i]);
        }
    }

    #[test]
    fn shifted_sampling() {
        let bx = ContextBox::default_benchmark();
        let center = bx.center().to_array();
        let tiny = GaussianDensity::new(
            center,
            std::array::from_fn(|i| (1e-6 * bx.ranges()[i]).powi(2)),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = sample_context_shifted(&tiny, &bx, &mut rng)
                .unwrap()
                .to_array();
            for i in 0..CONTEXT_DIM {
                assert!((x[i] - center[i]).abs() <= 1e-4 * bx.ranges()[i]);
            }
        }
        let a = sample_context_shifted(&tiny, &bx, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = sample_context_shifted(&tiny, &bx, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);

        // Mean beyond the upper corner with a wide spread: every dimension must
        // land below its mean, which almost never happens jointly.
        let far: [f64; CONTEXT_DIM] =
            std::array::from_fn(|i| bx.upper_array()[i] + 3.0 * bx.ranges()[i]);
        let wide =
            GaussianDensity::new(far, std::array::from_fn(|i| bx.ranges()[i].powi(2))).unwrap();
        assert!(matches!(
            sample_context_shifted(&wide, &bx, &mut rng),
            Err(Error::SamplingExhausted {
                attempts: MAX_REJECTION_ATTEMPTS
            })
        ));
    }

    #[test]
    fn synthetic_traces() {
        for p in [
            TracePattern::Diurnal,
            TracePattern::Volatile,
            TracePattern::Stable,
        ] {
            let t = synth_carbon_trace(p, 300.0, 0.0, 7200.0, 60.0, 3).unwrap();
            assert!(t.samples().iter().all(|s| s.intensity == 300.0));
            assert_eq!(t.len(), 121);
        }
        let d =
            synth_carbon_trace(TracePattern::Diurnal, 400.0, 200.0, 86_400.0, 3600.0, 0).unwrap();
        assert_eq!(d.intensity_at(DIURNAL_PEAK_S), 600.0);
        assert!((d.intensity_at(DIURNAL_PEAK_S + 43_200.0) - 200.0).abs() < 1e-9);

        let v = synth_carbon_trace(TracePattern::Volatile, 400.0, 150.0, 9_999.0, 1.0, 5).unwrap();
        assert_eq!(v.len(), 10_000);
        assert!(v.min_intensity() >= 250.0 && v.max_intensity() <= 550.0);
        assert!(v.max_intensity() - v.min_intensity() > 100.0);

        let s = synth_carbon_trace(TracePattern::Stable, 400.0, 100.0, 1000.0, 1.0, 5).unwrap();
        assert!(s.min_intensity() >= 395.0 && s.max_intensity() <= 405.0);

        assert!(synth_carbon_trace(TracePattern::Diurnal, 100.0, 200.0, 10.0, 1.0, 0).is_err());
        assert!(synth_carbon_trace(TracePattern::Diurnal, 100.0, 20.0, 10.0, 0.0, 0).is_err());
        assert_eq!(
            "volatile".parse::<TracePattern>().unwrap(),
            TracePattern::Volatile
        );
        assert!("sunny".parse::<TracePattern>().is_err());
    }

    #[test]
    fn interpolation() {
        let t = CarbonTrace::new(
            "x",
            vec![
                TracePoint {
                    timestamp: 0.0,
                    intensity: 100.0,
                },
                TracePoint {
                    timestamp: 10.0,
                    intensity: 200.0,
                },
            ],
        )
        .unwrap();
        assert_eq!(t.intensity_at(-5.0), 100.0);
        assert_eq!(t.intensity_at(5.0), 150.0);
        assert_eq!(t.intensity_at(10.0), 200.0);
        assert_eq!(t.intensity_at(50.0), 200.0);
    }

    #[test]
    fn trace_csv_parsing_and_errors() {
        let ok = "timestamp_s,intensity_gco2_per_kwh\n0,120.5\n60,130\n";
        assert_eq!(parse_carbon_trace(ok.as_bytes(), "r").unwrap().len(), 2);
        assert!(parse_carbon_trace("".as_bytes(), "r").is_err());
        assert!(
            parse_carbon_trace("timestamp_s,intensity_gco2_per_kwh\n".as_bytes(), "r").is_err()
        );
        let back = "timestamp_s,intensity_gco2_per_kwh\n0,1\n60,2\n30,3\n";
        assert!(matches!(
            parse_carbon_trace(back.as_bytes(), "r"),
            Err(Error::TraceRow { row: 3, .. })
        ));
        let neg = "timestamp_s,intensity_gco2_per_kwh\n0,1\n60,-2\n";
        assert!(matches!(
            parse_carbon_trace(neg.as_bytes(), "r"),
            Err(Error::TraceRow { row: 2, .. })
        ));
        let junk = "timestamp_s,intensity_gco2_per_kwh\n0,abc\n";
        assert!(matches!(
            parse_carbon_trace(junk.as_bytes(), "r"),
            Err(Error::TraceRow { row: 1, .. })
        ));
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ne.csv");
        let t = synth_carbon_trace(TracePattern::Volatile, 500.0, 200.0, 3600.0, 7.0, 11).unwrap();
        write_carbon_trace(&path, &t, &[("config_digest", "abc".into())]).unwrap();
        let back = load_carbon_trace(&path).unwrap();
        assert_eq!(back.samples(), t.samples());
        assert_eq!(back.region, "ne");
    }

    #[test]
    fn training_set_counts_noise_and_determinism() {
        let sys = SystemModel::new(
            DnnProfile::toy_five_layer(),
            PowerModel::default(),
            Slowdown::default(),
        )
        .unwrap();
        let w = ObjectiveWeights::default();
        let bx = ContextBox::default_benchmark();
        let rows = build_training_set(&sys, &w, &bx, 100, 0.0, 1, Parallelism::Sequential).unwrap();
        assert_eq!(rows.len(), 600);
        for r in &rows {
            let b = sys.objective(&r.ctx(), &w, r.partition_point).unwrap();
            assert_eq!(r.q, b.q);
            assert_eq!(r.latency_s, b.t_total);
        }
        let par_rows =
            build_training_set(&sys, &w, &bx, 100, 0.0, 1, Parallelism::Parallel).unwrap();
        assert_eq!(rows, par_rows);

        let noisy =
            build_training_set(&sys, &w, &bx, 1667, 0.05, 2, Parallelism::Parallel).unwrap();
        assert!(noisy.len() >= 10_000);
        let rel: Vec<f64> = noisy
            .iter()
            .map(|r| r.q / sys.objective(&r.ctx(), &w, r.partition_point).unwrap().q - 1.0)
            .collect();
        let m = rel.iter().sum::<f64>() / rel.len() as f64;
        let sd = (rel.iter().map(|e| (e - m).powi(2)).sum::<f64>() / rel.len() as f64).sqrt();
        assert!(m.abs() < 0.002, "mean {m}");
        assert!((sd - 0.05).abs() < 0.002, "sd {sd}");
        // mean absolute relative deviation of N(0, s) is s·sqrt(2/π)
        let mad = rel.iter().map(|e| e.abs()).sum::<f64>() / rel.len() as f64;
        assert!((mad - 0.05 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.002);
        assert_eq!(
            noisy,
            build_training_set(&sys, &w, &bx, 1667, 0.05, 2, Parallelism::Sequential).unwrap()
        );
    }

    #[test]
    fn calibration_labels_match_reenumeration() {
        let sys = system();
        let w = ObjectiveWeights::default();
        let bx = ContextBox::default_benchmark();
        let cal = build_calibration_set(&sys, &w, &bx, 200, 4, Parallelism::Parallel).unwrap();
        assert_eq!(cal.len(), 200);
        for s in cal.iter().step_by(10) {
            let q: Vec<f64> = (0..=sys.num_layers())
                .map(|y| sys.objective(&s.ctx, &w, y).unwrap().q)
                .collect();
            let mut best = 0;
            for y in 1..q.len() {
                if q[y] < q[best] {
                    best = y;
                }
            }
            assert_eq!(s.y_opt, best);
        }
        assert_eq!(
            cal,
            build_calibration_set(&sys, &w, &bx, 200, 4, Parallelism::Sequential).unwrap()
        );

        // latency-only weights and a fast link: everything on the server
        let lat = ObjectiveWeights::new(1.0, 0.0, 0.0).unwrap();
        let mut fast = bx;
        fast.lower.bandwidth = 1e6;
        fast.upper.bandwidth = 1e6;
        let forced =
            build_calibration_set(&sys, &lat, &fast, 20, 5, Parallelism::Sequential).unwrap();
        assert!(forced.iter().all(|s| s.y_opt == 0));
    }

    #[test]
    fn labelled_csv_round_trip() {
        let sys = system();
        let w = ObjectiveWeights::default();
        let cal = build_calibration_set(
            &sys,
            &w,
            &ContextBox::default_benchmark(),
            30,
            4,
            Parallelism::Sequential,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.csv");
        write_labelled(&p, &[("config_digest", "d".into())], &cal).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# config_digest: d\nbandwidth_mbps,server_gpu_util,edge_gpu_util,edge_gpu_freq_mhz,edge_cpu_util,edge_cpu_freq_mhz,carbon_intensity,y_opt\n"));
        assert_eq!(read_labelled(&p).unwrap(), cal);
    }

    #[test]
    fn bandwidth_estimation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = estimate_bandwidth(&SimLink::noiseless(10.0, 0.02), 1.0, 5.0, &mut rng).unwrap();
        assert!((est - 10.0).abs() <= 1e-9 * 10.0);
        assert!(estimate_bandwidth(&SimLink::noiseless(10.0, 0.02), 2.0, 2.0, &mut rng).is_err());
        let noisy = SimLink {
            bandwidth: 10.0,
            latency: 0.02,
            jitter: 0.05,
        };
        for _ in 0..100 {
            let e = estimate_bandwidth(&noisy, 1.0, 5.0, &mut rng).unwrap();
            assert!((e - 10.0).abs() <= 1.5, "{e}");
        }
    }

    #[test]
    fn reflection_keeps_values_inside() {
        assert_eq!(reflect(1.2, 0.0, 1.0), 0.8);
        assert_eq!(reflect(-0.25, 0.0, 1.0), 0.25);
        assert_eq!(reflect(2.5, 0.0, 1.0), 0.5);
        assert_eq!(reflect(5.0, 3.0, 3.0), 3.0);
    }

    fn replay_fixture(strategy: Strategy, ticks: f64, seed: u64) -> ScenarioReport {
        let sys = system();
        let w = ObjectiveWeights::default();
        let bx = ContextBox::default_benchmark();
        let oracle = OracleModel::new(&sys, w);
        let cal = build_calibration_set(&sys, &w, &bx, 200, 8, Parallelism::Sequential).unwrap();
        let scored = crate::conformal::ScoredCalibration::from_samples(&oracle, &cal).unwrap();
        let calibrator = Calibrator::exchangeable(scored);
        let stub = GroundTruthRegressor {
            system: &sys,
            base: bx.center(),
        };
        let trace =
            synth_carbon_trace(TracePattern::Diurnal, 400.0, 250.0, 86_400.0, 300.0, 0).unwrap();
        let parts = ScenarioComponents {
            system: &sys,
            model: &oracle,
            calibrator: &calibrator,
            regressor: &stub,
            context_box: bx,
            trace: &trace,
        };
        let scenario = ScenarioConfig {
            duration: ticks * 60.0,
            tick: 60.0,
            walk: RandomWalk::default(),
            seed,
            weights: w,
            alpha: 0.1,
            initial: None,
        };
        replay_scenario(&scenario, &parts, strategy).unwrap()
    }

    #[test]
    fn replay_properties() {
        let empty = replay_fixture(Strategy::Adaptive, 0.0, 1);
        assert!(empty.records.is_empty());
        assert_eq!(empty.aggregates.ticks, 0);

        let oracle = replay_fixture(Strategy::Oracle, 300.0, 1);
        assert_eq!(oracle.records.len(), 300);
        assert_eq!(oracle.aggregates.error_rate, 0.0);

        let a = replay_fixture(Strategy::Random, 300.0, 1);
        let b = replay_fixture(Strategy::Random, 300.0, 1);
        assert_eq!(a, b);
        let bx = ContextBox::default_benchmark();
        for (ra, ro) in a.records.iter().zip(&oracle.records) {
            assert_eq!(ra.bandwidth_mbps, ro.bandwidth_mbps);
            assert_eq!(ra.carbon_intensity, ro.carbon_intensity);
            let c = SystemContext {
                bandwidth: ra.bandwidth_mbps,
                server_gpu_util: ra.server_gpu_util,
                edge_gpu_util: ra.edge_gpu_util,
                edge_gpu_freq: ra.edge_gpu_freq_mhz,
                edge_cpu_util: ra.edge_cpu_util,
                edge_cpu_freq: ra.edge_cpu_freq_mhz,
                carbon_intensity: ra.carbon_intensity,
            };
            assert!(bx.contains(&c));
        }
        assert!(a.aggregates.mean_interval_size.unwrap() >= 1.0);
    }

    #[test]
    fn replay_records_errors_per_tick() {
        // A calibrator whose box excludes most of the walk fails on those ticks
        // without aborting the replay.
        let sys = system();
        let w = ObjectiveWeights::default();
        let bx = ContextBox::default_benchmark();
        let oracle = OracleModel::new(&sys, w);
        let cal = build_calibration_set(&sys, &w, &bx, 50, 8, Parallelism::Sequential).unwrap();
        let box_density = UniformBoxDensity::fit(cal.iter().map(|s| &s.ctx)).unwrap();
        let mut narrow = box_density.clone();
        narrow.upper[0] = narrow.lower[0] + 1.0;
        let inside: Vec<CalibrationSample> = cal
            .iter()
            .map(|s| CalibrationSample {
                ctx: SystemContext {
                    bandwidth: narrow.lower[0] + 0.5,
                    ..s.ctx
                },
                y_opt: s.y_opt,
            })
            .collect();
        let narrow_cal =
            crate::conformal::ScoredCalibration::from_samples(&oracle, &inside).unwrap();
        let test = crate::shift::fit_gaussian(&bx.center(), 0.1, &box_density).unwrap();
        let calibrator = Calibrator::new(
            narrow_cal,
            crate::conformal::Weighting::CovariateShift {
                test: test.into(),
                calibration: narrow,
            },
        )
        .unwrap();
        let stub = GroundTruthRegressor {
            system: &sys,
            base: bx.center(),
        };
        let trace = synth_carbon_trace(TracePattern::Stable, 400.0, 0.0, 3600.0, 60.0, 0).unwrap();
        let parts = ScenarioComponents {
            system: &sys,
            model: &oracle,
            calibrator: &calibrator,
            regressor: &stub,
            context_box: bx,
            trace: &trace,
        };
        let scenario = ScenarioConfig {
            duration: 600.0,
            tick: 60.0,
            walk: RandomWalk::default(),
            seed: 3,
            weights: w,
            alpha: 0.1,
            initial: None,
        };
        let rep = replay_scenario(&scenario, &parts, Strategy::Adaptive).unwrap();
        assert_eq!(rep.records.len(), 10);
        assert!(rep.aggregates.failed_ticks > 0);
        assert!(rep
            .records
            .iter()
            .any(|r| r.error.as_deref().is_some_and(|e| e.contains("bandwidth"))));
        let ns = replay_scenario(&scenario, &parts, Strategy::Neurosurgeon).unwrap();
        assert_eq!(ns.aggregates.failed_ticks, 0);
    }
}
