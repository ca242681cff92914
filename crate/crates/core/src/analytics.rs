//! Experiment drivers built on the simulator.
//!
//! Actor and SM sweeps, closed-form throughput bounds, knee detection,
//! CPU/GPU ratio reporting and recommendation, and the calibration harness
//! behind the `seedrl-calibrated` preset.

use std::fmt;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::attribute_workload;
use crate::gpumodel::kernel_time;
use crate::model::{Config, ConfigError};
use crate::rlsys::{simulate, SimError, SimOverrides, SimResult};
use crate::CpuGpuRatio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Actors,
    Sms,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Actors => "actors",
            SweepParam::Sms => "sms",
        }
    }

    fn apply(self, config: &Config, value: u32) -> Config {
        match self {
            SweepParam::Actors => config.clone().with_actors(value),
            SweepParam::Sms => config.clone().with_active_sms(value),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SweepError {
    #[error("sweep needs at least one value")]
    Empty,
    #[error("sweep values must be strictly increasing; {prev} is followed by {next}")]
    NotAscending { prev: u32, next: u32 },
    #[error("{param} value {value} is outside [{min}, {max}]")]
    OutOfRange {
        param: SweepParam,
        value: u32,
        min: u32,
        max: u32,
    },
    #[error("could not build a worker pool: {0}")]
    Pool(String),
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: u32,
    pub result: Option<SimResult>,
    pub error: Option<String>,
    /// Runtime for a fixed frame count relative to the baseline point.
    pub runtime_norm: Option<f64>,
    /// Throughput relative to the baseline point.
    pub speedup: Option<f64>,
}

impl SweepPoint {
    /// Runtime relative to the baseline; for SM sweeps this is the slowdown.
    pub fn slowdown(&self) -> Option<f64> {
        self.runtime_norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub param: SweepParam,
    /// Index of the point every ratio is relative to: the first point for
    /// actor sweeps, the largest SM count for SM sweeps.
    pub baseline_index: usize,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn point(&self, value: u32) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.value == value)
    }

    pub fn speedup(&self, value: u32) -> Option<f64> {
        self.point(value).and_then(|p| p.speedup)
    }

    pub fn slowdown(&self, value: u32) -> Option<f64> {
        self.point(value).and_then(|p| p.slowdown())
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepPoint> {
        self.points.iter().filter(|p| p.error.is_some())
    }

    /// `(value, speedup)` pairs of the successful points.
    pub fn speedup_curve(&self) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter_map(|p| p.speedup.map(|s| (f64::from(p.value), s)))
            .collect()
    }
}

/// Worker count for sweeps; `None` uses every available core.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepOptions {
    pub threads: Option<usize>,
}

/// Runs one simulation per value with everything else fixed.
///
/// Points run concurrently but come back in input order; a failing point is
/// recorded and does not abort the others.
pub fn sweep(config: &Config, param: SweepParam, values: &[u32], options: SweepOptions) -> Result<SweepResult, SweepError> {
    check_values(config, param, values)?;
    let run = |&v: &u32| (v, simulate(&param.apply(config, v)));
    let outcomes: Vec<(u32, Result<SimResult, SimError>)> = match options.threads {
        Some(1) => values.iter().map(run).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SweepError::Pool(e.to_string()))?
            .install(|| values.par_iter().map(run).collect()),
        None => values.par_iter().map(run).collect(),
    };
    let baseline_index = match param {
        SweepParam::Actors => 0,
        SweepParam::Sms => values.len() - 1,
    };
    let base_fps = outcomes[baseline_index]
        .1
        .as_ref()
        .ok()
        .map(|r| r.frames_per_second);
    let points = outcomes
        .into_iter()
        .map(|(value, outcome)| match outcome {
            Ok(r) => {
                let ratio = base_fps.map(|b| r.frames_per_second / b);
                SweepPoint {
                    value,
                    runtime_norm: ratio.map(|s| 1.0 / s),
                    speedup: ratio,
                    result: Some(r),
                    error: None,
                }
            }
            Err(e) => SweepPoint {
                value,
                result: None,
                error: Some(e.to_string()),
                runtime_norm: None,
                speedup: None,
            },
        })
        .collect();
    Ok(SweepResult {
        param,
        baseline_index,
        points,
    })
}

fn check_values(config: &Config, param: SweepParam, values: &[u32]) -> Result<(), SweepError> {
    if values.is_empty() {
        return Err(SweepError::Empty);
    }
    if let Some(w) = values.windows(2).find(|w| w[1] <= w[0]) {
        return Err(SweepError::NotAscending { prev: w[0], next: w[1] });
    }
    let (min, max) = match param {
        SweepParam::Actors => (1, u32::MAX),
        SweepParam::Sms => (1, config.hardware.sm_per_gpu),
    };
    match values.iter().find(|&&v| v < min || v > max) {
        Some(&value) => Err(SweepError::OutOfRange { param, value, min, max }),
        None => Ok(()),
    }
}

pub fn sweep_actors(config: &Config, actor_counts: &[u32]) -> Result<SweepResult, SweepError> {
    sweep(config, SweepParam::Actors, actor_counts, SweepOptions::default())
}

/// SM sweep; slowdowns are relative to the largest count in `sm_counts`.
pub fn sweep_sms(config: &Config, sm_counts: &[u32]) -> Result<SweepResult, SweepError> {
    sweep(config, SweepParam::Sms, sm_counts, SweepOptions::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Cpu,
    Gpu,
}

/// Closed-form frame-rate ceilings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// Environments stepping at once, divided by the mean step time.
    pub cpu_bound: f64,
    /// GPU frames per second at the cheapest per-frame batch, counting
    /// training; with several GPUs, their aggregate capacity.
    pub gpu_bound: f64,
    pub overall: f64,
    pub binding: Resource,
}

pub fn analytic_bounds(config: &Config) -> Bounds {
    analytic_bounds_with(config, &SimOverrides::default())
}

/// Bounds under the same what-if switches the simulator accepts.
pub fn analytic_bounds_with(config: &Config, overrides: &SimOverrides) -> Bounds {
    let hw = &config.hardware;
    let w = &config.workload;
    let envs = w.total_envs() as f64;
    let threads = if overrides.unlimited_cpu_threads {
        envs
    } else {
        f64::from(hw.cpu_threads)
    };
    let cpu_bound = if overrides.zero_env_step_time {
        f64::INFINITY
    } else {
        envs.min(threads) / w.env_step_time.mean
    };

    let n_sm = hw.active_sms_per_gpu();
    let time = |k: &crate::model::KernelSpec, b: u32| {
        if overrides.instant_gpu {
            0.0
        } else {
            kernel_time(&k.at_batch(b), hw, n_sm, overrides.gpu_flags)
        }
    };
    // Partial batches can beat full ones when a full batch adds a wave.
    let inference = (1..=w.inference_batch_size)
        .map(|b| time(&w.inference_kernel, b) / f64::from(b))
        .fold(f64::INFINITY, f64::min);
    let training = w.train_invocations_per_frame() * time(&w.train_kernel, w.train_batch_size);
    let gpus = f64::from(hw.gpu_count);
    let gpu_bound = (gpus / (inference + training)).min(1.0 / training);
    let (overall, binding) = if cpu_bound <= gpu_bound {
        (cpu_bound, Resource::Cpu)
    } else {
        (gpu_bound, Resource::Gpu)
    };
    Bounds {
        cpu_bound,
        gpu_bound,
        overall,
        binding,
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KneeError {
    #[error("knee detection needs at least two points")]
    TooFewPoints,
    #[error("curve values must be strictly increasing and positive")]
    NotAscending,
}

/// Smallest value after which the throughput gain per doubling drops below
/// `epsilon`; the last value if it never does.
pub fn find_knee(curve: &[(f64, f64)], epsilon: f64) -> Result<f64, KneeError> {
    if curve.len() < 2 {
        return Err(KneeError::TooFewPoints);
    }
    if curve[0].0 <= 0.0 || curve.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(KneeError::NotAscending);
    }
    for w in curve.windows(2) {
        let ((v0, s0), (v1, s1)) = (w[0], w[1]);
        let gain = (s1 / s0 - 1.0) / (v1 / v0).log2();
        if gain < epsilon {
            return Ok(v0);
        }
    }
    Ok(curve[curve.len() - 1].0)
}

mod ratio_text {
    use super::CpuGpuRatio;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &CpuGpuRatio, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(r)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CpuGpuRatio, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(r: &Option<CpuGpuRatio>, s: S) -> Result<S::Ok, S::Error> {
            match r {
                Some(r) => s.collect_str(r),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<CpuGpuRatio>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|t| t.parse().map_err(D::Error::custom))
                .transpose()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub cpu_threads: u32,
    pub total_sms: u64,
    /// Exact `cpu_threads / total_sms`, rendered like `1/16`.
    #[serde(with = "ratio_text")]
    pub ratio: CpuGpuRatio,
    pub ratio_decimal: f64,
    #[serde(with = "ratio_text::option", default)]
    pub recommended_min_ratio: Option<CpuGpuRatio>,
    pub recommended_min_ratio_decimal: Option<f64>,
    /// Smallest SM count per GPU whose slowdown stays within tolerance.
    pub recommended_sms_per_gpu: Option<u32>,
    pub delta: Option<f64>,
    pub verdict: String,
}

fn decimal(r: CpuGpuRatio) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Exact ratio of CPU hardware threads to SMs across all GPUs.
pub fn cpu_gpu_ratio(hw: &crate::model::HardwareSpec) -> RatioReport {
    let total = hw.total_sms();
    let ratio = Ratio::new(u64::from(hw.cpu_threads), total);
    RatioReport {
        cpu_threads: hw.cpu_threads,
        total_sms: total,
        ratio,
        ratio_decimal: decimal(ratio),
        recommended_min_ratio: None,
        recommended_min_ratio_decimal: None,
        recommended_sms_per_gpu: None,
        delta: None,
        verdict: format!("{} CPU threads per SM", ratio),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RecommendError {
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error("simulation at {sms} SMs per GPU failed: {message}")]
    Point { sms: u32, message: String },
    #[error("delta must be finite and >= 0, got {0}")]
    BadDelta(f64),
}

/// Default SM grid: about forty evenly spaced counts up to the physical count.
pub fn default_sm_grid(sm_per_gpu: u32) -> Vec<u32> {
    let step = (sm_per_gpu / 40).max(1);
    let mut grid: Vec<u32> = (1..=sm_per_gpu / step).map(|i| i * step).collect();
    if grid.last() != Some(&sm_per_gpu) {
        grid.push(sm_per_gpu);
    }
    grid
}

/// Hypothetical SM multiples probed when even the physical count is too few.
const EXTRAPOLATION_DOUBLINGS: u32 = 6;

/// Recommends a minimum CPU/GPU ratio from an SM sweep.
///
/// The sweep walks the SM count down from the physical count; `s*` is the
/// count one grid step above the largest count whose slowdown exceeds
/// `1 + delta`. When the very first step down already exceeds it, the
/// workload is GPU-bound and SM counts beyond the physical one are probed
/// by doubling until another doubling gains less than `delta`.
pub fn recommend_ratio(config: &Config, delta: f64, grid: Option<&[u32]>) -> Result<RatioReport, RecommendError> {
    if !delta.is_finite() || delta < 0.0 {
        return Err(RecommendError::BadDelta(delta));
    }
    let hw = &config.hardware;
    let default_grid;
    let grid = match grid {
        Some(g) => g,
        None => {
            default_grid = default_sm_grid(hw.sm_per_gpu);
            &default_grid
        }
    };
    let sweep = sweep(config, SweepParam::Sms, grid, SweepOptions::default())?;
    if let Some(p) = sweep.failures().next() {
        return Err(RecommendError::Point {
            sms: p.value,
            message: p.error.clone().unwrap_or_default(),
        });
    }
    let slow: Vec<(u32, f64)> = sweep
        .points
        .iter()
        .map(|p| (p.value, p.slowdown().expect("no failures")))
        .collect();
    let limit = 1.0 + delta;
    let last_bad = slow.iter().rposition(|&(_, s)| s > limit);
    let (s_star, verdict) = match last_bad {
        None => (
            slow[0].0,
            "CPU-bound: throughput stays within tolerance down to the smallest SM count".to_string(),
        ),
        Some(i) if i + 2 == slow.len() || slow.len() == 1 => {
            let s = extrapolate_sms(config, delta)?;
            (
                s,
                format!(
                    "GPU-bound: removing SMs costs more than {:.1}% throughput; about {s} SMs per GPU are needed",
                    delta * 100.0
                ),
            )
        }
        Some(i) => (slow[i + 1].0, String::new()),
    };
    let recommended = Ratio::new(u64::from(hw.cpu_threads), u64::from(hw.gpu_count) * u64::from(s_star));
    let mut report = cpu_gpu_ratio(hw);
    let verdict = if verdict.is_empty() {
        if report.ratio >= recommended {
            format!("balanced: ratio {} meets the recommended minimum {}", report.ratio, recommended)
        } else {
            format!("CPU-starved: ratio {} is below the recommended minimum {}", report.ratio, recommended)
        }
    } else {
        verdict
    };
    report.recommended_min_ratio = Some(recommended);
    report.recommended_min_ratio_decimal = Some(decimal(recommended));
    report.recommended_sms_per_gpu = Some(s_star);
    report.delta = Some(delta);
    report.verdict = verdict;
    Ok(report)
}

fn extrapolate_sms(config: &Config, delta: f64) -> Result<u32, RecommendError> {
    let base = config.hardware.active_sms_per_gpu();
    let at = |sms: u32| -> Result<f64, RecommendError> {
        let mut c = config.clone();
        c.hardware.sm_per_gpu = sms;
        c.hardware.active_sms = None;
        simulate(&c)
            .map(|r| r.frames_per_second)
            .map_err(|e| RecommendError::Point {
                sms,
                message: e.to_string(),
            })
    };
    let mut sms = base;
    let mut fps = at(sms)?;
    for _ in 0..EXTRAPOLATION_DOUBLINGS {
        let next = at(sms * 2)?;
        if next <= fps * (1.0 + delta) {
            return Ok(sms);
        }
        sms *= 2;
        fps = next;
    }
    Ok(sms)
}

/// A target value with the absolute distance from it that still counts as
/// a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub value: f64,
    pub tolerance: f64,
}

const fn target(value: f64, tolerance: f64) -> Target {
    Target { value, tolerance }
}

/// The anchor numbers the calibrated preset is fitted to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub math: Target,
    pub sm_utilization: Target,
    pub dram_bandwidth: Target,
    /// DRAM latency plus the rest of the memory system.
    pub latency_and_rest: Target,
    /// speedup(40 actors) / speedup(4 actors).
    pub speedup_4_to_40: Target,
    /// speedup(256 actors) / speedup(40 actors).
    pub speedup_40_to_256: Target,
    /// Runtime at half the SMs relative to all of them.
    pub half_sm_slowdown: Target,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            math: target(0.57, 0.03),
            sm_utilization: target(0.15, 0.03),
            dram_bandwidth: target(0.12, 0.03),
            latency_and_rest: target(0.16, 0.04),
            speedup_4_to_40: target(5.8, 0.58),
            speedup_40_to_256: target(2.0, 0.30),
            half_sm_slowdown: target(1.06, 0.03),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub name: String,
    pub target: f64,
    pub tolerance: f64,
    pub achieved: f64,
    /// `|achieved - target| / tolerance`; at most 1 within tolerance.
    pub score: f64,
}

/// Actor counts behind the throughput anchors.
pub const ANCHOR_ACTORS: [u32; 3] = [4, 40, 256];

/// Evaluates every calibration anchor for a configuration.
///
/// Actor anchors come from runs at [`ANCHOR_ACTORS`]; the SM anchor
/// compares half of the physical SMs against all of them at the config's
/// own actor count.
pub fn evaluate_anchors(config: &Config, targets: &CalibrationTargets) -> Result<Vec<Anchor>, CalibrationError> {
    let b = attribute_workload(&config.workload, &config.hardware);
    let sms = config.hardware.sm_per_gpu;
    let mut runs: Vec<Config> = ANCHOR_ACTORS.iter().map(|&n| config.clone().with_actors(n)).collect();
    runs.push(config.clone().with_active_sms(sms / 2));
    runs.push(config.clone().with_active_sms(sms));
    let fps = runs
        .par_iter()
        .map(|c| simulate(c).map(|r| r.frames_per_second))
        .collect::<Result<Vec<_>, _>>()?;
    let (f4, f40, f256, half, full) = (fps[0], fps[1], fps[2], fps[3], fps[4]);
    let anchor = |name: &str, t: Target, achieved: f64| Anchor {
        name: name.to_string(),
        target: t.value,
        tolerance: t.tolerance,
        achieved,
        score: (achieved - t.value).abs() / t.tolerance,
    };
    Ok(vec![
        anchor("math", targets.math, b.fraction("math")),
        anchor("sm_utilization", targets.sm_utilization, b.fraction("sm_utilization")),
        anchor("dram_bandwidth", targets.dram_bandwidth, b.fraction("dram_bandwidth")),
        anchor(
            "dram_latency+rest_of_memory",
            targets.latency_and_rest,
            b.fraction("dram_latency") + b.fraction("rest_of_memory"),
        ),
        anchor("speedup_4_to_40", targets.speedup_4_to_40, f40 / f4),
        anchor("speedup_40_to_256", targets.speedup_40_to_256, f256 / f40),
        anchor("half_sm_slowdown", targets.half_sm_slowdown, full / half),
    ])
}

fn worst_score(anchors: &[Anchor]) -> f64 {
    anchors.iter().map(|a| a.score).fold(0.0, f64::max)
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("best fit misses the anchors (worst score {score:.3} > 1)\n{}", format_anchors(.anchors))]
    PoorFit {
        best: Box<Config>,
        anchors: Vec<Anchor>,
        score: f64,
        log: Vec<String>,
    },
}

pub fn format_anchors(anchors: &[Anchor]) -> String {
    anchors
        .iter()
        .map(|a| {
            format!(
                "{:<28} target {:>7.4} +/- {:<6.4} achieved {:>7.4} score {:.3}",
                a.name, a.target, a.tolerance, a.achieved, a.score
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub config: Config,
    pub anchors: Vec<Anchor>,
    /// Largest anchor score; at most 1 when every anchor is within tolerance.
    pub score: f64,
    pub evaluations: usize,
    pub log: Vec<String>,
}

/// Search budget and starting point for [`calibrate`].
#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub start: Config,
    pub max_evaluations: usize,
    /// Initial multiplicative step for continuous parameters.
    pub initial_step: f64,
    /// Search stops once the step falls below this factor.
    pub min_step: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            start: crate::model::preset("seedrl-calibrated").expect("built-in preset"),
            max_evaluations: 400,
            initial_step: 1.5,
            min_step: 1.005,
        }
    }
}

/// A tunable knob of the calibration search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Knob {
    GpuScale,
    StepMean,
    InferenceTimeout,
    TrainBatch,
    InferenceMath,
    InferenceMem,
    TrainMath,
    TrainMem,
}

const KNOBS: [Knob; 8] = [
    Knob::GpuScale,
    Knob::StepMean,
    Knob::InferenceTimeout,
    Knob::TrainBatch,
    Knob::InferenceMath,
    Knob::InferenceMem,
    Knob::TrainMath,
    Knob::TrainMem,
];

impl Knob {
    fn name(self) -> &'static str {
        match self {
            Knob::GpuScale => "all kernel work",
            Knob::StepMean => "env_step_time.mean",
            Knob::InferenceTimeout => "inference_timeout",
            Knob::TrainBatch => "train_batch_size",
            Knob::InferenceMath => "inference_kernel.math_work",
            Knob::InferenceMem => "inference_kernel.mem_traffic",
            Knob::TrainMath => "train_kernel.math_work",
            Knob::TrainMem => "train_kernel.mem_traffic",
        }
    }

    /// Moves the knob by `factor` (at least one unit for integers); returns
    /// `None` when the move would leave the valid range or do nothing.
    fn nudge(self, c: &Config, factor: f64) -> Option<Config> {
        let mut c = c.clone();
        let w = &mut c.workload;
        match self {
            Knob::GpuScale => {
                for k in [&mut w.inference_kernel, &mut w.train_kernel] {
                    k.math_work *= factor;
                    k.mem_traffic *= factor;
                }
            }
            Knob::StepMean => w.env_step_time.mean *= factor,
            Knob::InferenceTimeout => w.inference_timeout = Some(w.effective_inference_timeout() * factor),
            Knob::TrainBatch => {
                // Training work per step follows the batch so the per-frame
                // cost stays put.
                let old = w.train_batch_size;
                let scaled = (f64::from(old) * factor).round() as u32;
                let next = match scaled.cmp(&old) {
                    std::cmp::Ordering::Equal if factor > 1.0 => old + 1,
                    std::cmp::Ordering::Equal => old.checked_sub(1)?,
                    _ => scaled,
                };
                if next == 0 || next == old {
                    return None;
                }
                let r = f64::from(next) / f64::from(old);
                w.train_batch_size = next;
                w.train_kernel.math_work *= r;
                w.train_kernel.mem_traffic *= r;
            }
            Knob::InferenceMath => w.inference_kernel.math_work *= factor,
            Knob::InferenceMem => w.inference_kernel.mem_traffic *= factor,
            Knob::TrainMath => w.train_kernel.math_work *= factor,
            Knob::TrainMem => w.train_kernel.mem_traffic *= factor,
        }
        c.validate().ok()
    }
}

/// Deterministic coordinate descent minimizing the worst anchor score.
///
/// Each knob is tried up and down by the current step factor and the first
/// improving move is kept. When a full pass improves nothing, the step is
/// square-rooted. Fails with the best configuration found when any anchor
/// is still outside its tolerance.
pub fn calibrate(targets: &CalibrationTargets, options: &CalibrationOptions) -> Result<CalibrationOutcome, CalibrationError> {
    let mut best = options.start.clone().validate()?;
    let mut best_anchors = evaluate_anchors(&best, targets)?;
    let mut best_score = worst_score(&best_anchors);
    let mut evaluations = 1;
    let mut log = vec![format!("start: worst score {best_score:.4}")];
    let mut step = options.initial_step;
    'search: while step >= options.min_step {
        let mut improved = false;
        for knob in KNOBS {
            for factor in [step, 1.0 / step] {
                if evaluations >= options.max_evaluations {
                    log.push(format!("stopped after {evaluations} evaluations"));
                    break 'search;
                }
                let Some(candidate) = knob.nudge(&best, factor) else {
                    continue;
                };
                evaluations += 1;
                let anchors = evaluate_anchors(&candidate, targets)?;
                let score = worst_score(&anchors);
                if score < best_score {
                    log.push(format!(
                        "eval {evaluations}: {} x{factor:.4} -> worst score {score:.4}",
                        knob.name()
                    ));
                    best = candidate;
                    best_anchors = anchors;
                    best_score = score;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step = step.sqrt();
            log.push(format!("step -> {step:.5}"));
        }
    }
    log.push(format!("final: worst score {best_score:.4} after {evaluations} evaluations"));
    if best_score > 1.0 {
        return Err(CalibrationError::PoorFit {
            best: Box::new(best),
            anchors: best_anchors,
            score: best_score,
            log,
        });
    }
    Ok(CalibrationOutcome {
        config: best,
        anchors: best_anchors,
        score: best_score,
        evaluations,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knee_examples() {
        assert_eq!(find_knee(&[(1.0, 1.0), (2.0, 2.0), (4.0, 2.1)], 0.2).unwrap(), 2.0);
        let linear: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&v| (v, v)).collect();
        assert_eq!(find_knee(&linear, 0.99).unwrap(), 8.0);
        assert_eq!(find_knee(&[(1.0, 1.0)], 0.1), Err(KneeError::TooFewPoints));
        assert_eq!(find_knee(&[(2.0, 1.0), (1.0, 1.0)], 0.1), Err(KneeError::NotAscending));
    }

    #[test]
    fn ratio_examples() {
        let mut hw = crate::model::preset("dgx1-v100").unwrap().hardware;
        assert_eq!(cpu_gpu_ratio(&hw).ratio, Ratio::new(1, 16));
        hw.gpu_count = 1;
        hw.sm_per_gpu = 40;
        assert_eq!(cpu_gpu_ratio(&hw).ratio, Ratio::from_integer(1));
        hw.cpu_threads = 256;
        hw.sm_per_gpu = 1024;
        assert_eq!(cpu_gpu_ratio(&hw).ratio, Ratio::new(1, 4));
    }

    #[test]
    fn ratio_report_serializes_ratio_as_text() {
        let hw = crate::model::preset("dgx1-v100").unwrap().hardware;
        let json = serde_json::to_value(cpu_gpu_ratio(&hw)).unwrap();
        assert_eq!(json["ratio"], "1/16");
        let back: RatioReport = serde_json::from_value(json).unwrap();
        assert_eq!(back.ratio, Ratio::new(1, 16));
    }

    #[test]
    fn sm_grid() {
        let g = default_sm_grid(80);
        assert_eq!(g.first(), Some(&2));
        assert_eq!(g.last(), Some(&80));
        assert_eq!(g.len(), 40);
        assert_eq!(default_sm_grid(3), vec![1, 2, 3]);
    }

    #[test]
    fn sweep_rejects_bad_values() {
        let c = crate::model::preset("seedrl-calibrated").unwrap();
        assert_eq!(sweep_actors(&c, &[]).unwrap_err(), SweepError::Empty);
        assert_eq!(
            sweep_actors(&c, &[4, 4]).unwrap_err(),
            SweepError::NotAscending { prev: 4, next: 4 }
        );
        assert!(matches!(
            sweep_sms(&c, &[0, 80]).unwrap_err(),
            SweepError::OutOfRange { value: 0, .. }
        ));
        assert!(matches!(
            sweep_sms(&c, &[40, 81]).unwrap_err(),
            SweepError::OutOfRange { value: 81, .. }
        ));
    }
}
