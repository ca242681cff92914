//! Configuration and result types, their validation, and the config file
//! schema.
//!
//! A config document is a single JSON object with the top-level sections
//! `hardware`, `workload` and `simulation` plus a required
//! `"schema_version": 1`. Unknown keys are rejected.

mod presets;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub use presets::{preset, PRESET_NAMES};

/// The only config schema version understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// GPU board power envelope, per GPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSpec<T: Scalar = f64> {
    /// Watts drawn by an idle (but powered) GPU.
    pub p_idle: T,
    /// Watts drawn at full utilization.
    pub p_max: T,
}

/// The simulated CPU-GPU platform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec<T: Scalar = f64> {
    pub cpu_threads: u32,
    pub gpu_count: u32,
    pub sm_per_gpu: u32,
    /// SMs visible to the GPU scheduler; defaults to `sm_per_gpu`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_sms: Option<u32>,
    /// Work-units per second per SM.
    pub sm_math_rate: T,
    /// Bytes per second.
    pub dram_bandwidth: T,
    /// Seconds per dependent DRAM round trip.
    pub dram_latency: T,
    /// Bytes per second for the on-chip tier.
    pub l2_bandwidth: T,
    /// Seconds added to every kernel invocation.
    pub kernel_launch_overhead: T,
    pub power: PowerSpec<T>,
}

impl<T: Scalar> HardwareSpec<T> {
    /// Physical SMs across all GPUs.
    pub fn total_sms(&self) -> u64 {
        u64::from(self.gpu_count) * u64::from(self.sm_per_gpu)
    }

    /// SMs per GPU the scheduler may use.
    pub fn active_sms_per_gpu(&self) -> u32 {
        self.active_sms.unwrap_or(self.sm_per_gpu)
    }

    /// Returns a copy with `n` SMs visible per GPU.
    pub fn with_active_sms(mut self, n: u32) -> Self {
        self.active_sms = Some(n);
        self
    }

    fn check(&self, path: &str, v: &mut Violations) {
        v.count(path, "cpu_threads", u64::from(self.cpu_threads));
        v.count(path, "gpu_count", u64::from(self.gpu_count));
        v.count(path, "sm_per_gpu", u64::from(self.sm_per_gpu));
        if let Some(active) = self.active_sms {
            if active == 0 || active > self.sm_per_gpu {
                v.push(
                    format!("{path}.active_sms"),
                    format!("must be in [1, sm_per_gpu={}], got {active}", self.sm_per_gpu),
                );
            }
        }
        v.positive(path, "sm_math_rate", self.sm_math_rate);
        v.positive(path, "dram_bandwidth", self.dram_bandwidth);
        v.positive(path, "l2_bandwidth", self.l2_bandwidth);
        v.non_negative(path, "dram_latency", self.dram_latency);
        v.non_negative(path, "kernel_launch_overhead", self.kernel_launch_overhead);
        if self.l2_bandwidth < self.dram_bandwidth {
            v.push(
                format!("{path}.l2_bandwidth"),
                format!(
                    "{path}.l2_bandwidth ({}) must be >= {path}.dram_bandwidth ({})",
                    self.l2_bandwidth, self.dram_bandwidth
                ),
            );
        }
        let p = format!("{path}.power");
        v.non_negative(&p, "p_idle", self.power.p_idle);
        v.finite(&p, "p_max", self.power.p_max);
        if self.power.p_idle > self.power.p_max {
            v.push(
                format!("{p}.p_idle"),
                format!(
                    "{p}.p_idle ({}) must be <= {p}.p_max ({})",
                    self.power.p_idle, self.power.p_max
                ),
            );
        }
    }
}

/// Abstract cost of one GPU kernel invocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec<T: Scalar = f64> {
    /// Arithmetic work in abstract work-units.
    pub math_work: T,
    /// Bytes moved through the memory hierarchy.
    pub mem_traffic: T,
    /// Fraction of `mem_traffic` served on chip.
    pub l2_hit_fraction: T,
    /// Serially dependent DRAM round trips.
    pub dep_mem_rounds: u32,
    /// Independent thread blocks available to the SMs.
    pub blocks: u32,
    /// Whether work, traffic and blocks grow linearly with batch size.
    pub per_item_scaling: bool,
}

impl<T: Scalar> KernelSpec<T> {
    /// A kernel that costs nothing (besides launch overhead).
    pub fn empty() -> Self {
        Self {
            math_work: T::zero(),
            mem_traffic: T::zero(),
            l2_hit_fraction: T::zero(),
            dep_mem_rounds: 0,
            blocks: 1,
            per_item_scaling: false,
        }
    }

    /// The kernel's cost when invoked on `batch` items.
    pub fn at_batch(&self, batch: u32) -> ScaledKernel<T> {
        if self.per_item_scaling {
            let b = T::from_count(u64::from(batch));
            ScaledKernel {
                math_work: self.math_work * b,
                mem_traffic: self.mem_traffic * b,
                l2_hit_fraction: self.l2_hit_fraction,
                dep_mem_rounds: self.dep_mem_rounds,
                blocks: u64::from(self.blocks) * u64::from(batch),
            }
        } else {
            ScaledKernel::from(*self)
        }
    }

    fn check(&self, path: &str, v: &mut Violations) {
        v.non_negative(path, "math_work", self.math_work);
        v.non_negative(path, "mem_traffic", self.mem_traffic);
        let h = self.l2_hit_fraction;
        if !(h >= T::zero() && h <= T::one()) {
            v.push(
                format!("{path}.l2_hit_fraction"),
                format!("must be in [0, 1], got {h}"),
            );
        }
        v.count(path, "blocks", u64::from(self.blocks));
    }
}

/// A kernel invocation with batch scaling already applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledKernel<T: Scalar = f64> {
    pub math_work: T,
    pub mem_traffic: T,
    pub l2_hit_fraction: T,
    pub dep_mem_rounds: u32,
    pub blocks: u64,
}

impl<T: Scalar> From<KernelSpec<T>> for ScaledKernel<T> {
    fn from(k: KernelSpec<T>) -> Self {
        Self {
            math_work: k.math_work,
            mem_traffic: k.mem_traffic,
            l2_hit_fraction: k.l2_hit_fraction,
            dep_mem_rounds: k.dep_mem_rounds,
            blocks: u64::from(k.blocks),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Constant,
    Exponential,
    Lognormal,
}

/// Environment step-time distribution, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distribution {
    pub kind: DistributionKind,
    pub mean: f64,
    /// Coefficient of variation; ignored for constant, fixed at 1 for exponential.
    #[serde(default)]
    pub cv: f64,
}

impl Distribution {
    pub fn constant(mean: f64) -> Self {
        Self {
            kind: DistributionKind::Constant,
            mean,
            cv: 0.0,
        }
    }

    pub fn exponential(mean: f64) -> Self {
        Self {
            kind: DistributionKind::Exponential,
            mean,
            cv: 1.0,
        }
    }

    pub fn lognormal(mean: f64, cv: f64) -> Self {
        Self {
            kind: DistributionKind::Lognormal,
            mean,
            cv,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.kind == DistributionKind::Constant
    }

    fn check(&self, path: &str, v: &mut Violations) {
        v.positive(path, "mean", self.mean);
        v.non_negative(path, "cv", self.cv);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_actors: u32,
    pub envs_per_actor: u32,
    pub env_step_time: Distribution,
    /// Carried for future transport modeling; adds no latency.
    pub obs_bytes: u64,
    pub inference_batch_size: u32,
    /// Seconds; defaults to twice the mean env step time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_timeout: Option<f64>,
    pub inference_kernel: KernelSpec,
    pub unroll_length: u32,
    pub train_batch_size: u32,
    pub samples_per_insert: f64,
    pub train_kernel: KernelSpec,
    pub replay_capacity: u32,
    pub replay_min_fill: u32,
}

impl WorkloadSpec {
    /// Total environment instances across all actors.
    pub fn total_envs(&self) -> u64 {
        u64::from(self.num_actors) * u64::from(self.envs_per_actor)
    }

    /// Batching timeout with the default applied.
    pub fn effective_inference_timeout(&self) -> f64 {
        self.inference_timeout
            .unwrap_or(2.0 * self.env_step_time.mean)
    }

    /// Inference kernel invocations per environment frame.
    pub fn inference_invocations_per_frame(&self) -> f64 {
        1.0 / f64::from(self.inference_batch_size)
    }

    /// Training kernel invocations per environment frame.
    pub fn train_invocations_per_frame(&self) -> f64 {
        self.samples_per_insert
            / (f64::from(self.train_batch_size) * f64::from(self.unroll_length))
    }

    fn check(&self, v: &mut Violations) {
        let p = "workload";
        v.count(p, "num_actors", u64::from(self.num_actors));
        v.count(p, "envs_per_actor", u64::from(self.envs_per_actor));
        v.count(p, "inference_batch_size", u64::from(self.inference_batch_size));
        v.count(p, "unroll_length", u64::from(self.unroll_length));
        v.count(p, "train_batch_size", u64::from(self.train_batch_size));
        v.count(p, "replay_capacity", u64::from(self.replay_capacity));
        self.env_step_time.check("workload.env_step_time", v);
        if let Some(t) = self.inference_timeout {
            v.positive(p, "inference_timeout", t);
        }
        v.positive(p, "samples_per_insert", self.samples_per_insert);
        self.inference_kernel.check("workload.inference_kernel", v);
        self.train_kernel.check("workload.train_kernel", v);
        if self.replay_min_fill > self.replay_capacity {
            v.push(
                "workload.replay_min_fill".into(),
                format!(
                    "workload.replay_min_fill ({}) must be <= workload.replay_capacity ({})",
                    self.replay_min_fill, self.replay_capacity
                ),
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub seed: u64,
    pub total_env_frames: u64,
    /// Frames excluded from steady-state metrics; defaults to 10% of the total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_frames: Option<u64>,
}

impl SimulationSpec {
    pub fn effective_warmup_frames(&self) -> u64 {
        self.warmup_frames.unwrap_or(self.total_env_frames / 10)
    }

    fn check(&self, v: &mut Violations) {
        let warmup = self.effective_warmup_frames();
        if self.total_env_frames == 0 {
            v.push(
                "simulation.total_env_frames".into(),
                "must be >= 1".into(),
            );
        } else if warmup >= self.total_env_frames {
            v.push(
                "simulation.warmup_frames".into(),
                format!(
                    "simulation.warmup_frames ({warmup}) must be < simulation.total_env_frames ({})",
                    self.total_env_frames
                ),
            );
        }
    }
}

/// A complete simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub hardware: HardwareSpec,
    pub workload: WorkloadSpec,
    pub simulation: SimulationSpec,
}

impl Config {
    /// Parses a config document. Does not validate.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every invariant and fills documented defaults.
    ///
    /// All violations are reported at once, each with its field path.
    pub fn validate(mut self) -> Result<Self, ConfigError> {
        let mut v = Violations::default();
        if self.schema_version != SCHEMA_VERSION {
            v.push(
                "schema_version".into(),
                format!(
                    "unsupported schema version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            );
        }
        self.hardware.check("hardware", &mut v);
        self.workload.check(&mut v);
        self.simulation.check(&mut v);
        if !v.0.is_empty() {
            return Err(ConfigError::Invalid(v.0));
        }
        self.simulation.warmup_frames = Some(self.simulation.effective_warmup_frames());
        self.workload.inference_timeout = Some(self.workload.effective_inference_timeout());
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.simulation.seed = seed;
        self
    }

    pub fn with_actors(mut self, n: u32) -> Self {
        self.workload.num_actors = n;
        self
    }

    pub fn with_active_sms(mut self, n: u32) -> Self {
        self.hardware = self.hardware.with_active_sms(n);
        self
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown preset {name:?}; available presets: {}", PRESET_NAMES.join(", "))]
    UnknownPreset { name: String },
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  {x}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Default)]
struct Violations(Vec<Violation>);

impl Violations {
    fn push(&mut self, path: String, message: String) {
        self.0.push(Violation { path, message });
    }

    fn count(&mut self, path: &str, field: &str, n: u64) {
        if n < 1 {
            self.push(format!("{path}.{field}"), format!("must be >= 1, got {n}"));
        }
    }

    fn positive<T: Scalar>(&mut self, path: &str, field: &str, x: T) {
        if !(x > T::zero() && x.is_finite()) {
            self.push(format!("{path}.{field}"), format!("must be finite and > 0, got {x}"));
        }
    }

    fn non_negative<T: Scalar>(&mut self, path: &str, field: &str, x: T) {
        if !(x >= T::zero() && x.is_finite()) {
            self.push(format!("{path}.{field}"), format!("must be finite and >= 0, got {x}"));
        }
    }

    fn finite<T: Scalar>(&mut self, path: &str, field: &str, x: T) {
        if !x.is_finite() {
            self.push(format!("{path}.{field}"), format!("must be finite, got {x}"));
        }
    }
}
