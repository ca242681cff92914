//! Deterministic performance model of actor-learner reinforcement learning
//! training on CPU-GPU systems.
//!
//! The crate is layered: [`model`] holds configuration types, [`engine`] is a
//! seeded discrete-event kernel, [`gpumodel`] times GPU kernels analytically,
//! [`rlsys`] builds the actor/inference/learner network on the engine, and
//! [`attribution`], [`power`] and [`analytics`] post-process runs.

pub mod analytics;
pub mod attribution;
pub mod engine;
pub mod gpumodel;
pub mod model;
pub mod power;
pub mod report;
pub mod rlsys;
pub mod scalar;

pub use analytics::{
    analytic_bounds, calibrate, cpu_gpu_ratio, find_knee, recommend_ratio, sweep_actors, sweep_sms, Bounds,
    CalibrationTargets, RatioReport, SweepPoint, SweepResult,
};
pub use attribution::{attribute_kernel, attribute_system, attribute_workload, BreakdownReport, Segment};
pub use gpumodel::{kernel_time, single_sm_normalized_time, sm_utilization, IdealizationFlags};
pub use model::{
    preset, Config, ConfigError, Distribution, DistributionKind, HardwareSpec, KernelSpec, PowerSpec, ScaledKernel,
    SimulationSpec, WorkloadSpec,
};
pub use power::{instantaneous_power, power_report, BusyTimeline, PowerReport};
pub use rlsys::{simulate, simulate_full, simulate_with, SimError, SimOptions, SimOutput, SimOverrides, SimResult};
pub use scalar::Scalar;

/// Exact CPU-thread to SM ratio.
pub type CpuGpuRatio = num_rational::Ratio<u64>;

pub type HardwareSpecF32 = HardwareSpec<f32>;
pub type KernelSpecF32 = KernelSpec<f32>;
pub type ScaledKernelF32 = ScaledKernel<f32>;
pub type PowerSpecF32 = PowerSpec<f32>;
pub type BreakdownReportF32 = BreakdownReport<f32>;
pub type PowerReportF32 = PowerReport<f32>;
