//! Bottleneck attribution by sequential idealization.
//!
//! Components are idealized one after another, outermost first (DRAM
//! bandwidth, DRAM latency, the rest of the memory system, SM utilization).
//! Each component is charged the time saved by its step; whatever remains
//! once everything is ideal is pure math. Segments are computed so that
//! adding them left to right reproduces the baseline time bit for bit.

use serde::{Deserialize, Serialize};

use crate::gpumodel::{kernel_time, IdealizationFlags};
use crate::model::{Config, HardwareSpec, ScaledKernel, WorkloadSpec};
use crate::rlsys::{simulate_with, SimError, SimOverrides};
use crate::scalar::{exact_partition, Scalar};

/// GPU components in the default (outer to inner) cascade order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpuComponent {
    DramBandwidth,
    DramLatency,
    RestOfMemory,
    SmUtilization,
}

impl GpuComponent {
    pub const CASCADE: [GpuComponent; 4] = [
        GpuComponent::DramBandwidth,
        GpuComponent::DramLatency,
        GpuComponent::RestOfMemory,
        GpuComponent::SmUtilization,
    ];

    pub fn label(self) -> &'static str {
        match self {
            GpuComponent::DramBandwidth => "dram_bandwidth",
            GpuComponent::DramLatency => "dram_latency",
            GpuComponent::RestOfMemory => "rest_of_memory",
            GpuComponent::SmUtilization => "sm_utilization",
        }
    }

    fn idealize(self, f: &mut IdealizationFlags) {
        match self {
            GpuComponent::DramBandwidth => f.ideal_dram_bandwidth = true,
            GpuComponent::DramLatency => f.ideal_dram_latency = true,
            GpuComponent::RestOfMemory => f.ideal_rest_of_memory = true,
            GpuComponent::SmUtilization => f.ideal_sm_utilization = true,
        }
    }
}

pub const MATH_LABEL: &str = "math";

/// Labels of the GPU breakdown in report order.
pub const GPU_LABELS: [&str; 5] = [
    "dram_bandwidth",
    "dram_latency",
    "rest_of_memory",
    "sm_utilization",
    "math",
];

/// Labels of the system-level breakdown in report order.
pub const SYSTEM_LABELS: [&str; 4] = [
    "cpu_thread_contention",
    "environment_compute",
    "gpu_compute",
    "residual_pipeline",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment<T: Scalar = f64> {
    pub label: String,
    pub seconds: T,
    pub fraction: T,
}

/// Ordered partition of a baseline time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport<T: Scalar = f64> {
    pub baseline_time: T,
    pub segments: Vec<Segment<T>>,
}

impl<T: Scalar> BreakdownReport<T> {
    /// Builds a report from cumulative-idealization levels.
    ///
    /// `levels[0]` is the baseline and `levels[i]` the time after the first
    /// `i` idealizations; `labels` has one entry per level, the last naming
    /// the residual left after all idealizations. A level that exceeds its
    /// predecessor is clamped so every segment is non-negative.
    pub fn from_levels(labels: &[&str], levels: &[T]) -> Self {
        assert_eq!(labels.len(), levels.len());
        assert!(!levels.is_empty());
        let baseline = levels[0].max(T::zero());
        let mut floor = baseline;
        let mut cumulative = Vec::with_capacity(levels.len());
        for &level in &levels[1..] {
            floor = floor.min(level.max(T::zero()));
            cumulative.push(baseline - floor);
        }
        cumulative.push(baseline);
        let seconds = exact_partition(&cumulative);

        let segments = labels
            .iter()
            .zip(&seconds)
            .enumerate()
            .map(|(i, (label, &s))| Segment {
                label: label.to_string(),
                seconds: s,
                fraction: if baseline > T::zero() {
                    s / baseline
                } else if i + 1 == labels.len() {
                    T::one()
                } else {
                    T::zero()
                },
            })
            .collect();
        Self {
            baseline_time: baseline,
            segments,
        }
    }

    pub fn segment(&self, label: &str) -> Option<&Segment<T>> {
        self.segments.iter().find(|s| s.label == label)
    }

    pub fn fraction(&self, label: &str) -> T {
        self.segment(label).map_or(T::zero(), |s| s.fraction)
    }

    pub fn seconds(&self, label: &str) -> T {
        self.segment(label).map_or(T::zero(), |s| s.seconds)
    }

    /// Left-to-right sum of segment seconds.
    pub fn segment_sum(&self) -> T {
        self.segments.iter().fold(T::zero(), |acc, s| acc + s.seconds)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.label.as_str()).collect()
    }
}

/// Cascade levels for one kernel in the given component order.
fn kernel_levels<T: Scalar>(
    k: &ScaledKernel<T>,
    hw: &HardwareSpec<T>,
    n_sm: u32,
    order: &[GpuComponent; 4],
) -> [T; 5] {
    let mut flags = IdealizationFlags::BASELINE;
    let mut levels = [kernel_time(k, hw, n_sm, flags); 5];
    for (i, c) in order.iter().enumerate() {
        c.idealize(&mut flags);
        levels[i + 1] = kernel_time(k, hw, n_sm, flags);
    }
    levels
}

fn labels_for(order: &[GpuComponent; 4]) -> [&'static str; 5] {
    [
        order[0].label(),
        order[1].label(),
        order[2].label(),
        order[3].label(),
        MATH_LABEL,
    ]
}

/// Sequential-idealization breakdown of one kernel invocation on `n_sm` SMs.
pub fn attribute_kernel<T: Scalar>(k: &ScaledKernel<T>, hw: &HardwareSpec<T>, n_sm: u32) -> BreakdownReport<T> {
    attribute_kernel_ordered(k, hw, n_sm, &GpuComponent::CASCADE)
}

/// Same cascade with a caller-chosen component order; segments are
/// reported in that order, so this is a different report, not a reshuffle.
pub fn attribute_kernel_ordered<T: Scalar>(
    k: &ScaledKernel<T>,
    hw: &HardwareSpec<T>,
    n_sm: u32,
    order: &[GpuComponent; 4],
) -> BreakdownReport<T> {
    BreakdownReport::from_levels(&labels_for(order), &kernel_levels(k, hw, n_sm, order))
}

/// Per-frame GPU kernel mix of a workload: (kernel, invocations per frame).
pub fn workload_kernel_mix(w: &WorkloadSpec) -> [(ScaledKernel, f64); 2] {
    [
        (
            w.inference_kernel.at_batch(w.inference_batch_size),
            w.inference_invocations_per_frame(),
        ),
        (
            w.train_kernel.at_batch(w.train_batch_size),
            w.train_invocations_per_frame(),
        ),
    ]
}

/// Time-weighted aggregate breakdown of a weighted kernel mix.
///
/// The baseline is the weighted sum of per-invocation baseline times.
pub fn attribute_mix(mix: &[(ScaledKernel, f64)], hw: &HardwareSpec, n_sm: u32) -> BreakdownReport {
    let mut agg = [0.0f64; 5];
    for (k, weight) in mix {
        let levels = kernel_levels(k, hw, n_sm, &GpuComponent::CASCADE);
        for (a, l) in agg.iter_mut().zip(levels) {
            *a += weight * l;
        }
    }
    BreakdownReport::from_levels(&GPU_LABELS, &agg)
}

/// GPU breakdown for a whole workload; the baseline is GPU seconds per
/// environment frame at full inference batches.
pub fn attribute_workload(w: &WorkloadSpec, hw: &HardwareSpec) -> BreakdownReport {
    attribute_mix(&workload_kernel_mix(w), hw, hw.active_sms_per_gpu())
}

/// Order of the system-level cascade.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemOrder {
    /// CPU threads, then environment time, then the GPU.
    #[default]
    CpuFirst,
    /// The GPU first, then CPU threads and environment time.
    GpuFirst,
}

/// System-level breakdown of measured runtime using the event simulator.
///
/// Stages idealize CPU threads (one per environment), environment step time
/// (zero) and the GPU (zero kernel time). Every stage reuses the config's seed. Segments are labelled
/// `cpu_thread_contention`, `environment_compute`, `gpu_compute` and
/// `residual_pipeline`, listed in cascade order.
pub fn attribute_system(config: &Config, order: SystemOrder) -> Result<BreakdownReport, SimError> {
    let runtime = |o: SimOverrides| -> Result<f64, SimError> {
        Ok(simulate_with(config, &o)?.result.measured_duration())
    };
    let base = SimOverrides::default();
    let cpu = SimOverrides {
        unlimited_cpu_threads: true,
        ..base
    };
    let env = SimOverrides {
        zero_env_step_time: true,
        ..cpu
    };
    let gpu = SimOverrides {
        instant_gpu: true,
        ..base
    };
    let all = SimOverrides {
        instant_gpu: true,
        ..env
    };
    let (labels, stages) = match order {
        SystemOrder::CpuFirst => (SYSTEM_LABELS, [base, cpu, env, all]),
        SystemOrder::GpuFirst => (
            [SYSTEM_LABELS[2], SYSTEM_LABELS[0], SYSTEM_LABELS[1], SYSTEM_LABELS[3]],
            [
                base,
                gpu,
                SimOverrides {
                    unlimited_cpu_threads: true,
                    ..gpu
                },
                all,
            ],
        ),
    };
    let levels = stages.iter().map(|&o| runtime(o)).collect::<Result<Vec<_>, _>>()?;
    Ok(BreakdownReport::from_levels(&labels, &levels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KernelSpec, PowerSpec};
    use proptest::prelude::*;

    fn toy_hw() -> HardwareSpec {
        HardwareSpec {
            cpu_threads: 1,
            gpu_count: 1,
            sm_per_gpu: 4,
            active_sms: None,
            sm_math_rate: 100.0,
            dram_bandwidth: 1e5,
            dram_latency: 0.1,
            l2_bandwidth: 1e6,
            kernel_launch_overhead: 0.0,
            power: PowerSpec {
                p_idle: 70.0,
                p_max: 300.0,
            },
        }
    }

    fn toy_kernel() -> ScaledKernel {
        ScaledKernel {
            math_work: 8000.0,
            mem_traffic: 3e6,
            l2_hit_fraction: 0.0,
            dep_mem_rounds: 5,
            blocks: 8,
        }
    }

    #[test]
    fn hand_cascade() {
        let r = attribute_kernel(&toy_kernel(), &toy_hw(), 4);
        assert_eq!(r.labels(), GPU_LABELS);
        let secs: Vec<f64> = r.segments.iter().map(|s| s.seconds).collect();
        assert_eq!(secs, [10.0, 0.5, 0.0, 0.0, 20.0]);
        assert_eq!(r.baseline_time, 30.5);
        assert_eq!(r.segment_sum(), 30.5);
    }

    #[test]
    fn compute_only_kernel_is_all_math() {
        let k = ScaledKernel {
            math_work: 1234.0,
            mem_traffic: 0.0,
            l2_hit_fraction: 0.3,
            dep_mem_rounds: 0,
            blocks: 12,
        };
        let r = attribute_kernel(&k, &toy_hw(), 4);
        let secs: Vec<f64> = r.segments.iter().map(|s| s.seconds).collect();
        assert_eq!(secs, [0.0, 0.0, 0.0, 0.0, 1234.0 / 100.0 / 4.0]);
        assert_eq!(r.fraction("math"), 1.0);
    }

    #[test]
    fn empty_kernel_degenerates_to_math() {
        let r = attribute_kernel(&ScaledKernel::from(KernelSpec::<f64>::empty()), &toy_hw(), 4);
        assert_eq!(r.baseline_time, 0.0);
        assert_eq!(r.fraction("math"), 1.0);
        assert_eq!(r.segment_sum(), 0.0);
    }

    #[test]
    fn tail_effect_is_charged_to_sm_utilization() {
        // 5 blocks on 4 SMs: 2 waves, U = 0.625.
        let k = ScaledKernel {
            math_work: 500.0,
            mem_traffic: 0.0,
            l2_hit_fraction: 0.0,
            dep_mem_rounds: 0,
            blocks: 5,
        };
        let r = attribute_kernel(&k, &toy_hw(), 4);
        assert_eq!(r.seconds("math"), 1.25);
        assert_eq!(r.seconds("sm_utilization"), 2.0 - 1.25);
    }

    #[test]
    fn alternate_order_is_a_different_report() {
        let order = [
            GpuComponent::SmUtilization,
            GpuComponent::RestOfMemory,
            GpuComponent::DramLatency,
            GpuComponent::DramBandwidth,
        ];
        let r = attribute_kernel_ordered(&toy_kernel(), &toy_hw(), 4, &order);
        assert_eq!(
            r.labels(),
            ["sm_utilization", "rest_of_memory", "dram_latency", "dram_bandwidth", "math"]
        );
        assert_eq!(r.segment_sum(), 30.5);
        assert_eq!(r.seconds("dram_bandwidth"), 10.0);
    }

    #[test]
    fn single_kind_workload_matches_kernel() {
        let mut w = crate::model::preset("seedrl-calibrated").unwrap().workload;
        w.train_kernel = KernelSpec::empty();
        let hw = toy_hw();
        let agg = attribute_workload(&w, &hw);
        let one = attribute_kernel(&w.inference_kernel.at_batch(w.inference_batch_size), &hw, 4);
        for label in GPU_LABELS {
            approx::assert_relative_eq!(agg.fraction(label), one.fraction(label), max_relative = 1e-12);
        }
    }

    #[test]
    fn fifty_fifty_mix_is_weighted_average() {
        let hw = toy_hw();
        let compute = ScaledKernel {
            math_work: 4000.0,
            mem_traffic: 0.0,
            l2_hit_fraction: 0.0,
            dep_mem_rounds: 0,
            blocks: 4,
        };
        // 10 s of pure DRAM streaming, same as the compute kernel's 10 s.
        let dram = ScaledKernel {
            math_work: 0.0,
            mem_traffic: 1e6,
            l2_hit_fraction: 0.0,
            dep_mem_rounds: 0,
            blocks: 4,
        };
        let r = attribute_mix(&[(compute, 1.0), (dram, 1.0)], &hw, 4);
        assert_eq!(r.baseline_time, 20.0);
        // dram kernel idealized: max(0, 0, 1) = 1 s of L2 streaming remains.
        assert_eq!(r.fraction("dram_bandwidth"), 9.0 / 20.0);
        assert_eq!(r.fraction("rest_of_memory"), 1.0 / 20.0);
        assert_eq!(r.fraction("math"), 10.0 / 20.0);
    }

    #[test]
    fn clamps_non_monotone_levels() {
        let r = BreakdownReport::<f64>::from_levels(&["a", "b", "c"], &[10.0, 12.0, 4.0]);
        let secs: Vec<f64> = r.segments.iter().map(|s| s.seconds).collect();
        assert_eq!(secs, [0.0, 6.0, 4.0]);
    }

    proptest! {
        #[test]
        fn partition_is_exact_f64(
            levels in proptest::collection::vec(0.0f64..1e4, 5)
        ) {
            let mut sorted = levels.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let r = BreakdownReport::from_levels(&GPU_LABELS, &sorted);
            prop_assert!(r.segments.iter().all(|s| s.seconds >= 0.0));
            prop_assert_eq!(r.segment_sum(), sorted[0]);
            let fsum: f64 = r.segments.iter().map(|s| s.fraction).sum();
            prop_assert!((fsum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn partition_is_exact_f32(
            levels in proptest::collection::vec(0.0f32..1e4, 5)
        ) {
            let mut sorted = levels.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let r = BreakdownReport::from_levels(&GPU_LABELS, &sorted);
            prop_assert!(r.segments.iter().all(|s| s.seconds >= 0.0));
            prop_assert_eq!(r.segment_sum(), sorted[0]);
        }
    }
}
