//! Analytic GPU kernel timing.
//!
//! A kernel's time is its launch overhead plus the slowest of three
//! overlapped throughput stages (SM math, DRAM streaming, on-chip streaming)
//! plus the serial latency of its dependent DRAM round trips. Each stage can
//! be idealized independently; the attribution cascade is built on that.

use serde::{Deserialize, Serialize};

use crate::model::{HardwareSpec, ScaledKernel};
use crate::scalar::Scalar;

/// Which hardware components are treated as perfect.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IdealizationFlags {
    pub ideal_dram_bandwidth: bool,
    pub ideal_dram_latency: bool,
    pub ideal_rest_of_memory: bool,
    pub ideal_sm_utilization: bool,
}

impl IdealizationFlags {
    pub const BASELINE: Self = Self {
        ideal_dram_bandwidth: false,
        ideal_dram_latency: false,
        ideal_rest_of_memory: false,
        ideal_sm_utilization: false,
    };

    /// Every memory request returns immediately.
    pub const IDEAL_MEMORY: Self = Self {
        ideal_dram_bandwidth: true,
        ideal_dram_latency: true,
        ideal_rest_of_memory: true,
        ideal_sm_utilization: false,
    };

    pub const ALL: Self = Self {
        ideal_dram_bandwidth: true,
        ideal_dram_latency: true,
        ideal_rest_of_memory: true,
        ideal_sm_utilization: true,
    };

    /// The cumulative flag set after `steps` stages of the attribution
    /// cascade (0 = baseline, 4 = everything ideal).
    pub fn cascade(steps: usize) -> Self {
        Self {
            ideal_dram_bandwidth: steps >= 1,
            ideal_dram_latency: steps >= 2,
            ideal_rest_of_memory: steps >= 3,
            ideal_sm_utilization: steps >= 4,
        }
    }
}

/// Number of sequential waves needed to run `blocks` on `n_sm` SMs.
fn waves(blocks: u64, n_sm: u64) -> u64 {
    blocks.div_ceil(n_sm)
}

/// Tail-effect occupancy: `blocks / (ceil(blocks / n_sm) * n_sm)`.
pub fn sm_utilization<T: Scalar>(blocks: u64, n_sm: u64) -> T {
    assert!(blocks >= 1 && n_sm >= 1, "blocks and n_sm must be >= 1");
    T::from_count(blocks) / T::from_count(waves(blocks, n_sm) * n_sm)
}

/// SMs effectively doing work, `n_sm * U`.
fn effective_sms<T: Scalar>(blocks: u64, n_sm: u64, ideal: bool) -> T {
    if ideal || blocks % n_sm == 0 {
        T::from_count(n_sm)
    } else {
        T::from_count(blocks) / T::from_count(waves(blocks, n_sm))
    }
}

/// Per-stage components of one kernel invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelTiming<T: Scalar = f64> {
    pub launch: T,
    pub math: T,
    pub dram: T,
    pub l2: T,
    pub latency: T,
}

impl<T: Scalar> KernelTiming<T> {
    pub fn total(&self) -> T {
        self.launch + self.math.max(self.dram).max(self.l2) + self.latency
    }
}

pub fn kernel_timing<T: Scalar>(
    k: &ScaledKernel<T>,
    hw: &HardwareSpec<T>,
    n_sm: u32,
    flags: IdealizationFlags,
) -> KernelTiming<T> {
    assert!(n_sm >= 1, "n_sm must be >= 1");
    let n = u64::from(n_sm);
    let blocks = k.blocks.max(1);
    let math = k.math_work / hw.sm_math_rate
        / effective_sms::<T>(blocks, n, flags.ideal_sm_utilization);
    let dram = if flags.ideal_dram_bandwidth {
        T::zero()
    } else {
        k.mem_traffic * (T::one() - k.l2_hit_fraction) / hw.dram_bandwidth
    };
    let l2 = if flags.ideal_rest_of_memory {
        T::zero()
    } else {
        k.mem_traffic / hw.l2_bandwidth
    };
    let latency = if flags.ideal_dram_latency {
        T::zero()
    } else {
        T::from_count(u64::from(k.dep_mem_rounds)) * hw.dram_latency
    };
    KernelTiming {
        launch: hw.kernel_launch_overhead,
        math,
        dram,
        l2,
        latency,
    }
}

/// Execution time in seconds of one invocation on `n_sm` SMs.
pub fn kernel_time<T: Scalar>(
    k: &ScaledKernel<T>,
    hw: &HardwareSpec<T>,
    n_sm: u32,
    flags: IdealizationFlags,
) -> T {
    kernel_timing(k, hw, n_sm, flags).total()
}

/// Runs the kernel on one SM with an ideal memory system, then spreads the
/// SM-bound time over every SM of the platform.
///
/// Launch overhead is a fixed per-invocation cost and is not divided.
pub fn single_sm_normalized_time<T: Scalar>(k: &ScaledKernel<T>, hw: &HardwareSpec<T>) -> T {
    let one = kernel_timing(k, hw, 1, IdealizationFlags::IDEAL_MEMORY);
    let total = T::from_count(hw.total_sms());
    KernelTiming {
        math: one.math / total,
        ..one
    }
    .total()
}
