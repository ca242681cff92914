//! Seeded generators and hand-checked scenarios shared by the integration
//! suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlsysim::analytics::{analytic_bounds_with, Resource};
use rlsysim::gpumodel::IdealizationFlags;
use rlsysim::{
    kernel_time, preset, Config, Distribution, HardwareSpec, KernelSpec, PowerSpec, ScaledKernel, SimOverrides,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (r.random_range(lo.ln()..hi.ln())).exp()
}

/// Any valid hardware, including several GPUs and launch overhead.
pub fn random_hardware(r: &mut ChaCha8Rng) -> HardwareSpec {
    HardwareSpec {
        cpu_threads: r.random_range(1..=256),
        gpu_count: r.random_range(1..=8),
        sm_per_gpu: r.random_range(1..=160),
        active_sms: None,
        sm_math_rate: log_uniform(r, 1e6, 1e11),
        dram_bandwidth: log_uniform(r, 1e8, 1e13),
        dram_latency: log_uniform(r, 1e-8, 1e-4),
        l2_bandwidth: log_uniform(r, 1e9, 1e14),
        kernel_launch_overhead: if r.random_bool(0.3) { 0.0 } else { log_uniform(r, 1e-7, 1e-4) },
        power: PowerSpec {
            p_idle: 50.0,
            p_max: 300.0,
        },
    }
}

/// Any valid kernel, with occasional zero work, traffic or hit rate.
pub fn random_kernel(r: &mut ChaCha8Rng) -> ScaledKernel {
    let zero_or = |r: &mut ChaCha8Rng, lo: f64, hi: f64| if r.random_bool(0.1) { 0.0 } else { log_uniform(r, lo, hi) };
    ScaledKernel {
        math_work: zero_or(r, 1e2, 1e12),
        mem_traffic: zero_or(r, 1e2, 1e12),
        l2_hit_fraction: match r.random_range(0..5) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random::<f64>(),
        },
        dep_mem_rounds: r.random_range(0..=50),
        blocks: r.random_range(1..=5000),
    }
}

/// The hand-checked kernel: math 20 s, DRAM 30 s, L2 3 s, latency 0.5 s.
pub fn hand_kernel() -> (ScaledKernel, HardwareSpec, u32) {
    let k = ScaledKernel {
        math_work: 8000.0,
        mem_traffic: 3e6,
        l2_hit_fraction: 0.0,
        dep_mem_rounds: 5,
        blocks: 8,
    };
    let hw = HardwareSpec {
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
            p_idle: 0.0,
            p_max: 1.0,
        },
    };
    (k, hw, 4)
}

/// A network whose GPU work is free: one thread, batch size one, constant
/// steps, no replay gating.
pub fn free_gpu_config(actors: u32, step: f64, frames: u64) -> Config {
    let mut c = preset("seedrl-calibrated").unwrap();
    c.hardware.cpu_threads = 1;
    let w = &mut c.workload;
    w.num_actors = actors;
    w.envs_per_actor = 1;
    w.env_step_time = Distribution::constant(step);
    w.inference_batch_size = 1;
    w.inference_timeout = Some(0.25);
    w.inference_kernel = KernelSpec::empty();
    w.train_kernel = KernelSpec::empty();
    w.replay_min_fill = 0;
    c.simulation.seed = 1;
    c.simulation.total_env_frames = frames;
    c.simulation.warmup_frames = Some(0);
    c
}

/// Event timeline of two actors sharing one thread with 1 s steps and free
/// GPU work, for four frames.
pub const TWO_ACTOR_TRACE: &str = "\
0,actor-0,start
0,actor-1,start
0,learner,start
1,actor-0,step_done
1,actor-1,thread_granted
1,batcher-0,infer_request
1,gpu-0,run_inference
1,gpu-0,kernel_done
1,actor-0,action
1.25,batcher-0,batch_timeout
2,actor-1,step_done
2,actor-0,thread_granted
2,batcher-0,infer_request
2,gpu-0,run_inference
2,gpu-0,kernel_done
2,actor-1,action
2.25,batcher-0,batch_timeout
3,actor-0,step_done
3,actor-1,thread_granted
3,batcher-0,infer_request
3,gpu-0,run_inference
3,gpu-0,kernel_done
3,actor-0,action
3.25,batcher-0,batch_timeout
4,actor-1,step_done
";

/// One actor with 0.5 s steps, three frames.
pub const ONE_ACTOR_TRACE: &str = "\
0,actor-0,start
0,learner,start
0.5,actor-0,step_done
0.5,batcher-0,infer_request
0.5,gpu-0,run_inference
0.5,gpu-0,kernel_done
0.5,actor-0,action
0.75,batcher-0,batch_timeout
1,actor-0,step_done
1,batcher-0,infer_request
1,gpu-0,run_inference
1,gpu-0,kernel_done
1,actor-0,action
1.25,batcher-0,batch_timeout
1.5,actor-0,step_done
";

/// A random single-GPU config with constant step times.
///
/// SM-aligned blocks make every kernel's time per item independent of the
/// batch size, and the batching timeout is short next to every other
/// delay, so the closed-form bounds are attainable.
pub fn random_oracle_config(r: &mut ChaCha8Rng) -> Config {
    let mut c = preset("seedrl-calibrated").unwrap();
    let sms = [8u32, 16, 40, 80][r.random_range(0..4)];
    let hw = &mut c.hardware;
    hw.cpu_threads = r.random_range(1..=48);
    hw.sm_per_gpu = sms;
    hw.kernel_launch_overhead = 0.0;
    let w = &mut c.workload;
    w.num_actors = r.random_range(1..=128);
    w.envs_per_actor = r.random_range(1..=4);
    let step = log_uniform(r, 1e-4, 1e-2);
    w.env_step_time = Distribution::constant(step);
    w.inference_batch_size = r.random_range(1..=64);
    w.inference_kernel = KernelSpec {
        math_work: log_uniform(r, 1e3, 1e7),
        mem_traffic: log_uniform(r, 1e4, 1e8),
        l2_hit_fraction: r.random::<f64>(),
        dep_mem_rounds: 0,
        blocks: sms * r.random_range(1..=3),
        per_item_scaling: true,
    };
    w.unroll_length = r.random_range(1..=10);
    w.train_batch_size = r.random_range(1..=8);
    w.samples_per_insert = r.random_range(0.5..2.0);
    w.train_kernel = KernelSpec {
        math_work: log_uniform(r, 1e5, 1e9),
        mem_traffic: log_uniform(r, 1e6, 1e10),
        l2_hit_fraction: r.random::<f64>(),
        dep_mem_rounds: 0,
        blocks: sms * r.random_range(1..=2),
        per_item_scaling: false,
    };
    w.replay_capacity = 1000;
    w.replay_min_fill = w.train_batch_size;
    let t1 = kernel_time(&w.inference_kernel.at_batch(1), &c.hardware, sms, IdealizationFlags::BASELINE);
    w.inference_timeout = Some(1e-3 * step.min(t1));
    c.simulation.seed = r.random();
    // Every environment can hold a partial unroll at either window edge;
    // the run is long enough for that to stay well under the 1% slack.
    let frames = (400 * c.workload.total_envs() * u64::from(c.workload.unroll_length)).clamp(40_000, 1_000_000);
    c.simulation.total_env_frames = frames;
    c.simulation.warmup_frames = Some(frames / 10);
    c.validate().unwrap()
}

/// What-if switches that leave only `binding` constrained.
pub fn isolate(binding: Resource) -> SimOverrides {
    match binding {
        Resource::Cpu => SimOverrides {
            instant_gpu: true,
            ..SimOverrides::default()
        },
        Resource::Gpu => SimOverrides {
            zero_env_step_time: true,
            unlimited_cpu_threads: true,
            ..SimOverrides::default()
        },
    }
}

/// The binding bound once everything else is idealized.
pub fn isolated_bound(c: &Config, binding: Resource) -> f64 {
    let b = analytic_bounds_with(c, &isolate(binding));
    match binding {
        Resource::Cpu => b.cpu_bound,
        Resource::Gpu => b.gpu_bound,
    }
}
