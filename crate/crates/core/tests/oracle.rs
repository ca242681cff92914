//! Closed-form bounds against the event simulator.

mod common;

use proptest::prelude::*;
use rlsysim::analytics::{analytic_bounds, analytic_bounds_with, Resource};
use rlsysim::{preset, simulate, simulate_with, Distribution, KernelSpec, SimOverrides};

use common::*;

#[test]
fn cpu_bound_example() {
    let mut c = free_gpu_config(1, 0.1, 1000);
    c.hardware.cpu_threads = 2;
    c.workload.envs_per_actor = 4;
    let b = analytic_bounds_with(
        &c,
        &SimOverrides {
            instant_gpu: true,
            ..SimOverrides::default()
        },
    );
    assert_eq!(b.cpu_bound, 20.0);
    assert_eq!(b.binding, Resource::Cpu);
}

#[test]
fn gpu_bound_example() {
    let mut c = preset("seedrl-calibrated").unwrap();
    let w = &mut c.workload;
    w.inference_batch_size = 32;
    // 3.2e8 work units at 1e9 per SM per second on 80 SMs, over 32 items.
    w.inference_kernel = KernelSpec {
        math_work: 1.0e7 * 80.0,
        mem_traffic: 0.0,
        l2_hit_fraction: 0.0,
        dep_mem_rounds: 0,
        blocks: 80,
        per_item_scaling: false,
    };
    w.train_kernel = KernelSpec::empty();
    let b = analytic_bounds_with(
        &c,
        &SimOverrides {
            zero_env_step_time: true,
            ..SimOverrides::default()
        },
    );
    assert!((b.gpu_bound - 3200.0).abs() < 1e-9, "{}", b.gpu_bound);
    assert_eq!(b.cpu_bound, f64::INFINITY);
    assert_eq!(b.overall, b.gpu_bound);
}

#[test]
fn env_dominated_config_is_cpu_bound() {
    let mut c = preset("seedrl-calibrated").unwrap().with_actors(8);
    c.workload.env_step_time = Distribution::constant(1.0);
    let b = analytic_bounds(&c);
    assert_eq!(b.binding, Resource::Cpu);
    assert_eq!(b.overall, 8.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulator_never_beats_the_bound(seed in any::<u64>()) {
        let c = random_oracle_config(&mut rng(seed));
        let fps = simulate(&c).unwrap().frames_per_second;
        prop_assert!(fps <= analytic_bounds(&c).overall * 1.01);
    }

    #[test]
    fn isolated_bottleneck_reaches_its_bound(seed in any::<u64>()) {
        let c = random_oracle_config(&mut rng(seed));
        let binding = analytic_bounds(&c).binding;
        let fps = simulate_with(&c, &isolate(binding)).unwrap().result.frames_per_second;
        let bound = isolated_bound(&c, binding);
        prop_assert!(fps >= 0.95 * bound, "{:?}: {} vs {}", binding, fps, bound);
    }

    #[test]
    fn throughput_nondecreasing_in_resources(seed in any::<u64>()) {
        let mut c = random_oracle_config(&mut rng(seed));
        // Keep the thread pool contended after doubling it.
        let envs = c.workload.total_envs() as u32;
        c.hardware.cpu_threads = c.hardware.cpu_threads.min((envs / 4).max(1));
        let base = simulate(&c).unwrap().frames_per_second;
        let more_actors = simulate(&c.clone().with_actors(c.workload.num_actors * 2)).unwrap().frames_per_second;
        let mut threads = c.clone();
        threads.hardware.cpu_threads *= 2;
        let more_threads = simulate(&threads).unwrap().frames_per_second;
        let mut fewer_sms = c.clone();
        fewer_sms.hardware.active_sms = Some(c.hardware.sm_per_gpu / 2);
        let fewer = simulate(&fewer_sms).unwrap().frames_per_second;
        prop_assert!(more_actors >= base * 0.99, "actors {} < {}", more_actors, base);
        prop_assert!(more_threads >= base * 0.99, "threads {} < {}", more_threads, base);
        prop_assert!(fewer <= base * 1.01, "sms {} > {}", fewer, base);
    }
}

/// With constant step times and a thread per environment, every
/// environment steps in lockstep and then queues on the GPU at once, so CPU
/// and GPU work stop overlapping. Fewer threads stagger the environments.
#[test]
fn lockstep_can_cost_throughput() {
    // Eight environments, 7.6 ms steps, GPU work about 60% of the cycle.
    let c = random_oracle_config(&mut rng(8442140016263102407));
    assert_eq!(c.workload.total_envs(), 8);
    let mut staggered = c.clone();
    staggered.hardware.cpu_threads = 5;
    let mut lockstep = c;
    lockstep.hardware.cpu_threads = 10;
    let a = simulate(&staggered).unwrap();
    let b = simulate(&lockstep).unwrap();
    assert!(b.frames_per_second < 0.9 * a.frames_per_second);
    assert!(b.gpu_busy_fraction < a.gpu_busy_fraction);
}
