//! Built-in configurations.

use super::{
    Config, ConfigError, Distribution, HardwareSpec, KernelSpec, PowerSpec, SimulationSpec,
    WorkloadSpec, SCHEMA_VERSION,
};

pub const PRESET_NAMES: [&str; 3] = ["dgx1-v100", "dgx1-single-v100", "seedrl-calibrated"];

/// Returns the named built-in configuration, already validated.
pub fn preset(name: &str) -> Result<Config, ConfigError> {
    let config = match name {
        "dgx1-v100" => Config {
            schema_version: SCHEMA_VERSION,
            hardware: HardwareSpec {
                gpu_count: 8,
                kernel_launch_overhead: 5.0e-6,
                ..v100_host()
            },
            workload: seedrl_workload(),
            simulation: default_simulation(),
        },
        "dgx1-single-v100" => Config {
            schema_version: SCHEMA_VERSION,
            hardware: HardwareSpec {
                kernel_launch_overhead: 5.0e-6,
                ..v100_host()
            },
            workload: seedrl_workload(),
            simulation: default_simulation(),
        },
        "seedrl-calibrated" => Config {
            schema_version: SCHEMA_VERSION,
            hardware: v100_host(),
            workload: seedrl_workload(),
            simulation: default_simulation(),
        },
        _ => {
            return Err(ConfigError::UnknownPreset {
                name: name.to_string(),
            })
        }
    };
    config.validate()
}

/// One V100 with the DGX-1 host CPU: 20 cores, 40 hardware threads.
fn v100_host() -> HardwareSpec {
    HardwareSpec {
        cpu_threads: 40,
        gpu_count: 1,
        sm_per_gpu: 80,
        active_sms: None,
        sm_math_rate: 1.0e9,
        dram_bandwidth: 900.0e9,
        dram_latency: 4.0e-7,
        l2_bandwidth: 2.5e12,
        kernel_launch_overhead: 0.0,
        power: PowerSpec {
            p_idle: 70.0,
            p_max: 300.0,
        },
    }
}

fn default_simulation() -> SimulationSpec {
    SimulationSpec {
        seed: 42,
        total_env_frames: 100_000,
        warmup_frames: None,
    }
}

/// Workload fitted by `analytics::calibrate`; see the fit log in the README.
fn seedrl_workload() -> WorkloadSpec {
    WorkloadSpec {
        num_actors: 256,
        envs_per_actor: 1,
        env_step_time: Distribution::constant(2.0e-3),
        obs_bytes: 84 * 84 * 4,
        inference_batch_size: 64,
        inference_timeout: Some(2.0e-4),
        inference_kernel: KernelSpec {
            math_work: 4.6848e5,
            mem_traffic: 2.074e7,
            l2_hit_fraction: 0.49176,
            dep_mem_rounds: 0,
            blocks: 80,
            per_item_scaling: true,
        },
        unroll_length: 20,
        train_batch_size: 13,
        samples_per_insert: 1.0,
        train_kernel: KernelSpec {
            math_work: 4.56768e8,
            mem_traffic: 2.25212e10,
            l2_hit_fraction: 0.61465,
            dep_mem_rounds: 0,
            blocks: 120,
            per_item_scaling: false,
        },
        replay_capacity: 10_000,
        replay_min_fill: 200,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dgx1_counts() {
        let c = preset("dgx1-v100").unwrap();
        assert_eq!(c.hardware.cpu_threads, 40);
        assert_eq!(c.hardware.gpu_count, 8);
        assert_eq!(c.hardware.sm_per_gpu, 80);
        assert_eq!(c.hardware.total_sms(), 640);
    }

    #[test]
    fn single_v100() {
        let c = preset("dgx1-single-v100").unwrap();
        assert_eq!(c.hardware.total_sms(), 80);
        assert_eq!(c.hardware.power.p_idle, 70.0);
    }

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in PRESET_NAMES {
            let c = preset(name).unwrap();
            assert_eq!(c.clone().validate().unwrap(), c, "{name}");
            let back = Config::from_json_str(&c.to_json_string()).unwrap();
            assert_eq!(back, c, "{name}");
        }
    }

    #[test]
    fn unknown_preset_lists_names() {
        let msg = preset("dgx2").unwrap_err().to_string();
        for name in PRESET_NAMES {
            assert!(msg.contains(name));
        }
    }
}
