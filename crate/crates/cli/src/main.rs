//! `rlsysim` command-line driver.
//!
//! Data goes to stdout or `--output`; diagnostics go to stderr. Exit status
//! is 0 on success, 1 for usage and validation errors, 2 when a run fails.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rlsysim::analytics::{
    self, CalibrationError, CalibrationOptions, CalibrationTargets, RecommendError, SweepError, SweepOptions,
    SweepParam,
};
use rlsysim::attribution::SystemOrder;
use rlsysim::model::PRESET_NAMES;
use rlsysim::{preset, report, Config, SimError, SimOptions, SimOverrides};

#[derive(Debug, Parser)]
#[command(name = "rlsysim", version, about = "Performance model of actor-learner RL training on CPU-GPU systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and report steady-state metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write a `time,process,event` line per delivered event to this file.
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        /// Emit a per-interval time series with this bin width (seconds) instead of the summary.
        #[arg(long, value_name = "SECONDS")]
        timeseries: Option<f64>,
    },
    /// Break runtime down by hardware component.
    Attribute {
        #[command(flatten)]
        common: Common,
        /// System-level breakdown from simulator what-if runs instead of the GPU kernel cascade.
        #[arg(long)]
        system: bool,
        /// Cascade order of the system-level breakdown.
        #[arg(long, value_enum, default_value_t = OrderArg::CpuFirst, requires = "system")]
        order: OrderArg,
    },
    /// Simulate once per value of a swept parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: ParamArg,
        /// Strictly increasing comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u32>,
        /// Report the knee of the speedup curve at this per-doubling gain threshold.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Report the CPU/GPU ratio and recommend a minimum from an SM sweep.
    Recommend {
        #[command(flatten)]
        common: Common,
        /// Tolerated throughput loss relative to all SMs.
        #[arg(long, default_value_t = 0.06)]
        delta: f64,
        /// Only report the current ratio; skip the SM sweep.
        #[arg(long)]
        ratio_only: bool,
    },
    /// Fit the workload to the built-in anchor targets.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 400)]
        max_evaluations: usize,
    },
    /// List built-in presets.
    Presets {
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Built-in configuration name.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's frame budget.
    #[arg(long)]
    frames: Option<u64>,
    /// Write data here (atomically) instead of stdout.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ParamArg {
    Actors,
    Sms,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OrderArg {
    CpuFirst,
    GpuFirst,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(e) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Pool(m) => CliError::Runtime(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<RecommendError> for CliError {
    fn from(e: RecommendError) -> Self {
        match e {
            RecommendError::Sweep(e) => e.into(),
            RecommendError::BadDelta(_) => CliError::Usage(e.to_string()),
            RecommendError::Point { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl Common {
    fn load(&self) -> Result<Config, CliError> {
        let mut config = match (&self.preset, &self.config) {
            (Some(name), None) => preset(name).map_err(|e| CliError::Usage(e.to_string()))?,
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
                Config::from_json_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            _ => return Err(CliError::Usage("exactly one of --preset or --config is required".into())),
        };
        if let Some(seed) = self.seed {
            config.simulation.seed = seed;
        }
        if let Some(frames) = self.frames {
            config.simulation.total_env_frames = frames;
            config.simulation.warmup_frames = None;
        }
        config.validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}

/// Worker count from `RLSYSIM_THREADS`, if set.
fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("RLSYSIM_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("RLSYSIM_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn emit(text: &str, output: Option<&Path>) -> Result<(), CliError> {
    let fail = |path: &Path, e: std::io::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    match output {
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|()| out.flush())
                .map_err(|e| CliError::Runtime(format!("cannot write stdout: {e}")))
        }
        Some(path) => {
            let dir = match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p,
                _ => Path::new("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(path, e))?;
            tmp.write_all(text.as_bytes()).map_err(|e| fail(path, e))?;
            tmp.persist(path).map_err(|e| fail(path, e.error))?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_cap()?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            common,
            trace,
            timeseries,
        } => {
            let config = common.load()?;
            if let Some(dt) = timeseries {
                if !(dt.is_finite() && dt > 0.0) {
                    return Err(CliError::Usage(format!("--timeseries must be positive, got {dt}")));
                }
            }
            let options = SimOptions {
                keep_trace: trace.is_some(),
                timeseries_interval: timeseries,
            };
            let out = rlsysim::simulate_full(&config, &SimOverrides::default(), &options)?;
            for d in &out.diagnostics {
                eprintln!("warning: {d}");
            }
            if let (Some(path), Some(lines)) = (&trace, &out.trace_lines) {
                emit(lines, Some(path))?;
            }
            let text = match (out.timeseries.as_deref(), common.format) {
                (Some(rows), Format::Csv) => report::timeseries_csv(rows),
                (Some(rows), Format::Json) => report::timeseries_json(rows),
                (None, Format::Csv) => report::sim_result_csv(&out.result),
                (None, Format::Json) => report::sim_result_json(&out.result),
            };
            emit(&text, common.output.as_deref())
        }
        Command::Attribute { common, system, order } => {
            let config = common.load()?;
            let b = if system {
                let order = match order {
                    OrderArg::CpuFirst => SystemOrder::CpuFirst,
                    OrderArg::GpuFirst => SystemOrder::GpuFirst,
                };
                rlsysim::attribute_system(&config, order)?
            } else {
                rlsysim::attribute_workload(&config.workload, &config.hardware)
            };
            let text = match common.format {
                Format::Csv => report::breakdown_csv(&b),
                Format::Json => report::breakdown_json(&b),
            };
            emit(&text, common.output.as_deref())
        }
        Command::Sweep {
            common,
            param,
            values,
            epsilon,
        } => {
            let config = common.load()?;
            let param = match param {
                ParamArg::Actors => SweepParam::Actors,
                ParamArg::Sms => SweepParam::Sms,
            };
            if let Some(e) = epsilon {
                if !(e.is_finite() && e > 0.0) {
                    return Err(CliError::Usage(format!("--epsilon must be positive, got {e}")));
                }
            }
            let result = analytics::sweep(&config, param, &values, SweepOptions { threads })?;
            let text = match common.format {
                Format::Csv => report::sweep_csv(&result),
                Format::Json => report::sweep_json(&result),
            };
            emit(&text, common.output.as_deref())?;
            if let Some(eps) = epsilon {
                match analytics::find_knee(&result.speedup_curve(), eps) {
                    Ok(knee) => eprintln!("knee (epsilon {eps}): {knee}"),
                    Err(e) => eprintln!("knee: {e}"),
                }
            }
            let failed: Vec<String> = result
                .failures()
                .map(|p| format!("{}={}: {}", param, p.value, p.error.as_deref().unwrap_or_default()))
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!("{} sweep point(s) failed\n{}", failed.len(), failed.join("\n"))))
            }
        }
        Command::Recommend {
            common,
            delta,
            ratio_only,
        } => {
            let config = common.load()?;
            let r = if ratio_only {
                rlsysim::cpu_gpu_ratio(&config.hardware)
            } else {
                rlsysim::recommend_ratio(&config, delta, None)?
            };
            let text = match common.format {
                Format::Csv => report::ratio_csv(&r),
                Format::Json => report::ratio_json(&r),
            };
            emit(&text, common.output.as_deref())
        }
        Command::Calibrate {
            common,
            max_evaluations,
        } => {
            let start = if common.preset.is_some() || common.config.is_some() {
                common.load()?
            } else {
                CalibrationOptions::default().start
            };
            let options = CalibrationOptions {
                start,
                max_evaluations,
                ..CalibrationOptions::default()
            };
            match rlsysim::calibrate(&CalibrationTargets::default(), &options) {
                Ok(outcome) => {
                    for line in &outcome.log {
                        eprintln!("{line}");
                    }
                    let text = match common.format {
                        Format::Csv => report::anchors_csv(&outcome.anchors),
                        Format::Json => report::calibration_json(&outcome),
                    };
                    emit(&text, common.output.as_deref())
                }
                Err(e) => {
                    if let CalibrationError::PoorFit { log, .. } = &e {
                        for line in log {
                            eprintln!("{line}");
                        }
                    }
                    Err(match e {
                        CalibrationError::Config(e) => CliError::Usage(e.to_string()),
                        other => CliError::Runtime(other.to_string()),
                    })
                }
            }
        }
        Command::Presets { format, output } => {
            let text = match format {
                Format::Csv => {
                    let mut s = String::from("name\n");
                    for name in PRESET_NAMES {
                        s.push_str(name);
                        s.push('\n');
                    }
                    s
                }
                Format::Json => {
                    let all: serde_json::Map<String, serde_json::Value> = PRESET_NAMES
                        .iter()
                        .map(|&n| {
                            let c = preset(n).expect("built-in presets validate");
                            (n.to_string(), serde_json::to_value(c).expect("config serializes"))
                        })
                        .collect();
                    report::json_document("presets", &all)
                }
            };
            emit(&text, output.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
