//! Actor-learner process network with central inference.
//!
//! Actors step their environments on contended CPU threads and ship every
//! observation to one inference batcher per GPU. Batches run on the GPU
//! alongside training steps (exclusive, FIFO). Every `unroll_length` steps an
//! environment emits a trajectory into the replay buffer; the learner samples
//! from it at a rate limited to `samples_per_insert`, and inserts are held
//! back when the learner falls too far behind.

use std::collections::VecDeque;

use rand_distr::{Distribution as _, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{
    Acquire, Context, EngineError, Payload, PoolId, Process, ProcessId, Simulation, StopCondition,
    StreamRng,
};
use crate::gpumodel::{kernel_time, IdealizationFlags};
use crate::model::{Config, ConfigError, Distribution, DistributionKind};
use crate::power::{instantaneous_power, power_report, BusyTimeline, PowerReport};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Engine(#[from] EngineError),
    #[error("invalid distribution: {0}")]
    Distribution(String),
}

/// Steady-state metrics of one run; warmup frames are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Virtual time at which the last frame completed.
    pub sim_duration: f64,
    /// Length of the measured (post-warmup) window.
    pub measured_duration: f64,
    /// Frames completed in the measured window.
    pub env_frames: u64,
    pub frames_per_second: f64,
    pub cpu_busy_fraction: f64,
    pub gpu_busy_fraction: f64,
    pub mean_inference_batch_occupancy: f64,
    pub mean_inference_queue_wait: f64,
    pub train_steps: u64,
    /// Total GPU power across all GPUs.
    pub avg_power: f64,
    pub energy: f64,
    pub energy_per_frame: f64,
    pub frames_per_watt_second: f64,
    /// Per-GPU power report over the measured window.
    pub power: PowerReport,
}

impl SimResult {
    pub fn measured_duration(&self) -> f64 {
        self.measured_duration
    }
}

/// What-if switches used by system-level attribution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOverrides {
    /// One CPU thread per environment.
    pub unlimited_cpu_threads: bool,
    /// Environment steps take no time.
    pub zero_env_step_time: bool,
    /// Kernels take no time.
    pub instant_gpu: bool,
    /// Idealizations applied to every kernel.
    pub gpu_flags: IdealizationFlags,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimOptions {
    /// Keep every delivered event for a `time,process,event` dump.
    pub keep_trace: bool,
    /// Bin width in seconds for the per-interval time series.
    pub timeseries_interval: Option<f64>,
}

/// One row of the per-interval time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesRow {
    pub t: f64,
    pub fps: f64,
    pub cpu_busy: f64,
    pub gpu_busy: f64,
    pub power_w: f64,
}

/// Bookkeeping counters beyond the headline metrics, for validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub total_frames: u64,
    pub per_env_steps: Vec<u64>,
    pub inference_requests: u64,
    pub inference_responses: u64,
    pub batches: u64,
    pub trajectories_inserted: u64,
    pub trajectories_sampled: u64,
    pub train_steps_total: u64,
    pub partial_unrolls: u64,
    pub max_cpu_in_use: u32,
    pub cpu_capacity: u32,
    /// Measured-window arrival rate of inference requests (1/s).
    pub inference_arrival_rate: f64,
    /// Measured-window time-averaged number of outstanding requests.
    pub mean_inference_in_flight: f64,
    /// Measured-window trajectory inserts and train steps.
    pub window_inserts: u64,
    pub window_train_steps: u64,
    pub events: u64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub result: SimResult,
    pub stats: RunStats,
    pub trace_hash: u64,
    pub trace_lines: Option<String>,
    pub gpu_timeline: BusyTimeline,
    pub timeseries: Option<Vec<TimeSeriesRow>>,
    /// Non-fatal findings, e.g. a replay buffer that never filled.
    pub diagnostics: Vec<String>,
}

/// Simulates the validated configuration and returns its steady-state metrics.
pub fn simulate(config: &Config) -> Result<SimResult, SimError> {
    Ok(simulate_with(config, &SimOverrides::default())?.result)
}

pub fn simulate_with(config: &Config, overrides: &SimOverrides) -> Result<SimOutput, SimError> {
    simulate_full(config, overrides, &SimOptions::default())
}

#[derive(Debug, Clone)]
enum Msg {
    Start,
    ThreadGranted { env: u32 },
    StepDone { env: u32 },
    Action { env: u32 },
    InsertUnblocked { env: u32 },
    Infer(Request),
    BatchTimeout { generation: u64 },
    RunInference(Vec<Request>),
    RunTraining,
    KernelDone,
    TrainingDone,
    ReplayInserted,
}

impl Payload for Msg {
    fn kind(&self) -> &'static str {
        match self {
            Msg::Start => "start",
            Msg::ThreadGranted { .. } => "thread_granted",
            Msg::StepDone { .. } => "step_done",
            Msg::Action { .. } => "action",
            Msg::InsertUnblocked { .. } => "insert_unblocked",
            Msg::Infer(_) => "infer_request",
            Msg::BatchTimeout { .. } => "batch_timeout",
            Msg::RunInference(_) => "run_inference",
            Msg::RunTraining => "run_training",
            Msg::KernelDone => "kernel_done",
            Msg::TrainingDone => "training_done",
            Msg::ReplayInserted => "replay_inserted",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Request {
    actor: ProcessId,
    env: u32,
    issued: f64,
}

/// Integral of a piecewise-constant quantity.
#[derive(Debug, Clone, Copy, Default)]
struct TimeWeighted {
    value: f64,
    since: f64,
    integral: f64,
}

impl TimeWeighted {
    fn set(&mut self, t: f64, value: f64) {
        self.integral += self.value * (t - self.since);
        self.since = t;
        self.value = value;
    }

    fn integral_at(&self, t: f64) -> f64 {
        self.integral + self.value * (t - self.since)
    }
}

/// Timing-level replay buffer with a sample/insert rate limiter.
#[derive(Debug, Clone)]
struct ReplayBuffer {
    capacity: usize,
    min_fill: usize,
    // (actor, env, insert time); contents are never read back.
    items: VecDeque<(ProcessId, u32, f64)>,
    inserted: u64,
    sampled: u64,
    samples_per_insert: f64,
    batch: u64,
    max_deficit: f64,
}

impl ReplayBuffer {
    fn deficit(&self) -> f64 {
        self.samples_per_insert * self.inserted as f64 - self.sampled as f64
    }

    fn can_sample(&self) -> bool {
        self.items.len() >= self.min_fill && self.deficit() >= self.batch as f64
    }

    fn can_insert(&self) -> bool {
        (self.inserted as usize) < self.min_fill
            || self.deficit() < self.batch as f64
            || self.deficit() + self.samples_per_insert <= self.max_deficit
    }

    fn insert(&mut self, actor: ProcessId, env: u32, t: f64) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((actor, env, t));
        self.inserted += 1;
    }

    fn sample(&mut self) {
        self.sampled += self.batch;
    }
}

/// Values captured when the measured window opens.
#[derive(Debug, Clone, Copy, Default)]
struct WindowStart {
    t: f64,
    frames: u64,
    cpu: f64,
    gpu: f64,
    in_flight: f64,
    requests: u64,
    responses: u64,
    sojourn: f64,
    batches: u64,
    batch_fill: f64,
    train_steps: u64,
    inserts: u64,
}

/// Raw change logs for the optional time series.
#[derive(Debug, Default)]
struct SeriesLog {
    frames: Vec<f64>,
    cpu: Vec<(f64, u32)>,
    gpu: Vec<(f64, u32)>,
}

struct World {
    total_frames: u64,
    warmup_frames: u64,
    frames: u64,
    window: Option<WindowStart>,
    end_time: f64,
    cpu_capacity: u32,
    cpu_in_use: TimeWeighted,
    max_cpu_in_use: u32,
    gpu_count: u32,
    gpu_busy_count: u32,
    gpu_busy: TimeWeighted,
    gpu_timeline: Option<BusyTimeline>,
    in_flight: TimeWeighted,
    requests: u64,
    responses: u64,
    sojourn_sum: f64,
    batches: u64,
    batch_fill_sum: f64,
    train_steps: u64,
    replay: ReplayBuffer,
    replay_ever_filled: bool,
    blocked: VecDeque<(ProcessId, u32)>,
    learner_idle: bool,
    learner_wake_pending: bool,
    per_env_steps: Vec<u64>,
    envs_per_actor: u32,
    series: Option<SeriesLog>,
}

impl World {
    fn cpu_delta(&mut self, t: f64, delta: i32) {
        let v = self.cpu_in_use.value as i64 + i64::from(delta);
        let v = u32::try_from(v).expect("cpu in use never negative");
        self.cpu_in_use.set(t, f64::from(v));
        self.max_cpu_in_use = self.max_cpu_in_use.max(v);
        if let Some(s) = &mut self.series {
            s.cpu.push((t, v));
        }
    }

    fn gpu_delta(&mut self, t: f64, busy: bool) {
        if busy {
            self.gpu_busy_count += 1;
        } else {
            self.gpu_busy_count -= 1;
        }
        let n = self.gpu_busy_count;
        self.gpu_busy.set(t, f64::from(n));
        if let Some(tl) = &mut self.gpu_timeline {
            tl.push(t, f64::from(n) / f64::from(self.gpu_count));
        }
        if let Some(s) = &mut self.series {
            s.gpu.push((t, n));
        }
    }

    fn open_window(&mut self, t: f64) {
        self.window = Some(WindowStart {
            t,
            frames: self.frames,
            cpu: self.cpu_in_use.integral_at(t),
            gpu: self.gpu_busy.integral_at(t),
            in_flight: self.in_flight.integral_at(t),
            requests: self.requests,
            responses: self.responses,
            sojourn: self.sojourn_sum,
            batches: self.batches,
            batch_fill: self.batch_fill_sum,
            train_steps: self.train_steps,
            inserts: self.replay.inserted,
        });
        let mut tl = BusyTimeline::new(t);
        tl.push(t, f64::from(self.gpu_busy_count) / f64::from(self.gpu_count));
        self.gpu_timeline = Some(tl);
    }

    fn complete_frame(&mut self, t: f64) -> bool {
        self.frames += 1;
        if let Some(s) = &mut self.series {
            s.frames.push(t);
        }
        if self.frames == self.warmup_frames {
            self.open_window(t);
        }
        if self.frames == self.total_frames {
            self.end_time = t;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone)]
enum StepTime {
    Constant(f64),
    Exponential(Exp<f64>),
    Lognormal(LogNormal<f64>),
}

impl StepTime {
    fn new(d: &Distribution, zero: bool) -> Result<Self, SimError> {
        if zero {
            return Ok(StepTime::Constant(0.0));
        }
        let bad = |e: &dyn std::fmt::Display| SimError::Distribution(e.to_string());
        Ok(match d.kind {
            DistributionKind::Constant => StepTime::Constant(d.mean),
            DistributionKind::Exponential => StepTime::Exponential(Exp::new(1.0 / d.mean).map_err(|e| bad(&e))?),
            DistributionKind::Lognormal if d.cv == 0.0 => StepTime::Constant(d.mean),
            DistributionKind::Lognormal => {
                let sigma2 = (1.0 + d.cv * d.cv).ln();
                let mu = d.mean.ln() - sigma2 / 2.0;
                StepTime::Lognormal(LogNormal::new(mu, sigma2.sqrt()).map_err(|e| bad(&e))?)
            }
        })
    }

    fn draw(&self, rng: &mut StreamRng) -> f64 {
        match self {
            StepTime::Constant(x) => *x,
            StepTime::Exponential(d) => d.sample(rng),
            StepTime::Lognormal(d) => d.sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EnvState {
    WaitingThread,
    Stepping,
    AwaitingInference,
    BlockedOnInsert,
}

#[derive(Debug, Clone)]
struct EnvSlot {
    state: EnvState,
    steps: u64,
    unroll_fill: u32,
}

struct Actor {
    index: usize,
    cpu: PoolId,
    batcher: ProcessId,
    learner: ProcessId,
    unroll_length: u32,
    step_time: StepTime,
    envs: Vec<EnvSlot>,
}

type Ctx<'a> = Context<'a, World, Msg>;

impl Actor {
    fn request_thread(&mut self, env: u32, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        self.envs[env as usize].state = EnvState::WaitingThread;
        if ctx.acquire(self.cpu, env, Msg::ThreadGranted { env })? == Acquire::Granted {
            self.begin_step(env, ctx)?;
        }
        Ok(())
    }

    fn begin_step(&mut self, env: u32, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        let now = ctx.now();
        ctx.world.cpu_delta(now, 1);
        self.envs[env as usize].state = EnvState::Stepping;
        let dt = self.step_time.draw(ctx.rng());
        let me = ctx.me();
        ctx.schedule_in(dt, me, Msg::StepDone { env })?;
        Ok(())
    }

    fn request_action(&mut self, env: u32, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        let now = ctx.now();
        self.envs[env as usize].state = EnvState::AwaitingInference;
        let w = &mut *ctx.world;
        w.requests += 1;
        let v = w.in_flight.value + 1.0;
        w.in_flight.set(now, v);
        let req = Request {
            actor: ctx.me(),
            env,
            issued: now,
        };
        ctx.send(self.batcher, Msg::Infer(req))?;
        Ok(())
    }

    fn step_done(&mut self, env: u32, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        let now = ctx.now();
        ctx.release(self.cpu)?;
        ctx.world.cpu_delta(now, -1);
        let slot = &mut self.envs[env as usize];
        slot.steps += 1;
        slot.unroll_fill += 1;
        let global = self.index * ctx.world.envs_per_actor as usize + env as usize;
        ctx.world.per_env_steps[global] += 1;
        if ctx.world.complete_frame(now) {
            ctx.stop();
        }
        if slot.unroll_fill == self.unroll_length {
            slot.unroll_fill = 0;
            let w = &mut *ctx.world;
            if w.blocked.is_empty() && w.replay.can_insert() {
                let me = ctx.me();
                insert_trajectory(ctx, me, env, self.learner)?;
            } else {
                slot.state = EnvState::BlockedOnInsert;
                let me = ctx.me();
                ctx.world.blocked.push_back((me, env));
                return Ok(());
            }
        }
        self.request_action(env, ctx)
    }
}

fn insert_trajectory(ctx: &mut Ctx<'_>, actor: ProcessId, env: u32, learner: ProcessId) -> Result<(), EngineError> {
    let now = ctx.now();
    let w = &mut *ctx.world;
    w.replay.insert(actor, env, now);
    if w.replay.items.len() >= w.replay.min_fill {
        w.replay_ever_filled = true;
    }
    if w.learner_idle && !w.learner_wake_pending && w.replay.can_sample() {
        w.learner_wake_pending = true;
        ctx.send(learner, Msg::ReplayInserted)?;
    }
    Ok(())
}

impl Process<World, Msg> for Actor {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        match msg {
            Msg::Start => {
                for env in 0..self.envs.len() as u32 {
                    self.request_thread(env, ctx)?;
                }
            }
            Msg::ThreadGranted { env } => self.begin_step(env, ctx)?,
            Msg::StepDone { env } => self.step_done(env, ctx)?,
            Msg::Action { env } => {
                debug_assert_eq!(self.envs[env as usize].state, EnvState::AwaitingInference);
                self.request_thread(env, ctx)?;
            }
            Msg::InsertUnblocked { env } => {
                debug_assert_eq!(self.envs[env as usize].state, EnvState::BlockedOnInsert);
                self.request_action(env, ctx)?;
            }
            other => return Err(unexpected("actor", &other)),
        }
        Ok(())
    }
}

fn unexpected(who: &str, msg: &Msg) -> EngineError {
    EngineError::Model(format!("{who} cannot handle message {}", msg.kind()))
}

struct Batcher {
    device: ProcessId,
    batch_size: usize,
    timeout: f64,
    pending: Vec<Request>,
    generation: u64,
}

impl Batcher {
    fn flush(&mut self, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        self.generation += 1;
        let batch = std::mem::replace(&mut self.pending, Vec::with_capacity(self.batch_size));
        let w = &mut *ctx.world;
        w.batches += 1;
        w.batch_fill_sum += batch.len() as f64 / self.batch_size as f64;
        ctx.send(self.device, Msg::RunInference(batch))?;
        Ok(())
    }
}

impl Process<World, Msg> for Batcher {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        match msg {
            Msg::Infer(req) => {
                self.pending.push(req);
                if self.pending.len() == 1 {
                    let me = ctx.me();
                    ctx.schedule_in(
                        self.timeout,
                        me,
                        Msg::BatchTimeout {
                            generation: self.generation,
                        },
                    )?;
                }
                if self.pending.len() == self.batch_size {
                    self.flush(ctx)?;
                }
            }
            Msg::BatchTimeout { generation } => {
                if generation == self.generation && !self.pending.is_empty() {
                    self.flush(ctx)?;
                }
            }
            other => return Err(unexpected("batcher", &other)),
        }
        Ok(())
    }
}

enum Job {
    Inference(Vec<Request>),
    Training,
}

struct Device {
    learner: ProcessId,
    /// Indexed by batch size; entry 0 unused.
    inference_time: Vec<f64>,
    train_time: f64,
    queue: VecDeque<Job>,
    running: Option<Job>,
}

impl Device {
    fn start_next(&mut self, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        let Some(job) = self.queue.pop_front() else {
            let now = ctx.now();
            ctx.world.gpu_delta(now, false);
            return Ok(());
        };
        let dt = match &job {
            Job::Inference(batch) => self.inference_time[batch.len()],
            Job::Training => self.train_time,
        };
        self.running = Some(job);
        let me = ctx.me();
        ctx.schedule_in(dt, me, Msg::KernelDone)?;
        Ok(())
    }

    fn submit(&mut self, job: Job, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        self.queue.push_back(job);
        if self.running.is_none() {
            let now = ctx.now();
            ctx.world.gpu_delta(now, true);
            self.start_next(ctx)?;
        }
        Ok(())
    }
}

impl Process<World, Msg> for Device {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        match msg {
            Msg::RunInference(batch) => self.submit(Job::Inference(batch), ctx)?,
            Msg::RunTraining => self.submit(Job::Training, ctx)?,
            Msg::KernelDone => {
                let now = ctx.now();
                match self.running.take() {
                    Some(Job::Inference(batch)) => {
                        let w = &mut *ctx.world;
                        w.responses += batch.len() as u64;
                        w.sojourn_sum += batch.iter().map(|r| now - r.issued).sum::<f64>();
                        let v = w.in_flight.value - batch.len() as f64;
                        w.in_flight.set(now, v);
                        for r in batch {
                            ctx.send(r.actor, Msg::Action { env: r.env })?;
                        }
                    }
                    Some(Job::Training) => {
                        ctx.send(self.learner, Msg::TrainingDone)?;
                    }
                    None => return Err(EngineError::Model("kernel completion with no running job".into())),
                }
                self.start_next(ctx)?;
            }
            other => return Err(unexpected("device", &other)),
        }
        Ok(())
    }
}

struct Learner {
    device: ProcessId,
}

impl Learner {
    fn pump(&mut self, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        loop {
            let mut progressed = false;
            if ctx.world.learner_idle && ctx.world.replay.can_sample() {
                ctx.world.replay.sample();
                ctx.world.learner_idle = false;
                ctx.send(self.device, Msg::RunTraining)?;
                progressed = true;
            }
            while !ctx.world.blocked.is_empty() && ctx.world.replay.can_insert() {
                let (actor, env) = ctx.world.blocked.pop_front().expect("nonempty");
                let now = ctx.now();
                let w = &mut *ctx.world;
                w.replay.insert(actor, env, now);
                if w.replay.items.len() >= w.replay.min_fill {
                    w.replay_ever_filled = true;
                }
                ctx.send(actor, Msg::InsertUnblocked { env })?;
                progressed = true;
            }
            if !progressed {
                return Ok(());
            }
        }
    }
}

impl Process<World, Msg> for Learner {
    fn handle(&mut self, msg: Msg, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        match msg {
            Msg::Start => {}
            Msg::ReplayInserted => ctx.world.learner_wake_pending = false,
            Msg::TrainingDone => {
                ctx.world.train_steps += 1;
                ctx.world.learner_idle = true;
            }
            other => return Err(unexpected("learner", &other)),
        }
        self.pump(ctx)
    }
}

/// Runs the process network with what-if overrides and output options.
pub fn simulate_full(config: &Config, overrides: &SimOverrides, options: &SimOptions) -> Result<SimOutput, SimError> {
    let config = config.clone().validate()?;
    let hw = &config.hardware;
    let w = &config.workload;
    let total_envs = usize::try_from(w.total_envs()).expect("env count fits in memory");
    let cpu_capacity = if overrides.unlimited_cpu_threads {
        u32::try_from(total_envs).unwrap_or(u32::MAX)
    } else {
        hw.cpu_threads
    };
    let n_sm = hw.active_sms_per_gpu();
    let kernel = |k: &crate::model::KernelSpec, batch: u32| -> f64 {
        if overrides.instant_gpu {
            0.0
        } else {
            kernel_time(&k.at_batch(batch), hw, n_sm, overrides.gpu_flags)
        }
    };
    let inference_time: Vec<f64> = (0..=w.inference_batch_size)
        .map(|b| if b == 0 { 0.0 } else { kernel(&w.inference_kernel, b) })
        .collect();
    let train_time = kernel(&w.train_kernel, w.train_batch_size);

    let spi = w.samples_per_insert;
    let world = World {
        total_frames: config.simulation.total_env_frames,
        warmup_frames: config.simulation.effective_warmup_frames(),
        frames: 0,
        window: None,
        end_time: 0.0,
        cpu_capacity,
        cpu_in_use: TimeWeighted::default(),
        max_cpu_in_use: 0,
        gpu_count: hw.gpu_count,
        gpu_busy_count: 0,
        gpu_busy: TimeWeighted::default(),
        gpu_timeline: None,
        in_flight: TimeWeighted::default(),
        requests: 0,
        responses: 0,
        sojourn_sum: 0.0,
        batches: 0,
        batch_fill_sum: 0.0,
        train_steps: 0,
        replay: ReplayBuffer {
            capacity: w.replay_capacity as usize,
            min_fill: w.replay_min_fill as usize,
            items: VecDeque::new(),
            inserted: 0,
            sampled: 0,
            samples_per_insert: spi,
            batch: u64::from(w.train_batch_size),
            max_deficit: spi * f64::from(w.replay_min_fill) + 2.0 * f64::from(w.train_batch_size),
        },
        replay_ever_filled: w.replay_min_fill == 0,
        blocked: VecDeque::new(),
        learner_idle: true,
        learner_wake_pending: false,
        per_env_steps: vec![0; total_envs],
        envs_per_actor: w.envs_per_actor,
        series: options.timeseries_interval.map(|_| SeriesLog::default()),
    };

    let mut sim = Simulation::new(config.simulation.seed, world);
    if options.keep_trace {
        sim.keep_trace_records();
    }
    let cpu = sim.add_pool("cpu_threads", cpu_capacity);
    let actors = w.num_actors as usize;
    let gpus = hw.gpu_count as usize;
    let batcher_id = |g: usize| ProcessId(actors + 2 * g);
    let device_id = |g: usize| ProcessId(actors + 2 * g + 1);
    let learner_id = ProcessId(actors + 2 * gpus);
    let step_time = StepTime::new(&w.env_step_time, overrides.zero_env_step_time)?;

    for i in 0..actors {
        let id = sim.add_process(
            format!("actor-{i}"),
            Box::new(Actor {
                index: i,
                cpu,
                batcher: batcher_id(i % gpus),
                learner: learner_id,
                unroll_length: w.unroll_length,
                step_time: step_time.clone(),
                envs: vec![
                    EnvSlot {
                        state: EnvState::WaitingThread,
                        steps: 0,
                        unroll_fill: 0,
                    };
                    w.envs_per_actor as usize
                ],
            }),
        );
        debug_assert_eq!(id, ProcessId(i));
    }
    for g in 0..gpus {
        let b = sim.add_process(
            format!("batcher-{g}"),
            Box::new(Batcher {
                device: device_id(g),
                batch_size: w.inference_batch_size as usize,
                timeout: w.effective_inference_timeout(),
                pending: Vec::new(),
                generation: 0,
            }),
        );
        debug_assert_eq!(b, batcher_id(g));
        let d = sim.add_process(
            format!("gpu-{g}"),
            Box::new(Device {
                learner: learner_id,
                inference_time: inference_time.clone(),
                // The learner trains on GPU 0 only.
                train_time,
                queue: VecDeque::new(),
                running: None,
            }),
        );
        debug_assert_eq!(d, device_id(g));
    }
    let l = sim.add_process(
        "learner",
        Box::new(Learner {
            device: device_id(0),
        }),
    );
    debug_assert_eq!(l, learner_id);

    if sim.world().warmup_frames == 0 {
        sim.world_mut().open_window(0.0);
    }
    for i in 0..actors {
        sim.schedule(0.0, ProcessId(i), Msg::Start)?;
    }
    sim.schedule(0.0, learner_id, Msg::Start)?;

    let summary = sim.run(StopCondition::Signal)?;
    let trace_lines = if options.keep_trace { sim.trace_lines() } else { None };
    let world = sim.into_world();
    finish(&config, world, summary.trace_hash, summary.events, trace_lines, options)
}

fn finish(
    config: &Config,
    mut world: World,
    trace_hash: u64,
    events: u64,
    trace_lines: Option<String>,
    options: &SimOptions,
) -> Result<SimOutput, SimError> {
    let end = world.end_time;
    let start = world.window.expect("window opens before the last frame");
    let duration = end - start.t;
    let frames = world.frames - start.frames;
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let fps = if duration > 0.0 {
        frames as f64 / duration
    } else {
        f64::INFINITY
    };
    let cpu_busy = ratio(
        world.cpu_in_use.integral_at(end) - start.cpu,
        f64::from(world.cpu_capacity) * duration,
    );
    let gpu_busy = ratio(
        world.gpu_busy.integral_at(end) - start.gpu,
        f64::from(world.gpu_count) * duration,
    );
    let responses = world.responses - start.responses;
    let batches = world.batches - start.batches;

    let mut timeline = world.gpu_timeline.take().expect("window open");
    timeline.close(end);
    let power = power_report(&timeline, fps, &config.hardware.power).expect("timeline has an initial step");
    let gpus = f64::from(world.gpu_count);
    let avg_power = gpus * power.avg_power;
    let energy = gpus * power.energy;

    let mut diagnostics = Vec::new();
    if !world.replay_ever_filled {
        diagnostics.push(format!(
            "replay buffer never reached replay_min_fill={} within {} frames ({} trajectories inserted); no training was simulated",
            config.workload.replay_min_fill, world.total_frames, world.replay.inserted
        ));
    }

    let result = SimResult {
        sim_duration: end,
        measured_duration: duration,
        env_frames: frames,
        frames_per_second: fps,
        cpu_busy_fraction: cpu_busy.clamp(0.0, 1.0),
        gpu_busy_fraction: gpu_busy.clamp(0.0, 1.0),
        mean_inference_batch_occupancy: ratio(world.batch_fill_sum - start.batch_fill, batches as f64),
        mean_inference_queue_wait: ratio(world.sojourn_sum - start.sojourn, responses as f64),
        train_steps: world.train_steps - start.train_steps,
        avg_power,
        energy,
        energy_per_frame: if frames > 0 { energy / frames as f64 } else { f64::INFINITY },
        frames_per_watt_second: ratio(fps, avg_power),
        power,
    };

    let partial_unrolls = world
        .per_env_steps
        .iter()
        .filter(|&&s| s % u64::from(config.workload.unroll_length) != 0)
        .count() as u64;
    let stats = RunStats {
        total_frames: world.frames,
        per_env_steps: std::mem::take(&mut world.per_env_steps),
        inference_requests: world.requests,
        inference_responses: world.responses,
        batches: world.batches,
        trajectories_inserted: world.replay.inserted,
        trajectories_sampled: world.replay.sampled,
        train_steps_total: world.train_steps,
        partial_unrolls,
        max_cpu_in_use: world.max_cpu_in_use,
        cpu_capacity: world.cpu_capacity,
        inference_arrival_rate: ratio((world.requests - start.requests) as f64, duration),
        mean_inference_in_flight: ratio(world.in_flight.integral_at(end) - start.in_flight, duration),
        window_inserts: world.replay.inserted - start.inserts,
        window_train_steps: world.train_steps - start.train_steps,
        events,
    };

    let timeseries = match (options.timeseries_interval, world.series.take()) {
        (Some(dt), Some(log)) => Some(bin_series(&log, dt, end, &world, &config.hardware.power)),
        _ => None,
    };

    Ok(SimOutput {
        result,
        stats,
        trace_hash,
        trace_lines,
        gpu_timeline: timeline,
        timeseries,
        diagnostics,
    })
}

/// Average of a step function given by `(time, value)` change points over `[a, b)`.
fn step_average(changes: &[(f64, u32)], a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut value = 0.0;
    let mut t = a;
    let mut integral = 0.0;
    for &(ct, v) in changes {
        if ct <= a {
            value = f64::from(v);
            continue;
        }
        if ct >= b {
            break;
        }
        integral += value * (ct - t);
        t = ct;
        value = f64::from(v);
    }
    integral += value * (b - t);
    integral / (b - a)
}

fn bin_series(log: &SeriesLog, dt: f64, end: f64, world: &World, spec: &crate::model::PowerSpec) -> Vec<TimeSeriesRow> {
    let mut rows = Vec::new();
    let mut a = 0.0;
    let mut frame_idx = 0;
    while a < end {
        let b = (a + dt).min(end);
        let mut frames = 0u64;
        while frame_idx < log.frames.len() && log.frames[frame_idx] <= b {
            if log.frames[frame_idx] > a || (a == 0.0 && log.frames[frame_idx] == 0.0) {
                frames += 1;
            }
            frame_idx += 1;
        }
        let cpu = step_average(&log.cpu, a, b) / f64::from(world.cpu_capacity);
        let gpu = step_average(&log.gpu, a, b) / f64::from(world.gpu_count);
        let gpu = gpu.clamp(0.0, 1.0);
        rows.push(TimeSeriesRow {
            t: b,
            fps: frames as f64 / (b - a),
            cpu_busy: cpu.clamp(0.0, 1.0),
            gpu_busy: gpu,
            power_w: f64::from(world.gpu_count) * instantaneous_power(gpu, spec),
        });
        a = b;
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, KernelSpec};

    fn tiny(actors: u32, envs: u32, threads: u32, step: f64, batch: u32, frames: u64) -> Config {
        let mut c = preset("seedrl-calibrated").unwrap();
        c.hardware.cpu_threads = threads;
        c.workload.num_actors = actors;
        c.workload.envs_per_actor = envs;
        c.workload.env_step_time = Distribution::constant(step);
        c.workload.inference_batch_size = batch;
        c.workload.inference_timeout = Some(1e-3);
        c.workload.replay_min_fill = 0;
        c.simulation.total_env_frames = frames;
        c.simulation.warmup_frames = Some(0);
        c
    }

    fn instant() -> SimOverrides {
        SimOverrides {
            instant_gpu: true,
            ..SimOverrides::default()
        }
    }

    #[test]
    fn single_actor_runs_at_step_rate() {
        let out = simulate_with(&tiny(1, 1, 1, 0.1, 1, 100), &instant()).unwrap();
        approx::assert_relative_eq!(out.result.frames_per_second, 10.0, max_relative = 1e-12);
        approx::assert_relative_eq!(out.result.sim_duration, 10.0, max_relative = 1e-12);
    }

    #[test]
    fn two_actors_share_one_thread() {
        let out = simulate_with(&tiny(2, 1, 1, 1.0, 1, 4), &instant()).unwrap();
        assert_eq!(out.result.sim_duration, 4.0);
        assert_eq!(out.stats.per_env_steps, vec![2, 2]);
        assert_eq!(out.result.frames_per_second, 1.0);
        assert_eq!(out.result.cpu_busy_fraction, 1.0);
    }

    #[test]
    fn two_actor_timeline_alternates() {
        let out = simulate_full(
            &tiny(2, 1, 1, 1.0, 1, 4),
            &instant(),
            &SimOptions {
                keep_trace: true,
                ..SimOptions::default()
            },
        )
        .unwrap();
        let steps: Vec<(String, String)> = out
            .trace_lines
            .unwrap()
            .lines()
            .filter(|l| l.ends_with(",step_done"))
            .map(|l| {
                let mut f = l.split(',');
                (f.next().unwrap().to_string(), f.next().unwrap().to_string())
            })
            .collect();
        let expected: Vec<(String, String)> = [("1", "actor-0"), ("2", "actor-1"), ("3", "actor-0"), ("4", "actor-1")]
            .iter()
            .map(|(t, p)| (t.to_string(), p.to_string()))
            .collect();
        assert_eq!(steps, expected);
    }

    #[test]
    fn partial_unroll_is_retained() {
        let mut c = tiny(1, 1, 1, 0.1, 1, 7);
        c.workload.unroll_length = 3;
        let out = simulate_with(&c, &instant()).unwrap();
        assert_eq!(out.stats.trajectories_inserted, 2);
        assert_eq!(out.stats.partial_unrolls, 1);
    }

    #[test]
    fn frames_and_requests_are_conserved() {
        let c = preset("seedrl-calibrated").unwrap().with_actors(16);
        let mut c = c;
        c.simulation.total_env_frames = 20_000;
        let out = simulate_with(&c, &SimOverrides::default()).unwrap();
        let s = &out.stats;
        assert_eq!(s.per_env_steps.iter().sum::<u64>(), s.total_frames);
        assert_eq!(s.total_frames, 20_000);
        assert!(s.inference_requests - s.inference_responses <= 16);
        assert!(s.max_cpu_in_use <= s.cpu_capacity);
    }

    #[test]
    fn overlapping_envs_hide_inference_latency() {
        let mut one = tiny(1, 1, 2, 0.1, 1, 400);
        one.workload.inference_kernel = KernelSpec {
            math_work: 0.0,
            mem_traffic: 0.0,
            l2_hit_fraction: 0.0,
            dep_mem_rounds: 1,
            blocks: 1,
            per_item_scaling: false,
        };
        one.hardware.dram_latency = 0.1;
        one.workload.train_kernel = KernelSpec::empty();
        let mut four = one.clone();
        four.workload.envs_per_actor = 4;
        let a = simulate(&one).unwrap().frames_per_second;
        let b = simulate(&four).unwrap().frames_per_second;
        approx::assert_relative_eq!(a, 400.0 / (0.1 + 399.0 * 0.2), max_relative = 1e-9);
        assert!(b > 1.9 * a, "{b} vs {a}");
    }

    #[test]
    fn one_train_step_per_frame() {
        let mut c = tiny(1, 1, 1, 0.1, 1, 200);
        c.workload.unroll_length = 1;
        c.workload.train_batch_size = 1;
        c.workload.samples_per_insert = 1.0;
        let out = simulate_with(&c, &instant()).unwrap();
        assert!(out.stats.train_steps_total.abs_diff(200) <= 1);
    }

    #[test]
    fn half_sample_rate() {
        let mut c = tiny(8, 1, 8, 1e-3, 8, 50_000);
        c.workload.unroll_length = 1;
        c.workload.train_batch_size = 1;
        c.workload.samples_per_insert = 0.5;
        c.simulation.warmup_frames = Some(5_000);
        let out = simulate(&c).unwrap();
        let s = simulate_with(&c, &SimOverrides::default()).unwrap().stats;
        let ratio = s.window_train_steps as f64 / s.window_inserts as f64;
        assert!((ratio - 0.5).abs() <= 0.01, "{ratio}");
        assert!(out.train_steps > 0);
    }

    #[test]
    fn learner_waits_for_min_fill() {
        let mut c = tiny(4, 1, 4, 1e-3, 4, 400);
        c.workload.unroll_length = 10;
        c.workload.replay_min_fill = 100;
        let out = simulate(&c).unwrap();
        let full = simulate_with(&c, &SimOverrides::default()).unwrap();
        assert_eq!(out.train_steps, 0);
        assert_eq!(full.stats.train_steps_total, 0);
        assert!(out.gpu_busy_fraction > 0.0);
        assert_eq!(full.diagnostics.len(), 1);
        assert!(full.diagnostics[0].contains("replay_min_fill=100"));
    }

    #[test]
    fn thread_pool_caps_concurrency() {
        let mut c = preset("seedrl-calibrated").unwrap();
        c.simulation.total_env_frames = 20_000;
        let s = simulate_with(&c, &SimOverrides::default()).unwrap().stats;
        assert_eq!(s.cpu_capacity, 40);
        assert_eq!(s.max_cpu_in_use, 40);
    }

    #[test]
    fn more_actors_busier_gpu() {
        let c = preset("seedrl-calibrated").unwrap();
        let a = simulate(&c.clone().with_actors(4)).unwrap();
        let b = simulate(&c.with_actors(40)).unwrap();
        assert!(b.gpu_busy_fraction > a.gpu_busy_fraction);
    }

    #[test]
    fn littles_law_on_inference_queue() {
        let mut c = preset("seedrl-calibrated").unwrap().with_actors(32);
        c.simulation.total_env_frames = 200_000;
        let out = simulate_with(&c, &SimOverrides::default()).unwrap();
        let l = out.stats.mean_inference_in_flight;
        let lw = out.stats.inference_arrival_rate * out.result.mean_inference_queue_wait;
        assert!((l - lw).abs() <= 0.03 * l, "{l} vs {lw}");
    }

    #[test]
    fn seeds_reproduce() {
        let mut c = tiny(8, 2, 4, 1e-3, 4, 5_000);
        c.workload.env_step_time = Distribution::lognormal(1e-3, 0.5);
        let a = simulate_with(&c, &SimOverrides::default()).unwrap();
        let b = simulate_with(&c, &SimOverrides::default()).unwrap();
        let d = simulate_with(&c.clone().with_seed(7), &SimOverrides::default()).unwrap();
        assert_eq!(a.trace_hash, b.trace_hash);
        assert_eq!(a.result, b.result);
        assert_ne!(a.trace_hash, d.trace_hash);
    }

    #[test]
    fn timeseries_covers_the_run() {
        let c = tiny(1, 1, 1, 0.125, 1, 80);
        let out = simulate_full(
            &c,
            &instant(),
            &SimOptions {
                timeseries_interval: Some(1.0),
                ..SimOptions::default()
            },
        )
        .unwrap();
        let rows = out.timeseries.unwrap();
        assert_eq!(rows.len(), 10);
        for r in &rows {
            approx::assert_relative_eq!(r.fps, 8.0, max_relative = 1e-9);
            approx::assert_relative_eq!(r.cpu_busy, 1.0, max_relative = 1e-9);
        }
    }
}
