//! Deterministic discrete-event simulation kernel.
//!
//! Events are delivered in `(time, seq)` order where `seq` is the global
//! insertion counter, so equal-time events run in the order they were
//! scheduled. Processes are state machines that react to messages; counted
//! resource pools hand out grants in FIFO order. Every process owns its own
//! counter-based random stream keyed by its name, so adding a process never
//! perturbs the draws of the others.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Virtual time in seconds.
pub type Time = f64;

/// Random stream owned by one process.
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProcessId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolId(pub usize);

/// Identifies a scheduled event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventHandle {
    pub time: Time,
    pub seq: u64,
}

/// Messages carried by events expose a short label for traces.
pub trait Payload {
    fn kind(&self) -> &'static str;
}

/// A simulated process reacting to delivered messages.
pub trait Process<W, M> {
    fn handle(&mut self, msg: M, ctx: &mut Context<'_, W, M>) -> Result<(), EngineError>;
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("cannot schedule at t={at} before the current clock t={now}")]
    TimeTravel { at: Time, now: Time },
    #[error("{requester} is already waiting on pool {pool:?}")]
    DuplicateWait { pool: String, requester: Requester },
    #[error("release on pool {pool:?} with nothing in use")]
    ReleaseUnheld { pool: String },
    #[error("deadlock at t={clock}: event queue exhausted before the stop condition{}", format_waiters(.waiters))]
    Deadlock { clock: Time, waiters: Vec<PoolWaiters> },
    #[error("{0}")]
    Model(String),
}

/// Snapshot of one pool's waiters, for deadlock diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolWaiters {
    pub pool: String,
    pub in_use: u32,
    pub capacity: u32,
    pub waiters: Vec<String>,
}

fn format_waiters(w: &[PoolWaiters]) -> String {
    w.iter()
        .map(|p| {
            format!(
                "\n  pool {} ({}/{} in use): waiting [{}]",
                p.pool,
                p.in_use,
                p.capacity,
                p.waiters.join(", ")
            )
        })
        .collect()
}

/// A pool client: the process plus a caller-chosen tag (e.g. an env slot).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Requester {
    pub process: ProcessId,
    pub tag: u32,
}

impl fmt::Display for Requester {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "process {}#{}", self.process.0, self.tag)
    }
}

struct Waiter<M> {
    requester: Requester,
    on_grant: M,
}

/// A counted resource with a FIFO wait queue.
pub struct ResourcePool<M> {
    name: String,
    capacity: u32,
    in_use: u32,
    waiters: VecDeque<Waiter<M>>,
    grants: u64,
    releases: u64,
}

impl<M> ResourcePool<M> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn in_use(&self) -> u32 {
        self.in_use
    }

    pub fn waiting(&self) -> usize {
        self.waiters.len()
    }

    pub fn grants(&self) -> u64 {
        self.grants
    }

    pub fn releases(&self) -> u64 {
        self.releases
    }

    fn snapshot(&self, names: &[String]) -> PoolWaiters {
        PoolWaiters {
            pool: self.name.clone(),
            in_use: self.in_use,
            capacity: self.capacity,
            waiters: self
                .waiters
                .iter()
                .map(|w| format!("{}#{}", names[w.requester.process.0], w.requester.tag))
                .collect(),
        }
    }
}

/// Outcome of an acquire request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquire {
    /// The unit is held from now on.
    Granted,
    /// The requester will receive its `on_grant` message when a unit frees up.
    Queued,
}

struct Event<M> {
    time: Time,
    seq: u64,
    target: ProcessId,
    payload: M,
}

impl<M> PartialEq for Event<M> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<M> Eq for Event<M> {}

impl<M> PartialOrd for Event<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for Event<M> {
    // Reversed: BinaryHeap is a max-heap and we pop the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Scheduler<M> {
    now: Time,
    next_seq: u64,
    heap: BinaryHeap<Event<M>>,
}

impl<M> Scheduler<M> {
    fn schedule(&mut self, at: Time, target: ProcessId, payload: M) -> Result<EventHandle, EngineError> {
        if !(at >= self.now) {
            return Err(EngineError::TimeTravel { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event {
            time: at,
            seq,
            target,
            payload,
        });
        Ok(EventHandle { time: at, seq })
    }
}

/// Handle given to a process while it reacts to one message.
pub struct Context<'a, W, M> {
    sched: &'a mut Scheduler<M>,
    pools: &'a mut [ResourcePool<M>],
    me: ProcessId,
    rng: &'a mut StreamRng,
    stop: &'a mut bool,
    pub world: &'a mut W,
}

impl<W, M> Context<'_, W, M> {
    pub fn now(&self) -> Time {
        self.sched.now
    }

    pub fn me(&self) -> ProcessId {
        self.me
    }

    pub fn schedule_at(&mut self, at: Time, target: ProcessId, msg: M) -> Result<EventHandle, EngineError> {
        self.sched.schedule(at, target, msg)
    }

    pub fn schedule_in(&mut self, delay: Time, target: ProcessId, msg: M) -> Result<EventHandle, EngineError> {
        let at = self.sched.now + delay;
        self.sched.schedule(at, target, msg)
    }

    /// Delivers `msg` at the current instant, after everything already queued for it.
    pub fn send(&mut self, target: ProcessId, msg: M) -> Result<EventHandle, EngineError> {
        let now = self.sched.now;
        self.sched.schedule(now, target, msg)
    }

    /// Requests one unit of `pool` for this process under `tag`.
    pub fn acquire(&mut self, pool: PoolId, tag: u32, on_grant: M) -> Result<Acquire, EngineError> {
        let requester = Requester {
            process: self.me,
            tag,
        };
        let p = &mut self.pools[pool.0];
        if p.waiters.iter().any(|w| w.requester == requester) {
            return Err(EngineError::DuplicateWait {
                pool: p.name.clone(),
                requester,
            });
        }
        if p.in_use < p.capacity {
            p.in_use += 1;
            p.grants += 1;
            Ok(Acquire::Granted)
        } else {
            p.waiters.push_back(Waiter {
                requester,
                on_grant,
            });
            Ok(Acquire::Queued)
        }
    }

    /// Returns one unit; the longest waiter, if any, is granted at this instant.
    pub fn release(&mut self, pool: PoolId) -> Result<Option<Requester>, EngineError> {
        let p = &mut self.pools[pool.0];
        if p.in_use == 0 {
            return Err(EngineError::ReleaseUnheld {
                pool: p.name.clone(),
            });
        }
        p.releases += 1;
        match p.waiters.pop_front() {
            Some(w) => {
                p.grants += 1;
                let now = self.sched.now;
                self.sched.schedule(now, w.requester.process, w.on_grant)?;
                Ok(Some(w.requester))
            }
            None => {
                p.in_use -= 1;
                Ok(None)
            }
        }
    }

    pub fn pool(&self, pool: PoolId) -> &ResourcePool<M> {
        &self.pools[pool.0]
    }

    pub fn rng(&mut self) -> &mut StreamRng {
        self.rng
    }

    /// Ends the run after the current event.
    pub fn stop(&mut self) {
        *self.stop = true;
    }
}

/// When a run ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopCondition {
    /// Run until no events remain.
    Exhaustion,
    /// Run until a process calls [`Context::stop`].
    Signal,
    /// Run until the clock would pass the given time.
    Until(Time),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub final_clock: Time,
    pub events: u64,
    pub trace_hash: u64,
}

/// One delivered event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub time: Time,
    pub process: ProcessId,
    pub kind: &'static str,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable 64-bit FNV-1a hash of a string.
pub fn stable_hash(s: &str) -> u64 {
    fnv1a(FNV_OFFSET, s.as_bytes())
}

/// Running content hash over delivered events, optionally keeping the records.
#[derive(Debug, Clone)]
pub struct Trace {
    hash: u64,
    len: u64,
    records: Option<Vec<TraceRecord>>,
}

impl Trace {
    fn new(keep_records: bool) -> Self {
        Self {
            hash: FNV_OFFSET,
            len: 0,
            records: keep_records.then(Vec::new),
        }
    }

    fn record(&mut self, time: Time, process: ProcessId, kind: &'static str) {
        let mut h = fnv1a(self.hash, &time.to_bits().to_le_bytes());
        h = fnv1a(h, &(process.0 as u64).to_le_bytes());
        h = fnv1a(h, kind.as_bytes());
        self.hash = fnv1a(h, &[0xff]);
        self.len += 1;
        if let Some(r) = &mut self.records {
            r.push(TraceRecord {
                time,
                process,
                kind,
            });
        }
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn records(&self) -> Option<&[TraceRecord]> {
        self.records.as_deref()
    }
}

/// Read-only view handed to run observers after each event.
pub struct Observation<'a, W, M> {
    pub now: Time,
    pub pools: &'a [ResourcePool<M>],
    pub world: &'a W,
}

/// A single-threaded simulation instance.
pub struct Simulation<W, M> {
    seed: u64,
    sched: Scheduler<M>,
    pools: Vec<ResourcePool<M>>,
    processes: Vec<Box<dyn Process<W, M>>>,
    names: Vec<String>,
    rngs: Vec<StreamRng>,
    trace: Trace,
    world: W,
}

impl<W, M: Payload> Simulation<W, M> {
    pub fn new(seed: u64, world: W) -> Self {
        Self {
            seed,
            sched: Scheduler {
                now: 0.0,
                next_seq: 0,
                heap: BinaryHeap::new(),
            },
            pools: Vec::new(),
            processes: Vec::new(),
            names: Vec::new(),
            rngs: Vec::new(),
            trace: Trace::new(false),
            world,
        }
    }

    /// Keeps every delivered event in memory (for dumps and tests).
    pub fn keep_trace_records(&mut self) {
        if self.trace.records.is_none() {
            self.trace.records = Some(Vec::new());
        }
    }

    /// Registers a process; its random stream is derived from `name`.
    pub fn add_process(&mut self, name: impl Into<String>, process: Box<dyn Process<W, M>>) -> ProcessId {
        let name = name.into();
        let mut rng = StreamRng::seed_from_u64(self.seed);
        rng.set_stream(stable_hash(&name));
        self.rngs.push(rng);
        self.names.push(name);
        self.processes.push(process);
        ProcessId(self.processes.len() - 1)
    }

    pub fn add_pool(&mut self, name: impl Into<String>, capacity: u32) -> PoolId {
        self.pools.push(ResourcePool {
            name: name.into(),
            capacity,
            in_use: 0,
            waiters: VecDeque::new(),
            grants: 0,
            releases: 0,
        });
        PoolId(self.pools.len() - 1)
    }

    pub fn schedule(&mut self, at: Time, target: ProcessId, msg: M) -> Result<EventHandle, EngineError> {
        self.sched.schedule(at, target, msg)
    }

    pub fn now(&self) -> Time {
        self.sched.now
    }

    pub fn world(&self) -> &W {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut W {
        &mut self.world
    }

    pub fn into_world(self) -> W {
        self.world
    }

    pub fn pool(&self, pool: PoolId) -> &ResourcePool<M> {
        &self.pools[pool.0]
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn process_name(&self, id: ProcessId) -> &str {
        &self.names[id.0]
    }

    /// Renders kept trace records as `time,process,event` lines.
    pub fn trace_lines(&self) -> Option<String> {
        let records = self.trace.records()?;
        let mut out = String::with_capacity(records.len() * 24);
        for r in records {
            out.push_str(&format!("{},{},{}\n", r.time, self.names[r.process.0], r.kind));
        }
        Some(out)
    }

    pub fn run(&mut self, stop: StopCondition) -> Result<RunSummary, EngineError> {
        self.run_observed(stop, |_| {})
    }

    /// Runs the event loop, calling `observer` after every delivered event.
    pub fn run_observed<F>(&mut self, stop: StopCondition, mut observer: F) -> Result<RunSummary, EngineError>
    where
        F: FnMut(&Observation<'_, W, M>),
    {
        let mut events = 0u64;
        let mut stopped = false;
        loop {
            if stopped {
                break;
            }
            let next_time = match self.sched.heap.peek() {
                Some(e) => e.time,
                None => {
                    let clean = matches!(stop, StopCondition::Exhaustion) || self.processes.is_empty();
                    if clean {
                        break;
                    }
                    return Err(EngineError::Deadlock {
                        clock: self.sched.now,
                        waiters: self
                            .pools
                            .iter()
                            .filter(|p| !p.waiters.is_empty())
                            .map(|p| p.snapshot(&self.names))
                            .collect(),
                    });
                }
            };
            if let StopCondition::Until(limit) = stop {
                if next_time > limit {
                    self.sched.now = limit;
                    break;
                }
            }
            let ev = self.sched.heap.pop().expect("peeked");
            debug_assert!(ev.time >= self.sched.now);
            self.sched.now = ev.time;
            self.trace.record(ev.time, ev.target, ev.payload.kind());
            events += 1;
            let idx = ev.target.0;
            let mut ctx = Context {
                sched: &mut self.sched,
                pools: &mut self.pools,
                me: ev.target,
                rng: &mut self.rngs[idx],
                stop: &mut stopped,
                world: &mut self.world,
            };
            self.processes[idx].handle(ev.payload, &mut ctx)?;
            if !matches!(stop, StopCondition::Signal) {
                stopped = false;
            }
            observer(&Observation {
                now: self.sched.now,
                pools: &self.pools,
                world: &self.world,
            });
        }
        Ok(RunSummary {
            final_clock: self.sched.now,
            events,
            trace_hash: self.trace.hash,
        })
    }
}
