//! Key-value store under bursty clients: writes fill a memtable, full
//! memtables are flushed to level 0, level 0 is compacted into level 1 and
//! some of those compactions spawn larger high-level ones. All of it shares
//! one disk.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sds_core::clock::nanos_from_duration;
use sds_core::control::{lsm_layout, ControlPlane, LocalLink, TailLatencyConfig, TailLatencyPolicy};
use sds_core::num::MIB;
use sds_core::stage::{Stage, StageConfig};
use sds_core::{Context, ManualClock, Nanos, Request, RequestContext, RequestType, NANOS_PER_SEC};

use crate::des::EventQueue;
use crate::disk::{IoKind, RequesterId, SimDisk};
use crate::output::{percentile, Manifest, Trace};
use crate::{nanos, secs, SimError, DESK_SCALE};

#[derive(Debug, Clone, PartialEq)]
pub struct LsmSimConfig {
    pub scale: f64,
    /// Disk bandwidth, which is also the store's budget.
    pub kvs_bandwidth: f64,
    pub min_bandwidth: f64,
    pub memtable_size: u64,
    /// Level-0 files that trigger a level-0 compaction.
    pub l0_compaction_trigger: u32,
    /// Level-0 files at which flushes stop.
    pub l0_file_quota: u32,
    pub compaction_threads: usize,
    pub client_threads: usize,
    /// Operations per second.
    pub peak_rate: f64,
    pub valley_rate: f64,
    pub peak_len: f64,
    pub valley_len: f64,
    pub initial_valley: f64,
    pub duration: f64,
    pub value_size: u64,
    pub key_size: u64,
    pub read_fraction: f64,
    /// Bytes read from disk by a get.
    pub block_size: u64,
    /// Level-1 bytes rewritten per level-0 byte.
    pub l1_overlap: f64,
    pub high_compaction_probability: f64,
    /// High-level compaction size relative to the bytes read by the
    /// level-0 compaction that spawned it.
    pub compaction_amplification: f64,
    /// High-level compactions queued at start.
    pub initial_backlog: usize,
    pub io_chunk: u64,
    /// CPU time of a memtable insert or a cached lookup.
    pub op_cost: Nanos,
    pub loop_interval: f64,
    pub seed: u64,
}

pub const FLUSH_THREADS: usize = 1;

impl LsmSimConfig {
    /// 200 MiB/s disk, 10 MiB/s floor, 128 MiB memtables and 20/5 kops/s
    /// peaks and valleys, multiplied by `scale`.
    pub fn desk(scale: f64) -> Self {
        let mib = |m: f64| m * MIB as f64 * scale;
        Self {
            scale,
            kvs_bandwidth: mib(200.0),
            min_bandwidth: mib(10.0),
            memtable_size: mib(128.0) as u64,
            l0_compaction_trigger: 2,
            l0_file_quota: 4,
            compaction_threads: 7,
            client_threads: 8,
            peak_rate: 20_000.0 * scale,
            valley_rate: 5_000.0 * scale,
            peak_len: 100.0,
            valley_len: 10.0,
            initial_valley: 300.0,
            duration: 1200.0,
            value_size: 1024,
            key_size: 8,
            read_fraction: 0.5,
            block_size: 4096,
            l1_overlap: 1.5,
            high_compaction_probability: 0.5,
            compaction_amplification: 4.0,
            initial_backlog: 6,
            io_chunk: 256 * 1024,
            op_cost: 5_000,
            loop_interval: 1.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            self.scale,
            self.kvs_bandwidth,
            self.min_bandwidth,
            self.peak_rate,
            self.valley_rate,
            self.peak_len,
            self.valley_len,
            self.duration,
            self.loop_interval,
            self.compaction_amplification,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(SimError::Config("rates, sizes and durations must be positive".into()));
        }
        if self.initial_valley < 0.0 || self.l1_overlap < 0.0 {
            return Err(SimError::Config("initial valley and overlap must not be negative".into()));
        }
        if self.memtable_size == 0 || self.io_chunk == 0 || self.block_size == 0 || self.value_size + self.key_size == 0
        {
            return Err(SimError::Config("sizes must be positive".into()));
        }
        if self.client_threads == 0 || self.compaction_threads < 2 {
            return Err(SimError::Config("need clients and at least two compaction threads".into()));
        }
        if self.l0_compaction_trigger == 0 || self.l0_file_quota <= self.l0_compaction_trigger {
            return Err(SimError::Config("level-0 quota must exceed the compaction trigger".into()));
        }
        if !(0.0..=1.0).contains(&self.read_fraction) || !(0.0..=1.0).contains(&self.high_compaction_probability) {
            return Err(SimError::Config("fractions must be in [0, 1]".into()));
        }
        if self.min_bandwidth > self.kvs_bandwidth {
            return Err(SimError::Config("min bandwidth exceeds the store budget".into()));
        }
        Ok(())
    }

    /// Client operations per second at `t` seconds.
    pub fn rate_at(&self, t: f64) -> f64 {
        if t < self.initial_valley {
            return self.valley_rate;
        }
        let cycle = self.peak_len + self.valley_len;
        if (t - self.initial_valley) % cycle < self.peak_len {
            self.peak_rate
        } else {
            self.valley_rate
        }
    }

    pub fn in_peak(&self, t: f64) -> bool {
        self.rate_at(t) == self.peak_rate && self.peak_rate != self.valley_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LsmMode {
    Baseline,
    PaioTailLatency,
}

impl LsmMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LsmMode::Baseline => "baseline",
            LsmMode::PaioTailLatency => "paio",
        }
    }
}

impl std::str::FromStr for LsmMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "paio" | "paio_tail_latency" => Ok(Self::PaioTailLatency),
            _ => Err(SimError::Config(format!("unknown lsm mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushState {
    Idle,
    /// Waiting for level 0 to drop below its quota.
    Blocked,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsmEventKind {
    WriteAdmitted,
    WriteStalled,
    WritesResumed,
    MemtableSwitch,
    FlushStarted,
    FlushBlocked,
    FlushDone,
    L0CompactionStarted,
    L0CompactionDone,
    HighCompactionStarted,
    HighCompactionDone,
}

/// Store state right after an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LsmEvent {
    pub t: Nanos,
    pub kind: LsmEventKind,
    pub memtable_full: bool,
    pub flush: FlushState,
    pub l0_files: u32,
    /// Client writes waiting to be inserted.
    pub waiting_writers: usize,
}

impl LsmEvent {
    pub fn blocked(&self) -> bool {
        stall_predicate(self.memtable_full, self.flush)
    }
}

/// Writes must wait while a full memtable has nowhere to go or a flush is
/// held back by the level-0 quota.
pub fn stall_predicate(memtable_full: bool, flush: FlushState) -> bool {
    (memtable_full && flush != FlushState::Idle) || flush == FlushState::Blocked
}

/// Replays the event log: no write may be admitted while the store is
/// blocked, none may stall while it is not, and once every event at an
/// instant has run no writer may still be waiting on an unblocked store.
/// Returns the first offending entry.
pub fn check_stall_log(events: &[LsmEvent]) -> Result<(), LsmEvent> {
    for (i, e) in events.iter().enumerate() {
        let ok = match e.kind {
            LsmEventKind::WriteAdmitted | LsmEventKind::WritesResumed => !e.blocked(),
            LsmEventKind::WriteStalled => e.blocked() && e.waiting_writers > 0,
            _ => true,
        };
        let last_at_instant = events.get(i + 1).map_or(true, |n| n.t != e.t);
        if !ok || (last_at_instant && !e.blocked() && e.waiting_writers > 0) {
            return Err(*e);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationSample {
    pub t: f64,
    pub foreground: f64,
    pub flush: f64,
    pub l0: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsmRun {
    pub mode: LsmMode,
    pub duration: f64,
    pub ops: u64,
    pub reads: u64,
    pub writes: u64,
    pub p50: Nanos,
    pub p99: Nanos,
    pub p999: Nanos,
    pub max_latency: Nanos,
    /// Seconds during which writes were blocked.
    pub stall_time: f64,
    pub stall_episodes: u64,
    pub flushes: u64,
    pub l0_compactions: u64,
    pub high_compactions: u64,
    pub high_backlog_end: usize,
    pub allocations: Vec<AllocationSample>,
    pub events: Vec<LsmEvent>,
    pub trace: Trace,
}

impl LsmRun {
    pub fn mean_throughput(&self) -> f64 {
        self.ops as f64 / self.duration
    }

    pub fn manifest(&self, cfg: &LsmSimConfig) -> Manifest {
        let mut m = Manifest::new();
        m.set("experiment", "lsm")
            .set("mode", self.mode.as_str())
            .set("seed", cfg.seed)
            .set("scale", cfg.scale)
            .set("kvs_bandwidth", cfg.kvs_bandwidth)
            .set("min_bandwidth", cfg.min_bandwidth)
            .set("memtable_size", cfg.memtable_size)
            .set("l0_compaction_trigger", cfg.l0_compaction_trigger)
            .set("l0_file_quota", cfg.l0_file_quota)
            .set("compaction_threads", cfg.compaction_threads)
            .set("client_threads", cfg.client_threads)
            .set("peak_rate", cfg.peak_rate)
            .set("valley_rate", cfg.valley_rate)
            .set("peak_len_s", cfg.peak_len)
            .set("valley_len_s", cfg.valley_len)
            .set("initial_valley_s", cfg.initial_valley)
            .set("duration_s", cfg.duration)
            .set("read_fraction", cfg.read_fraction)
            .set("high_compaction_probability", cfg.high_compaction_probability)
            .set("compaction_amplification", cfg.compaction_amplification)
            .set("initial_backlog", cfg.initial_backlog)
            .set("loop_interval_s", cfg.loop_interval)
            .set("ops", self.ops)
            .set("mean_throughput", self.mean_throughput())
            .set("p99_ms", self.p99 as f64 / 1e6)
            .set("stall_time_s", self.stall_time)
            .set("stall_episodes", self.stall_episodes);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Client(usize),
    Flush,
    Compactor(usize),
}

#[derive(Debug, Clone, Copy)]
struct Io {
    owner: Owner,
    kind: IoKind,
    size: u64,
}

#[derive(Debug)]
enum Ev {
    Arrival(usize),
    OpDone(usize),
    Admitted(Io),
    Tick,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Get { from_disk: bool },
    Put,
}

struct Client {
    arrivals: ChaCha8Rng,
    backlog: VecDeque<(Nanos, Op)>,
    current: Option<(Nanos, Op)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JobKind {
    L0 { files: u32 },
    High,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    kind: JobKind,
    input: f64,
    read_left: u64,
    write_left: u64,
    reading: bool,
}

impl Job {
    fn new(kind: JobKind, input: f64, rewrite: f64) -> Self {
        let bytes = (input * rewrite).round().max(1.0) as u64;
        Job { kind, input, read_left: bytes, write_left: bytes, reading: true }
    }

    fn context(&self) -> RequestContext {
        match self.kind {
            JobKind::L0 { .. } => RequestContext::BG_COMPACTION_L0_L1,
            JobKind::High => RequestContext::BG_COMPACTION_HIGH,
        }
    }
}

struct Sim<'a> {
    cfg: &'a LsmSimConfig,
    mode: LsmMode,
    q: EventQueue<Ev>,
    disk: SimDisk<Io>,
    clock: Arc<ManualClock>,
    stage: Option<Arc<Stage>>,
    cp: Option<ControlPlane>,
    clients: Vec<Client>,
    ops_rng: ChaCha8Rng,
    spawn_rng: ChaCha8Rng,

    memtable: u64,
    memtable_full: bool,
    flush: FlushState,
    flush_left: u64,
    l0_files: u32,
    l0_running: bool,
    high_queue: VecDeque<f64>,
    compactors: Vec<Option<Job>>,
    stalled: VecDeque<usize>,
    blocked_since: Option<Nanos>,

    latencies: Vec<u64>,
    per_second: BTreeMap<u64, Vec<u64>>,
    reads: u64,
    writes: u64,
    stall_time: Nanos,
    stall_episodes: u64,
    flushes: u64,
    l0_jobs: u64,
    high_jobs: u64,
    events: Vec<LsmEvent>,
    fg_bytes: u64,
    allocations: Vec<AllocationSample>,
    trace: Trace,
}

const FLUSH_REQUESTER: RequesterId = 1000;
const COMPACTOR_BASE: RequesterId = 2000;

impl<'a> Sim<'a> {
    fn requester(owner: Owner) -> RequesterId {
        match owner {
            Owner::Client(c) => c as RequesterId,
            Owner::Flush => FLUSH_REQUESTER,
            Owner::Compactor(k) => COMPACTOR_BASE + k as RequesterId,
        }
    }

    fn workflow(owner: Owner) -> u64 {
        match owner {
            Owner::Client(c) => c as u64 + 1,
            Owner::Flush => 100,
            Owner::Compactor(k) => 200 + k as u64,
        }
    }

    fn blocked(&self) -> bool {
        stall_predicate(self.memtable_full, self.flush)
    }

    fn log(&mut self, kind: LsmEventKind) {
        let now = self.q.now();
        let blocked = self.blocked();
        match (self.blocked_since, blocked) {
            (None, true) => {
                self.blocked_since = Some(now);
                self.stall_episodes += 1;
            }
            (Some(s), false) => {
                self.stall_time += now - s;
                self.blocked_since = None;
            }
            _ => {}
        }
        self.events.push(LsmEvent {
            t: now,
            kind,
            memtable_full: self.memtable_full,
            flush: self.flush,
            l0_files: self.l0_files,
            waiting_writers: self.stalled.len(),
        });
    }

    fn issue(&mut self, io: Io, ctx: RequestContext) -> Result<(), SimError> {
        let now = self.q.now();
        let wait = match &self.stage {
            Some(st) => {
                self.clock.set(now);
                let ty = match io.kind {
                    IoKind::Read => RequestType::Read,
                    IoKind::Write => RequestType::Write,
                };
                let c = Context::new(Self::workflow(io.owner), ty, io.size, ctx);
                let r = st.enforce(Request::metadata_only(c)).map_err(|e| SimError::Stage(e.detail))?;
                nanos_from_duration(r.wait_applied)
            }
            None => 0,
        };
        if ctx == RequestContext::FOREGROUND {
            self.fg_bytes += io.size;
        }
        if wait == 0 {
            self.disk.submit(now, Self::requester(io.owner), io.kind, io.size, io)?;
        } else {
            self.q.schedule(now + wait, Ev::Admitted(io));
        }
        Ok(())
    }

    fn next_arrival(&mut self, c: usize) {
        let now = secs(self.q.now());
        let rate = self.cfg.rate_at(now) / self.cfg.client_threads as f64;
        let u: f64 = self.clients[c].arrivals.gen_range(f64::EPSILON..1.0);
        let at = now - u.ln() / rate;
        if at < self.cfg.duration {
            self.q.schedule(nanos(at), Ev::Arrival(c));
        }
    }

    fn start_next(&mut self, c: usize) -> Result<(), SimError> {
        if self.clients[c].current.is_some() {
            return Ok(());
        }
        let Some((intended, op)) = self.clients[c].backlog.pop_front() else {
            return Ok(());
        };
        self.clients[c].current = Some((intended, op));
        let now = self.q.now();
        match op {
            Op::Get { from_disk: true } => {
                let io = Io { owner: Owner::Client(c), kind: IoKind::Read, size: self.cfg.block_size };
                self.issue(io, RequestContext::FOREGROUND)?;
            }
            Op::Get { from_disk: false } => self.q.schedule(now + self.cfg.op_cost, Ev::OpDone(c)),
            Op::Put => {
                if self.blocked() {
                    self.stalled.push_back(c);
                    self.log(LsmEventKind::WriteStalled);
                } else {
                    self.insert(c)?;
                }
            }
        }
        Ok(())
    }

    fn insert(&mut self, c: usize) -> Result<(), SimError> {
        debug_assert!(!self.blocked());
        self.memtable += self.cfg.key_size + self.cfg.value_size;
        self.log(LsmEventKind::WriteAdmitted);
        let now = self.q.now();
        self.q.schedule(now + self.cfg.op_cost, Ev::OpDone(c));
        if self.memtable >= self.cfg.memtable_size {
            self.memtable_full = true;
            self.try_switch()?;
        }
        Ok(())
    }

    /// Hands a full memtable to the flush thread when it is free.
    fn try_switch(&mut self) -> Result<(), SimError> {
        if !self.memtable_full || self.flush != FlushState::Idle {
            return Ok(());
        }
        self.flush_left = self.memtable;
        self.memtable = 0;
        self.memtable_full = false;
        self.log(LsmEventKind::MemtableSwitch);
        if self.l0_files >= self.cfg.l0_file_quota {
            self.flush = FlushState::Blocked;
            self.log(LsmEventKind::FlushBlocked);
        } else {
            self.start_flush()?;
        }
        Ok(())
    }

    fn start_flush(&mut self) -> Result<(), SimError> {
        self.flush = FlushState::Running;
        self.log(LsmEventKind::FlushStarted);
        self.flush_io()
    }

    fn flush_io(&mut self) -> Result<(), SimError> {
        let size = self.flush_left.min(self.cfg.io_chunk);
        self.flush_left -= size;
        self.issue(Io { owner: Owner::Flush, kind: IoKind::Write, size }, RequestContext::BG_FLUSH)
    }

    fn flush_done(&mut self) -> Result<(), SimError> {
        self.flushes += 1;
        self.l0_files += 1;
        self.flush = FlushState::Idle;
        self.log(LsmEventKind::FlushDone);
        self.try_switch()?;
        self.schedule_compactions()?;
        self.resume_writers()
    }

    fn resume_writers(&mut self) -> Result<(), SimError> {
        if self.stalled.is_empty() || self.blocked() {
            return Ok(());
        }
        self.log(LsmEventKind::WritesResumed);
        while !self.blocked() {
            let Some(c) = self.stalled.pop_front() else { break };
            self.insert(c)?;
        }
        Ok(())
    }

    fn free_compactor(&self) -> Option<usize> {
        self.compactors.iter().position(Option::is_none)
    }

    fn schedule_compactions(&mut self) -> Result<(), SimError> {
        if !self.l0_running && self.l0_files >= self.cfg.l0_compaction_trigger {
            if let Some(k) = self.free_compactor() {
                let files = self.l0_files;
                let input = files as f64 * self.cfg.memtable_size as f64;
                self.l0_running = true;
                self.compactors[k] = Some(Job::new(JobKind::L0 { files }, input, 1.0 + self.cfg.l1_overlap));
                self.log(LsmEventKind::L0CompactionStarted);
                self.compaction_io(k)?;
            }
        }
        // one thread stays available for level-0 work
        let high_cap = self.cfg.compaction_threads - 1;
        loop {
            let running_high = self.compactors.iter().flatten().filter(|j| j.kind == JobKind::High).count();
            if running_high >= high_cap || self.high_queue.is_empty() {
                break;
            }
            let Some(k) = self.free_compactor() else { break };
            let input = self.high_queue.pop_front().expect("queued job");
            self.compactors[k] = Some(Job::new(JobKind::High, input, 1.0));
            self.log(LsmEventKind::HighCompactionStarted);
            self.compaction_io(k)?;
        }
        Ok(())
    }

    fn compaction_io(&mut self, k: usize) -> Result<(), SimError> {
        let chunk = self.cfg.io_chunk;
        let job = self.compactors[k].as_mut().expect("running job");
        let read = job.reading && job.read_left > 0 || job.write_left == 0;
        let (kind, size) = if read {
            let s = job.read_left.min(chunk);
            job.read_left -= s;
            (IoKind::Read, s)
        } else {
            let s = job.write_left.min(chunk);
            job.write_left -= s;
            (IoKind::Write, s)
        };
        job.reading = !read;
        let ctx = job.context();
        self.issue(Io { owner: Owner::Compactor(k), kind, size }, ctx)
    }

    fn compaction_done(&mut self, k: usize) -> Result<(), SimError> {
        let job = self.compactors[k].take().expect("running job");
        match job.kind {
            JobKind::L0 { files } => {
                self.l0_jobs += 1;
                self.l0_files -= files;
                self.l0_running = false;
                self.log(LsmEventKind::L0CompactionDone);
                if self.spawn_rng.gen_bool(self.cfg.high_compaction_probability) {
                    self.high_queue
                        .push_back(job.input * (1.0 + self.cfg.l1_overlap) * self.cfg.compaction_amplification);
                }
                if self.flush == FlushState::Blocked && self.l0_files < self.cfg.l0_file_quota {
                    self.start_flush()?;
                }
            }
            JobKind::High => {
                self.high_jobs += 1;
                self.log(LsmEventKind::HighCompactionDone);
            }
        }
        self.schedule_compactions()?;
        self.resume_writers()
    }

    fn io_done(&mut self, io: Io, at: Nanos) -> Result<(), SimError> {
        match io.owner {
            Owner::Client(c) => self.q.schedule(at + self.cfg.op_cost, Ev::OpDone(c)),
            Owner::Flush => {
                if self.flush_left > 0 {
                    self.flush_io()?;
                } else {
                    self.flush_done()?;
                }
            }
            Owner::Compactor(k) => {
                let job = self.compactors[k].as_ref().expect("running job");
                if job.read_left == 0 && job.write_left == 0 {
                    self.compaction_done(k)?;
                } else {
                    self.compaction_io(k)?;
                }
            }
        }
        Ok(())
    }

    fn op_done(&mut self, c: usize) -> Result<(), SimError> {
        let now = self.q.now();
        let (intended, op) = self.clients[c].current.take().expect("op in flight");
        let lat = now - intended;
        self.latencies.push(lat);
        self.per_second.entry(now / NANOS_PER_SEC).or_default().push(lat);
        match op {
            Op::Put => self.writes += 1,
            Op::Get { .. } => self.reads += 1,
        }
        self.start_next(c)
    }

    fn tick(&mut self) {
        let now = self.q.now();
        let Some(cp) = self.cp.as_mut() else { return };
        self.clock.set(now);
        cp.iterate();
        let stage = self.stage.as_ref().expect("paio mode has a stage");
        // rates the stage enforces, including ones set at registration
        let get = |o: sds_core::ObjectId| stage.object_state(o).and_then(|s| s.get("rate")).unwrap_or(0.0);
        let high: f64 = lsm_layout::HIGH_DRLS.iter().map(|o| get(*o)).sum();
        let sample = AllocationSample {
            t: secs(now),
            foreground: self.fg_bytes as f64 / self.cfg.loop_interval,
            flush: get(lsm_layout::FLUSH_DRL),
            l0: get(lsm_layout::L0_DRL),
            high,
        };
        self.fg_bytes = 0;
        let t = sample.t;
        let mib = MIB as f64;
        self.trace.push(t, "alloc_mib", "flush", sample.flush / mib);
        self.trace.push(t, "alloc_mib", "l0", sample.l0 / mib);
        self.trace.push(t, "alloc_mib", "high", sample.high / mib);
        self.trace.push(t, "foreground_mib", self.mode.as_str(), sample.foreground / mib);
        self.allocations.push(sample);
    }

    fn run(mut self) -> Result<LsmRun, SimError> {
        for c in 0..self.cfg.client_threads {
            self.next_arrival(c);
        }
        let end = nanos(self.cfg.duration);
        self.q.schedule(end, Ev::End);
        if self.cp.is_some() {
            self.q.schedule(nanos(self.cfg.loop_interval), Ev::Tick);
        }
        self.schedule_compactions()?;
        loop {
            let next_disk = self.disk.next_completion();
            let next_ev = self.q.peek_time().expect("end event pending");
            if let Some(t) = next_disk.filter(|t| *t <= next_ev) {
                self.q.advance_to(t);
                for c in self.disk.complete_at(t) {
                    self.io_done(c.tag, t)?;
                }
                continue;
            }
            let (now, ev) = self.q.pop().expect("event");
            match ev {
                Ev::End => break,
                Ev::Arrival(c) => {
                    let op = if self.ops_rng.gen_bool(self.cfg.read_fraction) {
                        Op::Get { from_disk: true }
                    } else {
                        Op::Put
                    };
                    self.clients[c].backlog.push_back((now, op));
                    self.next_arrival(c);
                    self.start_next(c)?;
                }
                Ev::OpDone(c) => self.op_done(c)?,
                Ev::Admitted(io) => {
                    self.disk.submit(now, Self::requester(io.owner), io.kind, io.size, io)?;
                }
                Ev::Tick => {
                    self.tick();
                    self.q.schedule(now + nanos(self.cfg.loop_interval), Ev::Tick);
                }
            }
        }
        if let Some(s) = self.blocked_since.take() {
            self.stall_time += self.q.now() - s;
        }
        self.finish()
    }

    fn finish(mut self) -> Result<LsmRun, SimError> {
        let name = self.mode.as_str();
        for (sec, lats) in std::mem::take(&mut self.per_second) {
            let mut l = lats;
            let n = l.len();
            let p99 = percentile(&mut l, 0.99).unwrap_or(0);
            self.trace.push(sec as f64, "throughput", name, n as f64);
            self.trace.push(sec as f64, "p99_ms", name, p99 as f64 / 1e6);
        }
        let mut lat = std::mem::take(&mut self.latencies);
        let ops = lat.len() as u64;
        let p50 = percentile(&mut lat, 0.5).unwrap_or(0);
        let p99 = percentile(&mut lat, 0.99).unwrap_or(0);
        let p999 = percentile(&mut lat, 0.999).unwrap_or(0);
        let max_latency = lat.last().copied().unwrap_or(0);
        if let Some(st) = &self.stage {
            st.shutdown();
        }
        Ok(LsmRun {
            mode: self.mode,
            duration: self.cfg.duration,
            ops,
            reads: self.reads,
            writes: self.writes,
            p50,
            p99,
            p999,
            max_latency,
            stall_time: secs(self.stall_time),
            stall_episodes: self.stall_episodes,
            flushes: self.flushes,
            l0_compactions: self.l0_jobs,
            high_compactions: self.high_jobs,
            high_backlog_end: self.high_queue.len()
                + self.compactors.iter().flatten().filter(|j| j.kind == JobKind::High).count(),
            allocations: self.allocations,
            events: self.events,
            trace: self.trace,
        })
    }
}

pub fn run_lsm_experiment(cfg: &LsmSimConfig, mode: LsmMode) -> Result<LsmRun, SimError> {
    cfg.validate()?;
    let clock = Arc::new(ManualClock::driven());
    let (stage, cp) = match mode {
        LsmMode::Baseline => (None, None),
        LsmMode::PaioTailLatency => {
            let stage = Stage::with_clock(StageConfig::new("kvs"), clock.clone())
                .map_err(|e| SimError::Stage(e.to_string()))?;
            let mut cp = ControlPlane::new(Box::new(TailLatencyPolicy::new(TailLatencyConfig {
                kvs_bandwidth: cfg.kvs_bandwidth,
                min_bandwidth: cfg.min_bandwidth,
            })));
            cp.register(Box::new(LocalLink(stage.clone())))?;
            (Some(stage), Some(cp))
        }
    };
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clients = (0..cfg.client_threads)
        .map(|_| Client { arrivals: ChaCha8Rng::seed_from_u64(seeder.gen()), backlog: VecDeque::new(), current: None })
        .collect();
    let ops_rng = ChaCha8Rng::seed_from_u64(seeder.gen());
    let spawn_rng = ChaCha8Rng::seed_from_u64(seeder.gen());
    let backlog_job = cfg.compaction_amplification * cfg.l0_compaction_trigger as f64 * cfg.memtable_size as f64;
    let sim = Sim {
        cfg,
        mode,
        q: EventQueue::new(),
        disk: SimDisk::new(cfg.kvs_bandwidth),
        clock,
        stage,
        cp,
        clients,
        ops_rng,
        spawn_rng,
        memtable: 0,
        memtable_full: false,
        flush: FlushState::Idle,
        flush_left: 0,
        l0_files: 0,
        l0_running: false,
        high_queue: std::iter::repeat(backlog_job).take(cfg.initial_backlog).collect(),
        compactors: vec![None; cfg.compaction_threads],
        stalled: VecDeque::new(),
        blocked_since: None,
        latencies: Vec::new(),
        per_second: BTreeMap::new(),
        reads: 0,
        writes: 0,
        stall_time: 0,
        stall_episodes: 0,
        flushes: 0,
        l0_jobs: 0,
        high_jobs: 0,
        events: Vec::new(),
        fg_bytes: 0,
        allocations: Vec::new(),
        trace: Trace::new(),
    };
    sim.run()
}

/// Default desk configuration.
pub fn desk() -> LsmSimConfig {
    LsmSimConfig::desk(DESK_SCALE)
}
