//! Training jobs sharing one disk, each reading its dataset for a number of
//! epochs through a single read workflow.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sds_core::control::{ControlPlane, FairSharePolicy, LocalLink};
use sds_core::num::MIB;
use sds_core::stage::{Stage, StageConfig};
use sds_core::{Context, ManualClock, Nanos, Request, RequestContext, RequestType};

use crate::des::EventQueue;
use crate::disk::{IoKind, SimDisk};
use crate::output::{Manifest, Trace};
use crate::{nanos, secs, SimError};

#[derive(Debug, Clone, PartialEq)]
pub struct TenantSpec {
    pub name: String,
    /// Bandwidth goal in bytes per second.
    pub demand: f64,
    pub epochs: u32,
    /// Seconds after the start of the run.
    pub arrival: f64,
    pub dataset_bytes: u64,
}

impl TenantSpec {
    pub fn total_bytes(&self) -> u64 {
        self.dataset_bytes * self.epochs as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TenantSimConfig {
    pub instances: Vec<TenantSpec>,
    /// Budget the control plane divides.
    pub max_bandwidth: f64,
    pub disk_bandwidth: f64,
    pub loop_interval: f64,
    pub chunk_size: u64,
    /// Outstanding reads per instance.
    pub queue_depth: usize,
    /// Disk bytes moved per byte read by an instance.
    pub read_amplification: f64,
    pub calibrate: bool,
    pub seed: u64,
}

pub const MAX_CONCURRENT: usize = 4;

impl TenantSimConfig {
    /// Four instances with goals 150/200/300/350 MiB/s on a 1 GiB/s disk,
    /// multiplied by `scale`.
    pub fn desk(scale: f64) -> Self {
        let mib = |m: f64| m * MIB as f64 * scale;
        let specs =
            [(150.0, 6, 0.0, 7500.0), (200.0, 5, 20.0, 10000.0), (300.0, 5, 40.0, 15000.0), (350.0, 4, 60.0, 15000.0)];
        Self {
            instances: specs
                .iter()
                .enumerate()
                .map(|(i, &(d, epochs, arrival, per_epoch))| TenantSpec {
                    name: format!("tenant{}", i + 1),
                    demand: mib(d),
                    epochs,
                    arrival,
                    dataset_bytes: mib(per_epoch) as u64,
                })
                .collect(),
            max_bandwidth: mib(1024.0),
            disk_bandwidth: mib(1024.0),
            loop_interval: 1.0,
            chunk_size: 256 * 1024,
            queue_depth: 4,
            read_amplification: 1.0,
            calibrate: false,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.instances.is_empty() {
            return bad("no instances".into());
        }
        if !(self.max_bandwidth > 0.0 && self.disk_bandwidth > 0.0 && self.loop_interval > 0.0) {
            return bad("bandwidths and loop interval must be positive".into());
        }
        if self.chunk_size == 0 || self.queue_depth == 0 || self.read_amplification <= 0.0 {
            return bad("chunk size, queue depth and amplification must be positive".into());
        }
        for s in &self.instances {
            if s.demand <= 0.0 || s.epochs == 0 || s.dataset_bytes == 0 || s.arrival < 0.0 {
                return bad(format!("instance `{}` has a non-positive parameter", s.name));
            }
        }
        let mut names: Vec<&str> = self.instances.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.instances.len() {
            return bad("instance names must be unique".into());
        }
        if self.instances.len() > MAX_CONCURRENT {
            return bad(format!("at most {MAX_CONCURRENT} instances"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TenantMode {
    /// Raw fair sharing of the disk.
    Baseline,
    /// A fixed limiter at each instance's demand.
    StaticLimit,
    /// Limiters driven by the fair-share control loop.
    Paio,
}

impl TenantMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TenantMode::Baseline => "baseline",
            TenantMode::StaticLimit => "static_limit",
            TenantMode::Paio => "paio",
        }
    }
}

impl std::str::FromStr for TenantMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "static_limit" | "static" | "blkio" => Ok(Self::StaticLimit),
            "paio" | "paio_fair_share" => Ok(Self::Paio),
            _ => Err(SimError::Config(format!("unknown tenant mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub name: String,
    pub demand: f64,
    pub arrival: f64,
    pub departure: f64,
    pub bytes: u64,
    /// `(completion time, bytes)` of every read.
    pub completions: Vec<(f64, u64)>,
}

impl InstanceResult {
    pub fn active_secs(&self) -> f64 {
        self.departure - self.arrival
    }

    pub fn mean_bandwidth(&self) -> f64 {
        self.bytes as f64 / self.active_secs()
    }

    /// Bytes per second completed in `[from, to)`.
    pub fn rate_between(&self, from: f64, to: f64) -> f64 {
        let bytes: u64 = self.completions.iter().filter(|(t, _)| *t >= from && *t < to).map(|(_, b)| b).sum();
        bytes as f64 / (to - from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Start,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub index: usize,
    pub t: f64,
    pub instance: usize,
    pub kind: PhaseKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TenantRun {
    pub mode: TenantMode,
    pub loop_interval: f64,
    pub max_bandwidth: f64,
    pub instances: Vec<InstanceResult>,
    pub phases: Vec<Phase>,
    pub end: f64,
    /// Bytes per second completed by all instances in each 1 s bin.
    pub total_per_second: Vec<f64>,
    pub trace: Trace,
}

/// How a survivor's rate changed around a departure.
#[derive(Debug, Clone, PartialEq)]
pub struct DepartureResponse {
    pub departed: String,
    pub survivor: String,
    pub at: f64,
    pub before: f64,
    pub after: f64,
}

impl DepartureResponse {
    pub fn rose(&self) -> bool {
        self.after > self.before
    }
}

impl TenantRun {
    pub fn instance(&self, name: &str) -> Option<&InstanceResult> {
        self.instances.iter().find(|i| i.name == name)
    }

    /// For every departure, compares each survivor's rate over the loop
    /// interval before it with the rate over the second loop interval after
    /// it.
    pub fn departure_responses(&self) -> Vec<DepartureResponse> {
        let l = self.loop_interval;
        let mut out = Vec::new();
        for d in &self.instances {
            for s in &self.instances {
                let alive = s.arrival <= d.departure - l && s.departure > d.departure + 2.0 * l;
                if s.name == d.name || !alive {
                    continue;
                }
                out.push(DepartureResponse {
                    departed: d.name.clone(),
                    survivor: s.name.clone(),
                    at: d.departure,
                    before: s.rate_between(d.departure - l, d.departure),
                    after: s.rate_between(d.departure + l, d.departure + 2.0 * l),
                });
            }
        }
        out
    }

    pub fn manifest(&self, cfg: &TenantSimConfig) -> Manifest {
        let mut m = Manifest::new();
        m.set("experiment", "tenants")
            .set("mode", self.mode.as_str())
            .set("seed", cfg.seed)
            .set("max_bandwidth", cfg.max_bandwidth)
            .set("disk_bandwidth", cfg.disk_bandwidth)
            .set("loop_interval_s", cfg.loop_interval)
            .set("chunk_size", cfg.chunk_size)
            .set("queue_depth", cfg.queue_depth)
            .set("read_amplification", cfg.read_amplification)
            .set("calibrate", cfg.calibrate)
            .set("end_s", self.end);
        for (s, r) in cfg.instances.iter().zip(&self.instances) {
            m.set(&format!("{}.demand", s.name), s.demand)
                .set(&format!("{}.epochs", s.name), s.epochs)
                .set(&format!("{}.arrival_s", s.name), s.arrival)
                .set(&format!("{}.dataset_bytes", s.name), s.dataset_bytes)
                .set(&format!("{}.departure_s", s.name), r.departure)
                .set(&format!("{}.mean_bandwidth", s.name), r.mean_bandwidth());
        }
        m
    }
}

#[derive(Debug)]
enum Ev {
    Arrive(usize),
    Issue { inst: usize },
    Admitted { inst: usize, size: u64 },
    Tick,
}

struct Instance {
    remaining: u64,
    completed: u64,
    stage: Option<Arc<Stage>>,
    key: Option<u64>,
    departure: Option<Nanos>,
    completions: Vec<(f64, u64)>,
}

pub fn run_tenant_experiment(cfg: &TenantSimConfig, mode: TenantMode) -> Result<TenantRun, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clock = Arc::new(ManualClock::driven());
    let mut disk: SimDisk<usize> = SimDisk::new(cfg.disk_bandwidth);
    let mut cp = ControlPlane::new(Box::new(
        FairSharePolicy::new(cfg.max_bandwidth, cfg.instances.iter().map(|s| (s.name.clone(), s.demand)).collect())
            .with_calibration(cfg.calibrate),
    ));
    if cfg.calibrate {
        cp = cp.with_counters(Box::new(disk.counters()));
    }
    let mut q = EventQueue::new();
    let mut inst: Vec<Instance> = Vec::new();
    for (i, s) in cfg.instances.iter().enumerate() {
        disk.name_requester(i as u32, s.name.clone());
        if cfg.read_amplification != 1.0 {
            disk.set_amplification(i as u32, cfg.read_amplification);
        }
        inst.push(Instance {
            remaining: s.total_bytes(),
            completed: 0,
            stage: None,
            key: None,
            departure: None,
            completions: Vec::new(),
        });
        q.schedule(nanos(s.arrival), Ev::Arrive(i));
    }
    let loop_ns = nanos(cfg.loop_interval);
    if mode == TenantMode::Paio {
        q.schedule(loop_ns, Ev::Tick);
    }
    let mut trace = Trace::new();
    let mut limits: BTreeMap<usize, f64> = BTreeMap::new();

    loop {
        let departed = inst.iter().all(|i| i.departure.is_some());
        if departed {
            break;
        }
        let next_disk = disk.next_completion();
        let next_ev = q.peek_time();
        let disk_first = match (next_disk, next_ev) {
            (Some(d), Some(e)) => d <= e,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => return Err(SimError::Config("simulation stalled with work left".into())),
        };
        if disk_first {
            let t = next_disk.expect("disk time");
            q.advance_to(t);
            for c in disk.complete_at(t) {
                let i = c.tag;
                let me = &mut inst[i];
                me.completed += c.size;
                me.completions.push((secs(t), c.size));
                if me.completed == cfg.instances[i].total_bytes() {
                    me.departure = Some(t);
                    if let Some(key) = me.key.take() {
                        cp.deregister(key);
                    }
                    if let Some(st) = me.stage.take() {
                        st.shutdown();
                    }
                } else {
                    q.schedule(t, Ev::Issue { inst: i });
                }
            }
            continue;
        }
        let (now, ev) = q.pop().expect("event");
        clock.set(now);
        match ev {
            Ev::Arrive(i) => {
                if mode != TenantMode::Baseline {
                    let stage = Stage::with_clock(StageConfig::new(cfg.instances[i].name.clone()), clock.clone())
                        .map_err(|e| SimError::Stage(e.to_string()))?;
                    let key = cp.register(Box::new(LocalLink(stage.clone())))?;
                    limits.insert(i, cfg.instances[i].demand);
                    trace.push(secs(now), "limit", cfg.instances[i].name.clone(), cfg.instances[i].demand / MIB as f64);
                    inst[i].stage = Some(stage);
                    inst[i].key = Some(key);
                }
                for _ in 0..cfg.queue_depth {
                    let jitter = rng.gen_range(0..1_000_000);
                    q.schedule(now + jitter, Ev::Issue { inst: i });
                }
            }
            Ev::Issue { inst: i } => {
                let me = &mut inst[i];
                if me.remaining == 0 {
                    continue;
                }
                let size = me.remaining.min(cfg.chunk_size);
                me.remaining -= size;
                let wait = match &me.stage {
                    Some(st) => {
                        let ctx = Context::new(i as u64 + 1, RequestType::Read, size, RequestContext::NONE);
                        let r = st.enforce(Request::metadata_only(ctx)).map_err(|e| SimError::Stage(e.detail))?;
                        sds_core::clock::nanos_from_duration(r.wait_applied)
                    }
                    None => 0,
                };
                q.schedule(now + wait, Ev::Admitted { inst: i, size });
            }
            Ev::Admitted { inst: i, size } => {
                disk.submit(now, i as u32, IoKind::Read, size, i)?;
            }
            Ev::Tick => {
                let report = cp.iterate();
                for (key, rule) in &report.sent {
                    if let Some(i) = inst.iter().position(|s| s.key == Some(*key)) {
                        if let Some(rate) = rule.body_rate() {
                            limits.insert(i, rate);
                            trace.push(secs(now), "limit", cfg.instances[i].name.clone(), rate / MIB as f64);
                        }
                    }
                }
                q.schedule(now + loop_ns, Ev::Tick);
            }
        }
    }

    let end = inst.iter().filter_map(|i| i.departure).max().unwrap_or(0);
    let bins = (secs(end).ceil() as usize).max(1);
    let mut total = vec![0.0; bins];
    let mut results = Vec::new();
    for (s, me) in cfg.instances.iter().zip(inst) {
        let mut per = vec![0.0; bins];
        for &(t, b) in &me.completions {
            let k = (t as usize).min(bins - 1);
            per[k] += b as f64;
            total[k] += b as f64;
        }
        let first = s.arrival as usize;
        let last = secs(me.departure.expect("departed")).ceil() as usize;
        for (k, v) in per.iter().enumerate().take(last.min(bins)).skip(first) {
            trace.push(k as f64, "bandwidth", s.name.clone(), v / MIB as f64);
        }
        results.push(InstanceResult {
            name: s.name.clone(),
            demand: s.demand,
            arrival: s.arrival,
            departure: secs(me.departure.expect("departed")),
            bytes: me.completed,
            completions: me.completions,
        });
    }
    for (k, v) in total.iter().enumerate() {
        trace.push(k as f64, "bandwidth", "total", v / MIB as f64);
    }
    let phases = phases_of(&results);
    for p in &phases {
        trace.push(p.t, "phase", p.index.to_string(), (p.instance + 1) as f64);
    }
    Ok(TenantRun {
        mode,
        loop_interval: cfg.loop_interval,
        max_bandwidth: cfg.max_bandwidth,
        instances: results,
        phases,
        end: secs(end),
        total_per_second: total,
        trace,
    })
}

/// Every start and completion except the final one, which ends the run.
fn phases_of(results: &[InstanceResult]) -> Vec<Phase> {
    let mut marks: Vec<(f64, usize, PhaseKind)> = Vec::new();
    for (i, r) in results.iter().enumerate() {
        marks.push((r.arrival, i, PhaseKind::Start));
        marks.push((r.departure, i, PhaseKind::Complete));
    }
    marks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    marks.pop();
    marks.into_iter().enumerate().map(|(k, (t, instance, kind))| Phase { index: k + 1, t, instance, kind }).collect()
}

trait RuleRate {
    fn body_rate(&self) -> Option<f64>;
}

impl RuleRate for sds_core::Rule {
    fn body_rate(&self) -> Option<f64> {
        match &self.body {
            sds_core::RuleBody::Enforcement(e) => e.state.get("rate"),
            _ => None,
        }
    }
}
