//! Feedback control plane: registers stages, collects their statistics
//! every loop interval and pushes retuned enforcement rules back.

mod algorithms;
mod config;
mod link;
mod os;
mod policy;

pub use algorithms::{
    fair_share_step, tail_latency_step, TailLatencyAllocation, TailLatencyConfig, TailLatencyTelemetry,
};
pub use config::{ConfigError, PolicyConfig, PolicyKind, DEFAULT_LOOP_INTERVAL};
pub use link::{LinkError, LocalLink, RemoteLink, StageLink, REPLY_TIMEOUT};
pub use os::{parse_proc_io, CounterError, IoCounterSource, OsIoCounters, ProcIoCounters};
pub use policy::{
    lsm_layout, Calibrator, FairSharePolicy, Policy, StageView, TailLatencyPolicy, TENANT_CHANNEL, TENANT_DRL,
};

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufWriter};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::nanos_to_secs;
use crate::stage::{StageInfo, StageStats};
use crate::types::{ObjectId, ObjectState, Rule, RuleBody};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("control socket {path}: {source}")]
    Socket { path: PathBuf, source: io::Error },
    #[error("telemetry log: {0}")]
    Telemetry(#[from] csv::Error),
    #[error("registration failed: {0}")]
    Register(#[from] LinkError),
}

struct Registered {
    link: Box<dyn StageLink>,
    info: StageInfo,
    next_rule: u64,
    last_counters: Option<OsIoCounters>,
    last_sent: HashMap<ObjectId, ObjectState>,
}

impl Registered {
    fn send(&mut self, body: RuleBody) -> Result<(), LinkError> {
        let rule = Rule::new(self.next_rule, body);
        self.next_rule += 1;
        self.link.apply(&rule)
    }
}

/// Per-stage outcome of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub key: u64,
    pub instance: String,
    pub name: String,
    pub bytes: u64,
    pub window_secs: f64,
    pub os_bytes: Option<u64>,
}

impl StageReport {
    pub fn throughput(&self) -> f64 {
        if self.window_secs > 0.0 {
            self.bytes as f64 / self.window_secs
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationReport {
    pub stages: Vec<StageReport>,
    /// Rules pushed, with the stage they went to.
    pub sent: Vec<(u64, Rule)>,
    /// Rules not pushed because the stage already had that state.
    pub unchanged: usize,
    pub rejected: Vec<(u64, String)>,
    /// Stages dropped because their link failed.
    pub dropped: Vec<String>,
}

/// CSV log of collected statistics, one row per stage and channel.
pub struct TelemetryLog {
    out: csv::Writer<Box<dyn io::Write + Send>>,
    origin: Instant,
}

impl TelemetryLog {
    pub const HEADER: [&'static str; 6] = ["timestamp", "instance", "channel", "bytes", "ops", "throughput"];

    pub fn create(path: &Path) -> Result<Self, ControlError> {
        let f = File::create(path).map_err(csv::Error::from)?;
        Self::to_writer(Box::new(BufWriter::new(f)))
    }

    pub fn to_writer(w: Box<dyn io::Write + Send>) -> Result<Self, ControlError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::HEADER)?;
        Ok(Self { out, origin: Instant::now() })
    }

    pub fn record(&mut self, instance: &str, stats: &StageStats) -> Result<(), ControlError> {
        let t = self.origin.elapsed().as_secs_f64();
        for w in &stats.channels {
            let secs = nanos_to_secs(w.window_end.saturating_sub(w.stats.window_start));
            let tput = if secs > 0.0 { w.stats.window_bytes as f64 / secs } else { 0.0 };
            self.out.write_record([
                format!("{t:.3}"),
                instance.to_string(),
                w.channel.to_string(),
                w.stats.window_bytes.to_string(),
                w.stats.window_ops.to_string(),
                format!("{tput:.1}"),
            ])?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

impl std::fmt::Debug for TelemetryLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TelemetryLog").finish_non_exhaustive()
    }
}

fn window_secs(stats: &StageStats) -> f64 {
    stats.channels.iter().map(|w| nanos_to_secs(w.window_end.saturating_sub(w.stats.window_start))).fold(0.0, f64::max)
}

pub struct ControlPlane {
    policy: Box<dyn Policy>,
    stages: BTreeMap<u64, Registered>,
    next_key: u64,
    counters: Option<Box<dyn IoCounterSource>>,
    telemetry: Option<TelemetryLog>,
}

impl ControlPlane {
    pub fn new(policy: Box<dyn Policy>) -> Self {
        Self { policy, stages: BTreeMap::new(), next_key: 1, counters: None, telemetry: None }
    }

    /// Builds the policy a configuration file asks for.
    pub fn from_config(cfg: &PolicyConfig) -> Result<Self, ControlError> {
        cfg.validate()?;
        let policy: Box<dyn Policy> = match cfg.policy {
            PolicyKind::TailLatency => Box::new(TailLatencyPolicy::new(TailLatencyConfig {
                kvs_bandwidth: cfg.kvs_bandwidth,
                min_bandwidth: cfg.min_bandwidth,
            })),
            PolicyKind::FairShare => Box::new(
                FairSharePolicy::new(cfg.max_bandwidth, cfg.demands.iter().map(|(k, v)| (k.clone(), *v)).collect())
                    .with_calibration(cfg.calibrate),
            ),
        };
        let mut cp = Self::new(policy);
        if cfg.calibrate {
            cp.counters = Some(Box::new(ProcIoCounters));
        }
        if let Some(path) = &cfg.telemetry {
            cp.telemetry = Some(TelemetryLog::create(path)?);
        }
        Ok(cp)
    }

    pub fn with_counters(mut self, src: Box<dyn IoCounterSource>) -> Self {
        self.counters = Some(src);
        self
    }

    pub fn with_telemetry(mut self, log: TelemetryLog) -> Self {
        self.telemetry = Some(log);
        self
    }

    pub fn policy_name(&self) -> &'static str {
        self.policy.name()
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stage_infos(&self) -> Vec<(u64, StageInfo)> {
        self.stages.iter().map(|(k, r)| (*k, r.info.clone())).collect()
    }

    /// Asks the stage who it is and installs the policy's topology.
    /// Returns the key the stage is tracked under.
    pub fn register(&mut self, mut link: Box<dyn StageLink>) -> Result<u64, ControlError> {
        let info = link.stage_info()?;
        let key = self.next_key;
        self.next_key += 1;
        let mut reg = Registered { link, info, next_rule: 1, last_counters: None, last_sent: HashMap::new() };
        for body in self.policy.setup(&reg.info) {
            if let RuleBody::Housekeeping(crate::types::HousekeepingRule::CreateObject { object, state, .. }) = &body {
                reg.last_sent.insert(*object, state.clone());
            }
            reg.send(body)?;
        }
        if let Some(src) = &self.counters {
            reg.last_counters = src.counters(&reg.info).ok();
        }
        log::info!("registered stage `{}` ({}) as {key}", reg.info.name, reg.info.instance_id);
        self.stages.insert(key, reg);
        Ok(key)
    }

    pub fn deregister(&mut self, key: u64) -> Option<StageInfo> {
        let reg = self.stages.remove(&key)?;
        self.policy.forget(key);
        log::info!("stage `{}` ({}) left", reg.info.name, reg.info.instance_id);
        Some(reg.info)
    }

    /// One feedback round: collect, compute, enforce.
    pub fn iterate(&mut self) -> IterationReport {
        let mut report = IterationReport::default();
        let mut collected: Vec<(u64, StageStats, Option<OsIoCounters>)> = Vec::new();
        let mut dead = Vec::new();
        for (key, reg) in self.stages.iter_mut() {
            match reg.link.collect() {
                Ok(stats) => {
                    let os = self.counters.as_ref().and_then(|src| {
                        let now = src.counters(&reg.info).ok()?;
                        let delta = reg.last_counters.map(|prev| now.since(&prev));
                        reg.last_counters = Some(now);
                        delta
                    });
                    if let Some(log) = &mut self.telemetry {
                        if let Err(e) = log.record(&reg.info.instance_id, &stats) {
                            log::warn!("telemetry: {e}");
                        }
                    }
                    collected.push((*key, stats, os));
                }
                Err(e) => {
                    log::warn!("collect from `{}` failed: {e}", reg.info.instance_id);
                    if e.is_fatal() {
                        dead.push(*key);
                    }
                }
            }
        }
        for key in dead {
            if let Some(info) = self.deregister(key) {
                report.dropped.push(info.instance_id);
            }
        }

        let views: Vec<StageView<'_>> = collected
            .iter()
            .map(|(key, stats, os)| StageView {
                key: *key,
                info: &self.stages[key].info,
                stats,
                os: *os,
                window_secs: window_secs(stats),
            })
            .collect();
        report.stages = views
            .iter()
            .map(|v| StageReport {
                key: v.key,
                instance: v.info.instance_id.clone(),
                name: v.info.name.clone(),
                bytes: v.stats.total_bytes(),
                window_secs: v.window_secs,
                os_bytes: v.os.map(|c| c.total()),
            })
            .collect();
        let rules = self.policy.step(&views);
        drop(views);

        let mut dead = Vec::new();
        for (key, rule) in rules {
            let Some(reg) = self.stages.get_mut(&key) else { continue };
            if reg.last_sent.get(&rule.object) == Some(&rule.state) {
                report.unchanged += 1;
                continue;
            }
            let id = reg.next_rule;
            match reg.send(rule.clone().into()) {
                Ok(()) => {
                    reg.last_sent.insert(rule.object, rule.state.clone());
                    report.sent.push((key, Rule::new(id, RuleBody::from(rule))));
                }
                Err(e) if e.is_fatal() => {
                    log::warn!("push to `{}` failed: {e}", reg.info.instance_id);
                    dead.push(key);
                }
                Err(e) => report.rejected.push((key, e.to_string())),
            }
        }
        dead.dedup();
        for key in dead {
            if let Some(info) = self.deregister(key) {
                report.dropped.push(info.instance_id);
            }
        }
        if let Some(log) = &mut self.telemetry {
            if let Err(e) = log.flush() {
                log::warn!("telemetry flush: {e}");
            }
        }
        report
    }

    pub fn flush(&mut self) -> io::Result<()> {
        match &mut self.telemetry {
            Some(log) => log.flush(),
            None => Ok(()),
        }
    }
}

impl std::fmt::Debug for ControlPlane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPlane").field("policy", &self.policy.name()).field("stages", &self.stages.len()).finish()
    }
}

/// Binds the control socket. A leftover socket file nobody listens on is
/// replaced; a live one is an error.
pub fn bind_socket(path: &Path) -> Result<UnixListener, ControlError> {
    let err = |source| ControlError::Socket { path: path.to_path_buf(), source };
    if path.exists() {
        if UnixStream::connect(path).is_ok() {
            return Err(err(io::Error::new(io::ErrorKind::AddrInUse, "another control plane is listening")));
        }
        std::fs::remove_file(path).map_err(err)?;
    }
    UnixListener::bind(path).map_err(err)
}

pub const DEFAULT_SOCKET: &str = "/tmp/sds-control.sock";

/// Runs the control loop on a Unix socket until `stop` is set. `ready`
/// receives the socket path once it is bound.
pub fn serve(cfg: &PolicyConfig, stop: &AtomicBool, ready: Option<Sender<PathBuf>>) -> Result<(), ControlError> {
    let path = cfg.socket.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_SOCKET));
    let listener = bind_socket(&path)?;
    listener.set_nonblocking(true).map_err(|source| ControlError::Socket { path: path.clone(), source })?;
    let mut cp = ControlPlane::from_config(cfg)?;
    log::info!("{} control plane listening on {}", cp.policy_name(), path.display());
    if let Some(tx) = ready {
        let _ = tx.send(path.clone());
    }
    let slice = Duration::from_millis(10);
    let mut next = Instant::now() + cfg.loop_interval;
    while !stop.load(Ordering::Relaxed) {
        loop {
            match listener.accept() {
                Ok((stream, _)) => {
                    let link = match RemoteLink::new(stream) {
                        Ok(l) => l,
                        Err(e) => {
                            log::warn!("accept: {e}");
                            continue;
                        }
                    };
                    if let Err(e) = cp.register(Box::new(link)) {
                        log::warn!("{e}");
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) => {
                    log::warn!("accept: {e}");
                    break;
                }
            }
        }
        let now = Instant::now();
        if now >= next {
            let r = cp.iterate();
            log::debug!("iteration: {} stages, {} rules, {} unchanged", r.stages.len(), r.sent.len(), r.unchanged);
            next += cfg.loop_interval;
            if next < now {
                next = now + cfg.loop_interval;
            }
        } else {
            std::thread::sleep(slice.min(next - now));
        }
    }
    let _ = cp.flush();
    let _ = std::fs::remove_file(&path);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::stage::{Stage, StageConfig};
    use crate::types::{Context, Request, RequestContext, RequestType};
    use std::sync::Arc;

    fn tenant(name: &str, clock: &Arc<ManualClock>) -> Arc<Stage> {
        Stage::with_clock(StageConfig::new(name), clock.clone()).unwrap()
    }

    #[test]
    fn fair_share_rules_follow_membership() {
        let clock = Arc::new(ManualClock::driven());
        let demands = [("a".to_string(), 100.0), ("b".to_string(), 300.0)].into_iter().collect();
        let mut cp = ControlPlane::new(Box::new(FairSharePolicy::new(1000.0, demands)));
        let a = tenant("a", &clock);
        let b = tenant("b", &clock);
        let ka = cp.register(Box::new(LocalLink(a.clone()))).unwrap();
        assert_eq!(a.object_state(TENANT_DRL).unwrap().get("rate"), Some(100.0));
        cp.register(Box::new(LocalLink(b.clone()))).unwrap();
        clock.advance(1_000_000_000);
        let r = cp.iterate();
        assert_eq!(r.sent.len(), 2);
        assert_eq!(a.object_state(TENANT_DRL).unwrap().get("rate"), Some(400.0));
        assert_eq!(b.object_state(TENANT_DRL).unwrap().get("rate"), Some(600.0));
        let r = cp.iterate();
        assert_eq!((r.sent.len(), r.unchanged), (0, 2));
        cp.deregister(ka);
        cp.iterate();
        assert_eq!(b.object_state(TENANT_DRL).unwrap().get("rate"), Some(1000.0));
    }

    #[test]
    fn unmanaged_stage_passes_through() {
        let clock = Arc::new(ManualClock::driven());
        let mut cp = ControlPlane::new(Box::new(FairSharePolicy::new(1000.0, HashMap::new())));
        let s = tenant("nobody", &clock);
        cp.register(Box::new(LocalLink(s.clone()))).unwrap();
        assert!(cp.iterate().sent.is_empty());
        let ctx = Context::new(1, RequestType::Write, 10, RequestContext::NONE);
        assert!(s.enforce(Request::metadata_only(ctx)).is_ok());
    }

    #[test]
    fn telemetry_rows_per_channel() {
        let clock = Arc::new(ManualClock::driven());
        let demands = [("a".to_string(), 100.0)].into_iter().collect();
        let buf = Arc::new(std::sync::Mutex::new(Vec::new()));
        struct Shared(Arc<std::sync::Mutex<Vec<u8>>>);
        impl io::Write for Shared {
            fn write(&mut self, b: &[u8]) -> io::Result<usize> {
                self.0.lock().unwrap().write(b)
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let log = TelemetryLog::to_writer(Box::new(Shared(buf.clone()))).unwrap();
        let mut cp = ControlPlane::new(Box::new(FairSharePolicy::new(1000.0, demands))).with_telemetry(log);
        let a = tenant("a", &clock);
        cp.register(Box::new(LocalLink(a.clone()))).unwrap();
        let ctx = Context::new(1, RequestType::Write, 50, RequestContext::NONE);
        a.enforce(Request::metadata_only(ctx)).unwrap();
        clock.advance(1_000_000_000);
        let r = cp.iterate();
        assert_eq!(r.stages[0].bytes, 50);
        let text = String::from_utf8(buf.lock().unwrap().clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "timestamp,instance,channel,bytes,ops,throughput");
        assert!(lines[1].ends_with(",1,50,1,50.0"), "{}", lines[1]);
    }

    #[test]
    fn live_socket_is_not_stolen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sock");
        let l = bind_socket(&path).unwrap();
        assert!(bind_socket(&path).is_err());
        drop(l);
        // stale file left behind
        assert!(bind_socket(&path).is_ok());
    }
}
