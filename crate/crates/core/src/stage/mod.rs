//! The embeddable data plane stage.

mod agent;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;
use std::{env, fs, io, process};

use arc_swap::ArcSwap;
use thiserror::Error;

use crate::clock::{nanos_to_secs, Clock, Nanos, SystemClock};
use crate::differentiation::RoutingError;
use crate::differentiation::RoutingTable;
use crate::enforcement::{obj_init, Channel, ChannelError, ChannelWindow, ObjectError, ObjectSet};
use crate::protocol::{self, ProtocolError};
use crate::types::{
    ChannelId, DifferentiationRule, EnforcedResult, EnforcementRule, ErrorCode, HousekeepingRule, ObjectId,
    ObjectState, Request, RequestContext, Rule, RuleBody, RuleId, Status, WorkflowId,
};

pub use agent::AgentStatus;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("channel {0} already exists")]
    DuplicateChannel(ChannelId),
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
    #[error("object {0} already exists")]
    DuplicateObject(ObjectId),
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("object {object} is not in channel {channel}")]
    ObjectNotInChannel { channel: ChannelId, object: ObjectId },
    #[error("rule {got} does not follow rule {last}")]
    OutOfOrder { last: RuleId, got: RuleId },
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("object {object}: {source}")]
    Object { object: ObjectId, source: ObjectError },
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("rule file {path}: {source}")]
    RulesIo { path: PathBuf, source: io::Error },
    #[error("rule file line {line}: {source}")]
    RulesParse { line: usize, source: ProtocolError },
    #[error("rule file line {line}: {source}")]
    RulesApply { line: usize, source: RuleError },
    #[error("stage agent: {0}")]
    Agent(io::Error),
}

/// A request the stage could not enforce, handed back to the caller.
#[derive(Debug, Error)]
#[error("{code} error: {detail}")]
pub struct EnforceError {
    pub code: ErrorCode,
    pub detail: String,
    pub request: Request,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub name: String,
    /// Control plane socket. Without one the stage runs standalone.
    pub control_endpoint: Option<PathBuf>,
    /// Forward requests unenforced instead of failing them.
    pub fail_open: bool,
    /// Installed as the default route at creation.
    pub default_channel: Option<ChannelId>,
    /// Rules applied at creation.
    pub rules_file: Option<PathBuf>,
}

impl StageConfig {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), control_endpoint: None, fail_open: false, default_channel: None, rules_file: None }
    }

    pub fn with_endpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.control_endpoint = Some(path.into());
        self
    }

    /// Reads `SDS_STAGE_NAME`, `SDS_CONTROL_SOCKET`, `SDS_FAIL_OPEN`,
    /// `SDS_DEFAULT_CHANNEL` and `SDS_RULES_FILE`.
    pub fn from_env() -> Result<Self, StageError> {
        Self::from_lookup(|k| env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, StageError> {
        let mut cfg = Self::new(get("SDS_STAGE_NAME").unwrap_or_else(|| "stage".to_string()));
        cfg.control_endpoint = get("SDS_CONTROL_SOCKET").filter(|s| !s.is_empty()).map(PathBuf::from);
        cfg.rules_file = get("SDS_RULES_FILE").filter(|s| !s.is_empty()).map(PathBuf::from);
        if let Some(v) = get("SDS_FAIL_OPEN") {
            cfg.fail_open = match v.as_str() {
                "1" | "true" | "yes" => true,
                "0" | "false" | "no" | "" => false,
                _ => return Err(StageError::Config(format!("SDS_FAIL_OPEN=`{v}`"))),
            };
        }
        if let Some(v) = get("SDS_DEFAULT_CHANNEL").filter(|s| !s.is_empty()) {
            cfg.default_channel =
                Some(v.parse().map_err(|_| StageError::Config(format!("SDS_DEFAULT_CHANNEL=`{v}`")))?);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageInfo {
    pub pid: u32,
    pub name: String,
    pub instance_id: String,
    /// Distinct workflows that have passed through any channel.
    pub workflows: u64,
}

/// Windowed statistics of every channel since the previous collect.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageStats {
    pub collected_at: Nanos,
    pub channels: Vec<ChannelWindow>,
}

/// One flow of a collect, flattened.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatEntry {
    pub channel: ChannelId,
    pub workflow: WorkflowId,
    pub context: RequestContext,
    pub bytes: u64,
    pub ops: u64,
    pub window_start: Nanos,
    pub window_end: Nanos,
}

impl StatEntry {
    /// Mean bytes per second over the window.
    pub fn throughput(&self) -> f64 {
        let len = self.window_end.saturating_sub(self.window_start);
        if len == 0 {
            0.0
        } else {
            self.bytes as f64 / nanos_to_secs(len)
        }
    }
}

impl StageStats {
    pub fn entries(&self) -> impl Iterator<Item = StatEntry> + '_ {
        self.channels.iter().flat_map(|w| {
            w.flows.iter().map(move |f| StatEntry {
                channel: w.channel,
                workflow: f.workflow,
                context: f.context,
                bytes: f.bytes,
                ops: f.ops,
                window_start: w.stats.window_start,
                window_end: w.window_end,
            })
        })
    }

    pub fn total_bytes(&self) -> u64 {
        self.channels.iter().map(|w| w.stats.window_bytes).sum()
    }

    /// Bytes per request context over all channels.
    pub fn bytes_by_context(&self) -> HashMap<RequestContext, u64> {
        let mut out = HashMap::new();
        for e in self.entries() {
            *out.entry(e.context).or_insert(0) += e.bytes;
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Slot {
    channel: Arc<Channel>,
    objects: ObjectSet,
}

/// An immutable version of the stage's channels and routing.
#[derive(Debug, Clone, Default)]
struct Topology {
    table: RoutingTable,
    channels: BTreeMap<ChannelId, Slot>,
    owners: HashMap<ObjectId, ChannelId>,
}

static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

/// A data plane stage.
///
/// `enforce` may be called from any number of threads. Rules are applied one
/// at a time; each produces a new topology that is swapped in whole, so
/// requests see either the old or the new configuration.
#[derive(Debug)]
pub struct Stage {
    config: StageConfig,
    instance_id: String,
    clock: Arc<dyn Clock>,
    topology: ArcSwap<Topology>,
    writer: Mutex<()>,
    retired: Mutex<Vec<ChannelWindow>>,
    stop: Arc<AtomicBool>,
    agent: Mutex<Option<JoinHandle<()>>>,
    agent_status: Arc<Mutex<AgentStatus>>,
}

impl Stage {
    pub fn create(config: StageConfig) -> Result<Arc<Stage>, StageError> {
        Self::with_clock(config, Arc::new(SystemClock::new()))
    }

    pub fn with_clock(config: StageConfig, clock: Arc<dyn Clock>) -> Result<Arc<Stage>, StageError> {
        if config.name.is_empty() || config.name.contains(['\t', '\n']) {
            return Err(StageError::Config(format!("stage name `{}`", config.name)));
        }
        let n = NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed);
        let stage = Arc::new(Stage {
            instance_id: format!("{}-{}", process::id(), n),
            clock,
            topology: ArcSwap::from_pointee(Topology::default()),
            writer: Mutex::new(()),
            retired: Mutex::new(Vec::new()),
            stop: Arc::new(AtomicBool::new(false)),
            agent: Mutex::new(None),
            agent_status: Arc::new(Mutex::new(AgentStatus::default())),
            config,
        });
        if let Some(ch) = stage.config.default_channel {
            stage
                .mutate(|t| {
                    t.table.set_default_channel(ch);
                    Ok(())
                })
                .expect("setting a default cannot fail");
        }
        if let Some(path) = stage.config.rules_file.clone() {
            stage.load_rules(&path)?;
        }
        if let Some(endpoint) = stage.config.control_endpoint.clone() {
            let handle = agent::spawn(Arc::downgrade(&stage), endpoint, stage.stop.clone(), stage.agent_status.clone())
                .map_err(StageError::Agent)?;
            *stage.agent.lock().unwrap() = Some(handle);
        }
        Ok(stage)
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn config(&self) -> &StageConfig {
        &self.config
    }

    pub fn agent_status(&self) -> AgentStatus {
        self.agent_status.lock().unwrap().clone()
    }

    pub fn info(&self) -> StageInfo {
        let topo = self.topology.load();
        let mut seen = HashSet::new();
        for slot in topo.channels.values() {
            seen.extend(slot.channel.workflows());
        }
        StageInfo {
            pid: process::id(),
            name: self.config.name.clone(),
            instance_id: self.instance_id.clone(),
            workflows: seen.len() as u64,
        }
    }

    /// Routes `request` to its channel and enforces it there. An
    /// unconfigured stage passes every request through.
    pub fn enforce(&self, mut request: Request) -> Result<EnforcedResult, EnforceError> {
        let topo = self.topology.load();
        if !topo.table.is_configured() {
            return Ok(EnforcedResult {
                status: Status::Ok,
                payload: request.into_payload(),
                wait_applied: Duration::ZERO,
            });
        }
        let ctx = *request.context();
        let token = topo.table.token(&ctx);
        let outcome = topo.table.select_channel_by_token(token).map_err(ChannelError::from).and_then(|id| {
            let slot = topo.channels.get(&id).ok_or(ChannelError::Routing(RoutingError::MissingChannel(id)))?;
            slot.channel.enforce(&topo.table, token, &slot.objects, &mut request)
        });
        match outcome {
            Ok(wait) => Ok(EnforcedResult { status: Status::Ok, payload: request.into_payload(), wait_applied: wait }),
            Err(e) => {
                let code = match &e {
                    ChannelError::Routing(RoutingError::EmptyChannel(_) | RoutingError::MissingChannel(_)) => {
                        ErrorCode::Configuration
                    }
                    ChannelError::Routing(_) => ErrorCode::Routing,
                    ChannelError::Object { .. } => ErrorCode::Enforcement,
                };
                if self.config.fail_open {
                    log::debug!("stage {}: forwarding unenforced: {e}", self.config.name);
                    Ok(EnforcedResult {
                        status: Status::Unenforced(code),
                        payload: request.into_payload(),
                        wait_applied: Duration::ZERO,
                    })
                } else {
                    Err(EnforceError { code, detail: e.to_string(), request })
                }
            }
        }
    }

    /// Closes every channel's statistics window.
    pub fn collect(&self) -> StageStats {
        let now = self.clock.now();
        let topo = self.topology.load();
        let mut channels: Vec<ChannelWindow> = std::mem::take(&mut *self.retired.lock().unwrap());
        channels.extend(topo.channels.values().map(|s| s.channel.collect(now)));
        StageStats { collected_at: now, channels }
    }

    fn mutate(&self, f: impl FnOnce(&mut Topology) -> Result<(), RuleError>) -> Result<Arc<Topology>, RuleError> {
        let mut next = Topology::clone(&self.topology.load());
        f(&mut next)?;
        let next = Arc::new(next);
        self.topology.store(next.clone());
        Ok(next)
    }

    /// Applies a rule atomically. On error the stage is unchanged.
    pub fn apply_rule(&self, rule: &Rule) -> Result<(), RuleError> {
        match &rule.body {
            RuleBody::Housekeeping(h) => self.apply_housekeeping(h),
            RuleBody::Differentiation(d) => self.apply_differentiation(d),
            RuleBody::Enforcement(e) => self.apply_enforcement(e),
        }
    }

    pub fn apply_housekeeping(&self, rule: &HousekeepingRule) -> Result<(), RuleError> {
        let _w = self.writer.lock().unwrap();
        match rule {
            HousekeepingRule::CreateChannel { channel } => {
                self.mutate(|t| {
                    if t.channels.contains_key(channel) {
                        return Err(RuleError::DuplicateChannel(*channel));
                    }
                    let ch = Arc::new(Channel::new(*channel, self.clock.clone()));
                    t.channels.insert(*channel, Slot { channel: ch, objects: ObjectSet::new() });
                    Ok(())
                })?;
            }
            HousekeepingRule::CreateObject { channel, object, kind, state } => {
                self.mutate(|t| {
                    if t.owners.contains_key(object) {
                        return Err(RuleError::DuplicateObject(*object));
                    }
                    let slot = t.channels.get_mut(channel).ok_or(RuleError::UnknownChannel(*channel))?;
                    let obj = obj_init(*kind, state, self.clock.clone())
                        .map_err(|source| RuleError::Object { object: *object, source })?;
                    slot.objects.push(*object, obj);
                    t.owners.insert(*object, *channel);
                    Ok(())
                })?;
            }
            HousekeepingRule::RemoveChannel { channel } => {
                let mut removed = None;
                self.mutate(|t| {
                    let slot = t.channels.remove(channel).ok_or(RuleError::UnknownChannel(*channel))?;
                    t.owners.retain(|_, c| c != channel);
                    t.table.remove_channel(*channel);
                    removed = Some(slot);
                    Ok(())
                })?;
                let slot = removed.expect("removed slot");
                slot.channel.drain();
                let last = slot.channel.collect(self.clock.now());
                if last.stats.window_ops > 0 {
                    self.retired.lock().unwrap().push(last);
                }
            }
            HousekeepingRule::RemoveObject { channel, object } => {
                let topo = self.mutate(|t| {
                    let slot = t.channels.get_mut(channel).ok_or(RuleError::UnknownChannel(*channel))?;
                    slot.objects
                        .remove(*object)
                        .ok_or(RuleError::ObjectNotInChannel { channel: *channel, object: *object })?;
                    t.owners.remove(object);
                    t.table.remove_object(*channel, *object);
                    Ok(())
                })?;
                topo.channels[channel].channel.drain();
            }
        }
        Ok(())
    }

    pub fn apply_differentiation(&self, rule: &DifferentiationRule) -> Result<(), RuleError> {
        let _w = self.writer.lock().unwrap();
        self.mutate(|t| {
            let has_channel = |c: &ChannelId| {
                if t.channels.contains_key(c) {
                    Ok(())
                } else {
                    Err(RuleError::UnknownChannel(*c))
                }
            };
            let owned = |c: &ChannelId, o: &ObjectId| {
                has_channel(c)?;
                match t.owners.get(o) {
                    Some(owner) if owner == c => Ok(()),
                    Some(_) => Err(RuleError::ObjectNotInChannel { channel: *c, object: *o }),
                    None => Err(RuleError::UnknownObject(*o)),
                }
            };
            let mut table = t.table.clone();
            match rule {
                DifferentiationRule::SetMask(mask) => table.set_mask(*mask)?,
                DifferentiationRule::BindChannel { classifiers, channel } => {
                    has_channel(channel)?;
                    table.bind_channel(*classifiers, *channel)?;
                }
                DifferentiationRule::BindObject { channel, classifiers, object } => {
                    owned(channel, object)?;
                    table.bind_object(*channel, *classifiers, *object)?;
                }
                DifferentiationRule::SetDefaultChannel { channel } => {
                    has_channel(channel)?;
                    table.set_default_channel(*channel);
                }
                DifferentiationRule::SetDefaultObject { channel, object } => {
                    owned(channel, object)?;
                    table.set_default_object(*channel, *object);
                }
            }
            t.table = table;
            Ok(())
        })?;
        Ok(())
    }

    pub fn apply_enforcement(&self, rule: &EnforcementRule) -> Result<(), RuleError> {
        let topo = self.topology.load();
        let obj = topo
            .owners
            .get(&rule.object)
            .and_then(|c| topo.channels[c].objects.get(rule.object))
            .ok_or(RuleError::UnknownObject(rule.object))?;
        obj.configure(&rule.state).map_err(|source| RuleError::Object { object: rule.object, source })
    }

    /// Current state of an enforcement object.
    pub fn object_state(&self, object: ObjectId) -> Option<ObjectState> {
        let topo = self.topology.load();
        let ch = topo.owners.get(&object)?;
        topo.channels[ch].objects.get(object).map(|o| o.state())
    }

    pub fn channel_ids(&self) -> Vec<ChannelId> {
        self.topology.load().channels.keys().copied().collect()
    }

    /// Objects of `channel` in creation order.
    pub fn object_ids(&self, channel: ChannelId) -> Vec<ObjectId> {
        self.topology.load().channels.get(&channel).map(|s| s.objects.ids().to_vec()).unwrap_or_default()
    }

    /// Routing table currently in force.
    pub fn routing(&self) -> RoutingTable {
        self.topology.load().table.clone()
    }

    /// Applies the rules of a local rule file, in order. Rule ids must
    /// increase.
    pub fn load_rules(&self, path: &Path) -> Result<usize, StageError> {
        let text =
            fs::read_to_string(path).map_err(|source| StageError::RulesIo { path: path.to_path_buf(), source })?;
        self.apply_rule_text(&text)
    }

    /// Applies rules written one per line; blank lines and `#` comments are
    /// skipped.
    pub fn apply_rule_text(&self, text: &str) -> Result<usize, StageError> {
        let mut last: Option<RuleId> = None;
        let mut applied = 0;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let rule =
                protocol::parse_rule_line(line).map_err(|source| StageError::RulesParse { line: line_no, source })?;
            if let Some(prev) = last {
                if rule.id <= prev {
                    return Err(StageError::RulesApply {
                        line: line_no,
                        source: RuleError::OutOfOrder { last: prev, got: rule.id },
                    });
                }
            }
            self.apply_rule(&rule).map_err(|source| StageError::RulesApply { line: line_no, source })?;
            last = Some(rule.id);
            applied += 1;
        }
        Ok(applied)
    }

    /// Stops the control agent and fails every blocked request.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.agent.lock().unwrap().take() {
            if h.thread().id() != std::thread::current().id() {
                let _ = h.join();
            }
        }
        for slot in self.topology.load().channels.values() {
            for (_, obj) in slot.objects.iter() {
                obj.shutdown();
            }
        }
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}
