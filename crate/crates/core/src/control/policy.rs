//! Control policies: what to install on a new stage and how to retune it
//! every loop iteration.

use std::collections::HashMap;

use super::algorithms::{fair_share_step, tail_latency_step, TailLatencyConfig, TailLatencyTelemetry};
use super::os::OsIoCounters;
use crate::differentiation::{ClassifierMask, Classifiers};
use crate::stage::{StageInfo, StageStats};
use crate::types::{
    ChannelId, DifferentiationRule, EnforcementRule, HousekeepingRule, ObjectId, ObjectKind, ObjectState,
    RequestContext, RequestType, RuleBody,
};

/// What the control plane knows about one stage after a collect.
#[derive(Debug, Clone, Copy)]
pub struct StageView<'a> {
    pub key: u64,
    pub info: &'a StageInfo,
    pub stats: &'a StageStats,
    /// OS-level bytes moved since the previous iteration, when available.
    pub os: Option<OsIoCounters>,
    /// Seconds since the previous iteration.
    pub window_secs: f64,
}

impl StageView<'_> {
    /// Bytes per second per request context.
    pub fn rate_by_context(&self) -> HashMap<RequestContext, f64> {
        let mut out = HashMap::new();
        if self.window_secs > 0.0 {
            for (ctx, bytes) in self.stats.bytes_by_context() {
                out.insert(ctx, bytes as f64 / self.window_secs);
            }
        }
        out
    }

    pub fn stage_rate(&self) -> f64 {
        if self.window_secs > 0.0 {
            self.stats.total_bytes() as f64 / self.window_secs
        } else {
            0.0
        }
    }

    pub fn os_rate(&self) -> Option<f64> {
        (self.window_secs > 0.0).then_some(())?;
        self.os.map(|c| c.total() as f64 / self.window_secs)
    }
}

pub trait Policy: Send {
    fn name(&self) -> &'static str;

    /// Rules that build the stage's topology on registration.
    fn setup(&mut self, info: &StageInfo) -> Vec<RuleBody>;

    /// Enforcement rules for this iteration, per stage key.
    fn step(&mut self, views: &[StageView<'_>]) -> Vec<(u64, EnforcementRule)>;

    /// A stage left; forget its state.
    fn forget(&mut self, _key: u64) {}
}

fn drl(rate: f64) -> ObjectState {
    ObjectState::new().with("rate", rate.round().max(1.0))
}

fn rate_rule(object: ObjectId, rate: f64) -> EnforcementRule {
    EnforcementRule { object, state: drl(rate) }
}

/// Channel and object layout installed on a key-value store stage.
pub mod lsm_layout {
    use crate::types::{ChannelId, ObjectId};

    pub const FOREGROUND: ChannelId = ChannelId(0);
    pub const FLUSH: ChannelId = ChannelId(1);
    pub const L0: ChannelId = ChannelId(2);
    pub const HIGH: ChannelId = ChannelId(3);

    pub const FOREGROUND_NOOP: ObjectId = ObjectId(0);
    pub const FLUSH_DRL: ObjectId = ObjectId(1);
    pub const L0_DRL: ObjectId = ObjectId(2);
    /// High-level compaction reads and writes each get their own limiter.
    pub const HIGH_READ_DRL: ObjectId = ObjectId(3);
    pub const HIGH_WRITE_DRL: ObjectId = ObjectId(4);
    pub const HIGH_DRLS: [ObjectId; 2] = [HIGH_READ_DRL, HIGH_WRITE_DRL];
}

/// Keeps flushes and low-level compactions fed with whatever foreground
/// traffic leaves, so client writes do not stall behind them.
#[derive(Debug, Clone)]
pub struct TailLatencyPolicy {
    pub cfg: TailLatencyConfig<f64>,
}

impl TailLatencyPolicy {
    pub fn new(cfg: TailLatencyConfig<f64>) -> Self {
        Self { cfg }
    }

    pub fn telemetry(view: &StageView<'_>) -> TailLatencyTelemetry<f64> {
        let rates = view.rate_by_context();
        let get = |c| rates.get(&c).copied().unwrap_or(0.0);
        TailLatencyTelemetry {
            foreground: get(RequestContext::FOREGROUND),
            flush: get(RequestContext::BG_FLUSH),
            l0: get(RequestContext::BG_COMPACTION_L0_L1),
            high: get(RequestContext::BG_COMPACTION_HIGH),
        }
    }

    fn rules_for(&self, t: &TailLatencyTelemetry<f64>) -> Vec<EnforcementRule> {
        use lsm_layout::*;
        let a = tail_latency_step(&self.cfg, t);
        let per_high = a.high / HIGH_DRLS.len() as f64;
        let mut out = vec![rate_rule(FLUSH_DRL, a.flush), rate_rule(L0_DRL, a.l0)];
        out.extend(HIGH_DRLS.iter().map(|o| rate_rule(*o, per_high)));
        out
    }
}

impl Policy for TailLatencyPolicy {
    fn name(&self) -> &'static str {
        "tail_latency"
    }

    fn setup(&mut self, _: &StageInfo) -> Vec<RuleBody> {
        use lsm_layout::*;
        let initial = self.rules_for(&TailLatencyTelemetry::default());
        let rate_of = |o: ObjectId| initial.iter().find(|r| r.object == o).expect("rate").state.clone();
        let mut rules: Vec<RuleBody> = Vec::new();
        let objects = [
            (FOREGROUND, FOREGROUND_NOOP, ObjectKind::Noop, ObjectState::new()),
            (FLUSH, FLUSH_DRL, ObjectKind::Drl, rate_of(FLUSH_DRL)),
            (L0, L0_DRL, ObjectKind::Drl, rate_of(L0_DRL)),
            (HIGH, HIGH_READ_DRL, ObjectKind::Drl, rate_of(HIGH_READ_DRL)),
            (HIGH, HIGH_WRITE_DRL, ObjectKind::Drl, rate_of(HIGH_WRITE_DRL)),
        ];
        for ch in [FOREGROUND, FLUSH, L0, HIGH] {
            rules.push(HousekeepingRule::CreateChannel { channel: ch }.into());
        }
        for (channel, object, kind, state) in objects {
            rules.push(HousekeepingRule::CreateObject { channel, object, kind, state }.into());
        }
        rules.push(DifferentiationRule::SetMask(ClassifierMask::CONTEXT_AND_TYPE).into());
        rules.push(DifferentiationRule::SetDefaultChannel { channel: FOREGROUND }.into());
        let bind = |ctx, ty, channel: ChannelId, object: Option<ObjectId>| -> Vec<RuleBody> {
            let classifiers = Classifiers::context_and_type(ctx, ty);
            let mut v: Vec<RuleBody> = vec![DifferentiationRule::BindChannel { classifiers, channel }.into()];
            if let Some(object) = object {
                v.push(DifferentiationRule::BindObject { channel, classifiers, object }.into());
            }
            v
        };
        rules.extend(bind(RequestContext::BG_FLUSH, RequestType::Write, FLUSH, None));
        for ty in [RequestType::Read, RequestType::Write] {
            rules.extend(bind(RequestContext::BG_COMPACTION_L0_L1, ty, L0, None));
        }
        rules.extend(bind(RequestContext::BG_COMPACTION_HIGH, RequestType::Read, HIGH, Some(HIGH_READ_DRL)));
        rules.extend(bind(RequestContext::BG_COMPACTION_HIGH, RequestType::Write, HIGH, Some(HIGH_WRITE_DRL)));
        rules
    }

    fn step(&mut self, views: &[StageView<'_>]) -> Vec<(u64, EnforcementRule)> {
        let mut out = Vec::new();
        for v in views {
            let t = Self::telemetry(v);
            out.extend(self.rules_for(&t).into_iter().map(|r| (v.key, r)));
        }
        out
    }
}

/// Corrects bucket rates when what the OS sees differs from what the stage
/// lets through (read-ahead, metadata, caching).
#[derive(Debug, Clone)]
pub struct Calibrator {
    factors: HashMap<u64, f64>,
    pub tolerance: f64,
    pub min_factor: f64,
    pub max_factor: f64,
}

impl Default for Calibrator {
    fn default() -> Self {
        Self { factors: HashMap::new(), tolerance: 0.05, min_factor: 0.125, max_factor: 8.0 }
    }
}

impl Calibrator {
    pub fn factor(&self, key: u64) -> f64 {
        self.factors.get(&key).copied().unwrap_or(1.0)
    }

    /// Bucket rate to request so that the OS-level rate lands on `target`.
    pub fn scaled(&self, key: u64, target: f64) -> f64 {
        target * self.factor(key)
    }

    /// Folds in one observation. Only meaningful while the flow is held
    /// back by its bucket; otherwise the measured rate says nothing about
    /// the limit.
    pub fn observe(&mut self, key: u64, target: f64, measured: f64, bucket_bound: bool) {
        if !bucket_bound || target <= 0.0 || measured <= 0.0 {
            return;
        }
        if ((measured - target) / target).abs() > self.tolerance {
            let f = (self.factor(key) * target / measured).clamp(self.min_factor, self.max_factor);
            self.factors.insert(key, f);
        }
    }

    pub fn forget(&mut self, key: u64) {
        self.factors.remove(&key);
    }
}

/// Gives every instance at least its demand when the disk allows it, and
/// shares the rest evenly.
#[derive(Debug, Clone)]
pub struct FairSharePolicy {
    pub max_bandwidth: f64,
    pub demands: HashMap<String, f64>,
    pub calibrate: bool,
    calibrator: Calibrator,
    /// Last target and applied bucket rate per stage.
    last: HashMap<u64, (f64, f64)>,
}

pub const TENANT_CHANNEL: ChannelId = ChannelId(1);
pub const TENANT_DRL: ObjectId = ObjectId(1);

impl FairSharePolicy {
    pub fn new(max_bandwidth: f64, demands: HashMap<String, f64>) -> Self {
        Self { max_bandwidth, demands, calibrate: false, calibrator: Calibrator::default(), last: HashMap::new() }
    }

    pub fn with_calibration(mut self, on: bool) -> Self {
        self.calibrate = on;
        self
    }

    pub fn calibrator(&self) -> &Calibrator {
        &self.calibrator
    }

    fn demand(&self, info: &StageInfo) -> Option<f64> {
        self.demands.get(&info.name).copied()
    }
}

impl Policy for FairSharePolicy {
    fn name(&self) -> &'static str {
        "fair_share"
    }

    fn setup(&mut self, info: &StageInfo) -> Vec<RuleBody> {
        let Some(demand) = self.demand(info) else {
            log::warn!("no demand configured for stage `{}`; leaving it unmanaged", info.name);
            return Vec::new();
        };
        vec![
            HousekeepingRule::CreateChannel { channel: TENANT_CHANNEL }.into(),
            HousekeepingRule::CreateObject {
                channel: TENANT_CHANNEL,
                object: TENANT_DRL,
                kind: ObjectKind::Drl,
                state: drl(demand),
            }
            .into(),
            DifferentiationRule::SetDefaultChannel { channel: TENANT_CHANNEL }.into(),
        ]
    }

    fn step(&mut self, views: &[StageView<'_>]) -> Vec<(u64, EnforcementRule)> {
        let managed: Vec<(&StageView<'_>, f64)> =
            views.iter().filter_map(|v| Some((v, self.demand(v.info)?))).collect();
        let demands: Vec<f64> = managed.iter().map(|(_, d)| *d).collect();
        let Some(rates) = fair_share_step(self.max_bandwidth, &demands) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(rates.len());
        for ((view, _), target) in managed.into_iter().zip(rates) {
            if self.calibrate {
                if let (Some(os), Some(&(prev_target, applied))) = (view.os_rate(), self.last.get(&view.key)) {
                    let bound = view.stage_rate() >= 0.9 * applied;
                    self.calibrator.observe(view.key, prev_target, os, bound);
                }
            }
            let applied = self.calibrator.scaled(view.key, target);
            self.last.insert(view.key, (target, applied));
            out.push((view.key, rate_rule(TENANT_DRL, applied)));
        }
        out
    }

    fn forget(&mut self, key: u64) {
        self.last.remove(&key);
        self.calibrator.forget(key);
    }
}
