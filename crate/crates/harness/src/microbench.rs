//! Loopback stress test: one closed-loop client thread per channel calling
//! `enforce` on a Noop object that copies the payload into the result.

use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use sds_core::stage::{Stage, StageConfig};
use sds_core::{
    ChannelId, ClassifierMask, Classifiers, Context, DifferentiationRule, HousekeepingRule, ObjectId, ObjectKind,
    ObjectState, Request, RequestContext, RequestType, Rule, RuleBody,
};

use crate::output::{percentile, Manifest, Trace};
use crate::SimError;

#[derive(Debug, Clone, PartialEq)]
pub struct MicrobenchConfig {
    pub channels: Vec<usize>,
    pub request_sizes: Vec<u64>,
    pub duration: Duration,
    /// Every n-th operation is timed and its payload checked.
    pub sample_every: u64,
}

impl Default for MicrobenchConfig {
    fn default() -> Self {
        Self { channels: vec![1], request_sizes: vec![0], duration: Duration::from_millis(500), sample_every: 16 }
    }
}

pub const MAX_CHANNELS: usize = 128;
pub const MAX_REQUEST: u64 = 128 * 1024;

impl MicrobenchConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0 || c > MAX_CHANNELS) {
            return Err(SimError::Config(format!("channel counts must be in 1..={MAX_CHANNELS}")));
        }
        if self.request_sizes.is_empty() || self.request_sizes.iter().any(|&s| s > MAX_REQUEST) {
            return Err(SimError::Config(format!("request sizes must be in 0..={MAX_REQUEST}")));
        }
        if self.duration.is_zero() || self.sample_every == 0 {
            return Err(SimError::Config("duration and sampling period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicrobenchRow {
    pub channels: usize,
    pub request_size: u64,
    pub ops: u64,
    pub elapsed: Duration,
    pub p50: Duration,
    pub p99: Duration,
    /// Sampled results whose payload differed from the input.
    pub identity_failures: u64,
    pub identity_checked: u64,
}

impl MicrobenchRow {
    pub fn ops_per_sec(&self) -> f64 {
        self.ops as f64 / self.elapsed.as_secs_f64()
    }

    pub fn bytes_per_sec(&self) -> f64 {
        self.ops_per_sec() * self.request_size as f64
    }
}

/// One Noop object per channel, each channel bound to one workflow.
pub fn loopback_stage(channels: usize) -> Result<Arc<Stage>, SimError> {
    let stage = Stage::create(StageConfig::new("microbench")).map_err(|e| SimError::Stage(e.to_string()))?;
    let mut rules: Vec<RuleBody> = vec![DifferentiationRule::SetMask(ClassifierMask::WORKFLOW).into()];
    for c in 0..channels {
        let channel = ChannelId(c as u64);
        rules.push(HousekeepingRule::CreateChannel { channel }.into());
        rules.push(
            HousekeepingRule::CreateObject {
                channel,
                object: ObjectId(c as u64),
                kind: ObjectKind::Noop,
                state: ObjectState::new().with("copy", 1.0),
            }
            .into(),
        );
        rules.push(
            DifferentiationRule::BindChannel { classifiers: Classifiers::workflow(c as u64 + 1), channel }.into(),
        );
    }
    for (i, body) in rules.into_iter().enumerate() {
        stage.apply_rule(&Rule::new(i as u64 + 1, body)).map_err(|e| SimError::Stage(e.to_string()))?;
    }
    Ok(stage)
}

struct WorkerOut {
    ops: u64,
    latencies: Vec<u64>,
    checked: u64,
    failures: u64,
}

pub fn run_point(channels: usize, size: u64, duration: Duration, sample_every: u64) -> Result<MicrobenchRow, SimError> {
    let stage = loopback_stage(channels)?;
    let barrier = Arc::new(Barrier::new(channels + 1));
    let mut handles = Vec::with_capacity(channels);
    for c in 0..channels {
        let stage = stage.clone();
        let barrier = barrier.clone();
        handles.push(thread::spawn(move || -> Result<WorkerOut, String> {
            let reference: Vec<u8> = (0..size).map(|i| (i as u8) ^ (c as u8)).collect();
            let ctx = Context::new(c as u64 + 1, RequestType::Write, size, RequestContext::NONE);
            let mut buf = reference.clone();
            let mut out = WorkerOut { ops: 0, latencies: Vec::new(), checked: 0, failures: 0 };
            barrier.wait();
            let deadline = Instant::now() + duration;
            loop {
                let sampled = out.ops % sample_every == 0;
                let t0 = sampled.then(Instant::now);
                let req = Request::with_payload(ctx, buf).map_err(|e| e.to_string())?;
                let res = stage.enforce(req).map_err(|e| e.detail)?;
                buf = res.payload.unwrap_or_default();
                out.ops += 1;
                if let Some(t0) = t0 {
                    let now = Instant::now();
                    out.latencies.push(now.duration_since(t0).as_nanos() as u64);
                    out.checked += 1;
                    if buf != reference {
                        out.failures += 1;
                        buf = reference.clone();
                    }
                    if now >= deadline {
                        break;
                    }
                }
            }
            Ok(out)
        }));
    }
    barrier.wait();
    let start = Instant::now();
    let mut ops = 0;
    let mut lat = Vec::new();
    let (mut checked, mut failures) = (0, 0);
    for h in handles {
        let out =
            h.join().map_err(|_| SimError::Stage("benchmark thread panicked".into()))?.map_err(SimError::Stage)?;
        ops += out.ops;
        lat.extend(out.latencies);
        checked += out.checked;
        failures += out.failures;
    }
    let elapsed = start.elapsed().max(duration);
    stage.shutdown();
    Ok(MicrobenchRow {
        channels,
        request_size: size,
        ops,
        elapsed,
        p50: Duration::from_nanos(percentile(&mut lat, 0.5).unwrap_or(0)),
        p99: Duration::from_nanos(percentile(&mut lat, 0.99).unwrap_or(0)),
        identity_failures: failures,
        identity_checked: checked,
    })
}

pub fn run_microbench(cfg: &MicrobenchConfig) -> Result<Vec<MicrobenchRow>, SimError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &size in &cfg.request_sizes {
        for &ch in &cfg.channels {
            rows.push(run_point(ch, size, cfg.duration, cfg.sample_every)?);
        }
    }
    Ok(rows)
}

pub fn trace_of(rows: &[MicrobenchRow]) -> Trace {
    let mut t = Trace::new();
    for r in rows {
        let series = format!("ch{}_b{}", r.channels, r.request_size);
        t.push(r.elapsed.as_secs_f64(), "ops_per_sec", series.clone(), r.ops_per_sec());
        t.push(r.elapsed.as_secs_f64(), "bytes_per_sec", series.clone(), r.bytes_per_sec());
        t.push(r.elapsed.as_secs_f64(), "p50_ns", series.clone(), r.p50.as_nanos() as f64);
        t.push(r.elapsed.as_secs_f64(), "p99_ns", series, r.p99.as_nanos() as f64);
    }
    t
}

pub fn manifest_of(cfg: &MicrobenchConfig) -> Manifest {
    let join = |v: Vec<String>| v.join(",");
    let mut m = Manifest::new();
    m.set("experiment", "microbench")
        .set("channels", join(cfg.channels.iter().map(|c| c.to_string()).collect()))
        .set("request_sizes", join(cfg.request_sizes.iter().map(|c| c.to_string()).collect()))
        .set("duration_ms", cfg.duration.as_millis())
        .set("sample_every", cfg.sample_every)
        .set("cores", thread::available_parallelism().map_or(1, |n| n.get()));
    m
}
