//! Enforcement objects and the channels that run them.

mod bucket;
mod channel;

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::clock::{Cancel, Clock, Nanos};
use crate::types::{Context, ObjectKind, ObjectState, Request};

pub use bucket::TokenBucket;
pub use channel::{Channel, ChannelError, ChannelWindow, FlowEntry, ObjectSet};

/// Refill period used when a DRL state omits `refill_period_us`.
pub const DEFAULT_REFILL_PERIOD_US: u64 = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectError {
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("invalid value {value} for `{key}`")]
    InvalidValue { key: String, value: f64 },
    #[error("unrecognized key `{0}`")]
    UnknownKey(String),
    #[error("enforcement object shut down")]
    Shutdown,
}

/// A single-purpose I/O mechanism applied to requests within a channel.
pub trait EnforcementObject: Send + Sync + fmt::Debug {
    fn kind(&self) -> ObjectKind;

    /// Applies the mechanism to `request`, which reached the head of its
    /// channel queue at `start`. Returns the admission time, blocking the
    /// caller on the object's clock until then.
    fn enforce(&self, ctx: &Context, request: &mut Request, start: Nanos) -> Result<Nanos, ObjectError>;

    /// Applies a new state. On error the previous state is kept.
    fn configure(&self, state: &ObjectState) -> Result<(), ObjectError>;

    /// Current configuration, in the same keys `configure` accepts.
    fn state(&self) -> ObjectState;

    /// Fails every pending and future `enforce` call.
    fn shutdown(&self);
}

/// Builds an enforcement object of `kind` from its initial state.
pub fn obj_init(
    kind: ObjectKind,
    state: &ObjectState,
    clock: Arc<dyn Clock>,
) -> Result<Arc<dyn EnforcementObject>, ObjectError> {
    Ok(match kind {
        ObjectKind::Noop => Arc::new(NoopObject::new(state)?),
        ObjectKind::Drl => Arc::new(DrlObject::new(state, clock)?),
    })
}

fn check_keys(state: &ObjectState, allowed: &[&str]) -> Result<(), ObjectError> {
    match state.keys().find(|k| !allowed.contains(k)) {
        Some(k) => Err(ObjectError::UnknownKey(k.to_string())),
        None => Ok(()),
    }
}

fn flag(state: &ObjectState, key: &str) -> Result<Option<bool>, ObjectError> {
    match state.get(key) {
        None => Ok(None),
        Some(v) if v == 0.0 => Ok(Some(false)),
        Some(v) if v == 1.0 => Ok(Some(true)),
        Some(v) => Err(ObjectError::InvalidValue { key: key.to_string(), value: v }),
    }
}

/// Positive value rounded to a whole number, at least 1.
fn positive_integer(state: &ObjectState, key: &str) -> Result<Option<u64>, ObjectError> {
    match state.get(key) {
        None => Ok(None),
        Some(v) if v.is_finite() && v >= 0.5 && v < u64::MAX as f64 => Ok(Some(v.round() as u64)),
        Some(v) => Err(ObjectError::InvalidValue { key: key.to_string(), value: v }),
    }
}

/// Pass-through object. With `copy` set it copies the payload into the
/// result buffer, which is what a real shim would do when it must own the
/// content.
#[derive(Debug)]
pub struct NoopObject {
    copy: AtomicBool,
    down: AtomicBool,
}

impl NoopObject {
    pub const KEYS: &'static [&'static str] = &["copy"];

    pub fn new(state: &ObjectState) -> Result<Self, ObjectError> {
        check_keys(state, Self::KEYS)?;
        let copy = flag(state, "copy")?.unwrap_or(false);
        Ok(Self { copy: AtomicBool::new(copy), down: AtomicBool::new(false) })
    }
}

impl EnforcementObject for NoopObject {
    fn kind(&self) -> ObjectKind {
        ObjectKind::Noop
    }

    fn enforce(&self, _: &Context, request: &mut Request, start: Nanos) -> Result<Nanos, ObjectError> {
        if self.down.load(Ordering::Acquire) {
            return Err(ObjectError::Shutdown);
        }
        if self.copy.load(Ordering::Relaxed) {
            request.copy_payload();
        }
        Ok(start)
    }

    fn configure(&self, state: &ObjectState) -> Result<(), ObjectError> {
        check_keys(state, Self::KEYS)?;
        if let Some(copy) = flag(state, "copy")? {
            self.copy.store(copy, Ordering::Relaxed);
        }
        Ok(())
    }

    fn state(&self) -> ObjectState {
        ObjectState::new().with("copy", if self.copy.load(Ordering::Relaxed) { 1.0 } else { 0.0 })
    }

    fn shutdown(&self) {
        self.down.store(true, Ordering::Release);
    }
}

/// Dynamic rate limiter: a token bucket where each byte costs one token
/// and a request costs at least one.
///
/// State keys: `rate` (tokens per second, required at creation) and
/// `refill_period_us`.
#[derive(Debug)]
pub struct DrlObject {
    bucket: Mutex<TokenBucket>,
    clock: Arc<dyn Clock>,
    cancel: Cancel,
}

impl DrlObject {
    pub const KEYS: &'static [&'static str] = &["rate", "refill_period_us"];

    pub fn new(state: &ObjectState, clock: Arc<dyn Clock>) -> Result<Self, ObjectError> {
        check_keys(state, Self::KEYS)?;
        let rate = positive_integer(state, "rate")?.ok_or(ObjectError::MissingKey("rate"))?;
        let period_us = positive_integer(state, "refill_period_us")?.unwrap_or(DEFAULT_REFILL_PERIOD_US);
        let bucket = TokenBucket::new(rate, period_us * 1_000, clock.now());
        Ok(Self { bucket: Mutex::new(bucket), clock, cancel: Cancel::new() })
    }

    /// Copy of the bucket, for inspection.
    pub fn bucket(&self) -> TokenBucket {
        self.bucket.lock().unwrap().clone()
    }
}

pub fn request_cost(ctx: &Context) -> u64 {
    ctx.request_size().max(1)
}

impl EnforcementObject for DrlObject {
    fn kind(&self) -> ObjectKind {
        ObjectKind::Drl
    }

    fn enforce(&self, ctx: &Context, _: &mut Request, start: Nanos) -> Result<Nanos, ObjectError> {
        if self.cancel.is_cancelled() {
            return Err(ObjectError::Shutdown);
        }
        let admit = self.bucket.lock().unwrap().reserve(start, request_cost(ctx));
        self.clock.wait_until(admit, &self.cancel).map_err(|_| ObjectError::Shutdown)?;
        Ok(admit)
    }

    fn configure(&self, state: &ObjectState) -> Result<(), ObjectError> {
        check_keys(state, Self::KEYS)?;
        let rate = positive_integer(state, "rate")?;
        let period_us = positive_integer(state, "refill_period_us")?;
        let mut bucket = self.bucket.lock().unwrap();
        let (cur_rate, cur_period) = match bucket.pending_rate() {
            Some((r, _)) => (r, bucket.pending_period().unwrap_or(bucket.refill_period())),
            None => (bucket.rate(), bucket.refill_period()),
        };
        let rate = rate.unwrap_or(cur_rate);
        let period = period_us.map_or(cur_period, |us| us * 1_000);
        bucket.reconfigure(rate, period, self.clock.now());
        Ok(())
    }

    fn state(&self) -> ObjectState {
        let bucket = self.bucket.lock().unwrap();
        let rate = bucket.pending_rate().map_or(bucket.rate(), |(r, _)| r);
        let period = bucket.pending_period().unwrap_or(bucket.refill_period());
        ObjectState::new().with("rate", rate as f64).with("refill_period_us", (period / 1_000) as f64)
    }

    fn shutdown(&self) {
        self.cancel.cancel();
    }
}
