//! Monotonic time sources.
//!
//! Every timestamp in the stage comes from a [`Clock`], so simulations can
//! drive virtual time while production code uses the real monotonic clock.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Nanoseconds since the clock's origin.
pub type Nanos = u64;

pub const NANOS_PER_SEC: u64 = 1_000_000_000;

pub fn nanos_from_duration(d: Duration) -> Nanos {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

pub fn secs_to_nanos(secs: f64) -> Nanos {
    (secs * NANOS_PER_SEC as f64).round() as Nanos
}

pub fn nanos_to_secs(n: Nanos) -> f64 {
    n as f64 / NANOS_PER_SEC as f64
}

/// Raised when a wait is interrupted by a [`Cancel`] token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cancelled;

/// A one-shot cancellation signal that wakes every waiter.
#[derive(Debug, Default)]
pub struct Cancel {
    cancelled: Mutex<bool>,
    cv: Condvar,
}

impl Cancel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        *self.cancelled.lock().unwrap() = true;
        self.cv.notify_all();
    }

    pub fn is_cancelled(&self) -> bool {
        *self.cancelled.lock().unwrap()
    }
}

pub trait Clock: Send + Sync + fmt::Debug {
    fn now(&self) -> Nanos;

    /// Blocks the caller until `deadline`, or returns early with
    /// [`Cancelled`] once `cancel` fires.
    fn wait_until(&self, deadline: Nanos, cancel: &Cancel) -> Result<(), Cancelled>;
}

/// The process-wide monotonic clock.
#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Nanos {
        nanos_from_duration(self.origin.elapsed())
    }

    fn wait_until(&self, deadline: Nanos, cancel: &Cancel) -> Result<(), Cancelled> {
        let mut cancelled = cancel.cancelled.lock().unwrap();
        loop {
            if *cancelled {
                return Err(Cancelled);
            }
            let now = self.now();
            if now >= deadline {
                return Ok(());
            }
            let (guard, _) = cancel.cv.wait_timeout(cancelled, Duration::from_nanos(deadline - now)).unwrap();
            cancelled = guard;
        }
    }
}

/// A clock whose time only moves when told to.
///
/// With `advance_on_wait` set, a blocked caller jumps the clock forward to
/// its deadline, which models a single sequential workflow. Without it,
/// waits return immediately and the driver (a discrete-event loop) owns time;
/// callers read the admission delay from the enforcement result instead.
#[derive(Debug)]
pub struct ManualClock {
    now: AtomicU64,
    advance_on_wait: bool,
}

impl ManualClock {
    /// Clock for sequential tests: waits advance time.
    pub fn advancing() -> Self {
        Self { now: AtomicU64::new(0), advance_on_wait: true }
    }

    /// Clock for event-driven simulation: waits never move time.
    pub fn driven() -> Self {
        Self { now: AtomicU64::new(0), advance_on_wait: false }
    }

    pub fn set(&self, t: Nanos) {
        self.now.fetch_max(t, Ordering::SeqCst);
    }

    pub fn advance(&self, d: Nanos) {
        self.now.fetch_add(d, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Nanos {
        self.now.load(Ordering::SeqCst)
    }

    fn wait_until(&self, deadline: Nanos, cancel: &Cancel) -> Result<(), Cancelled> {
        if cancel.is_cancelled() {
            return Err(Cancelled);
        }
        if self.advance_on_wait {
            self.now.fetch_max(deadline, Ordering::SeqCst);
        }
        Ok(())
    }
}
