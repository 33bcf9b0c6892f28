//! Bandwidth-only disk shared fairly among requesters.
//!
//! Each requester has a FIFO of outstanding requests; the head request of
//! every non-empty FIFO receives an equal share of the capacity (processor
//! sharing). There is no seek or latency model.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use sds_core::control::{CounterError, IoCounterSource, OsIoCounters};
use sds_core::stage::StageInfo;
use sds_core::{Nanos, NANOS_PER_SEC};
use thiserror::Error;

pub type RequesterId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IoKind {
    Read,
    Write,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiskError {
    #[error("request size must be positive")]
    ZeroSize,
    #[error("disk stopped")]
    Stopped,
}

#[derive(Debug)]
struct Pending<T> {
    kind: IoKind,
    size: u64,
    /// Bytes the disk actually moves for this request.
    work: f64,
    remaining: f64,
    submitted: Nanos,
    tag: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion<T> {
    pub requester: RequesterId,
    pub kind: IoKind,
    pub size: u64,
    pub submitted: Nanos,
    pub at: Nanos,
    pub tag: T,
}

/// Counters published for the control plane, keyed by stage name.
#[derive(Debug, Clone, Default)]
pub struct SharedCounters(Arc<Mutex<BTreeMap<String, OsIoCounters>>>);

impl SharedCounters {
    fn add(&self, name: &str, kind: IoKind, bytes: u64) {
        let mut map = self.0.lock().unwrap();
        let c = map.entry(name.to_string()).or_default();
        match kind {
            IoKind::Read => c.read_bytes += bytes,
            IoKind::Write => c.write_bytes += bytes,
        }
    }

    pub fn get(&self, name: &str) -> Option<OsIoCounters> {
        self.0.lock().unwrap().get(name).copied()
    }
}

impl IoCounterSource for SharedCounters {
    fn counters(&self, stage: &StageInfo) -> Result<OsIoCounters, CounterError> {
        self.get(&stage.name).ok_or_else(|| CounterError::Unknown(stage.name.clone()))
    }
}

const DONE_EPS: f64 = 1e-6;

#[derive(Debug)]
pub struct SimDisk<T> {
    capacity: f64,
    now: Nanos,
    queues: BTreeMap<RequesterId, VecDeque<Pending<T>>>,
    served: BTreeMap<RequesterId, OsIoCounters>,
    amplification: BTreeMap<RequesterId, f64>,
    names: BTreeMap<RequesterId, String>,
    shared: SharedCounters,
    total: u64,
    stopped: bool,
}

impl<T> SimDisk<T> {
    /// `capacity` in bytes per second.
    pub fn new(capacity: f64) -> Self {
        assert!(capacity > 0.0, "disk capacity must be positive");
        Self {
            capacity,
            now: 0,
            queues: BTreeMap::new(),
            served: BTreeMap::new(),
            amplification: BTreeMap::new(),
            names: BTreeMap::new(),
            shared: SharedCounters::default(),
            total: 0,
            stopped: false,
        }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    /// Publishes this requester's counters under `name`.
    pub fn name_requester(&mut self, r: RequesterId, name: impl Into<String>) {
        self.names.insert(r, name.into());
    }

    /// The disk moves `factor` bytes per requested byte for this requester
    /// (read-ahead, metadata). Counters report the moved bytes.
    pub fn set_amplification(&mut self, r: RequesterId, factor: f64) {
        assert!(factor > 0.0);
        self.amplification.insert(r, factor);
    }

    pub fn counters(&self) -> SharedCounters {
        self.shared.clone()
    }

    pub fn stop(&mut self) {
        self.stopped = true;
    }

    pub fn active(&self) -> usize {
        self.queues.len()
    }

    pub fn outstanding(&self, r: RequesterId) -> usize {
        self.queues.get(&r).map_or(0, VecDeque::len)
    }

    /// Bytes served per requester so far.
    pub fn served(&self, r: RequesterId) -> OsIoCounters {
        self.served.get(&r).copied().unwrap_or_default()
    }

    pub fn total_served(&self) -> u64 {
        self.total
    }

    fn progress(&mut self, t: Nanos) {
        debug_assert!(t >= self.now, "disk time went backwards");
        let k = self.queues.len();
        if k > 0 && t > self.now {
            let each = self.capacity * (t - self.now) as f64 / NANOS_PER_SEC as f64 / k as f64;
            for q in self.queues.values_mut() {
                q.front_mut().expect("non-empty queue").remaining -= each;
            }
        }
        self.now = self.now.max(t);
    }

    pub fn submit(
        &mut self,
        now: Nanos,
        requester: RequesterId,
        kind: IoKind,
        size: u64,
        tag: T,
    ) -> Result<(), DiskError> {
        if self.stopped {
            return Err(DiskError::Stopped);
        }
        if size == 0 {
            return Err(DiskError::ZeroSize);
        }
        self.progress(now);
        let work = size as f64 * self.amplification.get(&requester).copied().unwrap_or(1.0);
        self.queues.entry(requester).or_default().push_back(Pending {
            kind,
            size,
            work,
            remaining: work,
            submitted: now,
            tag,
        });
        Ok(())
    }

    /// When the next request finishes if nothing else arrives.
    pub fn next_completion(&self) -> Option<Nanos> {
        let k = self.queues.len();
        let min =
            self.queues.values().map(|q| q.front().expect("non-empty queue").remaining).fold(f64::INFINITY, f64::min);
        if k == 0 {
            return None;
        }
        let secs = min.max(0.0) * k as f64 / self.capacity;
        Some(self.now + (secs * NANOS_PER_SEC as f64).ceil() as Nanos)
    }

    /// Advances to `t` and returns every request finished by then.
    /// `t` must not be later than [`Self::next_completion`].
    pub fn complete_at(&mut self, t: Nanos) -> Vec<Completion<T>> {
        self.progress(t);
        let mut done = Vec::new();
        let finished: Vec<RequesterId> = self
            .queues
            .iter()
            .filter(|(_, q)| q.front().expect("non-empty queue").remaining <= DONE_EPS)
            .map(|(r, _)| *r)
            .collect();
        for r in finished {
            let q = self.queues.get_mut(&r).expect("queue");
            let p = q.pop_front().expect("head");
            if q.is_empty() {
                self.queues.remove(&r);
            }
            let moved = p.work.round() as u64;
            let c = self.served.entry(r).or_default();
            match p.kind {
                IoKind::Read => c.read_bytes += moved,
                IoKind::Write => c.write_bytes += moved,
            }
            self.total += moved;
            if let Some(name) = self.names.get(&r) {
                self.shared.add(name, p.kind, moved);
            }
            done.push(Completion {
                requester: r,
                kind: p.kind,
                size: p.size,
                submitted: p.submitted,
                at: t,
                tag: p.tag,
            });
        }
        done
    }

    /// Runs the disk alone until every outstanding request is done.
    pub fn drain(&mut self) -> Vec<Completion<T>> {
        let mut out = Vec::new();
        while let Some(t) = self.next_completion() {
            out.extend(self.complete_at(t));
        }
        out
    }
}
