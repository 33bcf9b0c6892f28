use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use super::{EnforcementObject, ObjectError};
use crate::clock::{Clock, Nanos};
use crate::differentiation::{DiffToken, RoutingError, RoutingTable};
use crate::types::{ChannelId, ChannelStats, ObjectId, Request, RequestContext, WorkflowId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("object {object}: {source}")]
    Object { object: ObjectId, source: ObjectError },
}

/// Enforcement objects of one channel, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ObjectSet {
    ids: Vec<ObjectId>,
    objects: Vec<Arc<dyn EnforcementObject>>,
}

impl ObjectSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: ObjectId, object: Arc<dyn EnforcementObject>) {
        self.ids.push(id);
        self.objects.push(object);
    }

    pub fn remove(&mut self, id: ObjectId) -> Option<Arc<dyn EnforcementObject>> {
        let i = self.ids.iter().position(|x| *x == id)?;
        self.ids.remove(i);
        Some(self.objects.remove(i))
    }

    pub fn get(&self, id: ObjectId) -> Option<&Arc<dyn EnforcementObject>> {
        self.ids.iter().position(|x| *x == id).map(|i| &self.objects[i])
    }

    pub fn ids(&self) -> &[ObjectId] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObjectId, &Arc<dyn EnforcementObject>)> {
        self.ids.iter().copied().zip(self.objects.iter())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Ticket lock: holders are served strictly in arrival order.
#[derive(Debug, Default)]
struct FifoGate {
    next: AtomicU64,
    serving: Mutex<u64>,
    cv: Condvar,
}

struct GateGuard<'a>(&'a FifoGate);

impl FifoGate {
    fn enter(&self) -> GateGuard<'_> {
        let ticket = self.next.fetch_add(1, Ordering::Relaxed);
        let mut serving = self.serving.lock().unwrap();
        while *serving != ticket {
            serving = self.cv.wait(serving).unwrap();
        }
        GateGuard(self)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.serving.lock().unwrap() += 1;
        self.0.cv.notify_all();
    }
}

/// Counters of one (workflow, origin context) flow within a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowEntry {
    pub workflow: WorkflowId,
    pub context: RequestContext,
    pub bytes: u64,
    pub ops: u64,
}

/// A closed statistics window of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWindow {
    pub channel: ChannelId,
    pub stats: ChannelStats,
    pub window_end: Nanos,
    /// Sorted by workflow, then context.
    pub flows: Vec<FlowEntry>,
}

#[derive(Debug)]
struct Window {
    start: Nanos,
    bytes: u64,
    ops: u64,
    flows: HashMap<(WorkflowId, RequestContext), (u64, u64)>,
    workflows: HashSet<WorkflowId>,
}

/// A stream of requests with a FIFO submission queue and windowed
/// statistics. The objects it runs are passed in per call so topology
/// updates can swap them without touching the queue.
#[derive(Debug)]
pub struct Channel {
    id: ChannelId,
    clock: Arc<dyn Clock>,
    gate: FifoGate,
    // virtual completion time of the queue head, read and written under the gate
    busy_until: AtomicU64,
    window: Mutex<Window>,
}

impl Channel {
    pub fn new(id: ChannelId, clock: Arc<dyn Clock>) -> Self {
        let now = clock.now();
        Self {
            id,
            clock,
            gate: FifoGate::default(),
            busy_until: AtomicU64::new(now),
            window: Mutex::new(Window {
                start: now,
                bytes: 0,
                ops: 0,
                flows: HashMap::new(),
                workflows: HashSet::new(),
            }),
        }
    }

    pub fn id(&self) -> ChannelId {
        self.id
    }

    /// Queues `request`, runs the selected object once it reaches the head
    /// and records it in the window. Returns the time spent waiting.
    pub fn enforce(
        &self,
        table: &RoutingTable,
        token: Option<DiffToken>,
        objects: &ObjectSet,
        request: &mut Request,
    ) -> Result<Duration, ChannelError> {
        let arrival = self.clock.now();
        let _turn = self.gate.enter();
        let start = self.clock.now().max(self.busy_until.load(Ordering::Relaxed));
        let object = table.select_object_by_token(self.id, token, objects.ids())?;
        let obj = objects
            .get(object)
            .ok_or(RoutingError::UnmappedObject { channel: self.id, token: token.unwrap_or(DiffToken(0)) })?;
        let ctx = *request.context();
        let admit = obj.enforce(&ctx, request, start).map_err(|source| ChannelError::Object { object, source })?;
        self.busy_until.store(admit, Ordering::Relaxed);

        let mut w = self.window.lock().unwrap();
        w.bytes += ctx.request_size();
        w.ops += 1;
        let e = w.flows.entry((ctx.workflow_id(), ctx.request_context())).or_default();
        e.0 += ctx.request_size();
        e.1 += 1;
        w.workflows.insert(ctx.workflow_id());
        Ok(Duration::from_nanos(admit.saturating_sub(arrival)))
    }

    /// Closes the current window at `now` and opens a fresh one.
    pub fn collect(&self, now: Nanos) -> ChannelWindow {
        let mut w = self.window.lock().unwrap();
        let now = now.max(w.start);
        let mut flows: Vec<FlowEntry> = w
            .flows
            .drain()
            .map(|((workflow, context), (bytes, ops))| FlowEntry { workflow, context, bytes, ops })
            .collect();
        flows.sort_by_key(|f| (f.workflow, f.context.code()));
        let stats = ChannelStats { window_bytes: w.bytes, window_ops: w.ops, window_start: w.start };
        w.bytes = 0;
        w.ops = 0;
        w.start = now;
        ChannelWindow { channel: self.id, stats, window_end: now, flows }
    }

    /// Distinct workflows seen since creation.
    pub fn workflows(&self) -> HashSet<WorkflowId> {
        self.window.lock().unwrap().workflows.clone()
    }

    /// Blocks until every request queued before this call has finished.
    pub fn drain(&self) {
        drop(self.gate.enter());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::enforcement::obj_init;
    use crate::types::{Context, ObjectKind, ObjectState, RequestType};
    use std::thread;

    fn noop_set(clock: Arc<dyn Clock>) -> ObjectSet {
        let mut s = ObjectSet::new();
        s.push(ObjectId(1), obj_init(ObjectKind::Noop, &ObjectState::new(), clock).unwrap());
        s
    }

    #[test]
    fn counts_bytes_and_ops() {
        let clock = Arc::new(ManualClock::driven());
        let ch = Channel::new(ChannelId(1), clock.clone());
        let objs = noop_set(clock.clone());
        let c = Context::new(2, RequestType::Write, 4096, RequestContext::BG_FLUSH);
        let mut r = Request::metadata_only(c);
        ch.enforce(&RoutingTable::new(), None, &objs, &mut r).unwrap();
        clock.set(1_000_000_000);
        let w = ch.collect(clock.now());
        assert_eq!((w.stats.window_bytes, w.stats.window_ops), (4096, 1));
        assert_eq!(w.stats.mean_throughput(w.window_end), 4096.0);
        assert_eq!(
            w.flows,
            vec![FlowEntry { workflow: WorkflowId(2), context: RequestContext::BG_FLUSH, bytes: 4096, ops: 1 }]
        );
        let again = ch.collect(clock.now());
        assert_eq!((again.stats.window_bytes, again.stats.window_ops), (0, 0));
    }

    #[test]
    fn empty_channel_is_a_configuration_error() {
        let clock = Arc::new(ManualClock::driven());
        let ch = Channel::new(ChannelId(3), clock);
        let c = Context::new(2, RequestType::Read, 1, RequestContext::FOREGROUND);
        let err = ch.enforce(&RoutingTable::new(), None, &ObjectSet::new(), &mut Request::metadata_only(c));
        assert_eq!(err, Err(ChannelError::Routing(RoutingError::EmptyChannel(ChannelId(3)))));
    }

    #[test]
    fn queue_serializes_virtual_time() {
        let clock = Arc::new(ManualClock::driven());
        let ch = Channel::new(ChannelId(1), clock.clone());
        let mut objs = ObjectSet::new();
        let s = ObjectState::new().with("rate", 1000.0).with("refill_period_us", 10_000.0);
        objs.push(ObjectId(1), obj_init(ObjectKind::Drl, &s, clock.clone()).unwrap());
        let waits: Vec<_> = (0..3)
            .map(|_| {
                let c = Context::new(1, RequestType::Write, 10, RequestContext::BG_FLUSH);
                ch.enforce(&RoutingTable::new(), None, &objs, &mut Request::metadata_only(c)).unwrap()
            })
            .collect();
        assert_eq!(waits, [0, 10, 20].map(Duration::from_millis));
    }

    #[derive(Debug, Default)]
    struct Recorder(Mutex<Vec<u64>>);

    impl EnforcementObject for Recorder {
        fn kind(&self) -> ObjectKind {
            ObjectKind::Noop
        }
        fn enforce(&self, ctx: &Context, _: &mut Request, start: Nanos) -> Result<Nanos, ObjectError> {
            self.0.lock().unwrap().push(ctx.workflow_id().0);
            Ok(start)
        }
        fn configure(&self, _: &ObjectState) -> Result<(), ObjectError> {
            Ok(())
        }
        fn state(&self) -> ObjectState {
            ObjectState::new()
        }
        fn shutdown(&self) {}
    }

    #[test]
    fn completions_follow_submission_order() {
        let clock: Arc<dyn Clock> = Arc::new(crate::clock::SystemClock::new());
        let ch = Arc::new(Channel::new(ChannelId(1), clock));
        let rec = Arc::new(Recorder::default());
        let mut objs = ObjectSet::new();
        objs.push(ObjectId(1), rec.clone());
        let hold = ch.gate.enter();
        let mut handles = vec![];
        for i in 0..8u64 {
            let (chan, objs) = (ch.clone(), objs.clone());
            handles.push(thread::spawn(move || {
                let c = Context::new(i, RequestType::Write, 0, RequestContext::FOREGROUND);
                chan.enforce(&RoutingTable::new(), None, &objs, &mut Request::metadata_only(c)).unwrap();
            }));
            // submission i has its ticket before i + 1 is spawned
            while ch.gate.next.load(Ordering::Relaxed) < i + 2 {
                thread::yield_now();
            }
        }
        drop(hold);
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(*rec.0.lock().unwrap(), (0..8).collect::<Vec<_>>());
    }
}
