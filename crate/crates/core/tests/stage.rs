use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use sds_core::stage::{RuleError, Stage, StageConfig};
use sds_core::{
    ChannelId, ChannelStats, ClassifierMask, Classifiers, Clock, Context, DifferentiationRule, EnforcementRule,
    HousekeepingRule, ManualClock, ObjectId, ObjectKind, ObjectState, Request, RequestContext, RequestType, Rule,
};

const MIB: u64 = 1 << 20;
const MS: u64 = 1_000_000;

fn noop_stage(name: &str) -> Arc<Stage> {
    let stage = Stage::create(StageConfig::new(name)).unwrap();
    stage
        .apply_rule_text(
            "hsk_rule\trule_id=1\top=create_channel\tchannel=0\n\
             hsk_rule\trule_id=2\top=create_object\tchannel=0\tobject=0\tkind=noop\tstate=\n\
             dif_rule\trule_id=3\top=set_mask\tmask=workflow_id\n\
             dif_rule\trule_id=4\top=set_default_channel\tchannel=0",
        )
        .unwrap();
    stage
}

/// A flush DRL in its own channel as a key-value store would set it up.
fn flush_stage(clock: Arc<ManualClock>, rate: u64) -> Arc<Stage> {
    let stage = Stage::with_clock(StageConfig::new("kvs"), clock as Arc<dyn Clock>).unwrap();
    let rules: Vec<Rule> = vec![
        Rule::new(1, HousekeepingRule::CreateChannel { channel: ChannelId(0) }),
        Rule::new(
            2,
            HousekeepingRule::CreateObject {
                channel: ChannelId(0),
                object: ObjectId(0),
                kind: ObjectKind::Noop,
                state: ObjectState::new(),
            },
        ),
        Rule::new(3, HousekeepingRule::CreateChannel { channel: ChannelId(1) }),
        Rule::new(
            4,
            HousekeepingRule::CreateObject {
                channel: ChannelId(1),
                object: ObjectId(1),
                kind: ObjectKind::Drl,
                state: ObjectState::new().with("rate", rate as f64),
            },
        ),
        Rule::new(5, DifferentiationRule::SetMask(ClassifierMask::CONTEXT_AND_TYPE)),
        Rule::new(
            6,
            DifferentiationRule::BindChannel {
                classifiers: Classifiers::context_and_type(RequestContext::BG_FLUSH, RequestType::Write),
                channel: ChannelId(1),
            },
        ),
        Rule::new(7, DifferentiationRule::SetDefaultChannel { channel: ChannelId(0) }),
    ];
    for r in &rules {
        stage.apply_rule(r).unwrap();
    }
    stage
}

fn flush_write(size: u64) -> Request {
    Request::metadata_only(Context::new(1, RequestType::Write, size, RequestContext::BG_FLUSH))
}

#[test]
fn flush_writes_are_rate_limited_and_foreground_is_not() {
    let clock = Arc::new(ManualClock::driven());
    let stage = flush_stage(clock.clone(), 10 * MIB);
    // the first 1 MiB fills from the bucket, the next one waits 100 ms
    assert_eq!(stage.enforce(flush_write(MIB)).unwrap().wait_applied, Duration::ZERO);
    assert_eq!(stage.enforce(flush_write(MIB)).unwrap().wait_applied, Duration::from_millis(100));
    let fg = Request::metadata_only(Context::new(1, RequestType::Write, 8 * MIB, RequestContext::FOREGROUND));
    assert_eq!(stage.enforce(fg).unwrap().wait_applied, Duration::ZERO);

    let stats = stage.collect();
    let by_ctx = stats.bytes_by_context();
    assert_eq!(by_ctx[&RequestContext::BG_FLUSH], 2 * MIB);
    assert_eq!(by_ctx[&RequestContext::FOREGROUND], 8 * MIB);
}

#[test]
fn enforcement_rule_changes_rate_at_next_boundary() {
    let clock = Arc::new(ManualClock::driven());
    let stage = flush_stage(clock.clone(), 10 * MIB);
    stage.enforce(flush_write(MIB)).unwrap();
    // 25 MiB/s requested at t=50 ms, effective at the 100 ms boundary
    clock.set(50 * MS);
    stage
        .apply_rule(&Rule::new(
            8,
            EnforcementRule { object: ObjectId(1), state: ObjectState::new().with("rate", (25 * MIB) as f64) },
        ))
        .unwrap();
    // 3 MiB at 50 ms leaves a 2.5 MiB deficit; 0.5 MiB refills at the old
    // rate until 100 ms, the other 2 MiB at 25 MiB/s by 180 ms
    let r = stage.enforce(flush_write(3 * MIB)).unwrap();
    assert_eq!(r.wait_applied, Duration::from_millis(130));
    assert_eq!(stage.object_state(ObjectId(1)).unwrap().get("rate"), Some((25 * MIB) as f64));
}

#[test]
fn same_rate_rule_keeps_schedule() {
    let clock = Arc::new(ManualClock::driven());
    let a = flush_stage(clock.clone(), 4 * MIB);
    let b = flush_stage(clock.clone(), 4 * MIB);
    b.apply_rule(&Rule::new(
        8,
        EnforcementRule { object: ObjectId(1), state: ObjectState::new().with("rate", (4 * MIB) as f64) },
    ))
    .unwrap();
    for i in 0..20 {
        clock.set(i * 7 * MS);
        let wa = a.enforce(flush_write(MIB / 3)).unwrap().wait_applied;
        let wb = b.enforce(flush_write(MIB / 3)).unwrap().wait_applied;
        assert_eq!(wa, wb);
    }
}

#[test]
fn rule_to_unknown_object_is_rejected() {
    let stage = noop_stage("s");
    let err = stage
        .apply_rule(&Rule::new(5, EnforcementRule { object: ObjectId(99), state: ObjectState::new() }))
        .unwrap_err();
    assert!(matches!(err, RuleError::UnknownObject(ObjectId(99))));
    assert!(err.to_string().contains("99"));
}

#[test]
fn concurrent_enforce_and_collect_account_every_byte() {
    let stage = noop_stage("conc");
    let threads = 8;
    let per_thread = 5_000u64;
    let barrier = Arc::new(Barrier::new(threads + 1));
    let done = Arc::new(AtomicBool::new(false));
    let workers: Vec<_> = (0..threads as u64)
        .map(|t| {
            let stage = stage.clone();
            let barrier = barrier.clone();
            thread::spawn(move || {
                barrier.wait();
                for i in 0..per_thread {
                    let size = 1 + (i % 4096);
                    let ctx = Context::new(t + 1, RequestType::Read, size, RequestContext::FOREGROUND);
                    let payload = vec![t as u8; size as usize];
                    let r = stage.enforce(Request::with_payload(ctx, payload).unwrap()).unwrap();
                    assert_eq!(r.payload.unwrap().len() as u64, size);
                }
            })
        })
        .collect();
    // a rule writer swaps routing tables while requests are in flight
    let writer = {
        let stage = stage.clone();
        let done = done.clone();
        thread::spawn(move || {
            let mut id = 10;
            while !done.load(Ordering::Relaxed) {
                let ch = ChannelId(100 + id);
                stage.apply_rule(&Rule::new(id, HousekeepingRule::CreateChannel { channel: ch })).unwrap();
                stage.apply_rule(&Rule::new(id + 1, HousekeepingRule::RemoveChannel { channel: ch })).unwrap();
                id += 2;
            }
        })
    };
    barrier.wait();
    let mut bytes = 0;
    let mut ops = 0;
    while workers.iter().any(|w| !w.is_finished()) {
        let s = stage.collect();
        bytes += s.total_bytes();
        ops += s.channels.iter().map(|c| c.stats.window_ops).sum::<u64>();
    }
    for w in workers {
        w.join().unwrap();
    }
    done.store(true, Ordering::Relaxed);
    writer.join().unwrap();
    let s = stage.collect();
    bytes += s.total_bytes();
    ops += s.channels.iter().map(|c| c.stats.window_ops).sum::<u64>();
    let expected: u64 = (0..per_thread).map(|i| 1 + (i % 4096)).sum::<u64>() * threads as u64;
    assert_eq!(bytes, expected);
    assert_eq!(ops, per_thread * threads as u64);
    assert_eq!(stage.info().workflows, threads as u64);
}

#[test]
fn shutdown_wakes_waiting_requests() {
    let stage = Stage::create(StageConfig::new("slow")).unwrap();
    stage
        .apply_rule_text(
            "hsk_rule\trule_id=1\top=create_channel\tchannel=0\n\
             hsk_rule\trule_id=2\top=create_object\tchannel=0\tobject=0\tkind=drl\tstate=rate:1\n\
             dif_rule\trule_id=3\top=set_mask\tmask=workflow_id\n\
             dif_rule\trule_id=4\top=set_default_channel\tchannel=0",
        )
        .unwrap();
    let s2 = stage.clone();
    let h = thread::spawn(move || {
        // one token per second: this would block for about a day
        s2.enforce(Request::metadata_only(Context::new(1, RequestType::Write, 100_000, RequestContext::NONE)))
    });
    thread::sleep(Duration::from_millis(50));
    stage.shutdown();
    assert!(h.join().unwrap().is_err());
}

fn context() -> impl Strategy<Value = Context> {
    let ctx = prop_oneof![
        (0usize..6).prop_map(|i| RequestContext::known().nth(i).unwrap()),
        any::<u32>().prop_map(RequestContext::Custom),
    ];
    (any::<u64>(), 0usize..7, any::<u64>(), ctx)
        .prop_map(|(wf, t, size, c)| Context::new(wf, RequestType::ALL[t], size, c))
}

proptest! {
    #[test]
    fn context_text_round_trips(c in context()) {
        prop_assert_eq!(c.to_string().parse::<Context>().unwrap(), c);
    }

    #[test]
    fn channel_stats_throughput(bytes in 0u64..1 << 40, start in 0u64..1 << 40, dt in 1u64..1 << 40) {
        let s = ChannelStats { window_bytes: bytes, window_ops: 1, window_start: start };
        let tp = s.mean_throughput(start + dt);
        prop_assert!((tp - bytes as f64 * 1e9 / dt as f64).abs() <= 1e-9 * tp.max(1.0));
        prop_assert_eq!(s.mean_throughput(start), 0.0);
    }

    #[test]
    fn payload_must_match_declared_size(size in 0u64..4096, actual in 0usize..4096) {
        let ctx = Context::new(1, RequestType::Write, size, RequestContext::NONE);
        prop_assert_eq!(Request::with_payload(ctx, vec![0; actual]).is_ok(), size == actual as u64);
    }
}
