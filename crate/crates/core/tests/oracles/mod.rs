//! Reference implementations used by the integration tests. Each one takes
//! a different route from the library code it checks.
#![allow(dead_code)]

use std::io::Cursor;

use num_rational::Ratio;
use sds_core::{ChannelId, RequestContext, RequestType};

pub type Q = Ratio<i128>;

/// Admission times of a FIFO token bucket from the closed form
///
/// d_k = max(s_k, max_j s_j + ceil((sum_{i=j..k} N_i - C) / R)),  s_k = max(a_k, d_{k-1})
///
/// with capacity `C = rate * period` token-nanoseconds, every cost in
/// token-nanoseconds, and the bucket full at `created`. Quadratic, no state
/// carried between requests other than the previous admission.
pub fn bucket_admissions(rate: u64, period: u64, created: u64, trace: &[(u64, u64)]) -> Vec<u64> {
    let r = rate as i128;
    let cap = r * period as i128;
    let mut starts: Vec<i128> = Vec::with_capacity(trace.len());
    let mut costs: Vec<i128> = Vec::with_capacity(trace.len());
    let mut out = Vec::with_capacity(trace.len());
    let mut prev = created as i128;
    for &(at, cost) in trace {
        let s = (at as i128).max(prev).max(created as i128);
        starts.push(s);
        costs.push(cost.max(1) as i128 * 1_000_000_000);
        let mut d = s;
        let mut sum = 0i128;
        for j in (0..starts.len()).rev() {
            sum += costs[j];
            let need = sum - cap;
            if need > 0 {
                d = d.max(starts[j] + (need + r - 1) / r);
            }
        }
        out.push(d as u64);
        prev = d;
    }
    out
}

/// Water level search: the largest level `l` with sum(min(d_i, l)) <= max.
/// When all demands fit, the rest is split evenly on top.
pub fn water_fill(max: Q, demands: &[Q]) -> Vec<Q> {
    let n = demands.len() as i128;
    let total: Q = demands.iter().copied().sum();
    if total <= max {
        let extra = (max - total) / Q::from_integer(n);
        return demands.iter().map(|d| *d + extra).collect();
    }
    let mut levels: Vec<Q> = demands.to_vec();
    levels.sort();
    // candidate levels between consecutive demands
    let mut below = Q::from_integer(0);
    for (i, l) in levels.iter().enumerate() {
        let rest = Q::from_integer(n - i as i128);
        let level = (max - below) / rest;
        if level <= *l {
            return demands.iter().map(|d| (*d).min(level)).collect();
        }
        below += *l;
    }
    unreachable!("total exceeds max, so some level binds")
}

/// Pareto check for max-min fairness: raising any rate means lowering a
/// rate that is not larger than it.
pub fn max_min_fair(max: Q, demands: &[Q], rates: &[Q]) -> bool {
    let total: Q = rates.iter().copied().sum();
    if total > max {
        return false;
    }
    let saturated = total == max;
    for (i, r) in rates.iter().enumerate() {
        let unmet = *r < demands[i];
        if unmet {
            // an unmet instance is bottlenecked only if the link is full and
            // no one else holds more than it
            if !saturated || rates.iter().any(|o| o > r) {
                return false;
            }
        }
    }
    true
}

pub const TYPES: [RequestType; 7] = [
    RequestType::Read,
    RequestType::Write,
    RequestType::Open,
    RequestType::Close,
    RequestType::Put,
    RequestType::Get,
    RequestType::NoOp,
];

pub const CONTEXTS: [RequestContext; 6] = [
    RequestContext::FOREGROUND,
    RequestContext::BG_FLUSH,
    RequestContext::BG_COMPACTION_L0_L1,
    RequestContext::BG_COMPACTION_HIGH,
    RequestContext::BACKGROUND_GENERIC,
    RequestContext::NONE,
];

pub const WORKFLOWS: [u64; 4] = [1, 2, 5, 9];

fn type_code(t: RequestType) -> u64 {
    match t {
        RequestType::Read => 0,
        RequestType::Write => 1,
        RequestType::Open => 2,
        RequestType::Close => 3,
        RequestType::Put => 4,
        RequestType::Get => 5,
        RequestType::NoOp => 6,
    }
}

fn context_code(c: RequestContext) -> u64 {
    const TABLE: [(RequestContext, u64); 6] = [
        (RequestContext::FOREGROUND, 0),
        (RequestContext::BG_FLUSH, 1),
        (RequestContext::BG_COMPACTION_L0_L1, 2),
        (RequestContext::BG_COMPACTION_HIGH, 3),
        (RequestContext::BACKGROUND_GENERIC, 4),
        (RequestContext::NONE, 5),
    ];
    TABLE.iter().find(|(k, _)| *k == c).map(|(_, v)| *v).expect("built-in context")
}

/// Token through the `murmur3` crate over the canonical encoding.
pub fn reference_token(workflow: Option<u64>, ty: Option<RequestType>, ctx: Option<RequestContext>) -> u32 {
    let mut bytes = Vec::new();
    if let Some(w) = workflow {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    if let Some(t) = ty {
        bytes.extend_from_slice(&type_code(t).to_le_bytes());
    }
    if let Some(c) = ctx {
        bytes.extend_from_slice(&context_code(c).to_le_bytes());
    }
    murmur3::murmur3_32(&mut Cursor::new(bytes), 0).expect("in-memory read")
}

/// The three example channels, each configured in its own stage since a
/// stage differentiates on one classifier mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingCase {
    /// channel 1: everything from flow 1
    Flow,
    /// channel 2: reads issued by background tasks
    BackgroundReads,
    /// channel 3: compaction writes from flow 5
    CompactionWritesOfFlow5,
}

pub const DEFAULT_CHANNEL: ChannelId = ChannelId(0);

impl RoutingCase {
    pub const ALL: [RoutingCase; 3] =
        [RoutingCase::Flow, RoutingCase::BackgroundReads, RoutingCase::CompactionWritesOfFlow5];

    pub fn channel(self) -> ChannelId {
        match self {
            RoutingCase::Flow => ChannelId(1),
            RoutingCase::BackgroundReads => ChannelId(2),
            RoutingCase::CompactionWritesOfFlow5 => ChannelId(3),
        }
    }

    /// Hand-written routing decision.
    pub fn expected(self, workflow: u64, ty: RequestType, ctx: RequestContext) -> ChannelId {
        let bg = ctx == RequestContext::BG_FLUSH
            || ctx == RequestContext::BG_COMPACTION_L0_L1
            || ctx == RequestContext::BG_COMPACTION_HIGH
            || ctx == RequestContext::BACKGROUND_GENERIC;
        let compaction = ctx == RequestContext::BG_COMPACTION_L0_L1 || ctx == RequestContext::BG_COMPACTION_HIGH;
        let hit = match self {
            RoutingCase::Flow => workflow == 1,
            RoutingCase::BackgroundReads => bg && ty == RequestType::Read,
            RoutingCase::CompactionWritesOfFlow5 => workflow == 5 && compaction && ty == RequestType::Write,
        };
        if hit {
            self.channel()
        } else {
            DEFAULT_CHANNEL
        }
    }

    /// Rule lines configuring a stage for this row.
    pub fn rules(self) -> String {
        let ch = self.channel().0;
        let mut out = vec![
            "hsk_rule\trule_id=1\top=create_channel\tchannel=0".to_string(),
            format!("hsk_rule\trule_id=2\top=create_channel\tchannel={ch}"),
            "hsk_rule\trule_id=3\top=create_object\tchannel=0\tobject=0\tkind=noop\tstate=".to_string(),
            format!("hsk_rule\trule_id=4\top=create_object\tchannel={ch}\tobject=1\tkind=noop\tstate="),
            "dif_rule\trule_id=5\top=set_default_channel\tchannel=0".to_string(),
        ];
        let mut id = 6;
        let mut push = |out: &mut Vec<String>, line: String| {
            out.push(format!("dif_rule\trule_id={id}\t{line}"));
            id += 1;
        };
        match self {
            RoutingCase::Flow => {
                push(&mut out, "op=set_mask\tmask=workflow_id".into());
                push(&mut out, format!("op=bind_channel\tworkflow_id=1\tchannel={ch}"));
            }
            RoutingCase::BackgroundReads => {
                push(&mut out, "op=set_mask\tmask=request_type|request_context".into());
                for c in ["bg_flush", "bg_compaction_l0_l1", "bg_compaction_high", "background_generic"] {
                    push(&mut out, format!("op=bind_channel\trequest_type=read\trequest_context={c}\tchannel={ch}"));
                }
            }
            RoutingCase::CompactionWritesOfFlow5 => {
                push(&mut out, "op=set_mask\tmask=workflow_id|request_type|request_context".into());
                for c in ["bg_compaction_l0_l1", "bg_compaction_high"] {
                    push(
                        &mut out,
                        format!(
                            "op=bind_channel\tworkflow_id=5\trequest_type=write\trequest_context={c}\tchannel={ch}"
                        ),
                    );
                }
            }
        }
        out.join("\n")
    }
}

/// Tail-latency step evaluated by hand with KVS_B = 200 and min_B = 10:
/// `(Fg, Fl, L0, LN) -> (B_Fl, B_L0, B_LN)`. Five foreground levels give
/// left = 200, 150, 50, 10, 10 under each of the four activity branches.
pub const TAIL_LATENCY_CASES: [((f64, f64, f64, f64), (f64, f64, f64)); 20] = [
    // flush and L0 active
    ((0.0, 5.0, 5.0, 0.0), (100.0, 100.0, 10.0)),
    ((50.0, 30.0, 20.0, 7.0), (75.0, 75.0, 10.0)),
    ((150.0, 5.0, 5.0, 0.0), (25.0, 25.0, 10.0)),
    ((190.0, 1.0, 40.0, 3.0), (5.0, 5.0, 10.0)),
    ((250.0, 2.0, 2.0, 2.0), (5.0, 5.0, 10.0)),
    // flush only
    ((0.0, 1.0, 0.0, 0.0), (200.0, 10.0, 10.0)),
    ((50.0, 80.0, 0.0, 12.0), (150.0, 10.0, 10.0)),
    ((150.0, 9.0, 0.0, 0.0), (50.0, 10.0, 10.0)),
    ((190.0, 4.0, 0.0, 50.0), (10.0, 10.0, 10.0)),
    ((250.0, 3.0, 0.0, 0.0), (10.0, 10.0, 10.0)),
    // L0 only
    ((0.0, 0.0, 1.0, 0.0), (10.0, 200.0, 10.0)),
    ((50.0, 0.0, 60.0, 60.0), (10.0, 150.0, 10.0)),
    ((150.0, 0.0, 12.0, 0.0), (10.0, 50.0, 10.0)),
    ((190.0, 0.0, 8.0, 1.0), (10.0, 10.0, 10.0)),
    ((250.0, 0.0, 6.0, 0.0), (10.0, 10.0, 10.0)),
    // neither
    ((0.0, 0.0, 0.0, 0.0), (10.0, 10.0, 200.0)),
    ((50.0, 0.0, 0.0, 90.0), (10.0, 10.0, 150.0)),
    ((150.0, 0.0, 0.0, 20.0), (10.0, 10.0, 50.0)),
    ((190.0, 0.0, 0.0, 0.0), (10.0, 10.0, 10.0)),
    ((250.0, 0.0, 0.0, 0.0), (10.0, 10.0, 10.0)),
];

/// Golden tokens computed with the reference hash before the routing code
/// existed: `(mask, workflow, type, context, token)`.
pub const GOLDEN_TOKENS: [(&str, u64, RequestType, RequestContext, u32); 6] = [
    ("workflow_id", 1, RequestType::Read, RequestContext::FOREGROUND, 0x5307_5d44),
    ("workflow_id", 5, RequestType::Write, RequestContext::BG_FLUSH, 0x67c2_5ef7),
    ("request_type|request_context", 1, RequestType::Write, RequestContext::BG_FLUSH, 0x292a_cae6),
    ("request_type|request_context", 1, RequestType::Write, RequestContext::BG_COMPACTION_L0_L1, 0xc98f_4090),
    ("request_type|request_context", 2, RequestType::Read, RequestContext::BG_COMPACTION_HIGH, 0x785c_5954),
    (
        "workflow_id|request_type|request_context",
        5,
        RequestType::Write,
        RequestContext::BG_COMPACTION_L0_L1,
        0xd1ae_97a0,
    ),
];

pub mod corpus {
    //! Random protocol messages covering every kind and field shape.

    use rand::seq::SliceRandom;
    use rand::Rng;
    use sds_core::enforcement::{ChannelWindow, FlowEntry};
    use sds_core::protocol::{Failure, Message, MAX_BODY};
    use sds_core::stage::{StageInfo, StageStats};
    use sds_core::{
        ChannelId, ChannelStats, ClassifierMask, Classifiers, DifferentiationRule, EnforcementRule, HousekeepingRule,
        ObjectId, ObjectKind, ObjectState, RequestContext, Rule, RuleBody,
    };

    use super::{CONTEXTS, TYPES};

    const ALPHABET: &[char] = &['a', 'z', '0', '_', '%', '\x1F', '\t', '\r', '\n', ' ', ':', '=', 'é', '€', '🦀'];

    fn text<R: Rng>(rng: &mut R) -> String {
        let n = rng.gen_range(0..24);
        (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
    }

    fn id<R: Rng>(rng: &mut R) -> u64 {
        match rng.gen_range(0..3) {
            0 => rng.gen_range(0..4),
            1 => rng.gen(),
            _ => rng.gen_range(0..1_000_000),
        }
    }

    fn context<R: Rng>(rng: &mut R) -> RequestContext {
        if rng.gen_bool(0.2) {
            RequestContext::Custom(rng.gen())
        } else {
            *CONTEXTS.choose(rng).unwrap()
        }
    }

    fn state<R: Rng>(rng: &mut R) -> ObjectState {
        let mut s = ObjectState::new();
        for _ in 0..rng.gen_range(0..4) {
            let key = ["rate", "refill_period_us", "copy", "x_1"].choose(rng).unwrap();
            let v = match rng.gen_range(0..3) {
                0 => rng.gen_range(0..1u64 << 40) as f64,
                1 => rng.gen::<f64>() * 1e6,
                _ => -rng.gen::<f64>(),
            };
            s.set(key, v);
        }
        s
    }

    fn classifiers<R: Rng>(rng: &mut R) -> Classifiers {
        Classifiers {
            workflow_id: rng.gen_bool(0.5).then(|| id(rng).into()),
            request_type: rng.gen_bool(0.5).then(|| *TYPES.choose(rng).unwrap()),
            request_context: rng.gen_bool(0.5).then(|| context(rng)),
        }
    }

    fn rule<R: Rng>(rng: &mut R) -> Rule {
        let ch = ChannelId(id(rng));
        let obj = ObjectId(id(rng));
        let body: RuleBody = match rng.gen_range(0..10) {
            0 => HousekeepingRule::CreateChannel { channel: ch }.into(),
            1 => HousekeepingRule::CreateObject {
                channel: ch,
                object: obj,
                kind: if rng.gen() { ObjectKind::Noop } else { ObjectKind::Drl },
                state: state(rng),
            }
            .into(),
            2 => HousekeepingRule::RemoveChannel { channel: ch }.into(),
            3 => HousekeepingRule::RemoveObject { channel: ch, object: obj }.into(),
            4 => DifferentiationRule::SetMask(ClassifierMask {
                workflow_id: rng.gen(),
                request_type: rng.gen(),
                request_context: rng.gen(),
            })
            .into(),
            5 => DifferentiationRule::BindChannel { classifiers: classifiers(rng), channel: ch }.into(),
            6 => DifferentiationRule::BindObject { channel: ch, classifiers: classifiers(rng), object: obj }.into(),
            7 => DifferentiationRule::SetDefaultChannel { channel: ch }.into(),
            8 => DifferentiationRule::SetDefaultObject { channel: ch, object: obj }.into(),
            _ => EnforcementRule { object: obj, state: state(rng) }.into(),
        };
        Rule::new(id(rng), body)
    }

    fn stats<R: Rng>(rng: &mut R) -> StageStats {
        let channels = (0..rng.gen_range(0..4))
            .map(|_| {
                let start = id(rng);
                ChannelWindow {
                    channel: ChannelId(id(rng)),
                    stats: ChannelStats { window_bytes: id(rng), window_ops: id(rng), window_start: start },
                    window_end: start.saturating_add(id(rng)),
                    flows: (0..rng.gen_range(0..3))
                        .map(|_| FlowEntry {
                            workflow: id(rng).into(),
                            context: context(rng),
                            bytes: id(rng),
                            ops: id(rng),
                        })
                        .collect(),
                }
            })
            .collect();
        StageStats { collected_at: id(rng), channels }
    }

    /// Mangles a valid frame in one of several ways.
    pub fn mutate<R: Rng>(rng: &mut R, mut f: Vec<u8>) -> Vec<u8> {
        match rng.gen_range(0..6) {
            0 => {
                for _ in 0..rng.gen_range(1..4) {
                    let i = rng.gen_range(0..f.len());
                    f[i] ^= 1 << rng.gen_range(0..8);
                }
            }
            1 => f.truncate(rng.gen_range(0..f.len())),
            2 => {
                let len: u32 = match rng.gen_range(0..3) {
                    0 => rng.gen(),
                    1 => (MAX_BODY as u32).wrapping_add(rng.gen_range(0..3)),
                    _ => rng.gen_range(0..64),
                };
                f[..4].copy_from_slice(&len.to_le_bytes());
            }
            3 => {
                let i = rng.gen_range(4..=f.len());
                let b = *[0x1F, b'%', b'=', b':', 0xFF, 0xC3, b'\n'].get(rng.gen_range(0..7)).unwrap();
                f.insert(i, b);
                let len = (f.len() - 4) as u32;
                f[..4].copy_from_slice(&len.to_le_bytes());
            }
            4 => {
                let n = rng.gen_range(0..64);
                f = (0..n).map(|_| rng.gen()).collect();
            }
            _ => {
                let i = rng.gen_range(4..f.len().max(5));
                let b = rng.gen();
                if i < f.len() {
                    f[i] = b;
                }
            }
        }
        f
    }

    pub fn message<R: Rng>(rng: &mut R) -> Message {
        let msg_id = id(rng);
        match rng.gen_range(0..7) {
            0 => Message::StageInfoReq { msg_id },
            1 => Message::StageInfoResp {
                msg_id,
                info: StageInfo { pid: rng.gen(), name: text(rng), instance_id: text(rng), workflows: id(rng) },
            },
            2 => Message::Rule { msg_id, rule: rule(rng) },
            3 => Message::CollectReq { msg_id },
            4 => Message::CollectResp { msg_id, stats: stats(rng) },
            5 => Message::Ack { msg_id },
            _ => Message::Err {
                msg_id,
                failure: *[Failure::Rule, Failure::OutOfOrder, Failure::Protocol].choose(rng).unwrap(),
                detail: text(rng),
            },
        }
    }
}

/// Frames written out by hand from the wire format: `u32` little-endian
/// length, then `0x1F`-separated text.
pub fn golden_frames() -> Vec<(sds_core::protocol::Message, Vec<u8>)> {
    use sds_core::enforcement::{ChannelWindow, FlowEntry};
    use sds_core::protocol::{Failure, Message};
    use sds_core::stage::StageStats;
    use sds_core::{ChannelStats, EnforcementRule, ObjectId, ObjectState, Rule};

    fn framed(body: &[u8]) -> Vec<u8> {
        let mut v = (body.len() as u32).to_le_bytes().to_vec();
        v.extend_from_slice(body);
        v
    }
    vec![
        (Message::Ack { msg_id: 1 }, b"\x05\x00\x00\x00ack\x1F1".to_vec()),
        (Message::StageInfoReq { msg_id: 42 }, framed(b"stage_info_req\x1F42")),
        (
            Message::Rule {
                msg_id: 7,
                rule: Rule::new(
                    3,
                    EnforcementRule { object: ObjectId(2), state: ObjectState::new().with("rate", 26214400.0) },
                ),
            },
            framed(b"enf_rule\x1F7\x1Frule_id=3\x1Fobject=2\x1Fstate=rate:26214400"),
        ),
        (
            Message::CollectResp {
                msg_id: 3,
                stats: StageStats {
                    collected_at: 10,
                    channels: vec![ChannelWindow {
                        channel: ChannelId(1),
                        stats: ChannelStats { window_bytes: 4096, window_ops: 1, window_start: 0 },
                        window_end: 10,
                        flows: vec![FlowEntry {
                            workflow: 7.into(),
                            context: RequestContext::BG_FLUSH,
                            bytes: 4096,
                            ops: 1,
                        }],
                    }],
                },
            },
            framed(b"collect_resp\x1F3\x1Fat=10\x1Fchannel=1:0:10:4096:1\x1Fflow=7:4096:1:bg_flush"),
        ),
        (
            Message::Err { msg_id: 9, failure: Failure::Rule, detail: "unknown object 99".into() },
            framed(b"err\x1F9\x1Fcode=rule\x1Fdetail=unknown object 99"),
        ),
    ]
}
