mod oracles;

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sds_core::{
    obj_init, Clock, Context, ManualClock, ObjectKind, ObjectState, Request, RequestContext, RequestType, TokenBucket,
};

const MS: u64 = 1_000_000;

struct Trace {
    rate: u64,
    period_us: u64,
    created: u64,
    requests: Vec<(u64, u64)>,
}

fn random_trace(rng: &mut ChaCha8Rng, max_len: usize) -> Trace {
    let rate = rng.gen_range(1..=64 * 1024 * 1024);
    let period_us = rng.gen_range(1..=1_000_000);
    let cap = (rate as u128 * period_us as u128 / 1_000_000).max(1) as u64;
    let created = rng.gen_range(0..10 * MS);
    let n = rng.gen_range(1..=max_len);
    let mut t = created;
    let mut requests = Vec::with_capacity(n);
    // mean request about a tenth of a second of traffic, some over capacity
    let mean = (rate / 10).max(1);
    for _ in 0..n {
        t += match rng.gen_range(0..4) {
            0 => 0,
            1 => rng.gen_range(0..1_000),
            _ => rng.gen_range(0..200 * MS),
        };
        let cost = match rng.gen_range(0..10) {
            0 => 0,
            1 => rng.gen_range(cap..=cap.saturating_mul(3).max(cap)),
            _ => rng.gen_range(1..=2 * mean),
        };
        requests.push((t, cost));
    }
    Trace { rate, period_us, created, requests }
}

/// Runs the trace through a DRL object on a driven clock.
fn drl_admissions(tr: &Trace) -> Vec<u64> {
    let clock = Arc::new(ManualClock::driven());
    clock.set(tr.created);
    let state = ObjectState::new().with("rate", tr.rate as f64).with("refill_period_us", tr.period_us as f64);
    let obj = obj_init(ObjectKind::Drl, &state, clock.clone() as Arc<dyn Clock>).unwrap();
    tr.requests
        .iter()
        .map(|&(at, cost)| {
            clock.set(at);
            let ctx = Context::new(1, RequestType::Write, cost, RequestContext::NONE);
            let mut req = Request::metadata_only(ctx);
            obj.enforce(&ctx, &mut req, at).unwrap()
        })
        .collect()
}

#[test]
fn oracle_hand_cases() {
    // 1000 tokens/s, 10 ms period: capacity 10 tokens
    let adm = oracles::bucket_admissions(1000, 10 * MS, 0, &[(0, 10), (0, 10), (0, 5), (100 * MS, 10)]);
    assert_eq!(adm, vec![0, 10 * MS, 15 * MS, 100 * MS]);
    // oversized request waits for the excess, zero-size costs one token
    let adm = oracles::bucket_admissions(1000, 10 * MS, 0, &[(0, 30), (0, 0)]);
    assert_eq!(adm, vec![20 * MS, 21 * MS]);
}

#[test]
fn drl_matches_reference_bucket() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..100 {
        let tr = random_trace(&mut rng, 1000);
        let expected = oracles::bucket_admissions(tr.rate, tr.period_us * 1_000, tr.created, &tr.requests);
        assert_eq!(drl_admissions(&tr), expected, "rate {} period {}us", tr.rate, tr.period_us);
    }
}

#[test]
fn conservation_on_random_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    for _ in 0..1000 {
        let tr = random_trace(&mut rng, 200);
        let adm = drl_admissions(&tr);
        let r = tr.rate as i128;
        let cap = r * (tr.period_us * 1_000) as i128;
        let mut sum = 0i128;
        for (k, (&(_, cost), &d)) in tr.requests.iter().zip(&adm).enumerate() {
            sum += cost.max(1) as i128 * 1_000_000_000;
            assert!(sum <= cap + r * (d - tr.created) as i128, "request {k}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn admissions_are_fifo_and_never_early(
        rate in 1u64..10_000_000,
        period_us in 1u64..500_000,
        gaps in prop::collection::vec((0u64..50 * MS, 0u64..2_000_000), 1..100),
    ) {
        let mut b = TokenBucket::new(rate, period_us * 1_000, 0);
        let (mut t, mut last) = (0, 0);
        for (gap, cost) in gaps {
            t += gap;
            let d = b.reserve(t, cost.max(1));
            prop_assert!(d >= t);
            prop_assert!(d >= last);
            last = d;
        }
    }

    #[test]
    fn window_conservation(
        rate in 1u64..10_000_000,
        period_us in 1u64..500_000,
        reqs in prop::collection::vec((0u64..50 * MS, 1u64..2_000_000), 1..100),
    ) {
        let mut t = 0;
        let trace: Vec<(u64, u64)> = reqs.into_iter().map(|(g, c)| { t += g; (t, c) }).collect();
        let mut b = TokenBucket::new(rate, period_us * 1_000, 0);
        let adm: Vec<u64> = trace.iter().map(|&(a, c)| b.reserve(a, c)).collect();
        let cap = rate as i128 * (period_us * 1_000) as i128;
        // bytes admitted by d_k since request i became eligible
        for k in 0..trace.len() {
            let mut sum = 0i128;
            for i in (0..=k).rev() {
                sum += trace[i].1 as i128 * 1_000_000_000;
                let eligible = trace[i].0.max(if i == 0 { 0 } else { adm[i - 1] });
                prop_assert!(sum <= cap + rate as i128 * (adm[k] - eligible) as i128);
            }
        }
    }

    #[test]
    fn rate_change_lands_on_boundary(
        rate in 1_000u64..1_000_000,
        new_rate in 1_000u64..1_000_000,
        at in 0u64..1_000 * MS,
    ) {
        let period = 100 * MS;
        let mut b = TokenBucket::new(rate, period, 0);
        b.reconfigure(new_rate, period, at);
        if new_rate != rate {
            let (r, eff) = b.pending_rate().unwrap();
            prop_assert_eq!(r, new_rate);
            prop_assert!(eff > at && eff % period == 0 && eff - at <= period);
        } else {
            prop_assert!(b.pending_rate().is_none());
        }
    }

    #[test]
    fn balance_stays_within_capacity(
        rate in 1u64..1_000_000,
        period_us in 1u64..100_000,
        probes in prop::collection::vec(0u64..10_000 * MS, 1..20),
    ) {
        let mut b = TokenBucket::new(rate, period_us * 1_000, 0);
        let d = b.reserve(0, rate);
        for p in probes {
            let tokens = b.tokens_at(d + p);
            prop_assert!(tokens >= 0.0 && tokens <= b.capacity_exact() + 1e-9);
        }
    }
}
