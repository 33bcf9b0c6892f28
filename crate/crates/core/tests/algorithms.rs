mod oracles;

use oracles::{max_min_fair, water_fill, Q, TAIL_LATENCY_CASES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sds_core::control::{fair_share_step, tail_latency_step, TailLatencyTelemetry};
use sds_core::{ExactBandwidth, TailLatencyConfigExact, TailLatencyConfigF64};

const CFG: TailLatencyConfigF64 = TailLatencyConfigF64 { kvs_bandwidth: 200.0, min_bandwidth: 10.0 };

fn q(v: f64) -> ExactBandwidth {
    ExactBandwidth::from_integer(v as i128)
}

#[test]
fn tail_latency_matches_hand_table() {
    let exact_cfg = TailLatencyConfigExact { kvs_bandwidth: q(200.0), min_bandwidth: q(10.0) };
    for ((fg, fl, l0, ln), (bfl, bl0, bln)) in TAIL_LATENCY_CASES {
        let a = tail_latency_step(&CFG, &TailLatencyTelemetry { foreground: fg, flush: fl, l0, high: ln });
        assert_eq!((a.flush, a.l0, a.high), (bfl, bl0, bln), "Fg={fg} Fl={fl} L0={l0}");
        let t = TailLatencyTelemetry { foreground: q(fg), flush: q(fl), l0: q(l0), high: q(ln) };
        let e = tail_latency_step(&exact_cfg, &t);
        assert_eq!((e.flush, e.l0, e.high), (q(bfl), q(bl0), q(bln)));
    }
}

fn random_demands(rng: &mut ChaCha8Rng) -> (i128, Vec<i128>) {
    let n = rng.gen_range(1..=6);
    let max = rng.gen_range(1_i128..=4 << 30);
    let demands = (0..n)
        .map(|_| match rng.gen_range(0..5) {
            0 => 0,
            1 => max / n as i128,
            _ => rng.gen_range(1..=max),
        })
        .collect();
    (max, demands)
}

#[test]
fn fair_share_matches_water_filling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfa12);
    for _ in 0..200 {
        let (max, demands) = random_demands(&mut rng);
        let qd: Vec<Q> = demands.iter().map(|d| Q::from_integer(*d)).collect();
        let expected = water_fill(Q::from_integer(max), &qd);

        let exact = fair_share_step(Q::from_integer(max), &qd).unwrap();
        assert_eq!(exact, expected, "max {max} demands {demands:?}");
        assert!(max_min_fair(Q::from_integer(max), &qd, &exact));

        let fd: Vec<f64> = demands.iter().map(|d| *d as f64).collect();
        let approx = fair_share_step(max as f64, &fd).unwrap();
        for (a, e) in approx.iter().zip(&expected) {
            let e = *e.numer() as f64 / *e.denom() as f64;
            assert!((a - e).abs() <= 1.0, "{a} vs {e}");
        }
    }
}

#[test]
fn fair_share_rejects_empty_set() {
    assert_eq!(fair_share_step(100.0, &[]), None);
}

fn telemetry() -> impl Strategy<Value = TailLatencyTelemetry<f64>> {
    let rate = prop_oneof![Just(0.0), 0.0..400.0f64];
    (rate.clone(), rate.clone(), rate.clone(), rate).prop_map(|(foreground, flush, l0, high)| TailLatencyTelemetry {
        foreground,
        flush,
        l0,
        high,
    })
}

proptest! {
    #[test]
    fn tail_latency_floors(kvs in 20.0..1000.0f64, min in 1.0..10.0f64, t in telemetry()) {
        let cfg = TailLatencyConfigF64 { kvs_bandwidth: kvs, min_bandwidth: min };
        let a = tail_latency_step(&cfg, &t);
        let left = (kvs - t.foreground).max(min);
        // every class keeps its floor unless the split halves a small left
        let split = t.flush > 0.0 && t.l0 > 0.0;
        for v in [a.flush, a.l0, a.high] {
            prop_assert!(v >= min || (split && v == left / 2.0));
            prop_assert!(v <= left.max(min));
        }
        if t.foreground >= kvs {
            prop_assert_eq!(left, min);
            prop_assert!(a.flush + a.l0 + a.high <= 3.0 * min);
        }
        // the high class gets left only when nothing else is active
        prop_assert_eq!(a.high == left && left > min, !(t.flush > 0.0 || t.l0 > 0.0) && left > min);
    }

    #[test]
    fn fair_share_is_feasible_and_pareto(
        max in 1i64..1_000_000,
        demands in prop::collection::vec(0i64..1_000_000, 1..=6),
    ) {
        let qd: Vec<Q> = demands.iter().map(|d| Q::from_integer(*d as i128)).collect();
        let rates = fair_share_step(Q::from_integer(max as i128), &qd).unwrap();
        prop_assert!(rates.iter().copied().sum::<Q>() <= Q::from_integer(max as i128));
        prop_assert!(max_min_fair(Q::from_integer(max as i128), &qd, &rates));
        if demands.iter().sum::<i64>() <= max {
            for (r, d) in rates.iter().zip(&qd) {
                prop_assert!(r >= d);
            }
        }
    }

    #[test]
    fn fair_share_ignores_input_order(
        max in 1.0..1e9f64,
        mut demands in prop::collection::vec(0.0..1e9f64, 1..=6),
    ) {
        let a = fair_share_step(max, &demands).unwrap();
        let pairs: Vec<(f64, f64)> = demands.iter().copied().zip(a).collect();
        demands.reverse();
        let b = fair_share_step(max, &demands).unwrap();
        for ((d, r), (d2, r2)) in pairs.iter().rev().zip(demands.iter().zip(&b)) {
            prop_assert_eq!(d, d2);
            prop_assert!((r - r2).abs() <= 1e-6 * max);
        }
    }
}
