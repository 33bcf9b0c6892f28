//! Bandwidth allocation steps, generic over the scalar type.

use crate::num::Bandwidth;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailLatencyConfig<B> {
    /// Total bandwidth the key-value store may use.
    pub kvs_bandwidth: B,
    /// Floor for every background class.
    pub min_bandwidth: B,
}

/// Observed rates of the four flow classes over the last window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TailLatencyTelemetry<B> {
    pub foreground: B,
    pub flush: B,
    pub l0: B,
    pub high: B,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailLatencyAllocation<B> {
    pub flush: B,
    pub l0: B,
    pub high: B,
}

/// Splits what foreground traffic leaves over flushes, low-level
/// compactions and high-level compactions, favouring the first two.
pub fn tail_latency_step<B: Bandwidth>(
    cfg: &TailLatencyConfig<B>,
    t: &TailLatencyTelemetry<B>,
) -> TailLatencyAllocation<B> {
    let min = cfg.min_bandwidth;
    let left = (cfg.kvs_bandwidth - t.foreground.non_negative()).max_of(min);
    let flushing = t.flush > B::zero();
    let compacting_l0 = t.l0 > B::zero();
    match (flushing, compacting_l0) {
        (true, true) => {
            let half = left / B::from_count(2);
            TailLatencyAllocation { flush: half, l0: half, high: min }
        }
        (true, false) => TailLatencyAllocation { flush: left, l0: min, high: min },
        (false, true) => TailLatencyAllocation { flush: min, l0: left, high: min },
        (false, false) => TailLatencyAllocation { flush: min, l0: min, high: left },
    }
}

/// Max-min fair shares of `max_bandwidth` for the given demands, in input
/// order. Demands are served smallest first; whatever is left after every
/// demand is met is spread evenly.
///
/// Returns `None` for an empty demand list.
pub fn fair_share_step<B: Bandwidth>(max_bandwidth: B, demands: &[B]) -> Option<Vec<B>> {
    if demands.is_empty() {
        return None;
    }
    let n = demands.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| demands[a].partial_cmp(&demands[b]).expect("comparable demands"));

    let mut rates = vec![B::zero(); n];
    let mut left = max_bandwidth.non_negative();
    for (i, &k) in order.iter().enumerate() {
        let share = left / B::from_count(n - i);
        let rate = demands[k].non_negative().min_of(share);
        rates[k] = rate;
        left = left - rate;
    }
    let extra = left / B::from_count(n);
    for r in &mut rates {
        *r = *r + extra;
    }
    Some(rates)
}
