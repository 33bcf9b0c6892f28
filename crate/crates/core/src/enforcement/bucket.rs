//! Exact token bucket arithmetic.
//!
//! Tokens are tracked in units of token·nanoseconds-per-second (one token is
//! `NANOS_PER_SEC` units), so refilling `rate` tokens/s over `dt` ns adds
//! exactly `rate * dt` units and every admission time is an integer number of
//! nanoseconds. Refill happens lazily whenever the bucket is touched.

use crate::clock::{Nanos, NANOS_PER_SEC};

const UNITS_PER_TOKEN: i128 = NANOS_PER_SEC as i128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Params {
    rate: u64,
    refill_period: Nanos,
}

impl Params {
    fn capacity(&self) -> i128 {
        i128::from(self.rate) * i128::from(self.refill_period)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pending {
    params: Params,
    effective_at: Nanos,
}

/// A token bucket refilled continuously at `rate` tokens/s with
/// capacity `rate × refill_period`.
///
/// Observed between admissions the balance stays within `[0, capacity]`.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    params: Params,
    tokens: i128,
    last: Nanos,
    epoch: Nanos,
    last_admit: Nanos,
    pending: Option<Pending>,
}

fn ceil_div(a: i128, b: i128) -> i128 {
    debug_assert!(a >= 0 && b > 0);
    (a + b - 1) / b
}

impl TokenBucket {
    /// A full bucket created at `now`. Both `rate` and `refill_period` must
    /// be non-zero.
    pub fn new(rate: u64, refill_period: Nanos, now: Nanos) -> Self {
        assert!(rate > 0 && refill_period > 0, "degenerate bucket");
        let params = Params { rate, refill_period };
        Self { params, tokens: params.capacity(), last: now, epoch: now, last_admit: now, pending: None }
    }

    pub fn rate(&self) -> u64 {
        self.params.rate
    }

    pub fn refill_period(&self) -> Nanos {
        self.params.refill_period
    }

    /// Capacity in whole tokens (rounded down).
    pub fn capacity(&self) -> u64 {
        (self.params.capacity() / UNITS_PER_TOKEN) as u64
    }

    pub fn capacity_exact(&self) -> f64 {
        self.params.capacity() as f64 / UNITS_PER_TOKEN as f64
    }

    /// Rate that will apply after the next refill boundary, if a change is
    /// queued.
    pub fn pending_rate(&self) -> Option<(u64, Nanos)> {
        self.pending.map(|p| (p.params.rate, p.effective_at))
    }

    pub fn pending_period(&self) -> Option<Nanos> {
        self.pending.map(|p| p.params.refill_period)
    }

    /// Tokens available at `t`, without mutating. Negative only while an
    /// admitted-later request is still collecting its cost.
    pub fn tokens_at(&self, t: Nanos) -> f64 {
        let mut probe = self.clone();
        probe.advance(t.max(self.last));
        probe.tokens as f64 / UNITS_PER_TOKEN as f64
    }

    /// First refill boundary strictly after `t`.
    pub fn next_boundary(&self, t: Nanos) -> Nanos {
        let p = self.params.refill_period;
        let since = t.saturating_sub(self.epoch);
        self.epoch + (since / p + 1) * p
    }

    fn accrue(&mut self, t: Nanos) {
        if t > self.last {
            let gained = i128::from(self.params.rate) * i128::from(t - self.last);
            self.tokens = (self.tokens + gained).min(self.params.capacity());
            self.last = t;
        }
    }

    fn advance(&mut self, t: Nanos) {
        if let Some(p) = self.pending {
            if t >= p.effective_at {
                self.accrue(p.effective_at);
                self.params = p.params;
                self.tokens = self.tokens.min(self.params.capacity());
                self.epoch = p.effective_at;
                self.pending = None;
            }
        }
        self.accrue(t);
    }

    /// Queues new parameters for the first refill boundary after `now`.
    /// Tokens already granted are never revoked; the balance is clamped to
    /// the new capacity when the change lands.
    pub fn reconfigure(&mut self, rate: u64, refill_period: Nanos, now: Nanos) {
        assert!(rate > 0 && refill_period > 0, "degenerate bucket");
        self.advance(now.max(self.last));
        let params = Params { rate, refill_period };
        if params == self.params {
            self.pending = None;
            return;
        }
        let effective_at = self.next_boundary(now.max(self.last));
        self.pending = Some(Pending { params, effective_at });
    }

    /// Reserves `cost` tokens for a request that becomes eligible at `at`
    /// and returns the time it is admitted. Admissions are FIFO: a request
    /// never passes an earlier one.
    ///
    /// The balance is debited at reservation and the request is admitted
    /// once it is back at zero, i.e. once refills have covered the whole
    /// cost. A request costing more than the capacity therefore drains the
    /// bucket as tokens arrive.
    pub fn reserve(&mut self, at: Nanos, cost: u64) -> Nanos {
        let start = at.max(self.last_admit).max(self.last);
        self.advance(start);
        self.tokens -= i128::from(cost) * UNITS_PER_TOKEN;

        let deficit = -self.tokens;
        let admit = if deficit <= 0 {
            start
        } else {
            let rate = i128::from(self.params.rate);
            match self.pending {
                Some(p) if p.effective_at > start => {
                    let before = rate * i128::from(p.effective_at - start);
                    if before >= deficit {
                        start + ceil_div(deficit, rate) as Nanos
                    } else {
                        p.effective_at + ceil_div(deficit - before, i128::from(p.params.rate)) as Nanos
                    }
                }
                _ => start + ceil_div(deficit, rate) as Nanos,
            }
        };
        self.last_admit = admit;
        admit
    }
}
