//! Scalar abstraction for bandwidth arithmetic.
//!
//! The control algorithms are written once over [`Bandwidth`] and
//! instantiated with `f64` in production and with exact rationals in
//! oracle checks.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};

/// A totally usable bandwidth quantity (bytes per second).
pub trait Bandwidth: Num + PartialOrd + Copy + Debug + FromPrimitive + ToPrimitive {
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar")
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    /// Clamps negative values to zero.
    fn non_negative(self) -> Self {
        self.max_of(Self::zero())
    }
}

impl Bandwidth for f32 {}
impl Bandwidth for f64 {}
impl Bandwidth for Ratio<i64> {}
impl Bandwidth for Ratio<i128> {}

/// Exact rational bandwidth, used where results must match an oracle bit
/// for bit.
pub type ExactBandwidth = Ratio<i128>;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;
pub const GIB: u64 = 1024 * MIB;

/// Parses `"10MiB"`, `"512 KiB"`, `"1GiB"`, or a bare number of bytes.
pub fn parse_bytes(text: &str) -> Option<f64> {
    let t = text.trim();
    let (num, mult) = [("GiB", GIB), ("MiB", MIB), ("KiB", KIB), ("B", 1)]
        .iter()
        .find_map(|(suffix, m)| t.strip_suffix(suffix).map(|n| (n.trim(), *m as f64)))
        .unwrap_or((t, 1.0));
    let v: f64 = num.parse().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v * mult)
}
