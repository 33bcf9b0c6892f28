//! Desk-scale experiments for the sds stage: a virtual-time shared disk, a
//! key-value store workload with background flushes and compactions, a
//! multi-tenant reader workload, and a loopback microbenchmark.

pub mod des;
pub mod disk;
pub mod lsm;
pub mod microbench;
pub mod output;
pub mod posix;
pub mod tenants;

use thiserror::Error;

pub use disk::{DiskError, IoKind, SimDisk};
pub use output::{Manifest, Trace};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Disk(#[from] DiskError),
    #[error("stage: {0}")]
    Stage(String),
    #[error(transparent)]
    Control(#[from] sds_core::control::ControlError),
}

/// Full-size to desk-size factor for sizes and rates.
pub const DESK_SCALE: f64 = 1.0 / 25.0;

pub(crate) fn secs(t: sds_core::Nanos) -> f64 {
    sds_core::clock::nanos_to_secs(t)
}

pub(crate) fn nanos(s: f64) -> sds_core::Nanos {
    sds_core::clock::secs_to_nanos(s)
}
