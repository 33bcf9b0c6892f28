//! Software-defined storage data plane: an embeddable stage that classifies
//! and rate-limits I/O requests, the rules that configure it, a framed
//! control protocol and a feedback control plane.

pub mod clock;
pub mod control;
pub mod differentiation;
pub mod enforcement;
pub mod num;
pub mod protocol;
pub mod stage;
pub mod types;

pub use clock::{Clock, ManualClock, Nanos, SystemClock, NANOS_PER_SEC};
pub use differentiation::{ClassifierMask, Classifiers, DiffToken, RoutingError, RoutingTable};
pub use enforcement::{obj_init, EnforcementObject, ObjectError, TokenBucket};
pub use num::{Bandwidth, ExactBandwidth};
pub use types::*;

/// Tail-latency controller settings over plain floating point.
pub type TailLatencyConfigF64 = control::TailLatencyConfig<f64>;
pub type TailLatencyAllocationF64 = control::TailLatencyAllocation<f64>;
/// The same settings over exact rationals, for reference computations.
pub type TailLatencyConfigExact = control::TailLatencyConfig<ExactBandwidth>;
pub type TailLatencyAllocationExact = control::TailLatencyAllocation<ExactBandwidth>;
