//! Shared vocabulary: contexts, requests, results, rules and statistics.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use thiserror::Error;

use crate::clock::{nanos_to_secs, Nanos};
use crate::differentiation::{ClassifierMask, Classifiers};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
    #[error("invalid {what} `{value}`")]
    Invalid { what: &'static str, value: String },
}

impl ParseError {
    pub(crate) fn unknown(what: &'static str, value: &str) -> Self {
        Self::Unknown { what, value: value.to_string() }
    }

    pub(crate) fn invalid(what: &'static str, value: &str) -> Self {
        Self::Invalid { what, value: value.to_string() }
    }
}

macro_rules! id_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl FromStr for $name {
            type Err = ParseError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.parse()
                    .map($name)
                    .map_err(|_| ParseError::invalid(stringify!($name), s))
            }
        }

        impl From<u64> for $name {
            fn from(v: u64) -> Self {
                $name(v)
            }
        }
    };
}

id_newtype!(
    /// Identifier of the flow that emitted a request (typically a thread).
    WorkflowId
);
id_newtype!(ChannelId);
id_newtype!(
    /// Enforcement object id, unique across all channels of a stage.
    ObjectId
);
id_newtype!(RuleId);

const DERIVED_WORKFLOW_BASE: u64 = 1 << 48;
static NEXT_THREAD_WORKFLOW: AtomicU64 = AtomicU64::new(DERIVED_WORKFLOW_BASE);

thread_local! {
    static THREAD_WORKFLOW: Cell<Option<u64>> = const { Cell::new(None) };
}

impl WorkflowId {
    /// A stable id for the calling thread, handed out on first use.
    ///
    /// Derived ids start at 2^48 so they stay clear of small caller-assigned
    /// ids.
    pub fn current_thread() -> Self {
        THREAD_WORKFLOW.with(|cell| {
            let id = cell.get().unwrap_or_else(|| {
                let id = NEXT_THREAD_WORKFLOW.fetch_add(1, Ordering::Relaxed);
                cell.set(Some(id));
                id
            });
            WorkflowId(id)
        })
    }
}

macro_rules! tag_enum {
    ($(#[$doc:meta])* $name:ident, $what:literal { $($variant:ident => $tag:literal = $code:literal),+ $(,)? }) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $tag),+
                }
            }

            /// Stable numeric code used in token hashing.
            pub fn code(self) -> u64 {
                match self {
                    $($name::$variant => $code),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ParseError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($tag => Ok($name::$variant),)+
                    _ => Err(ParseError::unknown($what, s)),
                }
            }
        }
    };
}

tag_enum!(
    /// The operation a request performs.
    RequestType, "request type" {
        Read => "read" = 0,
        Write => "write" = 1,
        Open => "open" = 2,
        Close => "close" = 3,
        Put => "put" = 4,
        Get => "get" = 5,
        NoOp => "no_op" = 6,
    }
);

tag_enum!(
    /// Built-in operation contexts; see [`RequestContext`].
    KnownContext, "request context" {
        Foreground => "foreground" = 0,
        BgFlush => "bg_flush" = 1,
        BgCompactionL0L1 => "bg_compaction_l0_l1" = 2,
        BgCompactionHigh => "bg_compaction_high" = 3,
        BackgroundGeneric => "background_generic" = 4,
        None => "none" = 5,
    }
);

/// The originating operation of a request, as propagated by the layer above.
///
/// `Custom` lets an embedding application name its own contexts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RequestContext {
    Known(KnownContext),
    Custom(u32),
}

impl RequestContext {
    pub const FOREGROUND: Self = Self::Known(KnownContext::Foreground);
    pub const BG_FLUSH: Self = Self::Known(KnownContext::BgFlush);
    pub const BG_COMPACTION_L0_L1: Self = Self::Known(KnownContext::BgCompactionL0L1);
    pub const BG_COMPACTION_HIGH: Self = Self::Known(KnownContext::BgCompactionHigh);
    pub const BACKGROUND_GENERIC: Self = Self::Known(KnownContext::BackgroundGeneric);
    pub const NONE: Self = Self::Known(KnownContext::None);

    /// The built-in contexts, without custom ones.
    pub fn known() -> impl Iterator<Item = RequestContext> {
        KnownContext::ALL.iter().map(|k| RequestContext::Known(*k))
    }

    pub fn code(self) -> u64 {
        match self {
            Self::Known(k) => k.code(),
            Self::Custom(n) => (1 << 32) | u64::from(n),
        }
    }

    pub fn is_background(self) -> bool {
        matches!(
            self,
            Self::Known(
                KnownContext::BgFlush
                    | KnownContext::BgCompactionL0L1
                    | KnownContext::BgCompactionHigh
                    | KnownContext::BackgroundGeneric
            )
        )
    }

    pub fn is_compaction(self) -> bool {
        matches!(self, Self::Known(KnownContext::BgCompactionL0L1 | KnownContext::BgCompactionHigh))
    }
}

impl Default for RequestContext {
    fn default() -> Self {
        Self::NONE
    }
}

impl fmt::Display for RequestContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Known(k) => f.write_str(k.as_str()),
            Self::Custom(n) => write!(f, "custom:{n}"),
        }
    }
}

impl FromStr for RequestContext {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(n) = s.strip_prefix("custom:") {
            return n.parse().map(Self::Custom).map_err(|_| ParseError::invalid("request context", s));
        }
        s.parse().map(Self::Known)
    }
}

/// Per-request classifier bundle. Immutable once built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Context {
    workflow_id: WorkflowId,
    request_type: RequestType,
    request_size: u64,
    request_context: RequestContext,
}

impl Context {
    /// A size of zero denotes a context-only (metadata) request.
    pub fn new(
        workflow_id: impl Into<WorkflowId>,
        request_type: RequestType,
        request_size: u64,
        request_context: RequestContext,
    ) -> Self {
        Self { workflow_id: workflow_id.into(), request_type, request_size, request_context }
    }

    /// Builds a context whose workflow id is derived from the calling thread.
    pub fn for_current_thread(request_type: RequestType, request_size: u64, request_context: RequestContext) -> Self {
        Self::new(WorkflowId::current_thread(), request_type, request_size, request_context)
    }

    pub fn workflow_id(&self) -> WorkflowId {
        self.workflow_id
    }

    pub fn request_type(&self) -> RequestType {
        self.request_type
    }

    pub fn request_size(&self) -> u64 {
        self.request_size
    }

    pub fn request_context(&self) -> RequestContext {
        self.request_context
    }
}

/// Text form `workflow:type:size:context`.
impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.workflow_id, self.request_type, self.request_size, self.request_context)
    }
}

impl FromStr for Context {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.splitn(4, ':');
        let mut next = || it.next().ok_or_else(|| ParseError::invalid("context", s));
        let wf: WorkflowId = next()?.parse()?;
        let ty: RequestType = next()?.parse()?;
        let size: u64 = next()?.parse().map_err(|_| ParseError::invalid("request size", s))?;
        let ctx: RequestContext = next()?.parse()?;
        Ok(Context::new(wf, ty, size, ctx))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("payload holds {actual} bytes but the context declares {declared}")]
pub struct PayloadMismatch {
    pub declared: u64,
    pub actual: u64,
}

/// A request as handed to the stage.
///
/// Without a payload, enforcement happens on metadata alone and the content
/// is never copied into the stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    context: Context,
    payload: Option<Vec<u8>>,
}

impl Request {
    pub fn new(context: Context, payload: Option<Vec<u8>>) -> Result<Self, PayloadMismatch> {
        if let Some(p) = &payload {
            if p.len() as u64 != context.request_size {
                return Err(PayloadMismatch { declared: context.request_size, actual: p.len() as u64 });
            }
        }
        Ok(Self { context, payload })
    }

    pub fn with_payload(context: Context, payload: Vec<u8>) -> Result<Self, PayloadMismatch> {
        Self::new(context, Some(payload))
    }

    pub fn metadata_only(context: Context) -> Self {
        Self { context, payload: None }
    }

    pub fn context(&self) -> &Context {
        &self.context
    }

    pub fn payload(&self) -> Option<&[u8]> {
        self.payload.as_deref()
    }

    /// Replaces the payload buffer with a fresh copy of itself.
    pub fn copy_payload(&mut self) {
        if let Some(p) = &self.payload {
            self.payload = Some(p.as_slice().to_vec());
        }
    }

    pub fn into_payload(self) -> Option<Vec<u8>> {
        self.payload
    }
}

/// Why a request came back without being enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Routing,
    Configuration,
    Enforcement,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Routing => "routing",
            Self::Configuration => "configuration",
            Self::Enforcement => "enforcement",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// The stage runs fail-open and forwarded the request untouched.
    Unenforced(ErrorCode),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnforcedResult {
    pub status: Status,
    pub payload: Option<Vec<u8>>,
    /// Time the request was held back by enforcement.
    pub wait_applied: Duration,
}

impl EnforcedResult {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectKind {
    Noop,
    Drl,
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Noop => "noop",
            Self::Drl => "drl",
        })
    }
}

impl FromStr for ObjectKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noop" => Ok(Self::Noop),
            "drl" => Ok(Self::Drl),
            _ => Err(ParseError::unknown("object kind", s)),
        }
    }
}

/// Key-value configuration handed to an enforcement object.
///
/// Text form: `key:value,key:value`, keys sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectState(BTreeMap<String, f64>);

impl ObjectState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: f64) {
        self.0.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn valid_state_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

impl fmt::Display for ObjectState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}:{v}")?;
        }
        Ok(())
    }
}

impl FromStr for ObjectState {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut state = ObjectState::new();
        if s.is_empty() {
            return Ok(state);
        }
        for item in s.split(',') {
            let (k, v) = item.split_once(':').ok_or_else(|| ParseError::invalid("state entry", item))?;
            if !valid_state_key(k) || state.0.contains_key(k) {
                return Err(ParseError::invalid("state key", k));
            }
            let v: f64 = v.parse().map_err(|_| ParseError::invalid("state value", v))?;
            if !v.is_finite() {
                return Err(ParseError::invalid("state value", item));
            }
            state.set(k, v);
        }
        Ok(state)
    }
}

/// Topology changes.
#[derive(Debug, Clone, PartialEq)]
pub enum HousekeepingRule {
    CreateChannel { channel: ChannelId },
    CreateObject { channel: ChannelId, object: ObjectId, kind: ObjectKind, state: ObjectState },
    RemoveChannel { channel: ChannelId },
    RemoveObject { channel: ChannelId, object: ObjectId },
}

/// Routing changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DifferentiationRule {
    SetMask(ClassifierMask),
    BindChannel { classifiers: Classifiers, channel: ChannelId },
    BindObject { channel: ChannelId, classifiers: Classifiers, object: ObjectId },
    SetDefaultChannel { channel: ChannelId },
    SetDefaultObject { channel: ChannelId, object: ObjectId },
}

/// Tuning of a single enforcement object.
#[derive(Debug, Clone, PartialEq)]
pub struct EnforcementRule {
    pub object: ObjectId,
    pub state: ObjectState,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleBody {
    Housekeeping(HousekeepingRule),
    Differentiation(DifferentiationRule),
    Enforcement(EnforcementRule),
}

impl From<HousekeepingRule> for RuleBody {
    fn from(r: HousekeepingRule) -> Self {
        Self::Housekeeping(r)
    }
}

impl From<DifferentiationRule> for RuleBody {
    fn from(r: DifferentiationRule) -> Self {
        Self::Differentiation(r)
    }
}

impl From<EnforcementRule> for RuleBody {
    fn from(r: EnforcementRule) -> Self {
        Self::Enforcement(r)
    }
}

/// A control-plane command. Ids increase monotonically per issuer.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub id: RuleId,
    pub body: RuleBody,
}

impl Rule {
    pub fn new(id: impl Into<RuleId>, body: impl Into<RuleBody>) -> Self {
        Self { id: id.into(), body: body.into() }
    }
}

/// Windowed channel counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelStats {
    pub window_bytes: u64,
    pub window_ops: u64,
    pub window_start: Nanos,
}

impl ChannelStats {
    /// Mean bytes per second between `window_start` and `now`.
    pub fn mean_throughput(&self, now: Nanos) -> f64 {
        let elapsed = now.saturating_sub(self.window_start);
        if elapsed == 0 {
            0.0
        } else {
            self.window_bytes as f64 / nanos_to_secs(elapsed)
        }
    }
}
