//! Request differentiation: mapping contexts to channels and objects.
//!
//! A [`ClassifierMask`] picks which classifiers of a [`Context`] take part
//! in routing. The selected values are encoded as little-endian `u64`s in
//! the fixed order (workflow id, request type, request context) and hashed
//! with 32-bit MurmurHash3 (x86 variant, seed 0) into a [`DiffToken`].
//! Routing tables map tokens to channels and, per channel, to objects.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::types::{ChannelId, Context, ObjectId, ParseError, RequestContext, RequestType, WorkflowId};

/// MurmurHash3, x86 32-bit variant.
pub fn murmur3_x86_32(data: &[u8], seed: u32) -> u32 {
    const C1: u32 = 0xcc9e_2d51;
    const C2: u32 = 0x1b87_3593;

    let mut h = seed;
    let mut blocks = data.chunks_exact(4);
    for block in &mut blocks {
        let mut k = u32::from_le_bytes([block[0], block[1], block[2], block[3]]);
        k = k.wrapping_mul(C1).rotate_left(15).wrapping_mul(C2);
        h ^= k;
        h = h.rotate_left(13).wrapping_mul(5).wrapping_add(0xe654_6b64);
    }

    let tail = blocks.remainder();
    if !tail.is_empty() {
        let mut k = 0u32;
        for (i, b) in tail.iter().enumerate() {
            k |= u32::from(*b) << (8 * i);
        }
        k = k.wrapping_mul(C1).rotate_left(15).wrapping_mul(C2);
        h ^= k;
    }

    h ^= data.len() as u32;
    h ^= h >> 16;
    h = h.wrapping_mul(0x85eb_ca6b);
    h ^= h >> 13;
    h = h.wrapping_mul(0xc2b2_ae35);
    h ^ (h >> 16)
}

/// Which classifiers participate in routing. Request size never does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ClassifierMask {
    pub workflow_id: bool,
    pub request_type: bool,
    pub request_context: bool,
}

impl ClassifierMask {
    pub const WORKFLOW: Self = Self { workflow_id: true, request_type: false, request_context: false };
    pub const TYPE: Self = Self { workflow_id: false, request_type: true, request_context: false };
    pub const CONTEXT: Self = Self { workflow_id: false, request_type: false, request_context: true };
    pub const CONTEXT_AND_TYPE: Self = Self { workflow_id: false, request_type: true, request_context: true };
    pub const ALL: Self = Self { workflow_id: true, request_type: true, request_context: true };

    pub fn is_empty(&self) -> bool {
        !(self.workflow_id || self.request_type || self.request_context)
    }
}

impl fmt::Display for ClassifierMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.workflow_id, "workflow_id"),
            (self.request_type, "request_type"),
            (self.request_context, "request_context"),
        ];
        let selected: Vec<&str> = names.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect();
        f.write_str(&selected.join("|"))
    }
}

impl FromStr for ClassifierMask {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mask = ClassifierMask::default();
        if s.is_empty() {
            return Ok(mask);
        }
        for part in s.split('|') {
            let flag = match part {
                "workflow_id" => &mut mask.workflow_id,
                "request_type" => &mut mask.request_type,
                "request_context" => &mut mask.request_context,
                _ => return Err(ParseError::unknown("classifier", part)),
            };
            if *flag {
                return Err(ParseError::invalid("classifier mask", s));
            }
            *flag = true;
        }
        Ok(mask)
    }
}

/// Classifier values a binding refers to. Fields outside the active mask
/// are carried but ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Classifiers {
    pub workflow_id: Option<WorkflowId>,
    pub request_type: Option<RequestType>,
    pub request_context: Option<RequestContext>,
}

fn pick<T>(on: bool, name: &'static str, v: Option<T>) -> Result<Option<T>, RoutingError> {
    match (on, v) {
        (false, _) => Ok(None),
        (true, Some(v)) => Ok(Some(v)),
        (true, None) => Err(RoutingError::MissingClassifier(name)),
    }
}

impl Classifiers {
    pub fn of(ctx: &Context) -> Self {
        Self {
            workflow_id: Some(ctx.workflow_id()),
            request_type: Some(ctx.request_type()),
            request_context: Some(ctx.request_context()),
        }
    }

    pub fn workflow(id: impl Into<WorkflowId>) -> Self {
        Self { workflow_id: Some(id.into()), ..Self::default() }
    }

    pub fn context(ctx: RequestContext) -> Self {
        Self { request_context: Some(ctx), ..Self::default() }
    }

    pub fn context_and_type(ctx: RequestContext, ty: RequestType) -> Self {
        Self { request_type: Some(ty), request_context: Some(ctx), ..Self::default() }
    }

    pub fn request_type(ty: RequestType) -> Self {
        Self { request_type: Some(ty), ..Self::default() }
    }

    /// Keeps only the fields selected by `mask`, failing if one is absent.
    fn project(&self, mask: ClassifierMask) -> Result<Classifiers, RoutingError> {
        Ok(Classifiers {
            workflow_id: pick(mask.workflow_id, "workflow_id", self.workflow_id)?,
            request_type: pick(mask.request_type, "request_type", self.request_type)?,
            request_context: pick(mask.request_context, "request_context", self.request_context)?,
        })
    }

    fn encode_into(&self, buf: &mut [u8; 24]) -> usize {
        let mut len = 0;
        let fields = [
            self.workflow_id.map(|w| w.0),
            self.request_type.map(RequestType::code),
            self.request_context.map(RequestContext::code),
        ];
        for v in fields.into_iter().flatten() {
            buf[len..len + 8].copy_from_slice(&v.to_le_bytes());
            len += 8;
        }
        len
    }
}

/// Fixed-size routing key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiffToken(pub u32);

impl fmt::Display for DiffToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoutingError {
    #[error("classifier mask selects no classifier")]
    EmptyMask,
    #[error("no classifier mask configured")]
    MaskNotSet,
    #[error("binding lacks classifier `{0}` required by the mask")]
    MissingClassifier(&'static str),
    #[error("no channel mapped for token {0} and no default channel")]
    Unmapped(DiffToken),
    #[error("stage has no routing configured")]
    NotConfigured,
    #[error("routed to channel {0}, which does not exist")]
    MissingChannel(ChannelId),
    #[error("channel {0} has no enforcement objects")]
    EmptyChannel(ChannelId),
    #[error("no object mapped in channel {channel} for token {token} and no default object")]
    UnmappedObject { channel: ChannelId, token: DiffToken },
    #[error("token {0} already bound to different classifiers")]
    Collision(DiffToken),
    #[error("classifiers with token {0} already bound to another target")]
    Conflict(DiffToken),
}

fn token_of(mask: ClassifierMask, projected: &Classifiers) -> DiffToken {
    let mut buf = [0u8; 24];
    let len = projected.encode_into(&mut buf);
    debug_assert!(len > 0 || mask.is_empty());
    DiffToken(murmur3_x86_32(&buf[..len], 0))
}

/// Hashes the classifiers of `ctx` selected by `mask`.
pub fn compute_token(mask: ClassifierMask, ctx: &Context) -> Result<DiffToken, RoutingError> {
    classifier_token(mask, &Classifiers::of(ctx))
}

pub fn classifier_token(mask: ClassifierMask, classifiers: &Classifiers) -> Result<DiffToken, RoutingError> {
    if mask.is_empty() {
        return Err(RoutingError::EmptyMask);
    }
    Ok(token_of(mask, &classifiers.project(mask)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Binding<T> {
    classifiers: Classifiers,
    target: T,
}

type BindingMap<T> = HashMap<DiffToken, Binding<T>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ObjectRoutes {
    bindings: BindingMap<ObjectId>,
    default: Option<ObjectId>,
}

fn insert_binding<T: Copy + PartialEq>(
    map: &mut BindingMap<T>,
    mask: ClassifierMask,
    classifiers: Classifiers,
    target: T,
) -> Result<(), RoutingError> {
    let projected = classifiers.project(mask)?;
    let token = token_of(mask, &projected);
    match map.get(&token) {
        Some(b) if b.classifiers.project(mask)? != projected => Err(RoutingError::Collision(token)),
        Some(b) if b.target != target => Err(RoutingError::Conflict(token)),
        Some(_) => Ok(()),
        None => {
            map.insert(token, Binding { classifiers, target });
            Ok(())
        }
    }
}

fn rekey<T: Copy + PartialEq>(map: &BindingMap<T>, mask: ClassifierMask) -> Result<BindingMap<T>, RoutingError> {
    let mut bindings: Vec<_> = map.values().collect();
    // deterministic error reporting
    bindings.sort_by_key(|b| (b.classifiers.workflow_id, b.classifiers.request_type, b.classifiers.request_context));
    let mut out = HashMap::with_capacity(map.len());
    for b in bindings {
        insert_binding(&mut out, mask, b.classifiers, b.target)?;
    }
    Ok(out)
}

/// Token-to-channel and token-to-object maps plus defaults.
///
/// Tables are values: the stage mutates a copy and swaps it in whole.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutingTable {
    mask: Option<ClassifierMask>,
    channels: BindingMap<ChannelId>,
    objects: HashMap<ChannelId, ObjectRoutes>,
    default_channel: Option<ChannelId>,
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mask(mask: ClassifierMask) -> Result<Self, RoutingError> {
        let mut t = Self::new();
        t.set_mask(mask)?;
        Ok(t)
    }

    pub fn mask(&self) -> Option<ClassifierMask> {
        self.mask
    }

    pub fn default_channel(&self) -> Option<ChannelId> {
        self.default_channel
    }

    /// Whether any routing has been configured at all.
    pub fn is_configured(&self) -> bool {
        self.mask.is_some() || self.default_channel.is_some()
    }

    /// Installs a new mask, re-keying existing bindings under it.
    pub fn set_mask(&mut self, mask: ClassifierMask) -> Result<(), RoutingError> {
        if mask.is_empty() {
            return Err(RoutingError::EmptyMask);
        }
        let channels = rekey(&self.channels, mask)?;
        let mut objects = HashMap::with_capacity(self.objects.len());
        for (ch, routes) in &self.objects {
            objects.insert(*ch, ObjectRoutes { bindings: rekey(&routes.bindings, mask)?, default: routes.default });
        }
        self.mask = Some(mask);
        self.channels = channels;
        self.objects = objects;
        Ok(())
    }

    fn require_mask(&self) -> Result<ClassifierMask, RoutingError> {
        self.mask.ok_or(RoutingError::MaskNotSet)
    }

    pub fn bind_channel(&mut self, classifiers: Classifiers, channel: ChannelId) -> Result<(), RoutingError> {
        let mask = self.require_mask()?;
        insert_binding(&mut self.channels, mask, classifiers, channel)
    }

    pub fn bind_object(
        &mut self,
        channel: ChannelId,
        classifiers: Classifiers,
        object: ObjectId,
    ) -> Result<(), RoutingError> {
        let mask = self.require_mask()?;
        let routes = self.objects.entry(channel).or_default();
        insert_binding(&mut routes.bindings, mask, classifiers, object)
    }

    pub fn set_default_channel(&mut self, channel: ChannelId) {
        self.default_channel = Some(channel);
    }

    pub fn set_default_object(&mut self, channel: ChannelId, object: ObjectId) {
        self.objects.entry(channel).or_default().default = Some(object);
    }

    /// Drops every route that leads to `channel`.
    pub fn remove_channel(&mut self, channel: ChannelId) {
        self.channels.retain(|_, b| b.target != channel);
        self.objects.remove(&channel);
        if self.default_channel == Some(channel) {
            self.default_channel = None;
        }
    }

    pub fn remove_object(&mut self, channel: ChannelId, object: ObjectId) {
        if let Some(routes) = self.objects.get_mut(&channel) {
            routes.bindings.retain(|_, b| b.target != object);
            if routes.default == Some(object) {
                routes.default = None;
            }
        }
    }

    pub fn references_channel(&self, channel: ChannelId) -> bool {
        self.default_channel == Some(channel) || self.channels.values().any(|b| b.target == channel)
    }

    /// Token of `ctx` under the current mask, if one is set.
    pub fn token(&self, ctx: &Context) -> Option<DiffToken> {
        self.mask.map(|m| token_of(m, &Classifiers::of(ctx).project(m).expect("context carries all classifiers")))
    }

    pub fn select_channel(&self, ctx: &Context) -> Result<ChannelId, RoutingError> {
        self.select_channel_by_token(self.token(ctx))
    }

    pub fn select_channel_by_token(&self, token: Option<DiffToken>) -> Result<ChannelId, RoutingError> {
        match token {
            Some(t) => {
                self.channels.get(&t).map(|b| b.target).or(self.default_channel).ok_or(RoutingError::Unmapped(t))
            }
            None => self.default_channel.ok_or(RoutingError::NotConfigured),
        }
    }

    /// Picks the object within `channel`; `objects` lists the channel's
    /// objects in creation order.
    pub fn select_object(
        &self,
        channel: ChannelId,
        ctx: &Context,
        objects: &[ObjectId],
    ) -> Result<ObjectId, RoutingError> {
        self.select_object_by_token(channel, self.token(ctx), objects)
    }

    pub fn select_object_by_token(
        &self,
        channel: ChannelId,
        token: Option<DiffToken>,
        objects: &[ObjectId],
    ) -> Result<ObjectId, RoutingError> {
        match objects {
            [] => return Err(RoutingError::EmptyChannel(channel)),
            [only] => return Ok(*only),
            _ => {}
        }
        let routes = self.objects.get(&channel);
        let bound = token.and_then(|t| routes.and_then(|r| r.bindings.get(&t)).map(|b| b.target));
        bound
            .or_else(|| routes.and_then(|r| r.default))
            .ok_or(RoutingError::UnmappedObject { channel, token: token.unwrap_or(DiffToken(0)) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::KnownContext;

    fn ctx(wf: u64, ty: RequestType, rc: RequestContext) -> Context {
        Context::new(wf, ty, 4096, rc)
    }

    #[test]
    fn murmur_known_vectors() {
        assert_eq!(murmur3_x86_32(b"", 0), 0);
        assert_eq!(murmur3_x86_32(b"", 1), 0x514e_28b7);
        assert_eq!(murmur3_x86_32(b"", 0xffff_ffff), 0x81f1_6f39);
        assert_eq!(murmur3_x86_32(&[0, 0, 0, 0], 0), 0x2362_f9de);
        assert_eq!(murmur3_x86_32(b"Hello, world!", 1234), 0xfaf6_cdb3);
        assert_eq!(murmur3_x86_32(b"The quick brown fox jumps over the lazy dog", 0), 0x2e4f_f723);
    }

    #[test]
    fn unmasked_fields_do_not_affect_token() {
        let m = ClassifierMask::WORKFLOW;
        let a = compute_token(m, &ctx(1, RequestType::Write, RequestContext::BG_FLUSH)).unwrap();
        let b = compute_token(m, &ctx(1, RequestType::Read, RequestContext::FOREGROUND)).unwrap();
        let c = compute_token(m, &Context::new(1, RequestType::Read, 0, RequestContext::NONE)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let c = ctx(1, RequestType::Read, RequestContext::NONE);
        assert_eq!(compute_token(ClassifierMask::default(), &c), Err(RoutingError::EmptyMask));
        assert_eq!(RoutingTable::new().set_mask(ClassifierMask::default()), Err(RoutingError::EmptyMask));
    }

    #[test]
    fn mask_text_form() {
        for m in [ClassifierMask::WORKFLOW, ClassifierMask::CONTEXT_AND_TYPE, ClassifierMask::ALL] {
            assert_eq!(m.to_string().parse::<ClassifierMask>().unwrap(), m);
        }
        assert_eq!(ClassifierMask::CONTEXT_AND_TYPE.to_string(), "request_type|request_context");
        assert!("size".parse::<ClassifierMask>().is_err());
        assert!("workflow_id|workflow_id".parse::<ClassifierMask>().is_err());
    }

    #[test]
    fn default_channel_catches_unmapped() {
        let mut t = RoutingTable::with_mask(ClassifierMask::WORKFLOW).unwrap();
        t.bind_channel(Classifiers::workflow(1), ChannelId(1)).unwrap();
        let stray = ctx(9, RequestType::Read, RequestContext::NONE);
        assert!(matches!(t.select_channel(&stray), Err(RoutingError::Unmapped(_))));
        t.set_default_channel(ChannelId(0));
        assert_eq!(t.select_channel(&stray).unwrap(), ChannelId(0));
        assert_eq!(t.select_channel(&ctx(1, RequestType::Read, RequestContext::NONE)).unwrap(), ChannelId(1));
    }

    #[test]
    fn unconfigured_table_reports_it() {
        let t = RoutingTable::new();
        assert!(!t.is_configured());
        let c = ctx(1, RequestType::Read, RequestContext::NONE);
        assert_eq!(t.select_channel(&c), Err(RoutingError::NotConfigured));
    }

    #[test]
    fn object_selection() {
        let mut t = RoutingTable::with_mask(ClassifierMask::CONTEXT).unwrap();
        let compaction = ChannelId(2);
        let (low, high) = (ObjectId(20), ObjectId(21));
        t.bind_object(compaction, Classifiers::context(RequestContext::BG_COMPACTION_L0_L1), low).unwrap();
        t.bind_object(compaction, Classifiers::context(RequestContext::BG_COMPACTION_HIGH), high).unwrap();
        let objs = [low, high];
        let l0 = ctx(3, RequestType::Write, RequestContext::BG_COMPACTION_L0_L1);
        let ln = ctx(3, RequestType::Write, RequestContext::BG_COMPACTION_HIGH);
        assert_eq!(t.select_object(compaction, &l0, &objs).unwrap(), low);
        assert_eq!(t.select_object(compaction, &ln, &objs).unwrap(), high);

        let other = ctx(3, RequestType::Write, RequestContext::BG_FLUSH);
        assert!(matches!(t.select_object(compaction, &other, &objs), Err(RoutingError::UnmappedObject { .. })));
        t.set_default_object(compaction, high);
        assert_eq!(t.select_object(compaction, &other, &objs).unwrap(), high);

        // singleton channels need no binding
        assert_eq!(t.select_object(ChannelId(7), &other, &[ObjectId(1)]).unwrap(), ObjectId(1));
        assert_eq!(t.select_object(ChannelId(7), &other, &[]), Err(RoutingError::EmptyChannel(ChannelId(7))));
    }

    #[test]
    fn rebinding_rules() {
        let mut t = RoutingTable::with_mask(ClassifierMask::CONTEXT).unwrap();
        let flush = Classifiers::context(RequestContext::BG_FLUSH);
        t.bind_channel(flush, ChannelId(1)).unwrap();
        // identical binding is idempotent
        t.bind_channel(flush, ChannelId(1)).unwrap();
        assert!(matches!(t.bind_channel(flush, ChannelId(2)), Err(RoutingError::Conflict(_))));
        assert_eq!(
            t.bind_channel(Classifiers::workflow(1), ChannelId(3)),
            Err(RoutingError::MissingClassifier("request_context"))
        );
        assert_eq!(RoutingTable::new().bind_channel(flush, ChannelId(1)), Err(RoutingError::MaskNotSet));
    }

    #[test]
    fn set_mask_rekeys_bindings() {
        let mut t = RoutingTable::with_mask(ClassifierMask::CONTEXT).unwrap();
        t.bind_channel(Classifiers::context_and_type(RequestContext::BG_FLUSH, RequestType::Write), ChannelId(1))
            .unwrap();
        t.set_mask(ClassifierMask::CONTEXT_AND_TYPE).unwrap();
        let c = ctx(0, RequestType::Write, RequestContext::BG_FLUSH);
        assert_eq!(t.select_channel(&c).unwrap(), ChannelId(1));
        // a binding without a type cannot survive a mask that needs it
        let mut u = RoutingTable::with_mask(ClassifierMask::CONTEXT).unwrap();
        u.bind_channel(Classifiers::context(RequestContext::BG_FLUSH), ChannelId(1)).unwrap();
        let before = u.clone();
        assert!(u.set_mask(ClassifierMask::CONTEXT_AND_TYPE).is_err());
        assert_eq!(u, before);
    }

    #[test]
    fn remove_channel_drops_routes() {
        let mut t = RoutingTable::with_mask(ClassifierMask::WORKFLOW).unwrap();
        t.bind_channel(Classifiers::workflow(1), ChannelId(1)).unwrap();
        t.set_default_channel(ChannelId(1));
        assert!(t.references_channel(ChannelId(1)));
        t.remove_channel(ChannelId(1));
        assert!(!t.references_channel(ChannelId(1)));
        assert!(t.select_channel(&ctx(1, RequestType::Read, RequestContext::NONE)).is_err());
    }

    #[test]
    fn custom_contexts_route() {
        let mut t = RoutingTable::with_mask(ClassifierMask::CONTEXT).unwrap();
        t.bind_channel(Classifiers::context(RequestContext::Custom(7)), ChannelId(4)).unwrap();
        let c = ctx(0, RequestType::Put, RequestContext::Custom(7));
        assert_eq!(t.select_channel(&c).unwrap(), ChannelId(4));
        let k = ctx(0, RequestType::Put, RequestContext::Known(KnownContext::Foreground));
        assert!(t.select_channel(&k).is_err());
    }
}
