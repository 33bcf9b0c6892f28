//! Framed control protocol between the control plane and stages.
//!
//! A frame is a little-endian `u32` body length followed by the body. The
//! body is UTF-8 text: `kind`, `msg_id`, then `key=value` fields, all
//! separated by `0x1F`. Field order is fixed per kind. Values escape `%`,
//! `0x1F`, tab, CR and LF as `%XX`.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::differentiation::{ClassifierMask, Classifiers};
use crate::enforcement::{ChannelWindow, FlowEntry};
use crate::stage::{StageInfo, StageStats};
use crate::types::{
    ChannelId, ChannelStats, DifferentiationRule, EnforcementRule, HousekeepingRule, ObjectId, ObjectKind, ObjectState,
    Rule, RuleBody, RuleId,
};

pub const MAX_BODY: usize = 1 << 20;
pub const HEADER_LEN: usize = 4;
const SEP: char = '\x1F';

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("frame body of {0} bytes exceeds the limit")]
    Oversized(usize),
    #[error("frame body is not UTF-8")]
    Utf8,
    #[error("unknown message kind `{0}`")]
    UnknownKind(String),
    #[error("bad message id `{0}`")]
    BadMsgId(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("unexpected field `{0}`")]
    UnexpectedField(String),
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("bad escape sequence in `{0}`")]
    BadEscape(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    /// More bytes are needed to complete the frame.
    #[error("incomplete frame")]
    Incomplete,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Category of a rejected request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    /// The rule was well formed but could not be applied.
    Rule,
    /// The rule id did not increase.
    OutOfOrder,
    Protocol,
}

impl Failure {
    fn as_str(self) -> &'static str {
        match self {
            Failure::Rule => "rule",
            Failure::OutOfOrder => "out_of_order",
            Failure::Protocol => "protocol",
        }
    }
}

impl FromStr for Failure {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "rule" => Ok(Failure::Rule),
            "out_of_order" => Ok(Failure::OutOfOrder),
            "protocol" => Ok(Failure::Protocol),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    StageInfoReq {
        msg_id: u64,
    },
    StageInfoResp {
        msg_id: u64,
        info: StageInfo,
    },
    /// Sent as `hsk_rule`, `dif_rule` or `enf_rule` depending on the body.
    Rule {
        msg_id: u64,
        rule: Rule,
    },
    CollectReq {
        msg_id: u64,
    },
    CollectResp {
        msg_id: u64,
        stats: StageStats,
    },
    Ack {
        msg_id: u64,
    },
    Err {
        msg_id: u64,
        failure: Failure,
        detail: String,
    },
}

impl Message {
    pub fn msg_id(&self) -> u64 {
        match self {
            Message::StageInfoReq { msg_id }
            | Message::StageInfoResp { msg_id, .. }
            | Message::Rule { msg_id, .. }
            | Message::CollectReq { msg_id }
            | Message::CollectResp { msg_id, .. }
            | Message::Ack { msg_id }
            | Message::Err { msg_id, .. } => *msg_id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::StageInfoReq { .. } => "stage_info_req",
            Message::StageInfoResp { .. } => "stage_info_resp",
            Message::Rule { rule, .. } => rule_kind(rule),
            Message::CollectReq { .. } => "collect_req",
            Message::CollectResp { .. } => "collect_resp",
            Message::Ack { .. } => "ack",
            Message::Err { .. } => "err",
        }
    }
}

fn rule_kind(rule: &Rule) -> &'static str {
    match rule.body {
        RuleBody::Housekeeping(_) => "hsk_rule",
        RuleBody::Differentiation(_) => "dif_rule",
        RuleBody::Enforcement(_) => "enf_rule",
    }
}

fn escape(v: &str) -> Cow<'_, str> {
    if !v.contains(['%', SEP, '\t', '\r', '\n']) {
        return Cow::Borrowed(v);
    }
    let mut out = String::with_capacity(v.len() + 8);
    for c in v.chars() {
        match c {
            '%' | SEP | '\t' | '\r' | '\n' => write!(out, "%{:02X}", c as u32).unwrap(),
            c => out.push(c),
        }
    }
    Cow::Owned(out)
}

fn unescape(v: &str) -> Result<Cow<'_, str>, ProtocolError> {
    if !v.contains('%') {
        return Ok(Cow::Borrowed(v));
    }
    let bad = || ProtocolError::BadEscape(v.to_string());
    let mut out = String::with_capacity(v.len());
    let mut rest = v;
    while let Some(i) = rest.find('%') {
        out.push_str(&rest[..i]);
        let hex = rest.get(i + 1..i + 3).ok_or_else(bad)?;
        let c = u8::from_str_radix(hex, 16).map_err(|_| bad())?;
        if !matches!(c, b'%' | 0x1F | b'\t' | b'\r' | b'\n') || !hex.bytes().all(|b| !b.is_ascii_lowercase()) {
            return Err(bad());
        }
        out.push(c as char);
        rest = &rest[i + 3..];
    }
    out.push_str(rest);
    Ok(Cow::Owned(out))
}

/// Ordered `key=value` fields of one message body.
#[derive(Debug, Default)]
struct Fields {
    items: Vec<(&'static str, String)>,
}

impl Fields {
    fn put(&mut self, key: &'static str, value: impl ToString) {
        self.items.push((key, value.to_string()));
    }

    fn put_opt(&mut self, key: &'static str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.put(key, v);
        }
    }
}

/// Cursor over received fields, enforcing the canonical order.
struct Reader<'a> {
    items: Vec<(&'a str, Cow<'a, str>)>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new<I: Iterator<Item = &'a str>>(parts: I) -> Result<Self, ProtocolError> {
        let mut items = Vec::new();
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(|| ProtocolError::UnexpectedField(part.to_string()))?;
            items.push((k, unescape(v)?));
        }
        Ok(Self { items, pos: 0 })
    }

    fn opt_str(&mut self, key: &'static str) -> Option<Cow<'a, str>> {
        match self.items.get(self.pos) {
            Some((k, v)) if *k == key => {
                self.pos += 1;
                Some(v.clone())
            }
            _ => None,
        }
    }

    fn str(&mut self, key: &'static str) -> Result<Cow<'a, str>, ProtocolError> {
        self.opt_str(key).ok_or(ProtocolError::MissingField(key))
    }

    fn opt<T: FromStr>(&mut self, key: &'static str) -> Result<Option<T>, ProtocolError> {
        match self.opt_str(key) {
            None => Ok(None),
            Some(v) => {
                v.parse().map(Some).map_err(|_| ProtocolError::BadValue { key: key.to_string(), value: v.into_owned() })
            }
        }
    }

    fn get<T: FromStr>(&mut self, key: &'static str) -> Result<T, ProtocolError> {
        self.opt(key)?.ok_or(ProtocolError::MissingField(key))
    }

    fn finish(self) -> Result<(), ProtocolError> {
        match self.items.get(self.pos) {
            Some((k, _)) => Err(ProtocolError::UnexpectedField(k.to_string())),
            None => Ok(()),
        }
    }
}

fn bad_value(key: &str, value: &str) -> ProtocolError {
    ProtocolError::BadValue { key: key.to_string(), value: value.to_string() }
}

fn put_classifiers(f: &mut Fields, c: &Classifiers) {
    f.put_opt("workflow_id", c.workflow_id);
    f.put_opt("request_type", c.request_type);
    f.put_opt("request_context", c.request_context);
}

fn read_classifiers(r: &mut Reader<'_>) -> Result<Classifiers, ProtocolError> {
    Ok(Classifiers {
        workflow_id: r.opt("workflow_id")?,
        request_type: r.opt("request_type")?,
        request_context: r.opt("request_context")?,
    })
}

fn rule_fields(rule: &Rule) -> Fields {
    let mut f = Fields::default();
    f.put("rule_id", rule.id);
    match &rule.body {
        RuleBody::Housekeeping(h) => match h {
            HousekeepingRule::CreateChannel { channel } => {
                f.put("op", "create_channel");
                f.put("channel", channel);
            }
            HousekeepingRule::CreateObject { channel, object, kind, state } => {
                f.put("op", "create_object");
                f.put("channel", channel);
                f.put("object", object);
                f.put("kind", kind);
                f.put("state", state);
            }
            HousekeepingRule::RemoveChannel { channel } => {
                f.put("op", "remove_channel");
                f.put("channel", channel);
            }
            HousekeepingRule::RemoveObject { channel, object } => {
                f.put("op", "remove_object");
                f.put("channel", channel);
                f.put("object", object);
            }
        },
        RuleBody::Differentiation(d) => match d {
            DifferentiationRule::SetMask(mask) => {
                f.put("op", "set_mask");
                f.put("mask", mask);
            }
            DifferentiationRule::BindChannel { classifiers, channel } => {
                f.put("op", "bind_channel");
                put_classifiers(&mut f, classifiers);
                f.put("channel", channel);
            }
            DifferentiationRule::BindObject { channel, classifiers, object } => {
                f.put("op", "bind_object");
                f.put("channel", channel);
                put_classifiers(&mut f, classifiers);
                f.put("object", object);
            }
            DifferentiationRule::SetDefaultChannel { channel } => {
                f.put("op", "set_default_channel");
                f.put("channel", channel);
            }
            DifferentiationRule::SetDefaultObject { channel, object } => {
                f.put("op", "set_default_object");
                f.put("channel", channel);
                f.put("object", object);
            }
        },
        RuleBody::Enforcement(e) => {
            f.put("object", e.object);
            f.put("state", &e.state);
        }
    }
    f
}

fn read_rule(kind: &str, r: &mut Reader<'_>) -> Result<Rule, ProtocolError> {
    let id: RuleId = r.get("rule_id")?;
    let body: RuleBody = match kind {
        "hsk_rule" => {
            let op = r.str("op")?;
            let channel: ChannelId = r.get("channel")?;
            match op.as_ref() {
                "create_channel" => HousekeepingRule::CreateChannel { channel },
                "create_object" => HousekeepingRule::CreateObject {
                    channel,
                    object: r.get("object")?,
                    kind: r.get::<ObjectKind>("kind")?,
                    state: r.get::<ObjectState>("state")?,
                },
                "remove_channel" => HousekeepingRule::RemoveChannel { channel },
                "remove_object" => HousekeepingRule::RemoveObject { channel, object: r.get("object")? },
                other => return Err(bad_value("op", other)),
            }
            .into()
        }
        "dif_rule" => {
            let op = r.str("op")?;
            match op.as_ref() {
                "set_mask" => DifferentiationRule::SetMask(r.get::<ClassifierMask>("mask")?),
                "bind_channel" => {
                    let classifiers = read_classifiers(r)?;
                    DifferentiationRule::BindChannel { classifiers, channel: r.get("channel")? }
                }
                "bind_object" => {
                    let channel = r.get("channel")?;
                    let classifiers = read_classifiers(r)?;
                    DifferentiationRule::BindObject { channel, classifiers, object: r.get("object")? }
                }
                "set_default_channel" => DifferentiationRule::SetDefaultChannel { channel: r.get("channel")? },
                "set_default_object" => {
                    DifferentiationRule::SetDefaultObject { channel: r.get("channel")?, object: r.get("object")? }
                }
                other => return Err(bad_value("op", other)),
            }
            .into()
        }
        "enf_rule" => EnforcementRule { object: r.get::<ObjectId>("object")?, state: r.get("state")? }.into(),
        other => return Err(ProtocolError::UnknownKind(other.to_string())),
    };
    Ok(Rule { id, body })
}

fn message_fields(m: &Message) -> Fields {
    let mut f = Fields::default();
    match m {
        Message::StageInfoReq { .. } | Message::CollectReq { .. } | Message::Ack { .. } => {}
        Message::StageInfoResp { info, .. } => {
            f.put("pid", info.pid);
            f.put("name", &info.name);
            f.put("instance", &info.instance_id);
            f.put("workflows", info.workflows);
        }
        Message::Rule { rule, .. } => f = rule_fields(rule),
        Message::CollectResp { stats, .. } => {
            f.put("at", stats.collected_at);
            for ch in &stats.channels {
                let s = &ch.stats;
                f.put(
                    "channel",
                    format!("{}:{}:{}:{}:{}", ch.channel, s.window_start, ch.window_end, s.window_bytes, s.window_ops),
                );
                for fl in &ch.flows {
                    f.put("flow", format!("{}:{}:{}:{}", fl.workflow, fl.bytes, fl.ops, fl.context));
                }
            }
        }
        Message::Err { failure, detail, .. } => {
            f.put("code", failure.as_str());
            f.put("detail", detail);
        }
    }
    f
}

fn parse_fixed<const N: usize>(key: &str, v: &str) -> Result<[u64; N], ProtocolError> {
    let mut out = [0u64; N];
    let mut it = v.split(':');
    for slot in &mut out {
        *slot = it.next().and_then(|x| x.parse().ok()).ok_or_else(|| bad_value(key, v))?;
    }
    if it.next().is_some() {
        return Err(bad_value(key, v));
    }
    Ok(out)
}

fn read_stats(r: &mut Reader<'_>) -> Result<StageStats, ProtocolError> {
    let collected_at = r.get("at")?;
    let mut channels: Vec<ChannelWindow> = Vec::new();
    loop {
        if let Some(v) = r.opt_str("channel") {
            let [id, start, end, bytes, ops] = parse_fixed::<5>("channel", &v)?;
            channels.push(ChannelWindow {
                channel: ChannelId(id),
                stats: ChannelStats { window_bytes: bytes, window_ops: ops, window_start: start },
                window_end: end,
                flows: Vec::new(),
            });
        } else if let Some(v) = r.opt_str("flow") {
            let (nums, ctx) = v
                .splitn(4, ':')
                .collect::<Vec<_>>()
                .split_last()
                .filter(|(_, nums)| nums.len() == 3)
                .map(|(ctx, nums)| (nums.join(":"), *ctx))
                .ok_or_else(|| bad_value("flow", &v))?;
            let [wf, bytes, ops] = parse_fixed::<3>("flow", &nums)?;
            let context = ctx.parse().map_err(|_| bad_value("flow", &v))?;
            let owner = channels.last_mut().ok_or_else(|| bad_value("flow", &v))?;
            owner.flows.push(FlowEntry { workflow: wf.into(), context, bytes, ops });
        } else {
            break;
        }
    }
    Ok(StageStats { collected_at, channels })
}

fn write_body(kind: &str, msg_id: Option<u64>, fields: &Fields, sep: char, out: &mut String) {
    out.push_str(kind);
    if let Some(id) = msg_id {
        out.push(sep);
        write!(out, "{id}").unwrap();
    }
    for (k, v) in &fields.items {
        out.push(sep);
        out.push_str(k);
        out.push('=');
        out.push_str(&escape(v));
    }
}

/// The body text of `m`, without the length prefix.
pub fn encode_body(m: &Message) -> String {
    let mut body = String::new();
    write_body(m.kind(), Some(m.msg_id()), &message_fields(m), SEP, &mut body);
    body
}

/// Encodes `m` as a complete frame.
pub fn encode(m: &Message) -> Result<Vec<u8>, ProtocolError> {
    frame(encode_body(m).as_bytes())
}

/// Prefixes `body` with its length.
pub fn frame(body: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    if body.len() > MAX_BODY {
        return Err(ProtocolError::Oversized(body.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

/// Parses a frame body.
pub fn decode_body(body: &[u8]) -> Result<Message, ProtocolError> {
    let text = std::str::from_utf8(body).map_err(|_| ProtocolError::Utf8)?;
    let mut parts = text.split(SEP);
    let kind = parts.next().unwrap_or_default();
    let id_text = parts.next().ok_or(ProtocolError::MissingField("msg_id"))?;
    if id_text.is_empty()
        || !id_text.bytes().all(|b| b.is_ascii_digit())
        || (id_text.len() > 1 && id_text.starts_with('0'))
    {
        return Err(ProtocolError::BadMsgId(id_text.to_string()));
    }
    let msg_id: u64 = id_text.parse().map_err(|_| ProtocolError::BadMsgId(id_text.to_string()))?;
    let mut r = Reader::new(parts)?;
    let m = match kind {
        "stage_info_req" => Message::StageInfoReq { msg_id },
        "stage_info_resp" => Message::StageInfoResp {
            msg_id,
            info: StageInfo {
                pid: r.get("pid")?,
                name: r.str("name")?.into_owned(),
                instance_id: r.str("instance")?.into_owned(),
                workflows: r.get("workflows")?,
            },
        },
        "hsk_rule" | "dif_rule" | "enf_rule" => Message::Rule { msg_id, rule: read_rule(kind, &mut r)? },
        "collect_req" => Message::CollectReq { msg_id },
        "collect_resp" => Message::CollectResp { msg_id, stats: read_stats(&mut r)? },
        "ack" => Message::Ack { msg_id },
        "err" => Message::Err { msg_id, failure: r.get("code")?, detail: r.str("detail")?.into_owned() },
        other => return Err(ProtocolError::UnknownKind(other.to_string())),
    };
    r.finish()?;
    Ok(m)
}

/// Decodes one frame from the front of `bytes`, returning the message and
/// the number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize), DecodeError> {
    let header: [u8; HEADER_LEN] =
        bytes.get(..HEADER_LEN).ok_or(DecodeError::Incomplete)?.try_into().expect("four bytes");
    let len = u32::from_le_bytes(header) as usize;
    if len > MAX_BODY {
        return Err(ProtocolError::Oversized(len).into());
    }
    let body = bytes.get(HEADER_LEN..HEADER_LEN + len).ok_or(DecodeError::Incomplete)?;
    Ok((decode_body(body)?, HEADER_LEN + len))
}

/// Reassembles frames from a byte stream delivered in arbitrary pieces.
#[derive(Debug, Default)]
pub struct Decoder {
    buf: Vec<u8>,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` if more bytes are needed. After a
    /// protocol error the stream is unusable and the connection should be
    /// closed.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        match decode(&self.buf) {
            Ok((m, used)) => {
                self.buf.drain(..used);
                Ok(Some(m))
            }
            Err(DecodeError::Incomplete) => Ok(None),
            Err(DecodeError::Protocol(e)) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

#[derive(Debug, Error)]
pub enum ConnError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("connection closed by peer")]
    Closed,
    #[error("peer violated the protocol: {0}")]
    Violation(String),
}

/// Blocking message stream over any byte transport.
#[derive(Debug)]
pub struct Connection<S> {
    stream: S,
    decoder: Decoder,
}

impl<S: Read + Write> Connection<S> {
    pub fn new(stream: S) -> Self {
        Self { stream, decoder: Decoder::new() }
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }

    pub fn send(&mut self, m: &Message) -> Result<(), ConnError> {
        self.stream.write_all(&encode(m)?)?;
        self.stream.flush()?;
        Ok(())
    }

    /// Blocks until a message arrives. Read timeouts on the transport
    /// surface as `Io` errors of kind `WouldBlock` or `TimedOut`; partial
    /// frames stay buffered across such errors.
    pub fn recv(&mut self) -> Result<Message, ConnError> {
        let mut chunk = [0u8; 8192];
        loop {
            if let Some(m) = self.decoder.next_message()? {
                return Ok(m);
            }
            let n = self.stream.read(&mut chunk)?;
            if n == 0 {
                return Err(ConnError::Closed);
            }
            self.decoder.push(&chunk[..n]);
        }
    }
}

/// One rule as a line of a local rule file: kind and fields separated by
/// tabs, without a message id.
pub fn rule_to_line(rule: &Rule) -> String {
    let mut out = String::new();
    write_body(rule_kind(rule), None, &rule_fields(rule), '\t', &mut out);
    out
}

pub fn parse_rule_line(line: &str) -> Result<Rule, ProtocolError> {
    let mut parts = line.split('\t');
    let kind = parts.next().unwrap_or_default();
    let mut r = Reader::new(parts)?;
    let rule = read_rule(kind, &mut r)?;
    r.finish()?;
    Ok(rule)
}
