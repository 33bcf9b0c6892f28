//! How the control plane reaches a stage.

use std::os::unix::net::UnixStream;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::protocol::{ConnError, Connection, Failure, Message};
use crate::stage::{Stage, StageInfo, StageStats};
use crate::types::Rule;

#[derive(Debug, Error)]
pub enum LinkError {
    /// The stage refused the rule; the link stays usable.
    #[error("rule rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Conn(#[from] ConnError),
    #[error("stage reported {failure:?}: {detail}")]
    Remote { failure: Failure, detail: String },
    #[error("unexpected reply `{0}`")]
    Unexpected(&'static str),
}

impl LinkError {
    /// Whether the stage should be dropped.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, LinkError::Rejected(_))
    }
}

/// The control calls a stage answers.
pub trait StageLink: Send {
    fn stage_info(&mut self) -> Result<StageInfo, LinkError>;
    fn apply(&mut self, rule: &Rule) -> Result<(), LinkError>;
    fn collect(&mut self) -> Result<StageStats, LinkError>;
}

/// A stage in the same process.
#[derive(Debug, Clone)]
pub struct LocalLink(pub Arc<Stage>);

impl StageLink for LocalLink {
    fn stage_info(&mut self) -> Result<StageInfo, LinkError> {
        Ok(self.0.info())
    }

    fn apply(&mut self, rule: &Rule) -> Result<(), LinkError> {
        self.0.apply_rule(rule).map_err(|e| LinkError::Rejected(e.to_string()))
    }

    fn collect(&mut self) -> Result<StageStats, LinkError> {
        Ok(self.0.collect())
    }
}

/// A stage connected over a socket. Calls are strictly request/response.
#[derive(Debug)]
pub struct RemoteLink {
    conn: Connection<UnixStream>,
    next_msg: u64,
}

pub const REPLY_TIMEOUT: Duration = Duration::from_secs(5);

impl RemoteLink {
    pub fn new(stream: UnixStream) -> std::io::Result<Self> {
        stream.set_nonblocking(false)?;
        stream.set_read_timeout(Some(REPLY_TIMEOUT))?;
        Ok(Self { conn: Connection::new(stream), next_msg: 1 })
    }

    fn call(&mut self, build: impl FnOnce(u64) -> Message) -> Result<Message, LinkError> {
        let id = self.next_msg;
        self.next_msg += 1;
        self.conn.send(&build(id))?;
        let reply = self.conn.recv()?;
        if reply.msg_id() != id {
            return Err(LinkError::Unexpected("mismatched msg_id"));
        }
        Ok(reply)
    }
}

impl StageLink for RemoteLink {
    fn stage_info(&mut self) -> Result<StageInfo, LinkError> {
        match self.call(|msg_id| Message::StageInfoReq { msg_id })? {
            Message::StageInfoResp { info, .. } => Ok(info),
            Message::Err { failure, detail, .. } => Err(LinkError::Remote { failure, detail }),
            other => Err(LinkError::Unexpected(other.kind())),
        }
    }

    fn apply(&mut self, rule: &Rule) -> Result<(), LinkError> {
        match self.call(|msg_id| Message::Rule { msg_id, rule: rule.clone() })? {
            Message::Ack { .. } => Ok(()),
            Message::Err { failure: Failure::Rule, detail, .. } => Err(LinkError::Rejected(detail)),
            Message::Err { failure, detail, .. } => Err(LinkError::Remote { failure, detail }),
            other => Err(LinkError::Unexpected(other.kind())),
        }
    }

    fn collect(&mut self) -> Result<StageStats, LinkError> {
        match self.call(|msg_id| Message::CollectReq { msg_id })? {
            Message::CollectResp { stats, .. } => Ok(stats),
            Message::Err { failure, detail, .. } => Err(LinkError::Remote { failure, detail }),
            other => Err(LinkError::Unexpected(other.kind())),
        }
    }
}
