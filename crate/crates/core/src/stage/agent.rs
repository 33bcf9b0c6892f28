//! Background connection from a stage to its control plane.

use std::io;
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::Stage;
use crate::protocol::{ConnError, Connection, Failure, Message};
use crate::types::RuleId;

const POLL: Duration = Duration::from_millis(50);
const MIN_BACKOFF: Duration = Duration::from_millis(10);
const MAX_BACKOFF: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentStatus {
    pub connected: bool,
    /// Successful connections so far.
    pub connections: u64,
    pub rules_applied: u64,
    pub last_error: Option<String>,
}

pub(super) fn spawn(
    stage: Weak<Stage>,
    endpoint: PathBuf,
    stop: Arc<AtomicBool>,
    status: Arc<Mutex<AgentStatus>>,
) -> io::Result<JoinHandle<()>> {
    thread::Builder::new().name("sds-agent".into()).spawn(move || run(stage, endpoint, stop, status))
}

fn run(stage: Weak<Stage>, endpoint: PathBuf, stop: Arc<AtomicBool>, status: Arc<Mutex<AgentStatus>>) {
    let mut backoff = MIN_BACKOFF;
    while !stop.load(Ordering::SeqCst) && stage.strong_count() > 0 {
        match UnixStream::connect(&endpoint) {
            Ok(stream) => {
                backoff = MIN_BACKOFF;
                {
                    let mut s = status.lock().unwrap();
                    s.connected = true;
                    s.connections += 1;
                }
                log::info!("stage agent connected to {}", endpoint.display());
                let result = serve(&stage, stream, &stop, &status);
                let mut s = status.lock().unwrap();
                s.connected = false;
                if let Err(e) = result {
                    log::warn!("stage agent connection lost: {e}");
                    s.last_error = Some(e.to_string());
                }
            }
            Err(e) => {
                log::debug!("stage agent cannot reach {}: {e}", endpoint.display());
                status.lock().unwrap().last_error = Some(e.to_string());
            }
        }
        // keep the last configuration and retry
        let mut slept = Duration::ZERO;
        while slept < backoff && !stop.load(Ordering::SeqCst) {
            thread::sleep(POLL.min(backoff - slept));
            slept += POLL;
        }
        backoff = (backoff * 2).min(MAX_BACKOFF);
    }
}

fn serve(
    stage: &Weak<Stage>,
    stream: UnixStream,
    stop: &AtomicBool,
    status: &Mutex<AgentStatus>,
) -> Result<(), ConnError> {
    stream.set_read_timeout(Some(POLL))?;
    let mut conn = Connection::new(stream);
    let mut last_rule: Option<RuleId> = None;
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        let msg = match conn.recv() {
            Ok(m) => m,
            Err(ConnError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                continue
            }
            Err(e) => return Err(e),
        };
        let Some(stage) = stage.upgrade() else {
            return Ok(());
        };
        let (reply, close) = handle(&stage, msg, &mut last_rule, status);
        conn.send(&reply)?;
        if close {
            let Message::Err { detail, .. } = reply else { unreachable!("only errors close") };
            return Err(ConnError::Violation(detail));
        }
    }
}

/// Returns the reply and whether the connection must be closed.
fn handle(stage: &Stage, msg: Message, last_rule: &mut Option<RuleId>, status: &Mutex<AgentStatus>) -> (Message, bool) {
    match msg {
        Message::StageInfoReq { msg_id } => (Message::StageInfoResp { msg_id, info: stage.info() }, false),
        Message::CollectReq { msg_id } => (Message::CollectResp { msg_id, stats: stage.collect() }, false),
        Message::Rule { msg_id, rule } => {
            if let Some(last) = *last_rule {
                if rule.id <= last {
                    let detail = format!("rule {} does not follow rule {last}", rule.id);
                    return (Message::Err { msg_id, failure: Failure::OutOfOrder, detail }, true);
                }
            }
            *last_rule = Some(rule.id);
            match stage.apply_rule(&rule) {
                Ok(()) => {
                    status.lock().unwrap().rules_applied += 1;
                    (Message::Ack { msg_id }, false)
                }
                Err(e) => (Message::Err { msg_id, failure: Failure::Rule, detail: e.to_string() }, false),
            }
        }
        other => {
            let detail = format!("a stage does not accept `{}`", other.kind());
            (Message::Err { msg_id: other.msg_id(), failure: Failure::Protocol, detail }, true)
        }
    }
}
