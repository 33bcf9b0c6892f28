//! Operating-system level I/O counters.

use std::fs;
use std::io;

use thiserror::Error;

use crate::stage::StageInfo;

/// Cumulative bytes a process has read from and written to storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OsIoCounters {
    pub read_bytes: u64,
    pub write_bytes: u64,
}

impl OsIoCounters {
    pub fn total(&self) -> u64 {
        self.read_bytes + self.write_bytes
    }

    /// Bytes moved since `earlier`.
    pub fn since(&self, earlier: &OsIoCounters) -> OsIoCounters {
        OsIoCounters {
            read_bytes: self.read_bytes.saturating_sub(earlier.read_bytes),
            write_bytes: self.write_bytes.saturating_sub(earlier.write_bytes),
        }
    }
}

#[derive(Debug, Error)]
pub enum CounterError {
    #[error("no process {0}")]
    NoProcess(u32),
    #[error("no counters for `{0}`")]
    Unknown(String),
    #[error("malformed counters: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where the control plane reads counters for a stage from.
pub trait IoCounterSource: Send {
    fn counters(&self, stage: &StageInfo) -> Result<OsIoCounters, CounterError>;
}

/// Reads `/proc/<pid>/io`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProcIoCounters;

impl ProcIoCounters {
    pub fn read_pid(pid: u32) -> Result<OsIoCounters, CounterError> {
        let text = fs::read_to_string(format!("/proc/{pid}/io")).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => CounterError::NoProcess(pid),
            _ => CounterError::Io(e),
        })?;
        parse_proc_io(&text)
    }
}

impl IoCounterSource for ProcIoCounters {
    fn counters(&self, stage: &StageInfo) -> Result<OsIoCounters, CounterError> {
        Self::read_pid(stage.pid)
    }
}

pub fn parse_proc_io(text: &str) -> Result<OsIoCounters, CounterError> {
    let field = |name: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(name)?.strip_prefix(':'))
            .ok_or_else(|| CounterError::Malformed(format!("missing {name}")))?
            .trim()
            .parse::<u64>()
            .map_err(|_| CounterError::Malformed(format!("bad {name}")))
    };
    Ok(OsIoCounters { read_bytes: field("read_bytes")?, write_bytes: field("write_bytes")? })
}
