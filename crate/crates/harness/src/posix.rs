//! A thin file wrapper that sends every read and write through a stage
//! before touching the file, the way an intercepted POSIX layer would.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;

use sds_core::stage::Stage;
use sds_core::{Context, Request, RequestContext, RequestType, WorkflowId};

#[derive(Debug)]
pub struct StageFile {
    file: File,
    stage: Arc<Stage>,
    context: RequestContext,
}

impl StageFile {
    pub fn open(stage: Arc<Stage>, path: &Path, context: RequestContext) -> io::Result<Self> {
        Ok(Self { file: File::open(path)?, stage, context })
    }

    pub fn create(stage: Arc<Stage>, path: &Path, context: RequestContext) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
        Ok(Self { file, stage, context })
    }

    /// Tags subsequent requests with a different origin.
    pub fn set_context(&mut self, context: RequestContext) {
        self.context = context;
    }

    pub fn get_ref(&self) -> &File {
        &self.file
    }

    fn admit(&self, ty: RequestType, size: usize) -> io::Result<()> {
        let ctx = Context::new(WorkflowId::current_thread(), ty, size as u64, self.context);
        self.stage.enforce(Request::metadata_only(ctx)).map(drop).map_err(|e| io::Error::other(e.detail))
    }

    pub fn sync_all(&self) -> io::Result<()> {
        self.admit(RequestType::Close, 0)?;
        self.file.sync_all()
    }
}

impl Read for StageFile {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.admit(RequestType::Read, buf.len())?;
        self.file.read(buf)
    }
}

impl Write for StageFile {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.admit(RequestType::Write, buf.len())?;
        self.file.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()
    }
}

impl Seek for StageFile {
    fn seek(&mut self, pos: SeekFrom) -> io::Result<u64> {
        self.file.seek(pos)
    }
}
