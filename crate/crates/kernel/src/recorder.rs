//! Sensor recording into bag files under the data directory.

use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ride_core::bag::{self, Appended, BagError, BagWriter, Channel, RecordEntry, RecordMask, Summary};
use thiserror::Error;

use crate::logging::Logger;

const COMPONENT: &str = "recorder";
const FLUSH_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("a recording is already active")]
    AlreadyRecording,
    #[error("no recording is active")]
    NotRecording,
    #[error("data directory {0} is not writable: {1}")]
    DirNotWritable(PathBuf, String),
    #[error(transparent)]
    Bag(#[from] BagError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finished {
    pub path: PathBuf,
    pub summary: Summary,
}

struct Active {
    writer: BagWriter<BufWriter<File>>,
    path: PathBuf,
    last_flush: Instant,
}

pub struct Recorder {
    dir: PathBuf,
    active: Mutex<Option<Active>>,
    last: Mutex<Option<Finished>>,
    log: Logger,
}

/// Creates a fresh file named after the current second, adding a numeric
/// suffix when that name is taken.
fn create_unique(dir: &Path) -> std::io::Result<(File, PathBuf)> {
    let base = bag::file_name(chrono::Utc::now());
    let stem = base.trim_end_matches(".bag").to_string();
    let mut n = 0;
    loop {
        let name = if n == 0 { base.clone() } else { format!("{stem}_{n}.bag") };
        let path = dir.join(name);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => return Ok((file, path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e),
        }
    }
}

impl Recorder {
    pub fn new(dir: impl Into<PathBuf>, log: Logger) -> Self {
        Recorder { dir: dir.into(), active: Mutex::new(None), last: Mutex::new(None), log }
    }

    pub fn start(&self, mask: RecordMask) -> Result<PathBuf, RecordError> {
        let mut active = self.active.lock().unwrap();
        if active.is_some() {
            return Err(RecordError::AlreadyRecording);
        }
        let unwritable = |e: std::io::Error| RecordError::DirNotWritable(self.dir.clone(), e.to_string());
        std::fs::create_dir_all(&self.dir).map_err(unwritable)?;
        let (file, path) = create_unique(&self.dir).map_err(unwritable)?;
        let writer = BagWriter::new(BufWriter::new(file), mask)?;
        self.log.info(COMPONENT, format!("recording to {} (mask {})", path.display(), mask.bits()));
        *active = Some(Active { writer, path: path.clone(), last_flush: Instant::now() });
        Ok(path)
    }

    pub fn stop(&self) -> Result<Finished, RecordError> {
        let mut active = self.active.lock().unwrap().take().ok_or(RecordError::NotRecording)?;
        let summary = active.writer.close()?;
        let finished = Finished { path: active.path, summary };
        self.log.info(
            COMPONENT,
            format!(
                "recording {} closed: cam {} scan {} tf {} over {:.3} s",
                finished.path.display(),
                finished.summary.cam,
                finished.summary.scan,
                finished.summary.tf,
                finished.summary.duration
            ),
        );
        *self.last.lock().unwrap() = Some(finished.clone());
        Ok(finished)
    }

    pub fn is_active(&self) -> bool {
        self.active.lock().unwrap().is_some()
    }

    /// Channels the active recording accepts, if any.
    pub fn wants(&self, channel: Channel) -> bool {
        self.active.lock().unwrap().as_ref().is_some_and(|a| a.writer.mask().contains(channel))
    }

    pub fn last_finished(&self) -> Option<Finished> {
        self.last.lock().unwrap().clone()
    }

    /// Appends an entry if the active recording includes `channel`.
    pub fn record(&self, channel: Channel, timestamp: f64, payload: &[u8]) {
        let mut guard = self.active.lock().unwrap();
        let Some(active) = guard.as_mut() else { return };
        if !active.writer.mask().contains(channel) {
            return;
        }
        match active.writer.append(RecordEntry::new(timestamp, channel, payload.to_vec())) {
            Ok(Appended::InOrder) => {}
            Ok(Appended::Clamped) => {
                self.log.warn(COMPONENT, format!("timestamp {timestamp} went backwards, clamped"))
            }
            Err(e) => self.log.error(COMPONENT, format!("append to {} failed: {e}", active.path.display())),
        }
        if active.last_flush.elapsed() >= FLUSH_INTERVAL {
            if let Err(e) = active.writer.flush() {
                self.log.error(COMPONENT, format!("flush failed: {e}"));
            }
            active.last_flush = Instant::now();
        }
    }
}
