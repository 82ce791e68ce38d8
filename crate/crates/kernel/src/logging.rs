//! Line-oriented log sink shared by every subsystem.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ride_core::logline::{Level, LogRecord};

#[derive(Clone)]
pub struct Logger {
    inner: Arc<Inner>,
}

struct Inner {
    path: PathBuf,
    file: Mutex<File>,
    echo: Option<Level>,
}

impl Logger {
    /// Opens `path` for appending, creating parent directories as needed.
    pub fn open(path: &Path) -> io::Result<Logger> {
        Logger::open_with_echo(path, None)
    }

    /// Like [`Logger::open`], additionally mirroring records at or above
    /// `echo` to stderr.
    pub fn open_with_echo(path: &Path, echo: Option<Level>) -> io::Result<Logger> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Logger { inner: Arc::new(Inner { path: path.to_path_buf(), file: Mutex::new(file), echo }) })
    }

    pub fn path(&self) -> &Path {
        &self.inner.path
    }

    pub fn record(&self, record: &LogRecord) {
        let mut line = record.to_string();
        line.push('\n');
        let result = {
            let mut file = self.inner.file.lock().unwrap_or_else(|e| e.into_inner());
            file.write_all(line.as_bytes()).and_then(|_| file.flush())
        };
        if let Err(err) = result {
            eprintln!("log sink failed ({err}): {}", line.trim_end());
        } else if self.inner.echo.is_some_and(|min| record.level >= min) {
            eprint!("{line}");
        }
    }

    pub fn log(&self, level: Level, component: &str, message: impl Into<String>) {
        self.record(&LogRecord::now(level, component, message));
    }

    pub fn debug(&self, component: &str, message: impl Into<String>) {
        self.log(Level::Debug, component, message)
    }

    pub fn info(&self, component: &str, message: impl Into<String>) {
        self.log(Level::Info, component, message)
    }

    pub fn warn(&self, component: &str, message: impl Into<String>) {
        self.log(Level::Warn, component, message)
    }

    pub fn error(&self, component: &str, message: impl Into<String>) {
        self.log(Level::Error, component, message)
    }
}
