//! One-line log records: `YYYY-MM-DDTHH:MM:SS.mmmZ LEVEL [component] message`.
//!
//! Messages are escaped so that a record always fits on one line: `\` becomes
//! `\\`, newline `\n` and carriage return `\r`.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};
use thiserror::Error;

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.3fZ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Debug,
    Info,
    Warn,
    Error,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Debug => "DEBUG",
            Level::Info => "INFO",
            Level::Warn => "WARN",
            Level::Error => "ERROR",
        }
    }
}

impl FromStr for Level {
    type Err = LogParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DEBUG" => Ok(Level::Debug),
            "INFO" => Ok(Level::Info),
            "WARN" => Ok(Level::Warn),
            "ERROR" => Ok(Level::Error),
            other => Err(LogParseError::Level(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LogParseError {
    #[error("bad timestamp")]
    Timestamp,
    #[error("unknown level `{0}`")]
    Level(String),
    #[error("missing component")]
    Component,
    #[error("bad escape sequence")]
    Escape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub timestamp: DateTime<Utc>,
    pub level: Level,
    pub component: String,
    pub message: String,
}

impl LogRecord {
    pub fn now(level: Level, component: impl Into<String>, message: impl Into<String>) -> Self {
        LogRecord { timestamp: Utc::now(), level, component: component.into(), message: message.into() }
    }

    pub fn parse(line: &str) -> Result<LogRecord, LogParseError> {
        let (ts, rest) = line.split_once(' ').ok_or(LogParseError::Timestamp)?;
        let timestamp = NaiveDateTime::parse_from_str(ts, TIME_FORMAT)
            .map_err(|_| LogParseError::Timestamp)?
            .and_utc();
        let (level, rest) = rest.split_once(' ').ok_or(LogParseError::Component)?;
        let level = level.parse()?;
        let rest = rest.strip_prefix('[').ok_or(LogParseError::Component)?;
        let (component, message) = rest.split_once("] ").ok_or(LogParseError::Component)?;
        Ok(LogRecord { timestamp, level, component: component.to_string(), message: unescape(message)? })
    }
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} [{}] {}",
            self.timestamp.format(TIME_FORMAT),
            self.level.as_str(),
            escape(&self.component).replace(']', ")"),
            escape(&self.message)
        )
    }
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> Result<String, LogParseError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            _ => return Err(LogParseError::Escape),
        }
    }
    Ok(out)
}
