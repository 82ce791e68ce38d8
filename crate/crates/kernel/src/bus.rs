//! Line-oriented publish endpoint for external nodes.
//!
//! Each connection sends `PUB <topic> <payload>` lines and gets `OK` or
//! `ERR <reason>` back for every line.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use thiserror::Error;

use crate::engine::{Slot, Value};
use crate::kernel::Kernel;
use crate::server::{Acceptor, ConnectionSet};

const COMPONENT: &str = "bus";

pub const NODE_STATUS: &str = "node_status";
pub const TILT_SCAN: &str = "tilt_scan";
pub const MAX_TOPIC_LEN: usize = 64;
const MAX_LINE: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct BusMessage {
    pub topic: String,
    pub payload: String,
    pub timestamp: f64,
    pub source: String,
}

impl BusMessage {
    pub fn internal(topic: &str, payload: String, timestamp: f64) -> Self {
        BusMessage { topic: topic.to_string(), payload, timestamp, source: "internal".into() }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LineError {
    #[error("bad-line")]
    BadLine,
    #[error("bad-topic")]
    BadTopic,
}

/// Splits one received line into topic and payload.
pub fn parse_line(line: &str) -> Result<(&str, &str), LineError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    let rest = line.strip_prefix("PUB ").ok_or(LineError::BadLine)?;
    let (topic, payload) = rest.split_once(' ').unwrap_or((rest, ""));
    if topic.is_empty() {
        return Err(LineError::BadLine);
    }
    if topic.len() > MAX_TOPIC_LEN || topic.chars().any(char::is_whitespace) {
        return Err(LineError::BadTopic);
    }
    Ok((topic, payload))
}

/// Decides which callback, if any, receives a message.
pub fn route(msg: &BusMessage) -> Option<(Slot, Vec<Value>)> {
    match msg.topic.as_str() {
        NODE_STATUS => Some((
            Slot::NodeStatusUpdate,
            vec![Value::from(msg.source.clone()), Value::Float(msg.timestamp), Value::from(msg.payload.clone())],
        )),
        TILT_SCAN if msg.source == "internal" => {
            let scan = serde_json::from_str::<serde_json::Value>(&msg.payload).ok()?;
            Some((Slot::TiltScanData, vec![Value::from(scan)]))
        }
        _ => None,
    }
}

fn wall_clock() -> f64 {
    let now = chrono::Utc::now();
    now.timestamp() as f64 + now.timestamp_subsec_micros() as f64 * 1e-6
}

/// Discards input up to and including the next newline without buffering
/// it. False once the connection is gone.
fn skip_line(reader: &mut impl BufRead) -> bool {
    loop {
        let (found, used) = match reader.fill_buf() {
            Ok([]) | Err(_) => return false,
            Ok(chunk) => match chunk.iter().position(|&b| b == b'\n') {
                Some(i) => (true, i + 1),
                None => (false, chunk.len()),
            },
        };
        reader.consume(used);
        if found {
            return true;
        }
    }
}

pub fn serve(listener: TcpListener, kernel: Arc<Kernel>) -> std::io::Result<Acceptor> {
    let connections = ConnectionSet::default();
    Acceptor::spawn("bus", listener, connections, move |stream, guard| {
        let kernel = kernel.clone();
        std::thread::Builder::new()
            .name("bus-conn".into())
            .spawn(move || {
                handle(stream, &kernel);
                drop(guard);
            })
            .map(|_| ())
    })
}

fn handle(stream: TcpStream, kernel: &Kernel) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_else(|_| "unknown".into());
    let log = kernel.log();
    log.info(COMPONENT, format!("publisher {peer} connected"));
    let _ = stream.set_nodelay(true);
    let Ok(mut out) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match (&mut reader).take(MAX_LINE as u64 + 1).read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        if buf.len() > MAX_LINE && !buf.ends_with(b"\n") {
            if !skip_line(&mut reader) {
                break;
            }
            if out.write_all(b"ERR line-too-long\n").is_err() {
                break;
            }
            continue;
        }
        let reply = match std::str::from_utf8(&buf).map_err(|_| LineError::BadLine).and_then(parse_line) {
            Ok((topic, payload)) => {
                kernel.publish(
                    BusMessage {
                        topic: topic.to_string(),
                        payload: payload.to_string(),
                        timestamp: wall_clock(),
                        source: peer.clone(),
                    },
                    true,
                );
                "OK\n".to_string()
            }
            Err(e) => format!("ERR {e}\n"),
        };
        if out.write_all(reply.as_bytes()).is_err() {
            break;
        }
    }
    log.info(COMPONENT, format!("publisher {peer} disconnected"));
}
