//! Interactive shell over telnet.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ride_core::telnet::{self, EventKind, TelnetParser};

use crate::engine::{EngineHandle, EvalStatus};
use crate::logging::Logger;
use crate::server::{Acceptor, ConnectionSet};

const COMPONENT: &str = "shell";

pub const PROMPT: &str = ">>> ";
pub const CONTINUATION: &str = "... ";
const MAX_LINE: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShellState {
    NeedLine,
    InBlock,
}

pub fn banner(module_name: &str) -> String {
    format!(
        "ride-kernel {} interactive shell, host module `{module_name}`\nCtrl-C (telnet interrupt) discards a pending block.\n",
        env!("CARGO_PKG_VERSION")
    )
}

pub struct ShellSession {
    pub id: u64,
    pub peer: Option<SocketAddr>,
    engine: EngineHandle,
    parser: TelnetParser,
    input: Vec<u8>,
    block: Vec<String>,
    closed: bool,
}

impl ShellSession {
    pub fn new(id: u64, peer: Option<SocketAddr>, engine: EngineHandle) -> Self {
        ShellSession { id, peer, engine, parser: TelnetParser::new(), input: Vec::new(), block: Vec::new(), closed: false }
    }

    pub fn state(&self) -> ShellState {
        if self.block.is_empty() {
            ShellState::NeedLine
        } else {
            ShellState::InBlock
        }
    }

    pub fn greeting(&self, module_name: &str) -> Vec<u8> {
        telnet::encode_text(&format!("{}{PROMPT}", banner(module_name)))
    }

    /// Consumes raw bytes from the client and returns the bytes to send back.
    pub fn feed(&mut self, bytes: &[u8]) -> Vec<u8> {
        let parsed = self.parser.parse(bytes);
        let mut out = parsed.replies;
        for event in parsed.events {
            match event.kind {
                EventKind::Text => {
                    for &b in &event.payload {
                        if b == b'\n' {
                            let line = String::from_utf8_lossy(&self.input).into_owned();
                            self.input.clear();
                            out.extend(telnet::encode_text(&self.on_line(&line)));
                        } else if self.input.len() < MAX_LINE {
                            self.input.push(b);
                        } else {
                            self.input.clear();
                            self.block.clear();
                            out.extend(telnet::encode_text(&format!("input line too long, discarded\n{PROMPT}")));
                        }
                    }
                }
                EventKind::Command if event.payload == [telnet::IP] => {
                    self.input.clear();
                    self.block.clear();
                    out.extend(telnet::encode_text(&format!("\nKeyboardInterrupt\n{PROMPT}")));
                }
                _ => {}
            }
        }
        out
    }

    /// Handles one completed input line and returns the text to display.
    pub fn on_line(&mut self, line: &str) -> String {
        if self.block.is_empty() && line.trim().is_empty() {
            return PROMPT.to_string();
        }
        self.block.push(line.to_string());
        let source = self.block.join("\n");
        let result = self.engine.eval_interactive(&source);
        if result.status == EvalStatus::Incomplete {
            return CONTINUATION.to_string();
        }
        self.block.clear();
        let mut text = result.output;
        if let Some(value) = result.value_repr {
            text.push_str(&value);
            text.push('\n');
        }
        if let Some(error) = result.error {
            if !text.is_empty() && !text.ends_with('\n') {
                text.push('\n');
            }
            text.push_str(&error.traceback);
        }
        text.push_str(PROMPT);
        text
    }

    /// Releases the session. Engine state is untouched; calling twice is harmless.
    pub fn close(&mut self) {
        self.closed = true;
        self.input.clear();
        self.block.clear();
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }
}

pub fn serve(listener: TcpListener, engine: EngineHandle, log: Logger, module_name: String) -> std::io::Result<Acceptor> {
    let ids = Arc::new(AtomicU64::new(0));
    Acceptor::spawn("shell", listener, ConnectionSet::default(), move |stream, guard| {
        let engine = engine.clone();
        let log = log.clone();
        let module_name = module_name.clone();
        let id = ids.fetch_add(1, Ordering::Relaxed) + 1;
        std::thread::Builder::new()
            .name(format!("shell-{id}"))
            .spawn(move || {
                handle(stream, id, engine, &log, &module_name);
                drop(guard);
            })
            .map(|_| ())
    })
}

fn handle(mut stream: TcpStream, id: u64, engine: EngineHandle, log: &Logger, module_name: &str) {
    let peer = stream.peer_addr().ok();
    let mut session = ShellSession::new(id, peer, engine);
    log.info(COMPONENT, format!("session {id} opened from {}", peer.map(|p| p.to_string()).unwrap_or_default()));
    if stream.write_all(&session.greeting(module_name)).is_ok() {
        let mut buf = [0u8; 4096];
        loop {
            let n = match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            let reply = session.feed(&buf[..n]);
            if !reply.is_empty() && stream.write_all(&reply).is_err() {
                break;
            }
        }
    }
    session.close();
    log.info(COMPONENT, format!("session {id} closed"));
}
