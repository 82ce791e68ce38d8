//! Resumable telnet (NVT) byte-stream parser.
//!
//! The server refuses every option: `DO x` is answered with `WONT x` and
//! `WILL x` with `DONT x`, which keeps the connection in plain line mode with
//! local editing on the client. Subnegotiations are skipped.
//!
//! Line endings are normalized: `CR LF`, `CR NUL` and a lone `CR` all become
//! a single `\n` in the text stream.

pub const IAC: u8 = 255;
pub const DONT: u8 = 254;
pub const DO: u8 = 253;
pub const WONT: u8 = 252;
pub const WILL: u8 = 251;
pub const SB: u8 = 250;
pub const GA: u8 = 249;
pub const EL: u8 = 248;
pub const EC: u8 = 247;
pub const AYT: u8 = 246;
pub const AO: u8 = 245;
pub const IP: u8 = 244;
pub const BRK: u8 = 243;
pub const DM: u8 = 242;
pub const NOP: u8 = 241;
pub const SE: u8 = 240;

const CR: u8 = b'\r';
const LF: u8 = b'\n';
const NUL: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Text,
    Negotiation,
    Command,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TelnetEvent {
    pub kind: EventKind,
    pub payload: Vec<u8>,
}

impl TelnetEvent {
    fn text(bytes: Vec<u8>) -> Self {
        TelnetEvent { kind: EventKind::Text, payload: bytes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum State {
    #[default]
    Data,
    Iac,
    Option(u8),
    Sub,
    SubIac,
}

#[derive(Debug, Default, Clone)]
pub struct TelnetParser {
    state: State,
    after_cr: bool,
}

/// Result of feeding one chunk to the parser.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Parsed {
    pub events: Vec<TelnetEvent>,
    /// Bytes that must be written back to the peer.
    pub replies: Vec<u8>,
}

impl TelnetParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(&mut self, bytes: &[u8]) -> Parsed {
        let mut out = Parsed::default();
        let mut text = Vec::new();
        for &b in bytes {
            match self.state {
                State::Data => {
                    if b == IAC {
                        self.state = State::Iac;
                        continue;
                    }
                    let follows_cr = std::mem::replace(&mut self.after_cr, false);
                    match b {
                        CR => {
                            text.push(LF);
                            self.after_cr = true;
                        }
                        LF | NUL if follows_cr => {}
                        _ => text.push(b),
                    }
                }
                State::Iac => {
                    self.state = State::Data;
                    match b {
                        IAC => {
                            self.after_cr = false;
                            text.push(IAC);
                        }
                        WILL | WONT | DO | DONT => self.state = State::Option(b),
                        SB => self.state = State::Sub,
                        SE..=GA => {
                            flush_text(&mut out, &mut text);
                            out.events.push(TelnetEvent { kind: EventKind::Command, payload: vec![b] });
                        }
                        _ => {}
                    }
                }
                State::Option(verb) => {
                    self.state = State::Data;
                    flush_text(&mut out, &mut text);
                    out.events.push(TelnetEvent { kind: EventKind::Negotiation, payload: vec![verb, b] });
                    match verb {
                        DO => out.replies.extend_from_slice(&[IAC, WONT, b]),
                        WILL => out.replies.extend_from_slice(&[IAC, DONT, b]),
                        _ => {}
                    }
                }
                State::Sub => {
                    if b == IAC {
                        self.state = State::SubIac;
                    }
                }
                State::SubIac => {
                    self.state = if b == SE { State::Data } else { State::Sub };
                }
            }
        }
        flush_text(&mut out, &mut text);
        out
    }
}

fn flush_text(out: &mut Parsed, text: &mut Vec<u8>) {
    if !text.is_empty() {
        out.events.push(TelnetEvent::text(std::mem::take(text)));
    }
}

/// Escapes outbound text for the wire: `\n` becomes `CR LF` and a literal
/// 255 byte is doubled.
pub fn encode_text(text: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(text.len() + 8);
    let mut prev = 0u8;
    for &b in text.as_bytes() {
        match b {
            LF if prev != CR => out.extend_from_slice(&[CR, LF]),
            IAC => out.extend_from_slice(&[IAC, IAC]),
            _ => out.push(b),
        }
        prev = b;
    }
    out
}

/// Merges adjacent text events; chunk boundaries may split text arbitrarily.
pub fn coalesce(events: impl IntoIterator<Item = TelnetEvent>) -> Vec<TelnetEvent> {
    let mut merged: Vec<TelnetEvent> = Vec::new();
    for ev in events {
        match merged.last_mut() {
            Some(last) if last.kind == EventKind::Text && ev.kind == EventKind::Text => {
                last.payload.extend_from_slice(&ev.payload)
            }
            _ => merged.push(ev),
        }
    }
    merged
}
