//! Client protocol sessions over TCP and the WebSocket bridge.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use ride_core::wire::{self, FrameDecoder, MsgType, WireError, WireFrame};
use serde_json::{json, Value as Json};
use socket2::SockRef;
use tungstenite::Message;

use crate::engine::{Slot, Value};
use crate::kernel::Kernel;
use crate::server::{Acceptor, ConnGuard, ConnectionSet};
use crate::telemetry::{ClientLink, Outgoing, Pop};

const COMPONENT: &str = "client";

/// Kernel-side send buffer. Kept small so that a client that stops reading
/// fills its queue quickly instead of hiding behind kernel buffering.
const SEND_BUFFER: usize = 32 * 1024;
const WRITER_POLL: Duration = Duration::from_millis(250);
const DRAIN_DEADLINE: Duration = Duration::from_secs(2);
const WS_POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Close,
}

pub fn error_payload(code: &str, message: &str) -> Vec<u8> {
    json!({ "code": code, "message": message }).to_string().into_bytes()
}

/// Protocol state of one client, independent of the transport.
pub struct ClientSession {
    link: Arc<ClientLink>,
    kernel: Arc<Kernel>,
    greeted: bool,
}

impl ClientSession {
    pub fn new(link: Arc<ClientLink>, kernel: Arc<Kernel>) -> Self {
        ClientSession { link, kernel, greeted: false }
    }

    pub fn link(&self) -> &Arc<ClientLink> {
        &self.link
    }

    fn send(&self, msg_type: MsgType, payload: Vec<u8>) {
        self.link.outbox.push(Outgoing::control(msg_type, payload));
    }

    fn error(&self, code: &str, message: &str) {
        self.send(MsgType::Error, error_payload(code, message));
    }

    pub fn on_frame(&mut self, frame: WireFrame) -> Flow {
        self.link.touch(self.kernel.now());
        let kind = frame.kind();
        if !self.greeted {
            if kind == Some(MsgType::Hello) {
                self.greeted = true;
                let rates = self.kernel.rates();
                let welcome = json!({
                    "server": "ride-kernel",
                    "version": wire::VERSION,
                    "rates": { "image_hz": rates.image_hz, "state_hz": rates.state_hz },
                });
                self.send(MsgType::Welcome, welcome.to_string().into_bytes());
                return Flow::Continue;
            }
            self.error("handshake-required", "the first frame must be HELLO");
            return Flow::Close;
        }
        match kind {
            Some(MsgType::Hello) => self.error("already-greeted", "HELLO was already received"),
            Some(MsgType::Subscribe) => self.subscribe(&frame, true),
            Some(MsgType::Unsubscribe) => self.subscribe(&frame, false),
            Some(MsgType::Command) => self.command(&frame),
            Some(MsgType::Heartbeat) => self.send(MsgType::Heartbeat, frame.payload),
            Some(MsgType::Bye) => return Flow::Close,
            Some(other) => self.error("unexpected-type", &format!("{other:?} is not accepted from clients")),
            None => self.error("unknown-type", &format!("unknown message type {}", frame.msg_type)),
        }
        Flow::Continue
    }

    /// Reports a framing error. The stream cannot be resynchronized, so the
    /// connection closes.
    pub fn on_wire_error(&mut self, err: &WireError) -> Flow {
        self.error(err.code(), &err.to_string());
        Flow::Close
    }

    fn subscribe(&self, frame: &WireFrame, on: bool) {
        let channels = serde_json::from_slice::<Json>(&frame.payload)
            .ok()
            .and_then(|v| v.get("channels").cloned())
            .and_then(|c| serde_json::from_value::<Vec<String>>(c).ok());
        let Some(channels) = channels else {
            return self.error("bad-payload", "expected {\"channels\": [...]}");
        };
        let mut subs = self.link.subscriptions.lock().unwrap();
        let mut updated = subs.clone();
        match updated.apply(&channels, on) {
            Ok(()) => *subs = updated,
            Err(name) => {
                drop(subs);
                self.error("unknown-channel", &format!("unknown channel `{name}`"));
            }
        }
    }

    fn command(&self, frame: &WireFrame) {
        let body = serde_json::from_slice::<Json>(&frame.payload).ok();
        let Some(Json::Object(mut fields)) = body else {
            return self.error("bad-command", "COMMAND payload must be an object");
        };
        let Some(Json::String(cmd)) = fields.remove("cmd") else {
            return self.error("bad-command", "COMMAND payload needs a string `cmd` field");
        };
        if cmd == "joy" {
            let mut v = [0.0; 3];
            for (slot, key) in v.iter_mut().zip(["vx", "vy", "vtheta"]) {
                match fields.get(key) {
                    None => {}
                    Some(x) if x.is_number() => *slot = x.as_f64().unwrap_or(0.0),
                    Some(_) => return self.error("bad-command", &format!("`{key}` must be a number")),
                }
            }
            if !self.kernel.with_sim(|s| s.set_base_velocity(v[0], v[1], v[2])) {
                self.kernel.log().debug(COMPONENT, "joy command ignored outside joystick mode");
            }
        }
        let accepted = self.kernel.engine().is_some_and(|e| e.is_slot_filled(Slot::RemoteCommand));
        if accepted {
            let args = vec![Value::from(cmd), Value::from(Json::Object(fields).to_string())];
            if let Some(engine) = self.kernel.engine() {
                let _ = engine.invoke_slot(Slot::RemoteCommand, args, true);
            }
        }
        let ack = json!({ "seq": frame.seq, "accepted": accepted });
        self.send(MsgType::CommandAck, ack.to_string().into_bytes());
    }
}

fn register(kernel: &Kernel, stream: &TcpStream) -> io::Result<Arc<ClientLink>> {
    let peer = stream.peer_addr()?;
    let link = kernel.telemetry().register(peer, Some(stream.try_clone()?), kernel.now());
    kernel.log().info(COMPONENT, format!("client {} connected from {peer}", link.id));
    Ok(link)
}

fn unregister(kernel: &Kernel, link: &ClientLink) {
    kernel.telemetry().unregister(link.id);
    kernel.log().info(COMPONENT, format!("client {} disconnected (dropped {} frames)", link.id, link.outbox.dropped()));
}

pub fn serve_tcp(listener: TcpListener, kernel: Arc<Kernel>) -> io::Result<Acceptor> {
    Acceptor::spawn("client", listener, ConnectionSet::default(), move |stream, guard| {
        let kernel = kernel.clone();
        std::thread::Builder::new().name("client-read".into()).spawn(move || run_tcp(stream, kernel, guard)).map(|_| ())
    })
}

fn run_tcp(stream: TcpStream, kernel: Arc<Kernel>, guard: ConnGuard) {
    let _ = SockRef::from(&stream).set_send_buffer_size(SEND_BUFFER);
    let Ok(link) = register(&kernel, &stream) else { return };
    let Ok(mut out) = stream.try_clone() else { return };
    let (done_tx, done_rx) = mpsc::channel();
    let writer_link = link.clone();
    let writer = std::thread::Builder::new().name("client-write".into()).spawn(move || {
        loop {
            match writer_link.outbox.pop(WRITER_POLL) {
                Pop::Item(item) => {
                    let frame = writer_link.outbox.render(item);
                    let bytes = wire::encode(&frame).expect("outgoing frames respect the size limit");
                    if out.write_all(&bytes).is_err() {
                        break;
                    }
                }
                Pop::Empty => {}
                Pop::Closed => break,
            }
        }
        let _ = out.shutdown(Shutdown::Both);
        let _ = done_tx.send(());
    });

    let mut session = ClientSession::new(link.clone(), kernel.clone());
    let mut decoder = FrameDecoder::new();
    let mut reader = &stream;
    let mut buf = vec![0u8; 16 * 1024];
    'read: loop {
        let n = match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        match decoder.push(&buf[..n]) {
            Ok(frames) => {
                for frame in frames {
                    if session.on_frame(frame) == Flow::Close {
                        break 'read;
                    }
                }
            }
            Err(e) => {
                session.on_wire_error(&e);
                break;
            }
        }
    }
    link.outbox.close();
    if writer.is_ok() && done_rx.recv_timeout(DRAIN_DEADLINE).is_err() {
        let _ = stream.shutdown(Shutdown::Both);
    }
    if let Ok(w) = writer {
        let _ = w.join();
    }
    unregister(&kernel, &link);
    drop(guard);
}

pub fn serve_ws(listener: TcpListener, kernel: Arc<Kernel>) -> io::Result<Acceptor> {
    Acceptor::spawn("websocket", listener, ConnectionSet::default(), move |stream, guard| {
        let kernel = kernel.clone();
        std::thread::Builder::new().name("ws-conn".into()).spawn(move || run_ws(stream, kernel, guard)).map(|_| ())
    })
}

fn run_ws(stream: TcpStream, kernel: Arc<Kernel>, guard: ConnGuard) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let Ok(control) = stream.try_clone() else { return };
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            kernel.log().warn(COMPONENT, format!("websocket handshake failed: {e}"));
            return;
        }
    };
    let _ = SockRef::from(&control).set_send_buffer_size(SEND_BUFFER);
    let _ = control.set_read_timeout(Some(WS_POLL));
    let Ok(link) = register(&kernel, &control) else { return };
    let mut session = ClientSession::new(link.clone(), kernel.clone());

    let mut closing = false;
    'conn: loop {
        if !closing {
            match ws.read() {
                Ok(Message::Binary(data)) => {
                    let flow = match wire::decode(&data) {
                        Ok((mut frames, rest)) if frames.len() == 1 && rest.is_empty() => {
                            session.on_frame(frames.remove(0))
                        }
                        Ok(_) => {
                            session.error("bad-message", "each binary message must carry exactly one frame");
                            Flow::Close
                        }
                        Err(e) => session.on_wire_error(&e),
                    };
                    if flow == Flow::Close {
                        link.outbox.close();
                        closing = true;
                    }
                }
                Ok(Message::Text(_)) => {
                    session.error("text-message", "only binary messages are accepted");
                    link.outbox.close();
                    closing = true;
                }
                Ok(Message::Close(_)) => break,
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(_) => break,
            }
        }
        loop {
            match link.outbox.pop(if closing { WS_POLL } else { Duration::ZERO }) {
                Pop::Item(item) => {
                    let frame = link.outbox.render(item);
                    let bytes = wire::encode(&frame).expect("outgoing frames respect the size limit");
                    if ws.send(Message::binary(bytes)).is_err() {
                        break 'conn;
                    }
                }
                Pop::Empty => break,
                Pop::Closed => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    break 'conn;
                }
            }
        }
    }
    link.outbox.close();
    let _ = control.shutdown(Shutdown::Both);
    unregister(&kernel, &link);
    drop(guard);
}
