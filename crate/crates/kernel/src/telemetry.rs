//! Per-client outbound queues and the telemetry fan-out.

use std::collections::{BTreeSet, VecDeque};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use ride_core::wire::{MsgType, WireFrame};
use serde_json::{json, Map, Value as Json};

/// Frames a client may have waiting before old telemetry is discarded.
pub const QUEUE_CAPACITY: usize = 32;

/// Virtual seconds of silence after which a client is disconnected.
pub const HEARTBEAT_TIMEOUT: f64 = 10.0;

#[derive(Debug, Clone)]
pub enum Outgoing {
    Frame { msg_type: MsgType, payload: Arc<[u8]> },
    /// Robot state; the writer fills in the session's drop counter.
    State(Arc<Map<String, Json>>),
}

impl Outgoing {
    pub fn control(msg_type: MsgType, payload: impl Into<Vec<u8>>) -> Self {
        Outgoing::Frame { msg_type, payload: Arc::from(payload.into()) }
    }

    fn droppable(&self) -> bool {
        match self {
            Outgoing::Frame { msg_type, .. } => *msg_type == MsgType::TelemetryImage,
            Outgoing::State(_) => true,
        }
    }

    pub fn msg_type(&self) -> MsgType {
        match self {
            Outgoing::Frame { msg_type, .. } => *msg_type,
            Outgoing::State(_) => MsgType::TelemetryState,
        }
    }
}

#[derive(Default)]
struct Queue {
    items: VecDeque<Outgoing>,
    dropped: u64,
    closed: bool,
}

/// Bounded queue between the producers and one client's writer.
///
/// When full, the oldest image or state frame makes room. Control and
/// custom frames are never discarded.
#[derive(Default)]
pub struct Outbox {
    queue: Mutex<Queue>,
    ready: Condvar,
    seq: AtomicU64,
}

pub enum Pop {
    Item(Outgoing),
    Empty,
    Closed,
}

impl Outbox {
    pub fn push(&self, item: Outgoing) {
        let mut q = self.queue.lock().unwrap();
        if q.closed {
            return;
        }
        if q.items.len() >= QUEUE_CAPACITY {
            if let Some(i) = q.items.iter().position(Outgoing::droppable) {
                q.items.remove(i);
                q.dropped += 1;
            } else if item.droppable() {
                q.dropped += 1;
                return;
            }
        }
        q.items.push_back(item);
        self.ready.notify_one();
    }

    /// Waits up to `timeout` for an item. Items queued before `close` are
    /// still delivered.
    pub fn pop(&self, timeout: Duration) -> Pop {
        let mut q = self.queue.lock().unwrap();
        if q.items.is_empty() && !q.closed {
            q = self.ready.wait_timeout(q, timeout).unwrap().0;
        }
        match q.items.pop_front() {
            Some(item) => Pop::Item(item),
            None if q.closed => Pop::Closed,
            None => Pop::Empty,
        }
    }

    pub fn close(&self) {
        self.queue.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.queue.lock().unwrap().closed
    }

    pub fn dropped(&self) -> u64 {
        self.queue.lock().unwrap().dropped
    }

    pub fn len(&self) -> usize {
        self.queue.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Serializes an item into a frame, assigning the next sequence number.
    pub fn render(&self, item: Outgoing) -> WireFrame {
        let seq = (self.seq.fetch_add(1, Ordering::Relaxed) + 1) as u32;
        match item {
            Outgoing::Frame { msg_type, payload } => WireFrame::new(msg_type, seq, payload.to_vec()),
            Outgoing::State(state) => {
                let mut body = (*state).clone();
                body.insert("dropped".into(), json!(self.dropped()));
                WireFrame::new(MsgType::TelemetryState, seq, Json::Object(body).to_string())
            }
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Subscriptions {
    pub image: bool,
    pub state: bool,
    pub all_custom: bool,
    pub custom_labels: BTreeSet<String>,
}

impl Subscriptions {
    pub fn wants_custom(&self, label: &str) -> bool {
        self.all_custom || self.custom_labels.contains(label)
    }

    /// Applies channel names such as `image`, `state`, `custom` or
    /// `custom:<label>`. Returns the first unknown name.
    pub fn apply(&mut self, channels: &[String], on: bool) -> Result<(), String> {
        for channel in channels {
            match channel.as_str() {
                "image" => self.image = on,
                "state" => self.state = on,
                "custom" => self.all_custom = on,
                other => match other.strip_prefix("custom:") {
                    Some(label) if !label.is_empty() => {
                        if on {
                            self.custom_labels.insert(label.to_string());
                        } else {
                            self.custom_labels.remove(label);
                        }
                    }
                    _ => return Err(other.to_string()),
                },
            }
        }
        Ok(())
    }
}

/// One connected client as seen by the broadcaster.
pub struct ClientLink {
    pub id: u64,
    pub peer: SocketAddr,
    pub outbox: Outbox,
    pub subscriptions: Mutex<Subscriptions>,
    last_seen: AtomicU64,
    socket: Mutex<Option<TcpStream>>,
    evicted: AtomicBool,
}

impl ClientLink {
    pub fn touch(&self, now: f64) {
        self.last_seen.store(now.to_bits(), Ordering::Relaxed);
    }

    pub fn last_seen(&self) -> f64 {
        f64::from_bits(self.last_seen.load(Ordering::Relaxed))
    }

    pub fn was_evicted(&self) -> bool {
        self.evicted.load(Ordering::Relaxed)
    }

    /// Stops the writer and unblocks any reader of the socket.
    pub fn disconnect(&self) {
        self.outbox.close();
        if let Some(sock) = self.socket.lock().unwrap().as_ref() {
            let _ = sock.shutdown(Shutdown::Both);
        }
    }
}

#[derive(Default)]
pub struct Telemetry {
    links: Mutex<Vec<Arc<ClientLink>>>,
    next_id: AtomicU64,
}

impl Telemetry {
    pub fn register(&self, peer: SocketAddr, socket: Option<TcpStream>, now: f64) -> Arc<ClientLink> {
        let link = Arc::new(ClientLink {
            id: self.next_id.fetch_add(1, Ordering::Relaxed) + 1,
            peer,
            outbox: Outbox::default(),
            subscriptions: Mutex::new(Subscriptions::default()),
            last_seen: AtomicU64::new(now.to_bits()),
            socket: Mutex::new(socket),
            evicted: AtomicBool::new(false),
        });
        self.links.lock().unwrap().push(link.clone());
        link
    }

    pub fn unregister(&self, id: u64) {
        self.links.lock().unwrap().retain(|l| l.id != id);
    }

    pub fn client_count(&self) -> usize {
        self.links.lock().unwrap().len()
    }

    fn each(&self, mut f: impl FnMut(&ClientLink)) {
        let links = self.links.lock().unwrap().clone();
        for link in &links {
            f(link);
        }
    }

    pub fn broadcast_image(&self, payload: Arc<[u8]>) {
        self.each(|link| {
            if link.subscriptions.lock().unwrap().image {
                link.outbox.push(Outgoing::Frame { msg_type: MsgType::TelemetryImage, payload: payload.clone() });
            }
        });
    }

    pub fn broadcast_state(&self, state: Arc<Map<String, Json>>) {
        self.each(|link| {
            if link.subscriptions.lock().unwrap().state {
                link.outbox.push(Outgoing::State(state.clone()));
            }
        });
    }

    /// Returns the number of clients the payload was queued for.
    pub fn broadcast_custom(&self, label: &str, payload: &str) -> usize {
        let body: Arc<[u8]> = Arc::from(json!({ "label": label, "payload": payload }).to_string().into_bytes());
        let mut delivered = 0;
        self.each(|link| {
            if link.subscriptions.lock().unwrap().wants_custom(label) {
                link.outbox.push(Outgoing::Frame { msg_type: MsgType::TelemetryCustom, payload: body.clone() });
                delivered += 1;
            }
        });
        delivered
    }

    /// Disconnects every client silent for longer than the heartbeat timeout.
    pub fn evict_silent(&self, now: f64) -> Vec<Arc<ClientLink>> {
        let stale: Vec<_> = self
            .links
            .lock()
            .unwrap()
            .iter()
            .filter(|l| now - l.last_seen() > HEARTBEAT_TIMEOUT && !l.was_evicted())
            .cloned()
            .collect();
        for link in &stale {
            link.evicted.store(true, Ordering::Relaxed);
            link.disconnect();
        }
        stale
    }

    pub fn disconnect_all(&self) {
        self.each(|link| link.disconnect());
    }
}
