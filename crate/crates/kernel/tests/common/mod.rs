#![allow(dead_code)]

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use ride_core::config::ServiceConfig;
use ride_core::wire::{self, FrameDecoder, MsgType, WireFrame};
use ride_kernel::engine::{EvalResult, EvalStatus};
use ride_kernel::service::Service;
use serde_json::{json, Value as Json};
use tempfile::TempDir;

pub const TIMEOUT: Duration = Duration::from_secs(10);

static SERVICE_LOCK: Mutex<()> = Mutex::new(());

/// Serializes everything in this process that needs the engine.
pub fn lock() -> MutexGuard<'static, ()> {
    SERVICE_LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// A running service in virtual-time mode on ephemeral loopback ports.
/// Only one may exist per process at a time.
pub struct Harness {
    pub service: Service,
    pub dir: TempDir,
    _guard: MutexGuard<'static, ()>,
}

impl Harness {
    pub fn start() -> Harness {
        Harness::with(|_| {})
    }

    pub fn with(adjust: impl FnOnce(&mut ServiceConfig)) -> Harness {
        let guard = lock();
        let dir = tempfile::tempdir().unwrap();
        let mut config = test_config(dir.path());
        adjust(&mut config);
        let service = Service::start(config).expect("service starts");
        Harness { service, dir, _guard: guard }
    }

    pub fn eval(&self, source: &str) -> EvalResult {
        self.service.engine_handle().eval_interactive(source)
    }

    /// Runs `source` and insists that it succeeded.
    pub fn exec(&self, source: &str) -> EvalResult {
        let r = self.eval(source);
        assert_eq!(r.status, EvalStatus::Complete, "{source:?} failed: {:?}", r.error);
        r
    }

    /// Runs a multi-statement script in the shared namespace.
    pub fn script(&self, source: &str) {
        self.exec(&format!("exec({source:?}, globals())"));
    }

    /// Representation of an expression's value.
    pub fn value(&self, source: &str) -> String {
        self.exec(source).value_repr.unwrap_or_else(|| "None".into())
    }

    pub fn advance(&self, seconds: f64) {
        self.service.kernel().advance(seconds).expect("virtual time advances");
    }

    pub fn shell(&self) -> Telnet {
        Telnet::connect(self.service.addresses().shell.expect("shell enabled"))
    }

    pub fn client(&self) -> WireClient {
        WireClient::connect(self.service.addresses().client)
    }

    pub fn bus(&self) -> BusClient {
        BusClient::connect(self.service.addresses().bus)
    }

    pub fn log_text(&self) -> String {
        std::fs::read_to_string(&self.service.config().log_file).unwrap_or_default()
    }
}

pub fn test_config(dir: &std::path::Path) -> ServiceConfig {
    ServiceConfig {
        shell_port: 0,
        client_port: 0,
        ws_port: 0,
        bus_port: 0,
        bind_addr: "127.0.0.1".into(),
        scripts_dir: dir.join("scripts"),
        data_dir: dir.join("data"),
        log_file: dir.join("kernel.log"),
        virtual_time: true,
        ..ServiceConfig::default()
    }
}

/// Minimal telnet client that reads up to the next prompt.
pub struct Telnet {
    pub stream: TcpStream,
    pending: Vec<u8>,
}

impl Telnet {
    pub fn connect(addr: SocketAddr) -> Telnet {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(TIMEOUT)).unwrap();
        let mut t = Telnet { stream, pending: Vec::new() };
        let banner = t.read_prompt();
        assert!(banner.ends_with(">>> "), "no prompt in {banner:?}");
        t
    }

    pub fn send_raw(&mut self, bytes: &[u8]) {
        self.stream.write_all(bytes).unwrap();
    }

    /// Reads until the received text ends with a prompt.
    pub fn read_prompt(&mut self) -> String {
        let deadline = Instant::now() + TIMEOUT;
        let mut buf = [0u8; 8192];
        loop {
            if self.pending.ends_with(b">>> ") || self.pending.ends_with(b"... ") {
                let text = String::from_utf8_lossy(&self.pending).into_owned();
                self.pending.clear();
                return text;
            }
            assert!(Instant::now() < deadline, "timed out waiting for a prompt, got {:?}", String::from_utf8_lossy(&self.pending));
            match self.stream.read(&mut buf) {
                Ok(0) => panic!("shell closed the connection; got {:?}", String::from_utf8_lossy(&self.pending)),
                Ok(n) => self.pending.extend_from_slice(&buf[..n]),
                Err(e) => panic!("shell read failed: {e}"),
            }
        }
    }

    /// Sends one line and returns everything up to the next prompt.
    pub fn line(&mut self, line: &str) -> String {
        self.send_raw(format!("{line}\r\n").as_bytes());
        self.read_prompt()
    }

    pub fn interrupt(&mut self) -> String {
        self.send_raw(&[255, 244]);
        self.read_prompt()
    }
}

/// Framed protocol client over TCP.
pub struct WireClient {
    pub stream: TcpStream,
    decoder: FrameDecoder,
    ready: std::collections::VecDeque<WireFrame>,
    seq: u32,
}

impl WireClient {
    pub fn connect(addr: SocketAddr) -> WireClient {
        WireClient::from_stream(TcpStream::connect(addr).unwrap())
    }

    /// Connects with a tiny receive buffer, for clients that will stop reading.
    pub fn connect_small_buffer(addr: SocketAddr) -> WireClient {
        let socket = socket2::Socket::new(socket2::Domain::for_address(addr), socket2::Type::STREAM, None).unwrap();
        socket.set_recv_buffer_size(4096).unwrap();
        socket.connect(&addr.into()).unwrap();
        WireClient::from_stream(socket.into())
    }

    fn from_stream(stream: TcpStream) -> WireClient {
        stream.set_read_timeout(Some(TIMEOUT)).unwrap();
        stream.set_nodelay(true).unwrap();
        WireClient { stream, decoder: FrameDecoder::new(), ready: Default::default(), seq: 0 }
    }

    pub fn send_frame(&mut self, frame: &WireFrame) {
        self.stream.write_all(&wire::encode(frame).unwrap()).unwrap();
    }

    pub fn send(&mut self, msg_type: MsgType, payload: impl Into<Vec<u8>>) -> u32 {
        self.seq += 1;
        let frame = WireFrame::new(msg_type, self.seq, payload);
        self.send_frame(&frame);
        self.seq
    }

    /// Next frame, or `None` once the server has closed the connection.
    pub fn recv(&mut self) -> Option<WireFrame> {
        let mut buf = [0u8; 65536];
        loop {
            if let Some(f) = self.ready.pop_front() {
                return Some(f);
            }
            match self.stream.read(&mut buf) {
                Ok(0) => return None,
                Ok(n) => self.ready.extend(self.decoder.push(&buf[..n]).expect("server frames decode")),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock || e.kind() == io::ErrorKind::TimedOut => {
                    panic!("timed out waiting for a frame")
                }
                Err(_) => return None,
            }
        }
    }

    pub fn expect(&mut self, msg_type: MsgType) -> WireFrame {
        let f = self.recv().expect("connection open");
        assert_eq!(f.kind(), Some(msg_type), "unexpected frame {:?} {:?}", f.kind(), f.payload_str());
        f
    }

    pub fn hello(&mut self) -> Json {
        self.send(MsgType::Hello, json!({ "name": "test" }).to_string());
        json_of(&self.expect(MsgType::Welcome))
    }

    pub fn subscribe(&mut self, channels: &[&str]) {
        self.send(MsgType::Subscribe, json!({ "channels": channels }).to_string());
    }

    /// Sends a heartbeat and returns every frame received before its echo.
    pub fn barrier(&mut self) -> Vec<WireFrame> {
        let token = format!("barrier-{}", self.seq + 1);
        self.send(MsgType::Heartbeat, token.clone());
        let mut frames = Vec::new();
        loop {
            let f = self.recv().expect("connection open during barrier");
            if f.kind() == Some(MsgType::Heartbeat) && f.payload == token.as_bytes() {
                return frames;
            }
            frames.push(f);
        }
    }

    /// True once the server has closed the connection.
    pub fn is_closed_within(&mut self, wait: Duration) -> bool {
        self.stream.set_read_timeout(Some(wait)).unwrap();
        let mut buf = [0u8; 65536];
        let closed = loop {
            match self.stream.read(&mut buf) {
                Ok(0) => break true,
                Ok(n) => {
                    let _ = self.decoder.push(&buf[..n]).map(|f| self.ready.extend(f));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock || e.kind() == io::ErrorKind::TimedOut => break false,
                Err(_) => break true,
            }
        };
        self.stream.set_read_timeout(Some(TIMEOUT)).unwrap();
        closed
    }
}

pub fn json_of(frame: &WireFrame) -> Json {
    serde_json::from_slice(&frame.payload).unwrap_or_else(|e| panic!("bad json {:?}: {e}", frame.payload_str()))
}

pub fn count(frames: &[WireFrame], msg_type: MsgType) -> usize {
    frames.iter().filter(|f| f.kind() == Some(msg_type)).count()
}

/// Line protocol publisher.
pub struct BusClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl BusClient {
    pub fn connect(addr: SocketAddr) -> BusClient {
        let writer = TcpStream::connect(addr).unwrap();
        writer.set_read_timeout(Some(TIMEOUT)).unwrap();
        writer.set_nodelay(true).unwrap();
        let reader = BufReader::new(writer.try_clone().unwrap());
        BusClient { writer, reader }
    }

    pub fn send_line(&mut self, line: &str) -> String {
        self.writer.write_all(format!("{line}\n").as_bytes()).unwrap();
        let mut reply = String::new();
        self.reader.read_line(&mut reply).unwrap();
        reply
    }

    pub fn publish(&mut self, topic: &str, payload: &str) -> String {
        self.send_line(&format!("PUB {topic} {payload}"))
    }
}

/// The service binary running as a child process on ephemeral ports.
pub struct Process {
    pub child: std::process::Child,
    pub dir: TempDir,
    pub pid: u32,
    pub shell: Option<SocketAddr>,
    pub client: SocketAddr,
    pub websocket: SocketAddr,
    pub bus: SocketAddr,
}

pub fn binary() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_ride-kernel"))
}

fn ready_field(line: &str, key: &str) -> String {
    line.split_whitespace()
        .find_map(|w| w.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
        .to_string()
}

impl Process {
    /// Starts the binary with loopback ephemeral ports plus `extra` flags and
    /// waits for its ready line.
    pub fn start(extra: &[&str]) -> Process {
        let dir = tempfile::tempdir().unwrap();
        Process::start_in(dir, extra)
    }

    pub fn start_in(dir: TempDir, extra: &[&str]) -> Process {
        let mut child = binary()
            .current_dir(dir.path())
            .args(["--bind", "127.0.0.1", "--shell-port", "0", "--client-port", "0", "--ws-port", "0", "--bus-port", "0"])
            .args(extra)
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()
            .expect("binary spawns");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        if !line.starts_with("ride-kernel ready") {
            let status = child.wait().unwrap();
            let mut err = String::new();
            child.stderr.take().unwrap().read_to_string(&mut err).unwrap();
            panic!("binary did not start ({status}): {err}");
        }
        let addr = |key| ready_field(&line, key).parse::<SocketAddr>().unwrap();
        let shell = match ready_field(&line, "shell").as_str() {
            "off" => None,
            s => Some(s.parse().unwrap()),
        };
        Process {
            pid: ready_field(&line, "pid").parse().unwrap(),
            shell,
            client: addr("client"),
            websocket: addr("websocket"),
            bus: addr("bus"),
            child,
            dir,
        }
    }

    pub fn shell(&self) -> Telnet {
        Telnet::connect(self.shell.expect("shell enabled"))
    }

    pub fn interrupt(&self) {
        let status = std::process::Command::new("kill").args(["-INT", &self.pid.to_string()]).status().unwrap();
        assert!(status.success());
    }

    /// Waits for the process to exit and returns its status code.
    pub fn wait_exit(&mut self, within: Duration) -> Option<i32> {
        let deadline = Instant::now() + within;
        while Instant::now() < deadline {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status.code();
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        None
    }

    pub fn is_running(&mut self) -> bool {
        self.child.try_wait().unwrap().is_none()
    }
}

impl Drop for Process {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
