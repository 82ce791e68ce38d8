//! Accept loops with cooperative shutdown.

use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

const POLL: Duration = Duration::from_millis(20);

/// Live connections of one listener, shut down together on stop.
#[derive(Clone, Default)]
pub struct ConnectionSet {
    inner: Arc<Mutex<HashMap<u64, TcpStream>>>,
    next: Arc<AtomicU64>,
}

/// Removes its connection from the set when dropped.
pub struct ConnGuard {
    set: ConnectionSet,
    id: u64,
}

impl Drop for ConnGuard {
    fn drop(&mut self) {
        self.set.inner.lock().unwrap().remove(&self.id);
    }
}

impl ConnectionSet {
    fn track(&self, stream: &TcpStream) -> io::Result<ConnGuard> {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        self.inner.lock().unwrap().insert(id, stream.try_clone()?);
        Ok(ConnGuard { set: self.clone(), id })
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shutdown_all(&self) {
        for stream in self.inner.lock().unwrap().values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
    }
}

pub struct Acceptor {
    name: &'static str,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    connections: ConnectionSet,
}

impl Acceptor {
    /// Runs `on_accept` for every incoming connection until stopped.
    pub fn spawn<F>(name: &'static str, listener: TcpListener, connections: ConnectionSet, mut on_accept: F) -> io::Result<Acceptor>
    where
        F: FnMut(TcpStream, ConnGuard) -> io::Result<()> + Send + 'static,
    {
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let set = connections.clone();
        let thread = thread::Builder::new().name(format!("{name}-accept")).spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        if stream.set_nonblocking(false).is_err() {
                            continue;
                        }
                        let _ = stream.set_nodelay(true);
                        let Ok(guard) = set.track(&stream) else { continue };
                        if let Err(e) = on_accept(stream, guard) {
                            eprintln!("{name}: could not start connection handler: {e}");
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(_) => thread::sleep(POLL),
                }
            }
        })?;
        Ok(Acceptor { name, addr, stop, thread: Some(thread), connections })
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn connections(&self) -> &ConnectionSet {
        &self.connections
    }

    /// Stops accepting and shuts down every live connection.
    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.connections.shutdown_all();
    }
}

impl Drop for Acceptor {
    fn drop(&mut self) {
        self.stop();
    }
}
