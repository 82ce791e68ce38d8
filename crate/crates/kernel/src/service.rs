//! Startup and shutdown ordering for the whole service.

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use ride_core::config::{ConfigError, ServiceConfig};
use thiserror::Error;

use crate::engine::{Engine, EngineError, EngineHandle, EngineOptions, LoadReport};
use crate::kernel::{Kernel, KernelOptions};
use crate::logging::Logger;
use crate::server::Acceptor;
use crate::{bus, client, host_api, shell};

const COMPONENT: &str = "service";

#[derive(Debug, Error)]
pub enum StartError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("cannot open log file: {0}")]
    Log(io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot listen for {what} on {addr}: {source}")]
    Bind { what: &'static str, addr: String, source: io::Error },
}

impl StartError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            StartError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Addresses {
    pub shell: Option<SocketAddr>,
    pub client: SocketAddr,
    pub websocket: SocketAddr,
    pub bus: SocketAddr,
}

pub struct Service {
    config: ServiceConfig,
    log: Logger,
    kernel: Arc<Kernel>,
    engine: Option<Engine>,
    ticker: Option<(Arc<AtomicBool>, JoinHandle<()>)>,
    servers: Vec<Acceptor>,
    addresses: Addresses,
    startup: LoadReport,
}

fn bind(what: &'static str, config: &ServiceConfig, port: u16) -> Result<TcpListener, StartError> {
    let addr = format!("{}:{port}", config.bind_addr);
    TcpListener::bind(&addr).map_err(|source| StartError::Bind { what, addr, source })
}

fn spawned(what: &'static str, result: io::Result<Acceptor>) -> Result<Acceptor, StartError> {
    result.map_err(|source| StartError::Bind { what, addr: String::new(), source })
}

impl Service {
    /// Brings the service up: logging, engine, simulation, node bus, client
    /// servers, shell and finally the startup script.
    pub fn start(config: ServiceConfig) -> Result<Service, StartError> {
        config.validate()?;
        let log = Logger::open(&config.log_file).map_err(StartError::Log)?;
        log.info(COMPONENT, format!("starting ride-kernel {}", env!("CARGO_PKG_VERSION")));

        let kernel = Kernel::new(
            KernelOptions { rates: config.rates(), data_dir: config.data_dir.clone(), virtual_time: config.virtual_time },
            log.clone(),
        );
        let engine = Engine::boot(
            EngineOptions { module_name: config.module_name.clone() },
            log.clone(),
            host_api::installer(kernel.clone()),
        )
        .inspect_err(|e| log.error(COMPONENT, format!("engine boot failed: {e}")))?;
        kernel.attach_engine(engine.handle());

        let mut service = Service {
            addresses: Addresses {
                shell: None,
                client: ([0, 0, 0, 0], 0).into(),
                websocket: ([0, 0, 0, 0], 0).into(),
                bus: ([0, 0, 0, 0], 0).into(),
            },
            startup: LoadReport { found: false, path: Default::default(), error: None },
            config,
            log,
            kernel,
            engine: Some(engine),
            ticker: None,
            servers: Vec::new(),
        };
        if let Err(e) = service.bring_up() {
            service.log.error(COMPONENT, format!("startup failed: {e}"));
            service.shutdown();
            return Err(e);
        }
        Ok(service)
    }

    fn bring_up(&mut self) -> Result<(), StartError> {
        let config = self.config.clone();
        if !config.virtual_time {
            let stop = Arc::new(AtomicBool::new(false));
            let ticker = self
                .kernel
                .spawn_ticker(stop.clone())
                .map_err(|source| StartError::Bind { what: "simulation", addr: String::new(), source })?;
            self.ticker = Some((stop, ticker));
        }

        let bus = spawned("node bus", bus::serve(bind("node bus", &config, config.bus_port)?, self.kernel.clone()))?;
        self.addresses.bus = bus.local_addr();
        self.servers.push(bus);

        let tcp = spawned("clients", client::serve_tcp(bind("clients", &config, config.client_port)?, self.kernel.clone()))?;
        self.addresses.client = tcp.local_addr();
        self.servers.push(tcp);

        let ws = spawned("websocket", client::serve_ws(bind("websocket", &config, config.ws_port)?, self.kernel.clone()))?;
        self.addresses.websocket = ws.local_addr();
        self.servers.push(ws);

        if config.shell_enabled {
            let listener = bind("shell", &config, config.shell_port)?;
            let sh = spawned(
                "shell",
                shell::serve(listener, self.engine_handle(), self.log.clone(), config.module_name.clone()),
            )?;
            self.addresses.shell = Some(sh.local_addr());
            self.servers.push(sh);
        } else {
            self.log.info(COMPONENT, "interactive shell disabled");
        }
        for server in &self.servers {
            self.log.info(COMPONENT, format!("{} listening on {}", server.name(), server.local_addr()));
        }

        self.startup = self.engine_handle().load_startup_script(&config.scripts_dir, &config.startup_name);
        Ok(())
    }

    pub fn addresses(&self) -> Addresses {
        self.addresses
    }

    pub fn kernel(&self) -> &Arc<Kernel> {
        &self.kernel
    }

    pub fn engine_handle(&self) -> EngineHandle {
        self.kernel.engine().expect("engine attached at start").clone()
    }

    pub fn startup_report(&self) -> &LoadReport {
        &self.startup
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn log(&self) -> &Logger {
        &self.log
    }

    /// Stops everything in reverse start order and finalizes any open
    /// recording. Idempotent.
    pub fn shutdown(&mut self) {
        if self.engine.is_none() {
            return;
        }
        self.log.info(COMPONENT, "shutting down");
        while let Some(mut server) = self.servers.pop() {
            server.stop();
        }
        self.kernel.telemetry().disconnect_all();
        if let Some((stop, ticker)) = self.ticker.take() {
            stop.store(true, Ordering::Relaxed);
            let _ = ticker.join();
        }
        self.kernel.finalize_recording();
        if let Some(mut engine) = self.engine.take() {
            engine.shutdown();
        }
        self.log.info(COMPONENT, "stopped");
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.shutdown();
    }
}
