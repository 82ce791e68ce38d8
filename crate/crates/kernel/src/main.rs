use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;

use clap::Parser;
use ride_core::config::ServiceConfig;
use ride_kernel::service::Service;

#[derive(Parser, Debug)]
#[command(name = "ride-kernel", version, about = "Scriptable robot service with a telnet shell and telemetry clients")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "PORT")]
    shell_port: Option<u16>,
    /// Do not start the interactive shell.
    #[arg(long)]
    no_shell: bool,
    #[arg(long, value_name = "DIR")]
    scripts_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    log_file: Option<PathBuf>,
    #[arg(long, value_name = "PORT")]
    client_port: Option<u16>,
    #[arg(long, value_name = "PORT")]
    ws_port: Option<u16>,
    #[arg(long, value_name = "PORT")]
    bus_port: Option<u16>,
    #[arg(long, value_name = "ADDR")]
    bind: Option<String>,
    /// Only advance simulated time when a script calls `advanceTime`.
    #[arg(long)]
    virtual_time: bool,
}

impl Cli {
    fn into_config(self) -> Result<ServiceConfig, String> {
        let mut config = ServiceConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        if let Some(p) = self.shell_port {
            config.shell_port = p;
        }
        if let Some(p) = self.client_port {
            config.client_port = p;
        }
        if let Some(p) = self.ws_port {
            config.ws_port = p;
        }
        if let Some(p) = self.bus_port {
            config.bus_port = p;
        }
        if let Some(addr) = self.bind {
            config.bind_addr = addr;
        }
        if let Some(dir) = self.scripts_dir {
            config.scripts_dir = dir;
        }
        if let Some(dir) = self.data_dir {
            config.data_dir = dir;
        }
        if let Some(file) = self.log_file {
            config.log_file = file;
        }
        if self.no_shell {
            config.shell_enabled = false;
        }
        if self.virtual_time {
            config.virtual_time = true;
        }
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let config = match Cli::parse().into_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ride-kernel: invalid configuration: {e}");
            return ExitCode::from(2);
        }
    };

    let (stop_tx, stop_rx) = mpsc::channel();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = stop_tx.send(());
    }) {
        eprintln!("ride-kernel: cannot install signal handler: {e}");
        return ExitCode::from(1);
    }

    let mut service = match Service::start(config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("ride-kernel: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };

    let a = service.addresses();
    let shell = a.shell.map(|s| s.to_string()).unwrap_or_else(|| "off".into());
    println!(
        "ride-kernel ready pid={} shell={shell} client={} websocket={} bus={}",
        std::process::id(),
        a.client,
        a.websocket,
        a.bus
    );
    let _ = std::io::stdout().flush();

    let _ = stop_rx.recv();
    service.shutdown();
    ExitCode::SUCCESS
}
