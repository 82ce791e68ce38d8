//! Robot scripting kernel: an embedded Python engine fronted by a telnet
//! shell, a framed client protocol with a WebSocket bridge, and a node bus,
//! all driven by a simulated robot.

pub mod bus;
pub mod client;
pub mod engine;
pub mod host_api;
pub mod kernel;
pub mod logging;
pub mod recorder;
pub mod server;
pub mod service;
pub mod shell;
pub mod telemetry;
