//! Platform-independent pieces of the ride robot kernel: the simulated
//! robot, the client wire protocol, the telnet stream parser, the bag
//! recording format, log records and service configuration.

pub mod bag;
pub mod config;
pub mod logline;
pub mod sim;
pub mod telnet;
pub mod wire;
