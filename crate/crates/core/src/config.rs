//! Service configuration: defaults, flat `key = value` files and validation.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {value}")]
    BadValue { line: usize, key: String, value: String },
    #[error("ports {0} and {1} collide")]
    PortCollision(&'static str, &'static str),
    #[error("`{0}` must be greater than zero")]
    ZeroRate(&'static str),
    #[error("sim_hz must be at least every telemetry rate")]
    SimTooSlow,
    #[error("module name `{0}` is not a valid identifier")]
    BadModuleName(String),
    #[error("cannot read config file {path}: {reason}")]
    Read { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub shell_port: u16,
    pub client_port: u16,
    pub ws_port: u16,
    pub bus_port: u16,
    pub bind_addr: String,
    pub scripts_dir: PathBuf,
    pub data_dir: PathBuf,
    pub log_file: PathBuf,
    pub shell_enabled: bool,
    pub image_hz: u32,
    pub state_hz: u32,
    pub sim_hz: u32,
    /// Name under which the host API is visible to scripts.
    pub module_name: String,
    /// Startup script stem; the engine appends its source extension.
    pub startup_name: String,
    pub virtual_time: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            shell_port: 27005,
            client_port: 27016,
            ws_port: 27017,
            bus_port: 27018,
            bind_addr: "0.0.0.0".into(),
            scripts_dir: PathBuf::from("scripts"),
            data_dir: PathBuf::from("data"),
            log_file: PathBuf::from("ride-kernel.log"),
            shell_enabled: true,
            image_hz: 10,
            state_hz: 10,
            sim_hz: 50,
            module_name: "robot".into(),
            startup_name: "main".into(),
            virtual_time: false,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl ServiceConfig {
    /// Applies a config file on top of `self`. Blank lines and `#` comments are ignored.
    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            self.set(key.trim(), value.trim(), line)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), reason: e.to_string() })?;
        self.apply_str(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue { line, key: key.to_string(), value: value.to_string() };
        let port = || value.parse::<u16>().map_err(|_| bad());
        let rate = || value.parse::<u32>().map_err(|_| bad());
        match key {
            "shell_port" => self.shell_port = port()?,
            "client_port" => self.client_port = port()?,
            "ws_port" => self.ws_port = port()?,
            "bus_port" => self.bus_port = port()?,
            "bind_addr" => self.bind_addr = value.to_string(),
            "scripts_dir" => self.scripts_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = PathBuf::from(value),
            "log_file" => self.log_file = PathBuf::from(value),
            "shell_enabled" => self.shell_enabled = parse_bool(value).ok_or_else(bad)?,
            "image_hz" => self.image_hz = rate()?,
            "state_hz" => self.state_hz = rate()?,
            "sim_hz" => self.sim_hz = rate()?,
            "module_name" => self.module_name = value.to_string(),
            "startup_name" => self.startup_name = value.to_string(),
            "virtual_time" => self.virtual_time = parse_bool(value).ok_or_else(bad)?,
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
        Ok(())
    }

    /// Checks the cross-field invariants. Port 0 requests an ephemeral port
    /// and is exempt from the distinctness rule.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ports = [
            ("shell_port", self.shell_port),
            ("client_port", self.client_port),
            ("ws_port", self.ws_port),
            ("bus_port", self.bus_port),
        ];
        for (i, (a, pa)) in ports.iter().enumerate() {
            for (b, pb) in &ports[i + 1..] {
                if *pa != 0 && pa == pb {
                    return Err(ConfigError::PortCollision(a, b));
                }
            }
        }
        for (name, rate) in [("image_hz", self.image_hz), ("state_hz", self.state_hz), ("sim_hz", self.sim_hz)] {
            if rate == 0 {
                return Err(ConfigError::ZeroRate(name));
            }
        }
        if self.sim_hz < self.image_hz || self.sim_hz < self.state_hz || self.sim_hz < crate::sim::SENSOR_HZ {
            return Err(ConfigError::SimTooSlow);
        }
        let mut chars = self.module_name.chars();
        let ident = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
            && chars.all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !ident {
            return Err(ConfigError::BadModuleName(self.module_name.clone()));
        }
        Ok(())
    }

    pub fn rates(&self) -> crate::sim::Rates {
        crate::sim::Rates { sim_hz: self.sim_hz, image_hz: self.image_hz, state_hz: self.state_hz }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ServiceConfig::default();
        assert_eq!((c.shell_port, c.client_port, c.ws_port, c.bus_port), (27005, 27016, 27017, 27018));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn file_overrides_defaults() {
        let mut c = ServiceConfig::default();
        c.apply_str("# comment\nshell_port = 31000\n\nshell_enabled=no\nscripts_dir = /tmp/s\n").unwrap();
        assert_eq!(c.shell_port, 31000);
        assert!(!c.shell_enabled);
        assert_eq!(c.scripts_dir, PathBuf::from("/tmp/s"));
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = ServiceConfig::default();
        assert_eq!(c.apply_str("nonsense"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(c.apply_str("colour = red"), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(c.apply_str("shell_port = 70000"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn validation_rules() {
        let c = ServiceConfig { bus_port: 27005, ..Default::default() };
        assert_eq!(c.validate(), Err(ConfigError::PortCollision("shell_port", "bus_port")));
        let c = ServiceConfig { shell_port: 0, client_port: 0, ws_port: 0, bus_port: 0, ..Default::default() };
        assert!(c.validate().is_ok());
        let c = ServiceConfig { image_hz: 0, ..Default::default() };
        assert_eq!(c.validate(), Err(ConfigError::ZeroRate("image_hz")));
        let c = ServiceConfig { sim_hz: 5, ..Default::default() };
        assert_eq!(c.validate(), Err(ConfigError::SimTooSlow));
        let c = ServiceConfig { module_name: "9lives".into(), ..Default::default() };
        assert!(c.validate().is_err());
    }
}
