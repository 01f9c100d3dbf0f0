//! Plain-text `key = value` configuration.
//!
//! Powers are given in dBm, the noise density in dBm/Hz, server frequencies
//! in Mbps and bandwidth in MHz; everything is converted to linear SI units
//! on load. Blank lines and text after `#` are ignored.
//!
//! ```text
//! num_devices = 9
//! max_tx_power_dbm = 20
//! server_frequency_mbps = 20   # per server
//! sca_max_iters = 30
//! ```

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sca::ScaSettings;
use crate::scenario::{dbm_to_watts, SystemConfig};

/// Every recognized key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "num_servers",
    "num_channels",
    "num_devices",
    "bandwidth_mhz",
    "deadline_s",
    "noise_psd_dbm_hz",
    "max_tx_power_dbm",
    "server_frequency_mbps",
    "placement_radius_km",
    "min_distance_km",
    "sca_tol",
    "sca_obj_tol",
    "sca_max_iters",
    "alt_max_iters",
    "bisection_tol_bps",
    "inner_solver_tol",
    "inner_max_iters",
    "warm_start",
    "carry_powers",
    "stop_when_feasible",
    "place_unmatched",
    "workers",
];

/// Network, solver and harness settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub solver: ScaSettings,
    /// Place capacity-pruned matching units instead of leaving them unserved.
    pub place_unmatched: bool,
    /// Worker threads for sweeps; `None` lets rayon decide.
    pub workers: Option<usize>,
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, String> {
    raw.parse()
        .map_err(|_| format!("cannot parse `{raw}` for `{key}`"))
}

fn flag(key: &str, raw: &str) -> Result<bool, String> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("`{key}` expects a boolean, got `{raw}`")),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let s = &mut self.system;
        let v = &mut self.solver;
        match key {
            "num_servers" => s.num_servers = value(key, raw)?,
            "num_channels" => s.num_channels = value(key, raw)?,
            "num_devices" => s.num_devices = value(key, raw)?,
            "bandwidth_mhz" => s.bandwidth_hz = value::<f64>(key, raw)? * 1e6,
            "deadline_s" => s.deadline_s = value(key, raw)?,
            "noise_psd_dbm_hz" => s.noise_psd_w_per_hz = dbm_to_watts(value(key, raw)?),
            "max_tx_power_dbm" => s.max_tx_power_w = dbm_to_watts(value(key, raw)?),
            "server_frequency_mbps" => s.server_frequency_bps = value::<f64>(key, raw)? * 1e6,
            "placement_radius_km" => s.placement_radius_km = value(key, raw)?,
            "min_distance_km" => s.min_distance_km = value(key, raw)?,
            "sca_tol" => v.sca_tol = value(key, raw)?,
            "sca_obj_tol" => v.sca_obj_tol = value(key, raw)?,
            "sca_max_iters" => v.sca_max_iters = value(key, raw)?,
            "alt_max_iters" => v.alt_max_iters = value(key, raw)?,
            "bisection_tol_bps" => {
                v.bisection_tol_bps = match raw {
                    "auto" => None,
                    _ => Some(value(key, raw)?),
                }
            }
            "inner_solver_tol" => v.inner_solver_tol = value(key, raw)?,
            "inner_max_iters" => v.inner_max_iters = value(key, raw)?,
            "warm_start" => v.warm_start = flag(key, raw)?,
            "carry_powers" => v.carry_powers = flag(key, raw)?,
            "stop_when_feasible" => v.stop_when_feasible = flag(key, raw)?,
            "place_unmatched" => self.place_unmatched = flag(key, raw)?,
            "workers" => {
                self.workers = match raw {
                    "auto" => None,
                    _ => Some(value(key, raw)?),
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses a whole file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            cfg.set(key.trim(), raw.trim())
                .map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override, e.g. from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override `{assignment}` is not key=value"))
        })?;
        self.set(key.trim(), raw.trim())
            .map_err(Error::InvalidConfig)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.solver.validate()?;
        if self.workers == Some(0) {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Renders the configuration in the file format; parsing the output
    /// reproduces the configuration up to float formatting.
    pub fn to_text(&self) -> String {
        let s = &self.system;
        let v = &self.solver;
        let db = |w: f64| crate::scenario::watts_to_dbm(w);
        let opt = |o: Option<String>| o.unwrap_or_else(|| "auto".into());
        let lines = [
            ("num_servers", s.num_servers.to_string()),
            ("num_channels", s.num_channels.to_string()),
            ("num_devices", s.num_devices.to_string()),
            ("bandwidth_mhz", (s.bandwidth_hz / 1e6).to_string()),
            ("deadline_s", s.deadline_s.to_string()),
            ("noise_psd_dbm_hz", db(s.noise_psd_w_per_hz).to_string()),
            ("max_tx_power_dbm", db(s.max_tx_power_w).to_string()),
            (
                "server_frequency_mbps",
                (s.server_frequency_bps / 1e6).to_string(),
            ),
            ("placement_radius_km", s.placement_radius_km.to_string()),
            ("min_distance_km", s.min_distance_km.to_string()),
            ("sca_tol", v.sca_tol.to_string()),
            ("sca_obj_tol", v.sca_obj_tol.to_string()),
            ("sca_max_iters", v.sca_max_iters.to_string()),
            ("alt_max_iters", v.alt_max_iters.to_string()),
            (
                "bisection_tol_bps",
                opt(v.bisection_tol_bps.map(|x| x.to_string())),
            ),
            ("inner_solver_tol", v.inner_solver_tol.to_string()),
            ("inner_max_iters", v.inner_max_iters.to_string()),
            ("warm_start", v.warm_start.to_string()),
            ("carry_powers", v.carry_powers.to_string()),
            ("stop_when_feasible", v.stop_when_feasible.to_string()),
            ("place_unmatched", self.place_unmatched.to_string()),
            ("workers", opt(self.workers.map(|x| x.to_string()))),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
