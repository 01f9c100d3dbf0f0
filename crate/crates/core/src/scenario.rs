//! Random network instances: node placement, path loss and Rayleigh fading.
//!
//! Servers and devices are dropped uniformly (by area) in a disk around the
//! origin. The small-scale gain on every (server, channel, device) link is an
//! independent exponential draw whose mean is the distance-dependent path
//! loss `128.1 + 37.6 log10(d)` dB with `d` in km.
//!
//! Every random quantity is drawn from its own counter-derived stream, so a
//! server's position does not depend on how many devices exist and the gain
//! of link `(m, n, k)` does not depend on `M`, `N` or `K`. Sweeps over those
//! sizes therefore share their common sub-topology.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts a power level in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) / 1000.0
}

/// Converts watts to dBm.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * (watts * 1000.0).log10()
}

/// Static parameters of the network. All quantities are linear SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub num_servers: usize,
    pub num_channels: usize,
    pub num_devices: usize,
    /// Per-channel bandwidth `B` in Hz.
    pub bandwidth_hz: f64,
    /// Task deadline `T` in seconds.
    pub deadline_s: f64,
    /// Noise power spectral density `σ²` in W/Hz.
    pub noise_psd_w_per_hz: f64,
    /// Per-device transmit power budget `P_k` in W.
    pub max_tx_power_w: f64,
    /// Per-server computing frequency `F_m` in offloaded bits per second.
    pub server_frequency_bps: f64,
    pub placement_radius_km: f64,
    /// Distances below this are clamped before evaluating path loss.
    pub min_distance_km: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            num_servers: 3,
            num_channels: 3,
            num_devices: 9,
            bandwidth_hz: 1e6,
            deadline_s: 1.0,
            noise_psd_w_per_hz: dbm_to_watts(-174.0),
            max_tx_power_w: dbm_to_watts(20.0),
            server_frequency_bps: 20e6,
            placement_radius_km: 0.5,
            min_distance_km: 0.01,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_servers", self.num_servers),
            ("num_channels", self.num_channels),
            ("num_devices", self.num_devices),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        let reals = [
            ("bandwidth_hz", self.bandwidth_hz),
            ("deadline_s", self.deadline_s),
            ("noise_psd_w_per_hz", self.noise_psd_w_per_hz),
            ("max_tx_power_w", self.max_tx_power_w),
            ("server_frequency_bps", self.server_frequency_bps),
            ("placement_radius_km", self.placement_radius_km),
            ("min_distance_km", self.min_distance_km),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Noise power `σ²B` over one channel, in W.
    pub fn noise_power_w(&self) -> f64 {
        self.noise_psd_w_per_hz * self.bandwidth_hz
    }
}

/// Mean large-scale gain at `distance_km`, from the 3GPP macro path-loss
/// model `128.1 + 37.6 log10(d)` dB.
pub fn mean_channel_gain(distance_km: f64) -> Result<f64> {
    if !(distance_km > 0.0 && distance_km.is_finite()) {
        return Err(Error::Domain(format!(
            "distance must be positive, got {distance_km}"
        )));
    }
    let loss_db = 128.1 + 37.6 * distance_km.log10();
    Ok(10f64.powf(-loss_db / 10.0))
}

/// Draws one Rayleigh-faded power gain with the given mean.
pub fn sample_faded_gain<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e * mean
}

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE5_E4B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from a base seed and a path of counters.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &c| splitmix(acc ^ splitmix(c)))
}

const STREAM_SERVERS: u64 = 1;
const STREAM_DEVICES: u64 = 2;
const STREAM_GAINS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

fn sample_in_disk<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Point {
    let r = radius * rng.gen::<f64>().sqrt();
    let theta = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    Point {
        x: r * theta.cos(),
        y: r * theta.sin(),
    }
}

/// A network instance: configuration plus the full gain table `h[m][n][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    config: SystemConfig,
    seed: u64,
    server_positions: Vec<Point>,
    device_positions: Vec<Point>,
    gains: Vec<f64>,
}

impl Scenario {
    /// Builds a scenario from an explicit gain table laid out as
    /// `gains[(m * N + n) * K + k]`. Positions are left at the origin.
    pub fn from_gains(config: SystemConfig, gains: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.num_servers * config.num_channels * config.num_devices;
        if gains.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "gain table has {} entries, expected {expected}",
                gains.len()
            )));
        }
        if let Some(g) = gains.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(Error::InvalidConfig(format!("invalid gain {g}")));
        }
        Ok(Self {
            server_positions: vec![Point { x: 0.0, y: 0.0 }; config.num_servers],
            device_positions: vec![Point { x: 0.0, y: 0.0 }; config.num_devices],
            config,
            seed: 0,
            gains,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_servers(&self) -> usize {
        self.config.num_servers
    }

    pub fn num_channels(&self) -> usize {
        self.config.num_channels
    }

    pub fn num_devices(&self) -> usize {
        self.config.num_devices
    }

    pub fn server_positions(&self) -> &[Point] {
        &self.server_positions
    }

    pub fn device_positions(&self) -> &[Point] {
        &self.device_positions
    }

    /// Linear power gain `h_{m,n,k}`.
    #[inline]
    pub fn gain(&self, server: usize, channel: usize, device: usize) -> f64 {
        let c = &self.config;
        self.gains[(server * c.num_channels + channel) * c.num_devices + device]
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// Transmit power budget of `device` in W.
    #[inline]
    pub fn max_power(&self, _device: usize) -> f64 {
        self.config.max_tx_power_w
    }

    /// Computing frequency of `server` in bits/s.
    #[inline]
    pub fn frequency(&self, _server: usize) -> f64 {
        self.config.server_frequency_bps
    }

    /// Copy of this scenario with a different configuration but the same
    /// gains. Only parameters that do not change the table shape may differ.
    pub fn with_config(&self, config: SystemConfig) -> Result<Self> {
        config.validate()?;
        let c = &self.config;
        if (config.num_servers, config.num_channels, config.num_devices)
            != (c.num_servers, c.num_channels, c.num_devices)
        {
            return Err(Error::InvalidConfig(
                "with_config cannot change the network dimensions".into(),
            ));
        }
        Ok(Self {
            config,
            ..self.clone()
        })
    }
}

/// Generates a random instance. The output is a pure function of
/// `(config, seed)`.
pub fn generate_scenario(config: &SystemConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let mut server_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SERVERS]));
    let server_positions: Vec<Point> = (0..config.num_servers)
        .map(|_| sample_in_disk(&mut server_rng, config.placement_radius_km))
        .collect();
    let mut device_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_DEVICES]));
    let device_positions: Vec<Point> = (0..config.num_devices)
        .map(|_| sample_in_disk(&mut device_rng, config.placement_radius_km))
        .collect();

    let mut gains =
        Vec::with_capacity(config.num_servers * config.num_channels * config.num_devices);
    for (m, sp) in server_positions.iter().enumerate() {
        for n in 0..config.num_channels {
            for (k, dp) in device_positions.iter().enumerate() {
                let d = sp.distance(dp).max(config.min_distance_km);
                let mean = mean_channel_gain(d)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed,
                    &[STREAM_GAINS, m as u64, n as u64, k as u64],
                ));
                gains.push(sample_faded_gain(&mut rng, mean));
            }
        }
    }

    Ok(Scenario {
        config: config.clone(),
        seed,
        server_positions,
        device_positions,
        gains,
    })
}
