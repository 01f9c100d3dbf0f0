//! Allocation and order bookkeeping, SIC rates and the closed-form schedule.
//!
//! A device `k` splits its message into two sub-messages `s_{k,1}` and
//! `s_{k,2}` with powers `p_{k,1} + p_{k,2} <= P_k`. All devices that share a
//! channel on the same server form one SIC group; the server decodes the
//! group's sub-messages in a fixed order, and a sub-message only sees
//! interference from the sub-messages decoded after it.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Scenario;

/// Which half of a device's split message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    First,
    Second,
}

impl Part {
    pub const BOTH: [Part; 2] = [Part::First, Part::Second];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Part::First => 0,
            Part::Second => 1,
        }
    }
}

/// Sub-message `s_{device, part}`. Orders as `(device, part)`, which is the
/// tie-break used by every ordering rule in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubMessage {
    pub device: usize,
    pub part: Part,
}

impl SubMessage {
    pub fn new(device: usize, part: Part) -> Self {
        Self { device, part }
    }
}

/// SIC decoding order of one group, first-decoded first. The rank of a
/// sub-message is its 1-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodingOrder {
    sequence: Vec<SubMessage>,
}

impl DecodingOrder {
    pub fn new(sequence: Vec<SubMessage>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for m in &sequence {
            if !seen.insert(*m) {
                return Err(Error::Domain(format!("sub-message {m:?} appears twice")));
            }
        }
        Ok(Self { sequence })
    }

    pub fn sequence(&self) -> &[SubMessage] {
        &self.sequence
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn position(&self, msg: SubMessage) -> Option<usize> {
        self.sequence.iter().position(|m| *m == msg)
    }

    /// 1-based decoding rank `π_{k,i}`.
    pub fn rank(&self, msg: SubMessage) -> Option<usize> {
        self.position(msg).map(|p| p + 1)
    }

    /// Sub-messages decoded after `msg`, i.e. the residual interference seen
    /// when `msg` is decoded.
    pub fn interference_set(&self, msg: SubMessage) -> Result<&[SubMessage]> {
        let pos = self
            .position(msg)
            .ok_or_else(|| Error::Domain(format!("{msg:?} is not in this group")))?;
        Ok(&self.sequence[pos + 1..])
    }

    pub fn devices(&self) -> BTreeSet<usize> {
        self.sequence.iter().map(|m| m.device).collect()
    }

    /// Checks that the order covers exactly `parts` sub-messages of every
    /// device in `group` and nothing else.
    pub fn validate_for(&self, group: &[usize], parts: usize) -> Result<()> {
        let expected: BTreeSet<SubMessage> = group
            .iter()
            .flat_map(|&k| {
                Part::BOTH[..parts]
                    .iter()
                    .map(move |&p| SubMessage::new(k, p))
            })
            .collect();
        let got: BTreeSet<SubMessage> = self.sequence.iter().copied().collect();
        if expected != got || self.sequence.len() != expected.len() {
            return Err(Error::Domain(format!(
                "order {:?} is not a permutation of the group's sub-messages",
                self.sequence
            )));
        }
        Ok(())
    }
}

/// Decoding order of the group on `(server, channel)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOrder {
    pub server: usize,
    pub channel: usize,
    pub order: DecodingOrder,
}

/// Sub-message powers `p_{k,i}` in W.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    p: Vec<[f64; 2]>,
}

impl PowerAllocation {
    pub fn zeros(num_devices: usize) -> Self {
        Self {
            p: vec![[0.0; 2]; num_devices],
        }
    }

    /// Every device splits its budget evenly.
    pub fn half_split(scenario: &Scenario) -> Self {
        Self {
            p: (0..scenario.num_devices())
                .map(|k| [scenario.max_power(k) / 2.0; 2])
                .collect(),
        }
    }

    pub fn from_pairs(p: Vec<[f64; 2]>) -> Self {
        Self { p }
    }

    pub fn num_devices(&self) -> usize {
        self.p.len()
    }

    #[inline]
    pub fn get(&self, msg: SubMessage) -> f64 {
        self.p[msg.device][msg.part.index()]
    }

    #[inline]
    pub fn set(&mut self, msg: SubMessage, value: f64) {
        self.p[msg.device][msg.part.index()] = value;
    }

    pub fn device(&self, k: usize) -> [f64; 2] {
        self.p[k]
    }

    pub fn total(&self, k: usize) -> f64 {
        self.p[k][0] + self.p[k][1]
    }

    /// Non-negativity and `p_{k,1} + p_{k,2} <= P_k` with a relative slack.
    pub fn validate(&self, scenario: &Scenario) -> Result<()> {
        if self.p.len() != scenario.num_devices() {
            return Err(Error::Domain("power table has the wrong length".into()));
        }
        for (k, pk) in self.p.iter().enumerate() {
            if pk.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Domain(format!(
                    "device {k} has invalid power {pk:?}"
                )));
            }
            let budget = scenario.max_power(k);
            if pk[0] + pk[1] > budget * (1.0 + 1e-9) {
                return Err(Error::Domain(format!(
                    "device {k} exceeds its budget: {} > {budget}",
                    pk[0] + pk[1]
                )));
            }
        }
        Ok(())
    }
}

/// Pure predicate for the structural allocation constraints on binary
/// indicator tables `alpha[m][k]` and `beta[n][k]`: at most one server and at
/// most one channel per device, and all devices on a channel share a server.
pub fn indicators_valid(alpha: &[Vec<bool>], beta: &[Vec<bool>]) -> bool {
    let k_count = alpha.first().or(beta.first()).map_or(0, Vec::len);
    if alpha.iter().chain(beta).any(|row| row.len() != k_count) {
        return false;
    }
    for k in 0..k_count {
        if alpha.iter().filter(|row| row[k]).count() > 1 {
            return false;
        }
        if beta.iter().filter(|row| row[k]).count() > 1 {
            return false;
        }
    }
    for row in beta {
        for k in 0..k_count {
            for kp in 0..k_count {
                if k == kp || !row[k] || !row[kp] {
                    continue;
                }
                for (m, am) in alpha.iter().enumerate() {
                    for (mp, amp) in alpha.iter().enumerate() {
                        if m != mp && am[k] && amp[kp] {
                            return false;
                        }
                    }
                }
            }
        }
    }
    true
}

/// MEC-server assignment `α` and channel assignment `β`, stored per device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    num_servers: usize,
    num_channels: usize,
    server_of: Vec<Option<usize>>,
    channel_of: Vec<Option<usize>>,
}

/// Devices sharing one `(server, channel)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub server: usize,
    pub channel: usize,
    pub devices: Vec<usize>,
}

impl Allocation {
    /// Every device unassigned.
    pub fn empty(num_servers: usize, num_channels: usize, num_devices: usize) -> Self {
        Self {
            num_servers,
            num_channels,
            server_of: vec![None; num_devices],
            channel_of: vec![None; num_devices],
        }
    }

    pub fn from_assignment(
        num_servers: usize,
        num_channels: usize,
        server_of: Vec<Option<usize>>,
        channel_of: Vec<Option<usize>>,
    ) -> Result<Self> {
        if server_of.len() != channel_of.len() {
            return Err(Error::InvalidAllocation("length mismatch".into()));
        }
        let a = Self {
            num_servers,
            num_channels,
            server_of,
            channel_of,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn from_indicators(alpha: &[Vec<bool>], beta: &[Vec<bool>]) -> Result<Self> {
        if !indicators_valid(alpha, beta) {
            return Err(Error::InvalidAllocation(
                "indicator tables violate the assignment constraints".into(),
            ));
        }
        let k_count = alpha.first().or(beta.first()).map_or(0, Vec::len);
        let server_of = (0..k_count)
            .map(|k| alpha.iter().position(|row| row[k]))
            .collect();
        let channel_of = (0..k_count)
            .map(|k| beta.iter().position(|row| row[k]))
            .collect();
        Ok(Self {
            num_servers: alpha.len(),
            num_channels: beta.len(),
            server_of,
            channel_of,
        })
    }

    pub fn num_servers(&self) -> usize {
        self.num_servers
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn num_devices(&self) -> usize {
        self.server_of.len()
    }

    pub fn server_of(&self, k: usize) -> Option<usize> {
        self.server_of[k]
    }

    pub fn channel_of(&self, k: usize) -> Option<usize> {
        self.channel_of[k]
    }

    pub fn assign(&mut self, k: usize, server: Option<usize>, channel: Option<usize>) {
        self.server_of[k] = server;
        self.channel_of[k] = channel;
    }

    pub fn alpha(&self, m: usize, k: usize) -> bool {
        self.server_of[k] == Some(m)
    }

    pub fn beta(&self, n: usize, k: usize) -> bool {
        self.channel_of[k] == Some(n)
    }

    pub fn alpha_table(&self) -> Vec<Vec<bool>> {
        (0..self.num_servers)
            .map(|m| (0..self.num_devices()).map(|k| self.alpha(m, k)).collect())
            .collect()
    }

    pub fn beta_table(&self) -> Vec<Vec<bool>> {
        (0..self.num_channels)
            .map(|n| (0..self.num_devices()).map(|k| self.beta(n, k)).collect())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..self.num_devices() {
            if self.server_of[k].is_some_and(|m| m >= self.num_servers) {
                return Err(Error::InvalidAllocation(format!(
                    "device {k}: server out of range"
                )));
            }
            if self.channel_of[k].is_some_and(|n| n >= self.num_channels) {
                return Err(Error::InvalidAllocation(format!(
                    "device {k}: channel out of range"
                )));
            }
        }
        if !indicators_valid(&self.alpha_table(), &self.beta_table()) {
            return Err(Error::InvalidAllocation(
                "a channel is shared by devices on different servers".into(),
            ));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// Whether every device has both a server and a channel.
    pub fn is_complete(&self) -> bool {
        self.server_of.iter().all(Option::is_some) && self.channel_of.iter().all(Option::is_some)
    }

    /// Devices with both a server and a channel.
    pub fn is_served(&self, k: usize) -> bool {
        self.server_of[k].is_some() && self.channel_of[k].is_some()
    }

    /// Non-empty SIC groups, sorted by `(server, channel)`, devices ascending.
    pub fn groups(&self) -> Vec<Group> {
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for k in 0..self.num_devices() {
            if let (Some(m), Some(n)) = (self.server_of[k], self.channel_of[k]) {
                map.entry((m, n)).or_default().push(k);
            }
        }
        map.into_iter()
            .map(|((server, channel), devices)| Group {
                server,
                channel,
                devices,
            })
            .collect()
    }

    /// Served devices of `server`, ascending.
    pub fn server_devices(&self, server: usize) -> Vec<usize> {
        (0..self.num_devices())
            .filter(|&k| self.server_of[k] == Some(server) && self.channel_of[k].is_some())
            .collect()
    }

    /// Devices on `channel` regardless of server, ascending.
    pub fn channel_devices(&self, channel: usize) -> Vec<usize> {
        (0..self.num_devices())
            .filter(|&k| self.channel_of[k] == Some(channel))
            .collect()
    }
}

/// `B log2(1 + signal / (σ²B + interference))`, via `ln_1p` for accuracy at
/// low SINR.
#[inline]
pub fn shannon_rate(bandwidth: f64, signal: f64, noise_plus_interference: f64) -> f64 {
    if signal <= 0.0 {
        return 0.0;
    }
    bandwidth * (signal / noise_plus_interference).ln_1p() / LN_2
}

/// Rate of one sub-message of the group on `(server, channel)`.
pub fn submessage_rate(
    scenario: &Scenario,
    server: usize,
    channel: usize,
    order: &DecodingOrder,
    powers: &PowerAllocation,
    msg: SubMessage,
) -> Result<f64> {
    let later = order.interference_set(msg)?;
    let interference: f64 = later
        .iter()
        .map(|m| scenario.gain(server, channel, m.device) * powers.get(*m))
        .sum();
    let cfg = scenario.config();
    let signal = scenario.gain(server, channel, msg.device) * powers.get(msg);
    Ok(shannon_rate(
        cfg.bandwidth_hz,
        signal,
        cfg.noise_power_w() + interference,
    ))
}

/// Rates of every sub-message in `order`, aligned with `order.sequence()`.
/// Runs a suffix sum, so the whole group costs `O(len)`.
pub fn group_rates(
    scenario: &Scenario,
    server: usize,
    channel: usize,
    order: &DecodingOrder,
    powers: &PowerAllocation,
) -> Vec<f64> {
    let cfg = scenario.config();
    let noise = cfg.noise_power_w();
    let mut out = vec![0.0; order.len()];
    let mut interference = 0.0;
    for (i, m) in order.sequence().iter().enumerate().rev() {
        let rx = scenario.gain(server, channel, m.device) * powers.get(*m);
        out[i] = shannon_rate(cfg.bandwidth_hz, rx, noise + interference);
        interference += rx;
    }
    out
}

/// Computation offloading rate `(t_o / T) · link_rate`.
pub fn offload_rate(t_offload: f64, deadline: f64, link_rate: f64) -> f64 {
    t_offload / deadline * link_rate
}

/// Offload/compute split of one server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSchedule {
    pub t_offload: f64,
    pub t_compute: f64,
    /// Computing frequency per device, aligned with the input link rates.
    pub frequency: Vec<f64>,
}

/// Closed-form schedule of one server given its devices' link rates:
/// `t_o = T F / (F + ΣR)`, `t_c = T - t_o`, `f_k = F R_k / ΣR`. When every
/// rate is zero nothing is offloaded and no frequency is allocated.
pub fn schedule_from_rates(frequency: f64, link_rates: &[f64], deadline: f64) -> ServerSchedule {
    let total: f64 = link_rates.iter().sum();
    if total <= 0.0 {
        return ServerSchedule {
            t_offload: deadline,
            t_compute: 0.0,
            frequency: vec![0.0; link_rates.len()],
        };
    }
    let t_offload = deadline * frequency / (frequency + total);
    ServerSchedule {
        t_offload,
        t_compute: deadline - t_offload,
        frequency: link_rates.iter().map(|r| frequency * r / total).collect(),
    }
}

/// Minimum computation offloading rate.
pub fn mcor(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::Domain("MCOR of an empty rate vector".into()));
    }
    Ok(rates.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Jain's fairness index `(Σr)² / (K Σr²)`; 1 when every rate is zero.
pub fn jain_index(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::Domain("Jain index of an empty rate vector".into()));
    }
    let sum: f64 = rates.iter().sum();
    let sq: f64 = rates.iter().map(|r| r * r).sum();
    if sq == 0.0 {
        return Ok(1.0);
    }
    Ok(sum * sum / (rates.len() as f64 * sq))
}

/// Per-server times and per-device computing frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_offload: Vec<f64>,
    pub t_compute: Vec<f64>,
    pub frequency: Vec<f64>,
}

/// A complete operating point of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub allocation: Allocation,
    pub orders: Vec<GroupOrder>,
    pub powers: PowerAllocation,
    pub schedule: Schedule,
    /// Link rate `Σ_i r_{m,n,k,i}` of each device (bits/s during offloading).
    pub link_rates: Vec<f64>,
    /// Computation offloading rate `r_k` of each device.
    pub rates: Vec<f64>,
    pub mcor: f64,
    /// TDMA only: per-device offloading slot length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tdma_slots: Option<Vec<f64>>,
}

impl Solution {
    /// Evaluates rates and the closed-form schedule for a given allocation,
    /// decoding orders and powers. Each served device must appear in the
    /// order of its group; sub-messages absent from an order must carry zero
    /// power.
    pub fn evaluate(
        scenario: &Scenario,
        allocation: &Allocation,
        orders: Vec<GroupOrder>,
        powers: PowerAllocation,
    ) -> Result<Self> {
        allocation.validate()?;
        powers.validate(scenario)?;
        let k_count = scenario.num_devices();
        let mut link_rates = vec![0.0; k_count];
        let mut covered = vec![false; k_count];
        for go in &orders {
            let group: BTreeSet<usize> = allocation
                .server_devices(go.server)
                .into_iter()
                .filter(|&k| allocation.channel_of(k) == Some(go.channel))
                .collect();
            if go.order.devices() != group {
                return Err(Error::Domain(format!(
                    "order for ({}, {}) does not match its group",
                    go.server, go.channel
                )));
            }
            let rates = group_rates(scenario, go.server, go.channel, &go.order, &powers);
            for (msg, r) in go.order.sequence().iter().zip(rates) {
                link_rates[msg.device] += r;
            }
            for &k in &group {
                covered[k] = true;
            }
            for &k in &group {
                for p in Part::BOTH {
                    let msg = SubMessage::new(k, p);
                    if go.order.position(msg).is_none() && powers.get(msg) > 0.0 {
                        return Err(Error::Domain(format!(
                            "{msg:?} has power but is not decoded"
                        )));
                    }
                }
            }
        }
        for k in 0..k_count {
            if allocation.is_served(k) && !covered[k] {
                return Err(Error::Domain(format!("device {k} has no decoding order")));
            }
        }

        let cfg = scenario.config();
        let m_count = scenario.num_servers();
        let mut schedule = Schedule {
            t_offload: vec![cfg.deadline_s; m_count],
            t_compute: vec![0.0; m_count],
            frequency: vec![0.0; k_count],
        };
        let mut rates = vec![0.0; k_count];
        for m in 0..m_count {
            let devs = allocation.server_devices(m);
            let r: Vec<f64> = devs.iter().map(|&k| link_rates[k]).collect();
            let s = schedule_from_rates(scenario.frequency(m), &r, cfg.deadline_s);
            for (&k, f) in devs.iter().zip(&s.frequency) {
                schedule.frequency[k] = *f;
                rates[k] = offload_rate(s.t_offload, cfg.deadline_s, link_rates[k]);
            }
            schedule.t_offload[m] = s.t_offload;
            schedule.t_compute[m] = s.t_compute;
        }
        let mcor = mcor(&rates)?;
        Ok(Self {
            allocation: allocation.clone(),
            orders,
            powers,
            schedule,
            link_rates,
            rates,
            mcor,
            tdma_slots: None,
        })
    }

    /// All-zero operating point for an allocation (nothing transmitted).
    pub fn idle(scenario: &Scenario, allocation: &Allocation) -> Self {
        let k_count = scenario.num_devices();
        let m_count = scenario.num_servers();
        Self {
            allocation: allocation.clone(),
            orders: Vec::new(),
            powers: PowerAllocation::zeros(k_count),
            schedule: Schedule {
                t_offload: vec![scenario.config().deadline_s; m_count],
                t_compute: vec![0.0; m_count],
                frequency: vec![0.0; k_count],
            },
            link_rates: vec![0.0; k_count],
            rates: vec![0.0; k_count],
            mcor: 0.0,
            tdma_slots: None,
        }
    }

    pub fn jain(&self) -> f64 {
        jain_index(&self.rates).unwrap_or(1.0)
    }

    /// Re-validates every constraint of the joint problem: allocation
    /// structure, power budgets, server capacity, deadline, and the
    /// computing-time equality `r_k T / f_k = t_c` for every device with
    /// traffic. Tolerances are relative, `1e-9`.
    pub fn check(&self, scenario: &Scenario) -> Result<()> {
        let tol = 1e-9;
        let cfg = scenario.config();
        let t = cfg.deadline_s;
        self.allocation.validate()?;
        self.powers.validate(scenario)?;
        let expected = mcor(&self.rates)?;
        if self.mcor != expected {
            return Err(Error::Domain(format!(
                "mcor {} differs from min rate {expected}",
                self.mcor
            )));
        }
        for m in 0..scenario.num_servers() {
            let to = self.schedule.t_offload[m];
            let tc = self.schedule.t_compute[m];
            if to < 0.0 || tc < 0.0 {
                return Err(Error::Domain(format!("server {m}: negative time")));
            }
            if (to + tc - t).abs() > tol * t {
                return Err(Error::Domain(format!(
                    "server {m}: t_o + t_c = {} != T",
                    to + tc
                )));
            }
            let devs = self.allocation.server_devices(m);
            let fsum: f64 = devs.iter().map(|&k| self.schedule.frequency[k]).sum();
            let cap = scenario.frequency(m);
            if fsum > cap * (1.0 + tol) {
                return Err(Error::Domain(format!(
                    "server {m}: Σf = {fsum} > F = {cap}"
                )));
            }
            for &k in &devs {
                let r = self.rates[k];
                let f = self.schedule.frequency[k];
                if r > 0.0 {
                    if f <= 0.0 {
                        return Err(Error::Domain(format!("device {k}: rate without frequency")));
                    }
                    let need = r * t / f;
                    if (need - tc).abs() > tol * t {
                        return Err(Error::Domain(format!(
                            "device {k}: r T / f = {need} but t_c = {tc}"
                        )));
                    }
                }
            }
        }
        for k in 0..scenario.num_devices() {
            if !self.allocation.is_served(k) && self.rates[k] != 0.0 {
                return Err(Error::Domain(format!("unserved device {k} has a rate")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
