//! Channel and MEC-server allocation by matching.
//!
//! Channels are matched to devices first (Gale-Shapley initialization, then
//! pairwise swap refinement); the resulting `(channel, group)` units are then
//! matched to servers by a capacity-aware Gale-Shapley pass. Preferences are
//! offloading rates evaluated against the powers and offloading times of the
//! preceding optimization stage.

use std::cmp::Ordering;
use std::f64::consts::LN_2;

use serde::Serialize;

use crate::error::Result;
use crate::rates::{shannon_rate, Allocation, PowerAllocation, Solution};
use crate::sca::SplitMode;
use crate::scenario::Scenario;

/// How a set of per-device preference values is folded into the utility of a
/// channel or a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PreferenceKind {
    /// Worst member (MCOR).
    MaxMin,
    /// Sum over members.
    SumRate,
}

/// A preference value with its candidate index. Larger value wins; equal
/// values prefer the lower index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferenceValue {
    pub value: f64,
    pub candidate: usize,
}

impl PreferenceValue {
    pub fn new(value: f64, candidate: usize) -> Self {
        Self { value, candidate }
    }

    /// `Greater` means `self` is preferred.
    pub fn compare(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then(other.candidate.cmp(&self.candidate))
    }
}

fn best(values: impl IntoIterator<Item = PreferenceValue>) -> Option<PreferenceValue> {
    values.into_iter().max_by(|a, b| a.compare(b))
}

/// Stage of a [`MatchEvent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStage {
    Channel,
    Swap,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchAction {
    Accept,
    Reject,
    Swap,
    Prune,
}

/// One row of the matching trace. Channel stage: channel proposes to device.
/// Swap stage: the two exchanged devices. Server stage: server proposes to the
/// unit identified by its channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchEvent {
    pub stage: MatchStage,
    pub round: usize,
    pub proposer: usize,
    pub proposee: usize,
    pub action: MatchAction,
}

/// Result of [`MatchingState::allocate`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub allocation: Allocation,
    pub swaps: usize,
    pub swap_cap_hit: bool,
    /// Channels whose unit no server could host.
    pub unmatched_units: Vec<usize>,
}

/// Matching state: evaluation inputs from the last optimization stage plus
/// the channel groups `K_n` and the unit-to-server map.
#[derive(Debug, Clone)]
pub struct MatchingState<'a> {
    scenario: &'a Scenario,
    powers: Vec<[f64; 2]>,
    t_offload: Vec<f64>,
    frequency: Vec<f64>,
    parts: usize,
    tdma: bool,
    kind: PreferenceKind,
    groups: Vec<Vec<usize>>,
    unit_server: Vec<Option<usize>>,
    /// Place capacity-pruned units at the server with the most residual
    /// capacity instead of leaving them unserved.
    pub place_unmatched: bool,
    pub trace: Option<Vec<MatchEvent>>,
}

impl<'a> MatchingState<'a> {
    /// State built from the solution of the preceding stage.
    pub fn from_solution(
        scenario: &'a Scenario,
        solution: &Solution,
        mode: SplitMode,
        kind: PreferenceKind,
    ) -> Self {
        Self::new(
            scenario,
            &solution.powers,
            solution.schedule.t_offload.clone(),
            solution.schedule.frequency.clone(),
            mode,
            kind,
        )
    }

    /// Devices without power are evaluated at `P_k / 2` per sub-message
    /// (`P_k / 2` on the single message in NOMA mode).
    pub fn new(
        scenario: &'a Scenario,
        powers: &PowerAllocation,
        t_offload: Vec<f64>,
        frequency: Vec<f64>,
        mode: SplitMode,
        kind: PreferenceKind,
    ) -> Self {
        let parts = mode.parts();
        let powers = (0..scenario.num_devices())
            .map(|k| {
                let p = powers.device(k);
                if p[0] + p[1] > 0.0 {
                    if parts == 1 {
                        [p[0], 0.0]
                    } else {
                        p
                    }
                } else {
                    let half = scenario.max_power(k) / 2.0;
                    if parts == 1 {
                        [half, 0.0]
                    } else {
                        [half, half]
                    }
                }
            })
            .collect();
        Self {
            scenario,
            powers,
            t_offload,
            frequency,
            parts,
            tdma: false,
            kind,
            groups: vec![Vec::new(); scenario.num_channels()],
            unit_server: vec![None; scenario.num_channels()],
            place_unmatched: false,
            trace: None,
        }
    }

    /// Evaluates preferences under TDMA: every device transmits alone at
    /// full power, and a group placed on server `m` gets the common rate
    /// `θ_m = min(F_m / Σ_k (F_m / R_k + 1), 1 / Σ_k 1 / R_k)` of its
    /// minimal-slot schedule.
    pub fn with_tdma_rates(mut self) -> Self {
        self.tdma = true;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn kind(&self) -> PreferenceKind {
        self.kind
    }

    /// Current channel groups `K_n`, each sorted by device index.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn channel_of(&self, k: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&k))
    }

    /// Replaces the channel groups. Devices may appear in at most one group.
    pub fn set_groups(&mut self, groups: Vec<Vec<usize>>) {
        assert_eq!(groups.len(), self.scenario.num_channels());
        self.groups = groups.into_iter().map(sorted).collect();
        debug_assert!(self.groups_disjoint());
    }

    fn groups_disjoint(&self) -> bool {
        let mut seen = vec![false; self.scenario.num_devices()];
        for &k in self.groups.iter().flatten() {
            if seen[k] {
                return false;
            }
            seen[k] = true;
        }
        true
    }

    fn log(
        &mut self,
        stage: MatchStage,
        round: usize,
        proposer: usize,
        proposee: usize,
        action: MatchAction,
    ) {
        if let Some(t) = self.trace.as_mut() {
            t.push(MatchEvent {
                stage,
                round,
                proposer,
                proposee,
                action,
            });
        }
    }

    /// SIC link rates of `group` on `(server, channel)`, aligned with
    /// `group`. Order: first parts, then second parts, each by descending
    /// gain with index tie-break.
    fn link_rates(&self, server: usize, channel: usize, group: &[usize]) -> Vec<f64> {
        let cfg = self.scenario.config();
        let noise = cfg.noise_power_w();
        let mut idx: Vec<usize> = (0..group.len()).collect();
        let gain = |i: usize| self.scenario.gain(server, channel, group[i]);
        idx.sort_by(|&a, &b| gain(b).total_cmp(&gain(a)).then(group[a].cmp(&group[b])));
        let mut out = vec![0.0; group.len()];
        let mut interference = 0.0;
        for part in (0..self.parts).rev() {
            for &i in idx.iter().rev() {
                let rx = gain(i) * self.powers[group[i]][part];
                if rx > 0.0 {
                    out[i] += cfg.bandwidth_hz * (rx / (noise + interference)).ln_1p() / LN_2;
                }
                interference += rx;
            }
        }
        out
    }

    /// TDMA common rate of `group` alone on `(server, channel)`.
    fn tdma_rate(&self, server: usize, channel: usize, group: &[usize]) -> f64 {
        let cfg = self.scenario.config();
        let f = self.scenario.frequency(server);
        let (mut inv, mut load) = (0.0, 0.0);
        for &k in group {
            let r = shannon_rate(
                cfg.bandwidth_hz,
                self.scenario.gain(server, channel, k) * self.scenario.max_power(k),
                cfg.noise_power_w(),
            );
            if r <= 0.0 {
                return 0.0;
            }
            inv += 1.0 / r;
            load += f / r + 1.0;
        }
        (f / load).min(1.0 / inv)
    }

    /// Rates of the members of `group` if it were placed on `server`.
    fn offload_rates(&self, server: usize, channel: usize, group: &[usize]) -> Vec<f64> {
        if self.tdma {
            return vec![self.tdma_rate(server, channel, group); group.len()];
        }
        let scale = self.t_offload[server] / self.scenario.config().deadline_s;
        self.link_rates(server, channel, group)
            .into_iter()
            .map(|r| scale * r)
            .collect()
    }

    /// Per-member preference `min_m (t_o^m / T) Σ_i r_{m,n,k,i}` of every
    /// device of `group` on channel `n`.
    fn member_prefs(&self, channel: usize, group: &[usize]) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; group.len()];
        for m in 0..self.scenario.num_servers() {
            for (o, r) in out.iter_mut().zip(self.offload_rates(m, channel, group)) {
                *o = o.min(r);
            }
        }
        out
    }

    fn fold(&self, prefs: &[f64]) -> f64 {
        match self.kind {
            PreferenceKind::MaxMin => prefs.iter().copied().fold(f64::INFINITY, f64::min),
            PreferenceKind::SumRate => prefs.iter().sum(),
        }
    }

    /// Preference of device `k` for channel `n` when it joins `group`
    /// (`k ∉ group`): its offloading rate minimized over all servers.
    pub fn device_channel_pref(&self, k: usize, channel: usize, group: &[usize]) -> f64 {
        debug_assert!(!group.contains(&k));
        let joined = with_member(group, k);
        let pos = joined.binary_search(&k).expect("inserted");
        self.member_prefs(channel, &joined)[pos]
    }

    /// Utility of channel `n` holding `group`: the worst member preference
    /// (or the sum, for sum-rate preferences). Zero for an empty group.
    pub fn channel_utility(&self, channel: usize, group: &[usize]) -> f64 {
        if group.is_empty() {
            return 0.0;
        }
        self.fold(&self.member_prefs(channel, group))
    }

    /// Score a channel gives device `k` when proposing: the device's own
    /// preference after joining, or the channel's resulting sum rate.
    fn channel_score(&self, k: usize, channel: usize, group: &[usize]) -> f64 {
        match self.kind {
            PreferenceKind::MaxMin => self.device_channel_pref(k, channel, group),
            PreferenceKind::SumRate => self.channel_utility(channel, &with_member(group, k)),
        }
    }

    /// Gale-Shapley channel matching. Every round, each channel with a
    /// nonempty list proposes to its best remaining device; each proposed
    /// device keeps its best channel among the proposers and its current one,
    /// judged against the groups at the start of the round.
    pub fn gs_channel_matching(&mut self) -> Vec<Option<usize>> {
        let k_count = self.scenario.num_devices();
        let n_count = self.scenario.num_channels();
        self.groups = vec![Vec::new(); n_count];
        let mut available: Vec<Vec<usize>> = vec![(0..k_count).collect(); n_count];
        let mut channel_of: Vec<Option<usize>> = vec![None; k_count];
        let mut round = 0;
        while available.iter().any(|a| !a.is_empty()) {
            round += 1;
            let mut proposals: Vec<Vec<usize>> = vec![Vec::new(); k_count];
            for n in 0..n_count {
                let pick =
                    best(available[n].iter().map(|&k| {
                        PreferenceValue::new(self.channel_score(k, n, &self.groups[n]), k)
                    }));
                if let Some(p) = pick {
                    available[n].retain(|&k| k != p.candidate);
                    proposals[p.candidate].push(n);
                }
            }
            let snapshot = self.groups.clone();
            for (k, proposers) in proposals.into_iter().enumerate() {
                if proposers.is_empty() {
                    continue;
                }
                let current = channel_of[k];
                let candidates = proposers.iter().copied().chain(current);
                let choice = best(candidates.map(|n| {
                    let others: Vec<usize> =
                        snapshot[n].iter().copied().filter(|&d| d != k).collect();
                    PreferenceValue::new(self.device_channel_pref(k, n, &others), n)
                }))
                .expect("at least one proposer")
                .candidate;
                for &n in &proposers {
                    let action = if n == choice {
                        MatchAction::Accept
                    } else {
                        MatchAction::Reject
                    };
                    self.log(MatchStage::Channel, round, n, k, action);
                }
                if current != Some(choice) {
                    if let Some(old) = current {
                        self.groups[old].retain(|&d| d != k);
                        self.log(MatchStage::Channel, round, old, k, MatchAction::Reject);
                    }
                    self.groups[choice] = with_member(&self.groups[choice], k);
                    channel_of[k] = Some(choice);
                }
            }
        }
        channel_of
    }

    /// Whether exchanging the channels of `k` and `k2` is a blocking swap:
    /// none of the two devices and two channels loses utility and at least
    /// one gains. False when both share a channel or either is unmatched.
    pub fn is_swap_blocking(&self, k: usize, k2: usize) -> bool {
        let (Some(n), Some(n2)) = (self.channel_of(k), self.channel_of(k2)) else {
            return false;
        };
        if n == n2 {
            return false;
        }
        let g = &self.groups[n];
        let g2 = &self.groups[n2];
        let before = self.member_prefs(n, g);
        let before2 = self.member_prefs(n2, g2);
        let u_k = before[g.binary_search(&k).expect("member")];
        let u_k2 = before2[g2.binary_search(&k2).expect("member")];
        let u_n = self.fold(&before);
        let u_n2 = self.fold(&before2);

        let h = with_member(&without(g, k), k2);
        let h2 = with_member(&without(g2, k2), k);
        let after = self.member_prefs(n, &h);
        let after2 = self.member_prefs(n2, &h2);
        let v_k = after2[h2.binary_search(&k).expect("member")];
        let v_k2 = after[h.binary_search(&k2).expect("member")];
        let v_n = self.fold(&after);
        let v_n2 = self.fold(&after2);

        let pairs = [(u_k, v_k), (u_k2, v_k2), (u_n, v_n), (u_n2, v_n2)];
        pairs.iter().all(|(u, v)| v >= u) && pairs.iter().any(|(u, v)| v > u)
    }

    /// Scans device pairs lexicographically and applies the first blocking
    /// swap, until none remains or `cap` swaps have been applied. Returns the
    /// number of swaps and whether the cap stopped the loop.
    pub fn swap_refine(&mut self, cap: usize) -> (usize, bool) {
        let k_count = self.scenario.num_devices();
        let mut swaps = 0;
        'outer: loop {
            if swaps >= cap {
                return (swaps, self.find_blocking_pair().is_some());
            }
            for k in 0..k_count {
                for k2 in k + 1..k_count {
                    if self.is_swap_blocking(k, k2) {
                        let n = self.channel_of(k).expect("matched");
                        let n2 = self.channel_of(k2).expect("matched");
                        self.groups[n] = with_member(&without(&self.groups[n], k), k2);
                        self.groups[n2] = with_member(&without(&self.groups[n2], k2), k);
                        swaps += 1;
                        self.log(MatchStage::Swap, swaps, k, k2, MatchAction::Swap);
                        continue 'outer;
                    }
                }
            }
            return (swaps, false);
        }
    }

    /// First blocking pair in lexicographic order, if any.
    pub fn find_blocking_pair(&self) -> Option<(usize, usize)> {
        let k_count = self.scenario.num_devices();
        (0..k_count)
            .flat_map(|k| (k + 1..k_count).map(move |k2| (k, k2)))
            .find(|&(k, k2)| self.is_swap_blocking(k, k2))
    }

    /// Preference between server `m` and the unit on channel `n`:
    /// `(t_o^m / T)` times the worst (or summed) link rate of the group.
    pub fn unit_server_pref(&self, server: usize, channel: usize) -> f64 {
        self.fold(&self.offload_rates(server, channel, &self.groups[channel]))
    }

    /// Computing demand `Σ f_k` of the unit on channel `n`.
    pub fn unit_demand(&self, channel: usize) -> f64 {
        self.groups[channel]
            .iter()
            .map(|&k| self.frequency[k])
            .sum()
    }

    /// Largest single-device demand `max f_k` of the unit on channel `n`.
    pub fn unit_peak_demand(&self, channel: usize) -> f64 {
        self.groups[channel]
            .iter()
            .map(|&k| self.frequency[k])
            .fold(0.0, f64::max)
    }

    /// Gale-Shapley server matching over the nonempty channel units. Each
    /// round every server proposes to its best remaining unit; a unit keeps
    /// the best of its proposers and its current server. After each round a
    /// server drops every unit holding a device whose `f_k` exceeds the
    /// server's residual capacity `F_m - Σ f` over the units it holds.
    pub fn gs_mec_matching(&mut self) -> Vec<Option<usize>> {
        let m_count = self.scenario.num_servers();
        let n_count = self.scenario.num_channels();
        let units: Vec<usize> = (0..n_count)
            .filter(|&n| !self.groups[n].is_empty())
            .collect();
        let demand: Vec<f64> = (0..n_count).map(|n| self.unit_demand(n)).collect();
        let peak: Vec<f64> = (0..n_count).map(|n| self.unit_peak_demand(n)).collect();
        let cap: Vec<f64> = (0..m_count).map(|m| self.scenario.frequency(m)).collect();
        let fits = |d: f64, residual: f64, cap: f64| d <= residual + 1e-9 * cap;
        let mut load = vec![0.0; m_count];
        let mut holder: Vec<Option<usize>> = vec![None; n_count];
        let mut available: Vec<Vec<usize>> = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let mut list = Vec::new();
            for &n in &units {
                if fits(peak[n], cap[m], cap[m]) {
                    list.push(n);
                } else {
                    self.log(MatchStage::Server, 0, m, n, MatchAction::Prune);
                }
            }
            available.push(list);
        }
        let mut round = 0;
        while available.iter().any(|a| !a.is_empty()) {
            round += 1;
            let mut proposals: Vec<Vec<usize>> = vec![Vec::new(); n_count];
            for m in 0..m_count {
                let pick = best(
                    available[m]
                        .iter()
                        .map(|&n| PreferenceValue::new(self.unit_server_pref(m, n), n)),
                );
                if let Some(p) = pick {
                    available[m].retain(|&n| n != p.candidate);
                    proposals[p.candidate].push(m);
                }
            }
            for (n, proposers) in proposals.into_iter().enumerate() {
                if proposers.is_empty() {
                    continue;
                }
                let current = holder[n];
                let choice = best(
                    proposers
                        .iter()
                        .copied()
                        .chain(current)
                        .map(|m| PreferenceValue::new(self.unit_server_pref(m, n), m)),
                )
                .expect("at least one proposer")
                .candidate;
                for &m in &proposers {
                    let action = if m == choice {
                        MatchAction::Accept
                    } else {
                        MatchAction::Reject
                    };
                    self.log(MatchStage::Server, round, m, n, action);
                }
                if current != Some(choice) {
                    if let Some(old) = current {
                        load[old] -= demand[n];
                        self.log(MatchStage::Server, round, old, n, MatchAction::Reject);
                    }
                    load[choice] += demand[n];
                    holder[n] = Some(choice);
                }
            }
            for m in 0..m_count {
                let residual = cap[m] - load[m];
                let (keep, drop): (Vec<usize>, Vec<usize>) = available[m]
                    .iter()
                    .partition(|&&n| fits(peak[n], residual, cap[m]));
                for n in drop {
                    self.log(MatchStage::Server, round, m, n, MatchAction::Prune);
                }
                available[m] = keep;
            }
        }
        if self.place_unmatched {
            for &n in &units {
                if holder[n].is_none() {
                    let m = (0..m_count)
                        .max_by(|&a, &b| {
                            (cap[a] - load[a])
                                .total_cmp(&(cap[b] - load[b]))
                                .then(b.cmp(&a))
                        })
                        .expect("at least one server");
                    load[m] += demand[n];
                    holder[n] = Some(m);
                    self.log(MatchStage::Server, round + 1, m, n, MatchAction::Accept);
                }
            }
        }
        self.unit_server = holder.clone();
        holder
    }

    /// Allocation implied by the current groups and unit-to-server map.
    pub fn allocation(&self) -> Result<Allocation> {
        let k_count = self.scenario.num_devices();
        let mut server_of = vec![None; k_count];
        let mut channel_of = vec![None; k_count];
        for (n, g) in self.groups.iter().enumerate() {
            for &k in g {
                channel_of[k] = Some(n);
                server_of[k] = self.unit_server[n];
            }
        }
        Allocation::from_assignment(
            self.scenario.num_servers(),
            self.scenario.num_channels(),
            server_of,
            channel_of,
        )
    }

    /// Channel matching, swap refinement with a `10 K²` cap, then server
    /// matching.
    pub fn allocate(&mut self) -> Result<MatchOutcome> {
        let k = self.scenario.num_devices();
        self.gs_channel_matching();
        let (swaps, swap_cap_hit) = self.swap_refine(10 * k * k);
        let holder = self.gs_mec_matching();
        let unmatched_units = (0..self.scenario.num_channels())
            .filter(|&n| !self.groups[n].is_empty() && holder[n].is_none())
            .collect();
        Ok(MatchOutcome {
            allocation: self.allocation()?,
            swaps,
            swap_cap_hit,
            unmatched_units,
        })
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn with_member(group: &[usize], k: usize) -> Vec<usize> {
    let mut g = group.to_vec();
    if let Err(pos) = g.binary_search(&k) {
        g.insert(pos, k);
    }
    g
}

fn without(group: &[usize], k: usize) -> Vec<usize> {
    group.iter().copied().filter(|&d| d != k).collect()
}
