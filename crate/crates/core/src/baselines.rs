//! Benchmark algorithms and the pipelines behind every `--algo` name.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{MatchEvent, MatchingState, PreferenceKind};
use crate::rates::{
    shannon_rate, Allocation, DecodingOrder, GroupOrder, Part, PowerAllocation, Schedule, Solution,
    SubMessage,
};
use crate::sca::{
    bisection_mcor, bisection_with, feasibility_target, sca_maximin_power, utility_solution,
    GroupProblem, ScaSettings, ServerOutcome, SolverStats, SplitMode, Utility,
};
use crate::scenario::Scenario;

/// Every selectable algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "RSMA-Random-PropFair")]
    RsmaRandomPropFair,
    #[serde(rename = "RSMA-Match-MaxMin")]
    RsmaMatchMaxMin,
    #[serde(rename = "RSMA-Match-SumRate")]
    RsmaMatchSumRate,
    #[serde(rename = "RSMA-Random-SumRate")]
    RsmaRandomSumRate,
    #[serde(rename = "NOMA-Match")]
    NomaMatch,
    #[serde(rename = "NOMA-Random")]
    NomaRandom,
    #[serde(rename = "TDMA-Match")]
    TdmaMatch,
    #[serde(rename = "TDMA-Random")]
    TdmaRandom,
    Proposed,
    OracleOrder,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 10] = [
        BaselineKind::RsmaRandomPropFair,
        BaselineKind::RsmaMatchMaxMin,
        BaselineKind::RsmaMatchSumRate,
        BaselineKind::RsmaRandomSumRate,
        BaselineKind::NomaMatch,
        BaselineKind::NomaRandom,
        BaselineKind::TdmaMatch,
        BaselineKind::TdmaRandom,
        BaselineKind::Proposed,
        BaselineKind::OracleOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::RsmaRandomPropFair => "RSMA-Random-PropFair",
            BaselineKind::RsmaMatchMaxMin => "RSMA-Match-MaxMin",
            BaselineKind::RsmaMatchSumRate => "RSMA-Match-SumRate",
            BaselineKind::RsmaRandomSumRate => "RSMA-Random-SumRate",
            BaselineKind::NomaMatch => "NOMA-Match",
            BaselineKind::NomaRandom => "NOMA-Random",
            BaselineKind::TdmaMatch => "TDMA-Match",
            BaselineKind::TdmaRandom => "TDMA-Random",
            BaselineKind::Proposed => "Proposed",
            BaselineKind::OracleOrder => "OracleOrder",
        }
    }

    /// Whether the pipeline re-allocates by matching after the first
    /// optimization.
    pub fn uses_matching(self) -> bool {
        matches!(
            self,
            BaselineKind::RsmaMatchMaxMin
                | BaselineKind::RsmaMatchSumRate
                | BaselineKind::NomaMatch
                | BaselineKind::TdmaMatch
                | BaselineKind::Proposed
                | BaselineKind::OracleOrder
        )
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownAlgorithm(s.to_string()))
    }
}

/// Uniform random channel per device, then a uniform random server per
/// channel. Servers are drawn for every channel, used or not, so the stream
/// consumed depends only on `(N, K)`.
pub fn random_allocation<R: Rng + ?Sized>(
    rng: &mut R,
    num_servers: usize,
    num_channels: usize,
    num_devices: usize,
) -> Allocation {
    let channel_of: Vec<usize> = (0..num_devices)
        .map(|_| rng.gen_range(0..num_channels))
        .collect();
    let server_of_channel: Vec<usize> = (0..num_channels)
        .map(|_| rng.gen_range(0..num_servers))
        .collect();
    Allocation::from_assignment(
        num_servers,
        num_channels,
        channel_of
            .iter()
            .map(|&n| Some(server_of_channel[n]))
            .collect(),
        channel_of.into_iter().map(Some).collect(),
    )
    .expect("channel groups map to single servers")
}

/// Full-power single-user link rate `B log2(1 + h P / σ² B)`.
pub fn tdma_link_rate(scenario: &Scenario, server: usize, channel: usize, device: usize) -> f64 {
    let cfg = scenario.config();
    shannon_rate(
        cfg.bandwidth_hz,
        scenario.gain(server, channel, device) * scenario.max_power(device),
        cfg.noise_power_w(),
    )
}

/// Whether one TDMA server supports a common rate `theta` with the minimal
/// slots `t_k = θ T / R_k`: `Σ t_k (F + R_k) <= F T` and `Σ t_k <= T`.
pub fn tdma_feasible(frequency: f64, deadline: f64, link_rates: &[f64], theta: f64) -> bool {
    if theta <= 0.0 || link_rates.is_empty() {
        return true;
    }
    if link_rates.iter().any(|&r| r <= 0.0) {
        return false;
    }
    let (mut time, mut load) = (0.0, 0.0);
    for &r in link_rates {
        let t = theta * deadline / r;
        time += t;
        load += t * (frequency + r);
    }
    load <= frequency * deadline && time <= deadline
}

/// TDMA max-min benchmark: each served device transmits alone at full power
/// in its own slot; the common rate `θ` is found by bisection.
pub fn tdma_maximin(
    scenario: &Scenario,
    allocation: &Allocation,
    settings: &ScaSettings,
) -> Result<Solution> {
    allocation.validate()?;
    settings.validate()?;
    let cfg = scenario.config();
    let t = cfg.deadline_s;
    let k_count = scenario.num_devices();
    let m_count = scenario.num_servers();
    let mut link = vec![0.0; k_count];
    let mut per_server: Vec<Vec<usize>> = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let devs = allocation.server_devices(m);
        for &k in &devs {
            let n = allocation
                .channel_of(k)
                .expect("served device has a channel");
            link[k] = tdma_link_rate(scenario, m, n, k);
        }
        per_server.push(devs);
    }
    let rates_of = |m: usize| -> Vec<f64> { per_server[m].iter().map(|&k| link[k]).collect() };
    let feasible = |theta: f64| {
        (0..m_count).all(|m| tdma_feasible(scenario.frequency(m), t, &rates_of(m), theta))
    };

    let served: Vec<usize> = per_server.iter().flatten().copied().collect();
    let hi0 = served
        .iter()
        .map(|&k| link[k])
        .chain(
            (0..m_count)
                .filter(|&m| !per_server[m].is_empty())
                .map(|m| scenario.frequency(m)),
        )
        .fold(f64::INFINITY, f64::min);
    let mut theta = 0.0;
    if !served.is_empty() && hi0 > 0.0 {
        let eps = settings.bisection_tol_bps.unwrap_or(1e-4 * hi0);
        let (mut lo, mut hi) = (0.0, hi0);
        while hi - lo > eps {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        theta = lo;
    }

    let mut powers = PowerAllocation::zeros(k_count);
    let mut slots = vec![0.0; k_count];
    let mut rates = vec![0.0; k_count];
    let mut schedule = Schedule {
        t_offload: vec![0.0; m_count],
        t_compute: vec![t; m_count],
        frequency: vec![0.0; k_count],
    };
    for (m, devs) in per_server.iter().enumerate() {
        for &k in devs {
            powers.set(SubMessage::new(k, Part::First), scenario.max_power(k));
            if theta > 0.0 {
                slots[k] = theta * t / link[k];
                rates[k] = theta;
            }
        }
        let t_o: f64 = devs.iter().map(|&k| slots[k]).sum();
        let t_c = t - t_o;
        schedule.t_offload[m] = t_o;
        schedule.t_compute[m] = t_c;
        for &k in devs {
            if rates[k] > 0.0 {
                schedule.frequency[k] = rates[k] * t / t_c;
            }
        }
    }
    let mcor = rates.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Solution {
        allocation: allocation.clone(),
        orders: Vec::new(),
        powers,
        schedule,
        link_rates: link,
        rates,
        mcor,
        tdma_slots: Some(slots),
    })
}

/// NOMA max-min benchmark: one message per device, decoded by descending
/// gain, powers from the same SCA max-min machinery.
pub fn noma_maximin(
    scenario: &Scenario,
    allocation: &Allocation,
    settings: &ScaSettings,
    stats: &mut SolverStats,
) -> Result<Solution> {
    bisection_mcor(scenario, allocation, settings, SplitMode::Noma, stats)
}

/// RSMA powers and orders maximizing the sum of link rates.
pub fn sumrate_power(
    scenario: &Scenario,
    allocation: &Allocation,
    settings: &ScaSettings,
    stats: &mut SolverStats,
) -> Result<Solution> {
    utility_solution(scenario, allocation, Utility::SumRate, settings, stats)
}

/// Floor added to each link rate inside the proportional-fair logarithm.
pub const PROPFAIR_DELTA_BPS: f64 = 1e-9;

/// RSMA powers and orders maximizing `Σ_k ln(R_k + δ)`.
pub fn propfair_power(
    scenario: &Scenario,
    allocation: &Allocation,
    settings: &ScaSettings,
    stats: &mut SolverStats,
) -> Result<Solution> {
    utility_solution(
        scenario,
        allocation,
        Utility::PropFair {
            delta_bps: PROPFAIR_DELTA_BPS,
        },
        settings,
        stats,
    )
}

/// Largest number of sub-messages per server the order search accepts.
pub const ORACLE_MESSAGE_LIMIT: usize = 6;

fn permutations(items: &[SubMessage]) -> Vec<Vec<SubMessage>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Every decoding order of one group in which each device's first part
/// precedes its second. The two parts are interchangeable, so this loses no
/// achievable rate.
pub fn canonical_orders(devices: &[usize], parts: usize) -> Vec<DecodingOrder> {
    let msgs: Vec<SubMessage> = devices
        .iter()
        .flat_map(|&k| {
            Part::BOTH[..parts]
                .iter()
                .map(move |&p| SubMessage::new(k, p))
        })
        .collect();
    permutations(&msgs)
        .into_iter()
        .filter(|seq| {
            devices.iter().all(|&k| {
                let pos = |p| seq.iter().position(|m| *m == SubMessage::new(k, p));
                parts == 1 || pos(Part::First) < pos(Part::Second)
            })
        })
        .map(|seq| DecodingOrder::new(seq).expect("distinct sub-messages"))
        .collect()
}

/// All order combinations of one server, one order per channel group.
fn server_order_sets(problem: &GroupProblem) -> Vec<Vec<GroupOrder>> {
    let mut sets: Vec<Vec<GroupOrder>> = vec![Vec::new()];
    for (channel, locals) in problem.channel_groups() {
        let devices: Vec<usize> = locals.iter().map(|&i| problem.devices[i]).collect();
        let orders = canonical_orders(&devices, problem.parts);
        sets = sets
            .into_iter()
            .flat_map(|prefix| {
                orders.iter().map(move |o| {
                    let mut v = prefix.clone();
                    v.push(GroupOrder {
                        server: problem.server,
                        channel,
                        order: o.clone(),
                    });
                    v
                })
            })
            .collect();
    }
    sets
}

/// Bisection on the MCOR where each server's feasibility check tries every
/// decoding order. Refuses servers with more than
/// [`ORACLE_MESSAGE_LIMIT`] sub-messages.
pub fn oracle_order_search(
    scenario: &Scenario,
    allocation: &Allocation,
    settings: &ScaSettings,
    stats: &mut SolverStats,
) -> Result<Solution> {
    allocation.validate()?;
    let mut sets: Vec<Vec<Vec<GroupOrder>>> = Vec::with_capacity(scenario.num_servers());
    for m in 0..scenario.num_servers() {
        let p = GroupProblem::new(scenario, allocation, m, SplitMode::Rsma);
        if p.num_messages() > ORACLE_MESSAGE_LIMIT {
            return Err(Error::GroupTooLarge {
                messages: p.num_messages(),
                limit: ORACLE_MESSAGE_LIMIT,
            });
        }
        sets.push(server_order_sets(&p));
    }
    let check = |p: &GroupProblem,
                 eta: f64,
                 st: &mut SolverStats,
                 start: Option<&[f64]>|
     -> Result<ServerOutcome> {
        let target = feasibility_target(p, eta);
        let mut best: Option<ServerOutcome> = None;
        for orders in &sets[p.server] {
            let sca = sca_maximin_power(p, orders, eta, settings, start)?;
            st.record(p, eta, 0, &sca, target);
            let feasible = sca.objective >= target;
            if best.as_ref().map_or(true, |b| sca.objective > b.objective) {
                best = Some(ServerOutcome {
                    powers: sca.powers,
                    orders: orders.clone(),
                    objective: sca.objective,
                    feasible,
                });
            }
            if feasible {
                break;
            }
        }
        best.ok_or_else(|| Error::Domain("server without decoding orders".into()))
    };
    bisection_with(
        scenario,
        allocation,
        settings,
        SplitMode::Rsma,
        stats,
        &check,
    )
}

/// Outcome of one algorithm pipeline.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub solution: Solution,
    /// Solution before matching, for matching pipelines.
    pub initial: Option<Solution>,
    pub stats: SolverStats,
    pub swaps: usize,
    pub swap_cap_hit: bool,
    pub unmatched_units: usize,
    pub match_trace: Option<Vec<MatchEvent>>,
}

/// Options of [`run_pipeline`].
#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub sca_trace: bool,
    pub match_trace: bool,
    pub place_unmatched: bool,
}

fn optimize(
    kind: BaselineKind,
    scenario: &Scenario,
    allocation: &Allocation,
    settings: &ScaSettings,
    stats: &mut SolverStats,
) -> Result<Solution> {
    use BaselineKind::*;
    match kind {
        Proposed | RsmaMatchMaxMin => {
            bisection_mcor(scenario, allocation, settings, SplitMode::Rsma, stats)
        }
        OracleOrder => oracle_order_search(scenario, allocation, settings, stats),
        RsmaMatchSumRate | RsmaRandomSumRate => {
            sumrate_power(scenario, allocation, settings, stats)
        }
        RsmaRandomPropFair => propfair_power(scenario, allocation, settings, stats),
        NomaMatch | NomaRandom => noma_maximin(scenario, allocation, settings, stats),
        TdmaMatch | TdmaRandom => tdma_maximin(scenario, allocation, settings),
    }
}

fn matching_setup(kind: BaselineKind) -> (SplitMode, PreferenceKind) {
    use BaselineKind::*;
    match kind {
        RsmaMatchMaxMin | RsmaMatchSumRate => (SplitMode::Rsma, PreferenceKind::SumRate),
        NomaMatch | TdmaMatch => (SplitMode::Noma, PreferenceKind::MaxMin),
        _ => (SplitMode::Rsma, PreferenceKind::MaxMin),
    }
}

/// Runs `kind` from the initial allocation. Random variants optimize once;
/// matching variants optimize, re-allocate by matching against that
/// solution, and optimize again.
pub fn run_pipeline(
    kind: BaselineKind,
    scenario: &Scenario,
    initial: &Allocation,
    settings: &ScaSettings,
    options: &PipelineOptions,
) -> Result<PipelineRun> {
    let mut stats = if options.sca_trace {
        SolverStats::with_trace()
    } else {
        SolverStats::default()
    };
    let first = optimize(kind, scenario, initial, settings, &mut stats)?;
    if !kind.uses_matching() {
        return Ok(PipelineRun {
            solution: first,
            initial: None,
            stats,
            swaps: 0,
            swap_cap_hit: false,
            unmatched_units: 0,
            match_trace: None,
        });
    }
    let (mode, pref) = matching_setup(kind);
    let mut state = MatchingState::from_solution(scenario, &first, mode, pref);
    state.place_unmatched = options.place_unmatched;
    if matches!(kind, BaselineKind::TdmaMatch) {
        state = state.with_tdma_rates();
    }
    if options.match_trace {
        state = state.with_trace();
    }
    let outcome = state.allocate()?;
    let second = optimize(kind, scenario, &outcome.allocation, settings, &mut stats)?;
    Ok(PipelineRun {
        solution: second,
        initial: Some(first),
        stats,
        swaps: outcome.swaps,
        swap_cap_hit: outcome.swap_cap_hit,
        unmatched_units: outcome.unmatched_units.len(),
        match_trace: state.trace,
    })
}
