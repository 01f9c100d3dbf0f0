//! Experiment harness: single instances, Monte-Carlo sweeps, convergence
//! statistics and the decoding-order comparison, plus their CSV output.
//!
//! Every result is a pure function of the configuration and the seeds. The
//! scenario of run `r` under master seed `s` uses seed `derive_seed(s, [r])`
//! in every cell of a sweep, so cells differ only in the swept parameter.
//! The initial random allocation is drawn from a stream of the scenario seed
//! and is shared by all algorithms.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{
    random_allocation, run_pipeline, BaselineKind, PipelineOptions, PipelineRun,
};
use crate::config::{RunConfig, KEYS};
use crate::error::{Error, Result};
use crate::matching::MatchEvent;
use crate::rates::Solution;
use crate::sca::ScaTraceRow;
use crate::scenario::{derive_seed, generate_scenario, Scenario};

/// Header of the per-instance result CSV.
pub const CSV_HEADER: &str = "param,value,seed,algo,mcor_bps,jain,sca_iters_mean,swaps,wall_ms";

const STREAM_ALLOCATION: u64 = 0xA110C;

/// Scenario seed of run `run` under `master`.
pub fn run_seed(master: u64, run: u64) -> u64 {
    derive_seed(master, &[run])
}

/// Initial random allocation of the instance with scenario seed `seed`.
pub fn initial_allocation(scenario: &Scenario) -> crate::rates::Allocation {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.seed(), &[STREAM_ALLOCATION]));
    random_allocation(
        &mut rng,
        scenario.num_servers(),
        scenario.num_channels(),
        scenario.num_devices(),
    )
}

/// Summary of one (configuration, seed, algorithm) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceResult {
    pub seed: u64,
    pub algorithm: BaselineKind,
    pub mcor: f64,
    pub jain: f64,
    pub rates: Vec<f64>,
    /// Iterations of every SCA invocation.
    pub sca_iterations: Vec<usize>,
    pub swaps: usize,
    pub swap_cap_hit: bool,
    pub unmatched_units: usize,
    /// MCOR before matching, for matching pipelines.
    pub initial_mcor: Option<f64>,
    pub wall_ms: f64,
}

impl InstanceResult {
    pub fn sca_iters_mean(&self) -> f64 {
        if self.sca_iterations.is_empty() {
            0.0
        } else {
            self.sca_iterations.iter().sum::<usize>() as f64 / self.sca_iterations.len() as f64
        }
    }
}

/// Everything produced by [`run_instance_full`].
#[derive(Debug, Clone)]
pub struct InstanceOutput {
    pub result: InstanceResult,
    pub scenario: Scenario,
    pub solution: Solution,
    pub sca_trace: Option<Vec<ScaTraceRow>>,
    pub match_trace: Option<Vec<MatchEvent>>,
}

/// Runs one algorithm on one instance with optional traces. The returned
/// solution has been re-validated against every constraint.
pub fn run_instance_full(
    cfg: &RunConfig,
    seed: u64,
    algorithm: BaselineKind,
    sca_trace: bool,
    match_trace: bool,
) -> Result<InstanceOutput> {
    cfg.validate()?;
    let scenario = generate_scenario(&cfg.system, seed)?;
    let initial = initial_allocation(&scenario);
    let options = PipelineOptions {
        sca_trace,
        match_trace,
        place_unmatched: cfg.place_unmatched,
    };
    let start = Instant::now();
    let run: PipelineRun = run_pipeline(algorithm, &scenario, &initial, &cfg.solver, &options)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    run.solution.check(&scenario)?;
    let result = InstanceResult {
        seed,
        algorithm,
        mcor: run.solution.mcor,
        jain: run.solution.jain(),
        rates: run.solution.rates.clone(),
        sca_iterations: run.stats.sca_iterations.clone(),
        swaps: run.swaps,
        swap_cap_hit: run.swap_cap_hit,
        unmatched_units: run.unmatched_units,
        initial_mcor: run.initial.as_ref().map(|s| s.mcor),
        wall_ms,
    };
    Ok(InstanceOutput {
        result,
        scenario,
        solution: run.solution,
        sca_trace: run.stats.trace,
        match_trace: run.match_trace,
    })
}

/// Runs one algorithm on one instance.
pub fn run_instance(cfg: &RunConfig, seed: u64, algorithm: BaselineKind) -> Result<InstanceResult> {
    run_instance_full(cfg, seed, algorithm, false, false).map(|o| o.result)
}

/// Swept parameter. The short names map to configuration keys; any other
/// configuration key is accepted as is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepParam {
    /// Name as given, written to the `param` column.
    pub label: String,
    /// Configuration key that receives each value.
    pub key: String,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        let key = match name {
            "F_m" | "F" => "server_frequency_mbps",
            "K" => "num_devices",
            "P_k" | "P" => "max_tx_power_dbm",
            "M" => "num_servers",
            "N" => "num_channels",
            other if KEYS.contains(&other) => other,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown sweep parameter `{other}`"
                )))
            }
        };
        Ok(Self {
            label: name.to_string(),
            key: key.to_string(),
        })
    }
}

/// A Monte-Carlo sweep: every value × run × algorithm.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub param: SweepParam,
    /// Values in configuration units (Mbps, dBm, counts).
    pub values: Vec<String>,
    pub runs: usize,
    pub algorithms: Vec<BaselineKind>,
    pub master_seed: u64,
    /// Record wall-clock times; off keeps the output byte-reproducible.
    pub timing: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.algorithms.is_empty() || self.runs == 0 {
            return Err(Error::InvalidConfig(
                "a sweep needs values, algorithms and at least one run".into(),
            ));
        }
        Ok(())
    }
}

/// One sweep row. `outcome` holds the error text of a failed run.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub value_index: usize,
    pub run: usize,
    pub outcome: std::result::Result<InstanceResult, String>,
    pub seed: u64,
    pub algorithm: BaselineKind,
}

/// Executes a sweep. Failed runs are kept as error rows; rows come back
/// sorted by value, run and algorithm regardless of scheduling.
pub fn run_sweep(cfg: &RunConfig, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut cells = Vec::new();
    for (vi, v) in spec.values.iter().enumerate() {
        let mut c = cfg.clone();
        c.set(&spec.param.key, v).map_err(Error::InvalidConfig)?;
        c.validate()?;
        for run in 0..spec.runs {
            for &algo in &spec.algorithms {
                cells.push((vi, run, algo, c.clone()));
            }
        }
    }
    let work = || -> Vec<SweepRow> {
        cells
            .par_iter()
            .map(|(vi, run, algo, c)| {
                let seed = run_seed(spec.master_seed, *run as u64);
                let outcome = run_instance(c, seed, *algo)
                    .map(|mut r| {
                        if !spec.timing {
                            r.wall_ms = 0.0;
                        }
                        r
                    })
                    .map_err(|e| e.to_string());
                SweepRow {
                    param: spec.param.label.clone(),
                    value: spec.values[*vi].clone(),
                    value_index: *vi,
                    run: *run,
                    outcome,
                    seed,
                    algorithm: *algo,
                }
            })
            .collect()
    };
    let mut rows = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    };
    rows.sort_by_key(|r| (r.value_index, r.run, r.algorithm));
    Ok(rows)
}

/// Writes rows in the fixed CSV schema. Failed runs get `NaN` metrics.
pub fn write_rows<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for row in rows {
        let (mcor, jain, iters, swaps, wall) = match &row.outcome {
            Ok(r) => (
                r.mcor.to_string(),
                r.jain.to_string(),
                r.sca_iters_mean().to_string(),
                r.swaps.to_string(),
                r.wall_ms.to_string(),
            ),
            Err(_) => (
                "NaN".into(),
                "NaN".into(),
                "NaN".into(),
                "0".into(),
                "0".into(),
            ),
        };
        w.write_record([
            row.param.as_str(),
            row.value.as_str(),
            &row.seed.to_string(),
            row.algorithm.name(),
            &mcor,
            &jain,
            &iters,
            &swaps,
            &wall,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_to(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    write_rows(std::fs::File::create(path)?, rows)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate of one (value, algorithm) cell over its successful runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub param: String,
    pub value: String,
    pub algorithm: BaselineKind,
    pub runs: usize,
    pub failures: usize,
    pub mcor_mean: f64,
    pub mcor_std: f64,
    pub jain_mean: f64,
    pub jain_std: f64,
}

/// Per-cell mean and standard deviation of MCOR and Jain's index, in row
/// order.
pub fn summarize(rows: &[SweepRow]) -> Vec<CellSummary> {
    let mut keys: Vec<(usize, BaselineKind)> =
        rows.iter().map(|r| (r.value_index, r.algorithm)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(vi, algo)| {
            let cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.value_index == vi && r.algorithm == algo)
                .collect();
            let ok: Vec<&InstanceResult> = cell
                .iter()
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            let (mcor_mean, mcor_std) = mean_std(&ok.iter().map(|r| r.mcor).collect::<Vec<_>>());
            let (jain_mean, jain_std) = mean_std(&ok.iter().map(|r| r.jain).collect::<Vec<_>>());
            CellSummary {
                param: cell[0].param.clone(),
                value: cell[0].value.clone(),
                algorithm: algo,
                runs: ok.len(),
                failures: cell.len() - ok.len(),
                mcor_mean,
                mcor_std,
                jain_mean,
                jain_std,
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(out: W, cells: &[CellSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

/// Empirical CDF over non-negative integer counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cdf {
    pub samples: usize,
    /// `(x, P[X <= x])` for `x = 0..=max`.
    pub points: Vec<(usize, f64)>,
}

impl Cdf {
    pub fn from_counts(counts: &[usize]) -> Self {
        let max = counts.iter().copied().max().unwrap_or(0);
        let mut hist = vec![0usize; max + 1];
        for &c in counts {
            hist[c] += 1;
        }
        let n = counts.len();
        let mut acc = 0;
        let points = hist
            .iter()
            .enumerate()
            .map(|(x, h)| {
                acc += h;
                (x, if n == 0 { 1.0 } else { acc as f64 / n as f64 })
            })
            .collect();
        Self { samples: n, points }
    }

    /// `P[X <= x]`.
    pub fn at(&self, x: usize) -> f64 {
        match self.points.get(x) {
            Some(&(_, p)) => p,
            None => 1.0,
        }
    }
}

/// Convergence statistics of a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceStats {
    pub sca_iterations: Cdf,
    pub swaps: Cdf,
}

/// CDFs of SCA iteration counts over all invocations and of swap counts
/// over all runs.
pub fn convergence_stats(results: &[InstanceResult]) -> ConvergenceStats {
    let iters: Vec<usize> = results
        .iter()
        .flat_map(|r| r.sca_iterations.iter().copied())
        .collect();
    let swaps: Vec<usize> = results.iter().map(|r| r.swaps).collect();
    ConvergenceStats {
        sca_iterations: Cdf::from_counts(&iters),
        swaps: Cdf::from_counts(&swaps),
    }
}

/// Runs `algorithm` over `runs` seeds, in parallel, returning results in
/// run order.
pub fn run_many(
    cfg: &RunConfig,
    algorithm: BaselineKind,
    runs: usize,
    master_seed: u64,
) -> Result<Vec<InstanceResult>> {
    (0..runs)
        .into_par_iter()
        .map(|r| run_instance(cfg, run_seed(master_seed, r as u64), algorithm))
        .collect()
}

/// One row of the decoding-order comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub num_devices: usize,
    pub algorithm: BaselineKind,
    pub runs: usize,
    pub mcor_mean: f64,
    pub wall_ms_mean: f64,
}

/// Proposed against the exhaustive decoding-order search on one server and
/// one channel, for each `K` in `devices`. Also returns the per-seed pairs
/// `(proposed, oracle)` MCORs.
pub fn table1_comparison(
    cfg: &RunConfig,
    devices: &[usize],
    runs: usize,
    master_seed: u64,
) -> Result<(Vec<Table1Row>, Vec<(usize, f64, f64)>)> {
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for &k in devices {
        let mut c = cfg.clone();
        c.system.num_servers = 1;
        c.system.num_channels = 1;
        c.system.num_devices = k;
        let proposed = run_many(&c, BaselineKind::Proposed, runs, master_seed)?;
        let oracle = run_many(&c, BaselineKind::OracleOrder, runs, master_seed)?;
        for (p, o) in proposed.iter().zip(&oracle) {
            pairs.push((k, p.mcor, o.mcor));
        }
        for (algo, res) in [
            (BaselineKind::Proposed, &proposed),
            (BaselineKind::OracleOrder, &oracle),
        ] {
            rows.push(Table1Row {
                num_devices: k,
                algorithm: algo,
                runs,
                mcor_mean: mean_std(&res.iter().map(|r| r.mcor).collect::<Vec<_>>()).0,
                wall_ms_mean: mean_std(&res.iter().map(|r| r.wall_ms).collect::<Vec<_>>()).0,
            });
        }
    }
    Ok((rows, pairs))
}

/// Writes the SCA trace as `iteration,eta,objective,feasible` plus the
/// bisection step, server and round that locate each row.
pub fn write_sca_trace<W: Write>(out: W, rows: &[ScaTraceRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record([
        "iteration",
        "eta",
        "objective",
        "feasible",
        "step",
        "server",
        "round",
    ])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.eta.to_string(),
            r.objective.to_string(),
            r.feasible.to_string(),
            r.step.to_string(),
            r.server.to_string(),
            r.round.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the matching trace as `stage,round,proposer,proposee,action`.
pub fn write_match_trace<W: Write>(out: W, events: &[MatchEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
