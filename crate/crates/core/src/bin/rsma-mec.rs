use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rsma_mec::baselines::BaselineKind;
use rsma_mec::config::RunConfig;
use rsma_mec::harness::{
    convergence_stats, run_instance_full, run_many, run_sweep, summarize, table1_comparison,
    write_match_trace, write_rows_to, write_sca_trace, write_summary, SweepParam, SweepSpec,
};
use rsma_mec::Result;

/// Max-min fair offloading for RSMA-assisted multi-server MEC.
#[derive(Parser)]
#[command(name = "rsma-mec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set num_devices=12`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance with one algorithm.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "Proposed")]
        algo: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full solution as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the SCA iteration trace as CSV.
        #[arg(long)]
        sca_trace: Option<PathBuf>,
        /// Write the matching event trace as CSV.
        #[arg(long)]
        match_trace: Option<PathBuf>,
    },
    /// Monte-Carlo sweep of one parameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// F_m, P_k, K, M, N or any configuration key.
        #[arg(long)]
        param: String,
        /// Comma-separated values in configuration units.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated algorithms; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        algos: Vec<String>,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Record wall-clock times (output is then not reproducible).
        #[arg(long)]
        timing: bool,
        /// Also write per-cell mean and standard deviation.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Proposed against exhaustive decoding-order search, M = N = 1.
    Table1 {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// CDFs of SCA iterations and swap operations for the proposed scheme.
    Convergence {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn execute(cli: Cli) -> Result<()> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Run {
            config,
            algo,
            seed,
            json,
            sca_trace,
            match_trace,
        } => {
            let cfg = config.load()?;
            let algo: BaselineKind = algo.parse()?;
            let out =
                run_instance_full(&cfg, seed, algo, sca_trace.is_some(), match_trace.is_some())?;
            let r = &out.result;
            writeln!(stdout, "algo      {}", r.algorithm)?;
            writeln!(stdout, "seed      {}", r.seed)?;
            writeln!(stdout, "mcor_bps  {}", r.mcor)?;
            writeln!(stdout, "jain      {}", r.jain)?;
            writeln!(stdout, "sca_iters {:?}", r.sca_iterations)?;
            writeln!(stdout, "swaps     {}", r.swaps)?;
            writeln!(stdout, "wall_ms   {:.1}", r.wall_ms)?;
            if let Some(p) = json {
                std::fs::write(p, out.solution.to_json()?)?;
            }
            if let (Some(p), Some(rows)) = (sca_trace, &out.sca_trace) {
                write_sca_trace(File::create(p)?, rows)?;
            }
            if let (Some(p), Some(events)) = (match_trace, &out.match_trace) {
                write_match_trace(File::create(p)?, events)?;
            }
        }
        Command::Sweep {
            config,
            param,
            values,
            runs,
            out,
            algos,
            seed,
            timing,
            summary,
        } => {
            let cfg = config.load()?;
            let algorithms = if algos.is_empty() {
                BaselineKind::ALL.to_vec()
            } else {
                algos
                    .iter()
                    .map(|a| a.parse())
                    .collect::<Result<Vec<_>>>()?
            };
            let spec = SweepSpec {
                param: SweepParam::parse(&param)?,
                values,
                runs,
                algorithms,
                master_seed: seed,
                timing,
            };
            let rows = run_sweep(&cfg, &spec)?;
            write_rows_to(&out, &rows)?;
            let cells = summarize(&rows);
            for c in &cells {
                writeln!(
                    stdout,
                    "{}={} {:<22} mcor {:.4} ± {:.4} Mbps  jain {:.3}  failed {}",
                    c.param,
                    c.value,
                    c.algorithm.name(),
                    c.mcor_mean / 1e6,
                    c.mcor_std / 1e6,
                    c.jain_mean,
                    c.failures
                )?;
            }
            if let Some(p) = summary {
                write_summary(File::create(p)?, &cells)?;
            }
        }
        Command::Table1 { config, runs, seed } => {
            let cfg = config.load()?;
            let (rows, _) = table1_comparison(&cfg, &[2, 3], runs, seed)?;
            writeln!(stdout, "K  algo         mcor_mbps  wall_ms")?;
            for r in rows {
                writeln!(
                    stdout,
                    "{}  {:<12} {:>9.4}  {:>7.1}",
                    r.num_devices,
                    r.algorithm.name(),
                    r.mcor_mean / 1e6,
                    r.wall_ms_mean
                )?;
            }
        }
        Command::Convergence { config, runs, seed } => {
            let cfg = config.load()?;
            let results = run_many(&cfg, BaselineKind::Proposed, runs, seed)?;
            let stats = convergence_stats(&results);
            writeln!(stdout, "kind,x,cdf")?;
            for (x, p) in &stats.sca_iterations.points {
                writeln!(stdout, "sca_iterations,{x},{p}")?;
            }
            for (x, p) in &stats.swaps.points {
                writeln!(stdout, "swaps,{x},{p}")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
