//! `thinlab`: runs the checks of a scenario file and writes `results.csv`,
//! `resolved_scenario.json` and, on request, `utility.csv` and `paths.bin`.
//!
//! Exit codes: 0 when every judged check passes, 1 when any fails, 2 on
//! usage, syntax, schema or backend errors.

mod checks;
mod report;
mod scenario;

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use thinlab_core::market::UtilityReport;
use thinlab_core::path_engine::write_paths_bin;

use checks::{Operation, Runner};
use report::Status;
use scenario::{Overrides, ScenarioError};

const THREADS_VAR: &str = "THINLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "thinlab", version, about = "Checks for thin random times, enlarged filtrations and insider utility")]
struct Cli {
    /// Which checks to run.
    #[arg(value_enum)]
    operation: Operation,
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides `run.n_paths`.
    #[arg(long)]
    n_paths: Option<usize>,
    /// Overrides `grid.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `run.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn threads_from_env() -> Result<Option<usize>, ScenarioError> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ScenarioError::Schema(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
    }
}

fn utility_csv(r: &UtilityReport) -> String {
    let mut out = String::from("strategy,value,value_se,insider_advantage,insider_advantage_se\n");
    let mut row = |name: &str, v: f64, se: f64, adv: Option<(f64, f64)>| {
        let (a, ase) = adv.map_or((String::new(), String::new()), |(a, s)| (format!("{a:.16e}"), format!("{s:.16e}")));
        let _ = writeln!(out, "{name},{v:.16e},{se:.16e},{a},{ase}");
    };
    row("insider", r.value_insider.mean, r.value_insider.se, None);
    for d in &r.dominance {
        row(&d.strategy, d.value.mean, d.value.se, Some((d.insider_advantage.mean, d.insider_advantage.se)));
    }
    out
}

/// Runs the command; `Ok(true)` when every judged check passes.
fn run(cli: Cli) -> Result<bool> {
    let mut sc = scenario::parse_scenario(&cli.scenario)?;
    let overrides = Overrides { n_paths: cli.n_paths, steps: cli.steps, seed: cli.seed, out: cli.out };
    let changes = sc.apply(&overrides)?;
    let threads = threads_from_env()?;
    if !cli.operation.supports(sc.backend) {
        return Err(ScenarioError::BackendMismatch { operation: cli.operation.name().into(), backend: sc.backend }.into());
    }

    let dir = sc.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("resolved_scenario.json"), sc.echo(&changes)).context("writing resolved_scenario.json")?;

    let mut runner = Runner::new(&sc, threads);
    let records = runner.run(cli.operation)?;

    fs::write(dir.join("results.csv"), report::results_csv(&sc.id, &records)).context("writing results.csv")?;
    if let Some(u) = &runner.utility {
        fs::write(dir.join("utility.csv"), utility_csv(u)).context("writing utility.csv")?;
    }
    if let Some(batch) = runner.simulated().filter(|b| !b.traces.is_empty()) {
        let file = fs::File::create(dir.join("paths.bin")).context("creating paths.bin")?;
        let mut w = BufWriter::new(file);
        write_paths_bin(batch, &mut w).and_then(|_| w.flush()).context("writing paths.bin")?;
    }

    println!("scenario {} ({} backend), operation {}", sc.id, sc.backend, cli.operation.name());
    if let Some(batch) = runner.simulated() {
        println!("{} paths, {} steps, seed {}, digest {}", batch.n_paths, batch.scenario.steps, batch.master_seed, batch.digest());
    }
    print!("{}", report::table(&records));
    println!("outputs in {}", dir.display());
    Ok(records.iter().all(|r| r.status != Status::Fail))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
