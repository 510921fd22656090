//! `covsteer`: solve a scenario, Monte Carlo a policy, export plot data.
//!
//! Exit codes: 0 success, 1 configuration, 2 infeasible subproblem,
//! 3 numerical failure, 4 I/O.

mod export;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covsteer::monte_carlo::{McError, McReport};
use covsteer::scenario::{Scenario, ScenarioError};
use covsteer::scp::{records_to_jsonl, ScpError};
use covsteer::{ClarabelAdapter, FeedbackPolicy};

#[derive(Parser, Debug)]
#[command(name = "covsteer", version, about = "Covariance steering in Gaussian random fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run SCP on a scenario; writes policy.json and iterations.jsonl.
    Solve {
        /// Scenario TOML file, or `bundled:<name>`.
        #[arg(long)]
        config: String,
        /// Output directory (default: the scenario's output.directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of SCP iterations.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Monte Carlo a policy; writes report.json (and trials.csv with --csv).
    Simulate {
        #[arg(long)]
        config: String,
        /// Policy JSON from `solve`; optional with --open-loop.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fly the scenario's initial control guess without feedback.
        #[arg(long)]
        open_loop: bool,
        /// Also write every RK4 step of every trial to trials.csv.
        #[arg(long)]
        csv: bool,
    },
    /// Turn one or more report.json files into plot-ready CSVs.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Infeasible(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Infeasible(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ScpError> for CliError {
    fn from(e: ScpError) -> Self {
        if e.is_infeasible() {
            CliError::Infeasible(e.to_string())
        } else if matches!(e, ScpError::Config(_)) {
            CliError::Config(e.to_string())
        } else {
            CliError::Numeric(e.to_string())
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        match e {
            McError::AllTrialsFailed(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn load_scenario(spec: &str) -> Result<Scenario, CliError> {
    match spec.strip_prefix("bundled:") {
        Some(name) => Ok(Scenario::bundled(name)?),
        None => Ok(Scenario::load(Path::new(spec))?),
    }
}

fn out_dir(out: Option<PathBuf>, scenario: &Scenario) -> PathBuf {
    out.unwrap_or_else(|| scenario.config.output.directory.clone())
}

fn solve(config: &str, out: Option<PathBuf>, iters: Option<usize>) -> Result<(), CliError> {
    let scenario = load_scenario(config)?;
    let dir = out_dir(out, &scenario);
    let result = scenario.solve(&ClarabelAdapter::default(), iters)?;
    let policy = result.policy.to_json().map_err(|e| CliError::Numeric(e.to_string()))?;
    write_file(&dir.join("policy.json"), &policy)?;
    write_file(&dir.join("iterations.jsonl"), &records_to_jsonl(&result.records))?;
    for r in &result.records {
        match r.surrogate {
            Some(s) => println!("iteration {}: objective {:.6e}, surrogate {s:.6e}", r.iteration, r.objective),
            None => println!("iteration {}: objective {:.6e}", r.iteration, r.objective),
        }
    }
    println!("termination: {:?}; wrote {}", result.termination, dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    config: &str,
    policy: Option<PathBuf>,
    out: Option<PathBuf>,
    trials: Option<usize>,
    seed: Option<u64>,
    open_loop: bool,
    csv: bool,
) -> Result<(), CliError> {
    let scenario = load_scenario(config)?;
    let dir = out_dir(out, &scenario);
    let policy = match (policy, open_loop) {
        (_, true) => scenario.open_loop_policy(),
        (Some(path), false) => {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            FeedbackPolicy::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        (None, false) => return Err(CliError::Config("--policy is required unless --open-loop is given".into())),
    };
    let mut mc = scenario.config.monte_carlo.clone();
    if let Some(t) = trials {
        mc.trials = t;
    }
    if let Some(s) = seed {
        mc.seed = s;
    }
    let label = if open_loop { "open_loop" } else { "closed_loop" };
    let report = scenario.simulate(&policy, &mc, label)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Numeric(e.to_string()))?;
    write_file(&dir.join("report.json"), &json)?;
    if csv {
        mc.record_dense = true;
        let outputs = scenario.simulate_trials(&policy, &mc)?;
        let path = dir.join("trials.csv");
        export::write_trials(&path, &outputs).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    summarize(&report);
    println!("wrote {}", dir.display());
    Ok(())
}

fn summarize(report: &McReport) {
    println!(
        "{}: {} of {} trials succeeded",
        report.label, report.successes, report.trials
    );
    for c in &report.constraints {
        if c.violations > 0 {
            println!(
                "  {}: violation rate {:.4} (95% CI {:.4}..{:.4}, allowed {})",
                c.name, c.rate, c.ci_low, c.ci_high, c.allowed
            );
        }
    }
    if let Some(t) = &report.terminal {
        for (q, v) in &t.percentiles {
            println!("  {} p{q:.0}: {v:.3}", t.name);
        }
        if t.excluded > 0 {
            println!("  {} trials excluded (functional undefined)", t.excluded);
        }
    }
}

fn report(paths: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(io_err(p))?;
        let r: McReport =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    for name in export::write_report_csvs(out, &reports).map_err(|e| CliError::Io(e.to_string()))? {
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { config, out, iters } => solve(&config, out, iters),
        Command::Simulate {
            config,
            policy,
            out,
            trials,
            seed,
            open_loop,
            csv,
        } => simulate(&config, policy, out, trials, seed, open_loop, csv),
        Command::Report { reports, out } => report(&reports, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
