//! Command-line driver: loads scenario documents, clears them with the
//! requested method, generates synthetic feeders, and runs scalability
//! sweeps. Exit codes: 0 success, 2 invalid input, 3 iteration or round
//! budget exhausted, 1 anything else.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use peerclear_core::scenario::{
    builtin_scenario, generate_feeder, load_scenario, run_scenario, save_scenario, FeederSpec,
    Method, RunOptions, RunSummary, ScenarioError, ScenarioSpec, StepSummary,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "peerclear",
    version,
    about = "Peer-to-peer electricity market clearing",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clear the first step of a scenario.
    Clear(RunArgs),
    /// Run every step of a scenario in sequence.
    Simulate(RunArgs),
    /// Clear analytically (exact solution, desk-scale instances only).
    Oracle(OracleArgs),
    /// Run a scenario whose learning block adjusts prosumer parameters.
    Learn(RunArgs),
    /// Generate a synthetic feeder scenario document.
    FeederGen(FeederGenArgs),
    /// Time feeder instances of growing size.
    Sweep(SweepArgs),
    /// Write the bundled demonstration scenarios as editable JSON files.
    ExportScenarios(ExportArgs),
}

#[derive(Args)]
struct ScenarioSource {
    /// Scenario document to run.
    #[arg(long, value_name = "PATH", required_unless_present = "builtin",
          conflicts_with = "builtin")]
    config: Option<PathBuf>,
    /// Bundled demonstration scenario number (1-6).
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u8).range(1..=6))]
    builtin: Option<u8>,
    /// Replaces the scenario's RNG seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

impl ScenarioSource {
    fn load(&self) -> Result<ScenarioSpec, ScenarioError> {
        let mut spec = match (&self.config, self.builtin) {
            (Some(path), _) => load_scenario(path)?,
            (None, Some(n)) => builtin_scenario(n as usize).expect("range-checked"),
            (None, None) => unreachable!("clap enforces one source"),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        Ok(spec)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: ScenarioSource,
    /// Clearing method.
    #[arg(long, value_name = "METHOD", default_value = "admm", value_parser = parse_method)]
    method: Method,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Record every exchanged message (decentralized method only).
    #[arg(long)]
    trace_messages: bool,
    /// Replaces the scenario's iteration budget.
    #[arg(long, value_name = "N")]
    max_iter: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    source: ScenarioSource,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct FeederGenArgs {
    /// Node count.
    #[arg(long, default_value_t = 55)]
    nodes: usize,
    /// Net-exporting node count.
    #[arg(long, default_value_t = 25)]
    sellers: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output file for the generated scenario document.
    #[arg(long, value_name = "PATH", default_value = "feeder.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Feeder sizes to time, in prosumer counts.
    #[arg(long, value_delimiter = ',', default_values_t = [55usize, 165, 330])]
    sizes: Vec<usize>,
    /// RNG seed for every generated feeder.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Clearing method.
    #[arg(long, value_name = "METHOD", default_value = "admm", value_parser = parse_method)]
    method: Method,
    /// Output directory (per-size subdirectories plus sweep.csv).
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Directory for scenario1.json through scenario6.json.
    #[arg(long, value_name = "DIR", default_value = "scenarios")]
    out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_str(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<ScenarioError>()
                .map_or(1, ScenarioError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Clear(args) => {
            let mut spec = args.source.load()?;
            // Single-step clearing: drop everything past the first step.
            spec.steps.truncate(1);
            run_and_report(&spec, &args)
        }
        Command::Simulate(args) => {
            let spec = args.source.load()?;
            run_and_report(&spec, &args)
        }
        Command::Oracle(args) => {
            let spec = args.source.load()?;
            let options = RunOptions { method: Method::Oracle, ..RunOptions::default() };
            let summary = run_scenario(&spec, &args.out, &options)?;
            report(&summary, &args.out);
            Ok(())
        }
        Command::Learn(args) => {
            let spec = args.source.load()?;
            if spec.learning.is_none() {
                bail!(ScenarioError::Validation(
                    peerclear_core::scenario::ValidationError::Learning(
                        "scenario has no learning block".into(),
                    ),
                ));
            }
            run_and_report(&spec, &args)
        }
        Command::FeederGen(args) => {
            let feeder = FeederSpec {
                nodes: args.nodes,
                sellers: args.sellers,
                seed: args.seed,
                ..FeederSpec::default()
            };
            let spec = generate_feeder(&feeder)?;
            save_scenario(&spec, &args.out)?;
            println!(
                "wrote {} ({} prosumers, {} edges) to {}",
                spec.name,
                spec.prosumers.len(),
                spec.edges.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::Sweep(args) => sweep(&args),
        Command::ExportScenarios(args) => {
            std::fs::create_dir_all(&args.out)
                .with_context(|| format!("cannot create {}", args.out.display()))?;
            for number in 1..=6 {
                let spec = builtin_scenario(number).expect("bundled scenarios");
                let path = args.out.join(format!("scenario{number}.json"));
                save_scenario(&spec, &path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn run_and_report(spec: &ScenarioSpec, args: &RunArgs) -> anyhow::Result<()> {
    let options = RunOptions {
        method: args.method,
        trace_messages: args.trace_messages,
        max_iter: args.max_iter,
        ..RunOptions::default()
    };
    let summary = run_scenario(spec, &args.out, &options)?;
    report(&summary, &args.out);
    Ok(())
}

fn report(summary: &RunSummary, outdir: &Path) {
    println!("scenario {} (method {})", summary.scenario, summary.method);
    for step in &summary.steps {
        println!("  {}", step_line(step));
    }
    println!("outputs in {}", outdir.display());
}

fn step_line(step: &StepSummary) -> String {
    let trading = step.success.iter().filter(|&&s| s).count();
    let clusters: Vec<String> = step
        .clusters
        .iter()
        .map(|c| {
            let members: Vec<String> = c.members.iter().map(u32::to_string).collect();
            match c.price {
                Some(price) => format!("{{{}}} @ {price:.3}", members.join(",")),
                None => format!("{{{}}} mixed", members.join(",")),
            }
        })
        .collect();
    let convergence = if step.converged {
        format!("converged in {} iterations", step.iterations)
    } else {
        format!("stopped after {} iterations without converging", step.iterations)
    };
    let mut line = format!(
        "step {}: {convergence}; {trading}/{} prosumers trading",
        step.step,
        step.success.len()
    );
    if !clusters.is_empty() {
        line.push_str(&format!("; prices {}", clusters.join(", ")));
    }
    if let Some(messages) = step.total_messages {
        line.push_str(&format!("; {messages} messages"));
    }
    if let Some(learning) = &step.learning {
        if let Some(rounds) = learning.rounds {
            line.push_str(&format!("; learning took {rounds} adjustment rounds"));
        }
    }
    line
}

#[derive(Serialize)]
struct SweepRow {
    nodes: usize,
    sellers: usize,
    buyers: usize,
    edges: usize,
    iterations: usize,
    converged: bool,
    wall_ms: f64,
}

/// Times one feeder instance per requested size. Seller counts follow the
/// default 25-of-55 proportion.
fn sweep(args: &SweepArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let csv_path = args.out.join("sweep.csv");
    let mut writer = csv::Writer::from_path(&csv_path)
        .with_context(|| format!("cannot write {}", csv_path.display()))?;
    for &nodes in &args.sizes {
        let sellers = (nodes * 25 / 55).clamp(1, nodes.saturating_sub(1));
        let feeder =
            FeederSpec { nodes, sellers, seed: args.seed, ..FeederSpec::default() };
        let spec = generate_feeder(&feeder)?;
        let outdir = args.out.join(&spec.name);
        let options = RunOptions { method: args.method, ..RunOptions::default() };
        let started = Instant::now();
        let summary = run_scenario(&spec, &outdir, &options)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let step = &summary.steps[0];
        println!(
            "{} prosumers: {} iterations in {:.0} ms",
            nodes, step.iterations, wall_ms
        );
        writer.serialize(SweepRow {
            nodes,
            sellers,
            buyers: nodes - sellers,
            edges: spec.edges.len(),
            iterations: step.iterations,
            converged: step.converged,
            wall_ms,
        })?;
    }
    writer.flush()?;
    println!("timings in {}", csv_path.display());
    Ok(())
}
