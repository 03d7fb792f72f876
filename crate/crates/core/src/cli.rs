//! Command-line front end: scenario runs, comparisons, topology inspection and
//! synthetic scenario generation.
//!
//! Every run writes the effective configuration next to its reports so the
//! output directory alone is enough to repeat it.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::consensus::{self, ConsensusError, RunOutcome};
use crate::data::report::{Mode, Report, RunSummary};
use crate::data::scenario::{Epsilon, Overrides, ProfilesConfig, ScenarioBundle, ScenarioConfig, SyntheticConfig};
use crate::data::{self, ArchetypeMix, DataError, TopologyConfig};
use crate::localopt::{self, LocalOptError};
use crate::model::Schedule;
use crate::topology;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const PROFILES_FILE: &str = "profiles.csv";
pub const SCENARIO_FILE: &str = "scenario.toml";

#[derive(Debug, Parser)]
#[command(name = "transactive", version, about = "Peer-to-peer transactive energy market simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve every agent alone, without trading.
    Standalone(RunArgs),
    /// Clear the market by price/mismatch consensus.
    Coordinated(RunArgs),
    /// Run both modes and report per-agent cost reductions.
    Compare(RunArgs),
    /// Print a communication graph, its weights and spectral gap.
    Topology(TopologyArgs),
    /// Generate a scenario file with synthetic profiles.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
    /// Suppress the console summary.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OverrideArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate, or "auto".
    #[arg(long)]
    pub epsilon: Option<Epsilon>,
    /// complete, star[:hub] or ring[:k].
    #[arg(long)]
    pub topology: Option<TopologyConfig>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// Worker threads for the consensus phases.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl From<&OverrideArgs> for Overrides {
    fn from(a: &OverrideArgs) -> Self {
        Overrides {
            seed: a.seed,
            epsilon: a.epsilon,
            topology: a.topology.clone(),
            max_rounds: a.max_rounds,
            threads: a.threads,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TopologyArgs {
    /// complete, star[:hub] or ring[:k]; taken from the scenario when absent.
    #[arg(long)]
    pub topology: Option<TopologyConfig>,
    /// Number of agents; taken from the scenario when absent.
    #[arg(long)]
    pub agents: Option<usize>,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Also write the weights as JSON into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory for the scenario and its profiles.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Base scenario whose settings are kept; defaults otherwise.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub agents: Option<usize>,
    /// Slots in the day.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Fraction of high-renewable sellers.
    #[arg(long)]
    pub sellers: Option<f64>,
    /// Fraction of zero-renewable buyers.
    #[arg(long)]
    pub buyers: Option<f64>,
    #[command(flatten)]
    pub overrides: OverrideArgs,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Agent(#[from] LocalOptError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("{0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error("consensus did not converge within {rounds} rounds (results written to {out})")]
    NotConverged { rounds: usize, out: PathBuf },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Output { .. } => EXIT_FAILURE,
            CliError::Data(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::Agent(e) | CliError::Consensus(ConsensusError::Agent(e)) => agent_code(e),
            CliError::Consensus(ConsensusError::Input(_) | ConsensusError::Topology(_)) => EXIT_CONFIG,
            CliError::Consensus(ConsensusError::ThreadPool(_)) => EXIT_FAILURE,
            CliError::NotConverged { .. } => EXIT_NOT_CONVERGED,
        }
    }
}

fn agent_code(e: &LocalOptError) -> i32 {
    match e {
        LocalOptError::Infeasible { .. } => EXIT_INFEASIBLE,
        LocalOptError::Model(_) | LocalOptError::Input(_) => EXIT_CONFIG,
        LocalOptError::Qp(_) | LocalOptError::NotConverged { .. } => EXIT_FAILURE,
    }
}

/// Runs one parsed invocation, writing the console summary to `console`.
pub fn execute(cli: &Cli, console: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Standalone(a) => cmd_standalone(a, console),
        Command::Coordinated(a) => cmd_coordinated(a, console),
        Command::Compare(a) => cmd_compare(a, console),
        Command::Topology(a) => cmd_topology(a, console),
        Command::Synth(a) => cmd_synth(a, console),
    }
}

fn prepare(args: &RunArgs) -> Result<ScenarioBundle, CliError> {
    let bundle = data::load_scenario(&args.scenario, &Overrides::from(&args.overrides))?;
    create_dir(&args.out)?;
    write_file(&args.out.join(CONFIG_FILE), bundle.config.to_toml()?.as_bytes())?;
    Ok(bundle)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.into(), source })
}

/// Failures while writing results are not configuration errors.
fn output(e: DataError) -> CliError {
    match e {
        DataError::Io { path, source } => CliError::Output { path: path.into(), source },
        e => e.into(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Output { path: path.into(), source })
}

fn ids(bundle: &ScenarioBundle) -> Vec<u32> {
    bundle.specs.iter().map(|s| s.id).collect()
}

fn say(console: &mut dyn Write, quiet: bool, text: &str) {
    if !quiet {
        let _ = console.write_all(text.as_bytes());
    }
}

/// Standalone benchmark costs and schedules.
pub fn standalone(bundle: &ScenarioBundle) -> Result<(Vec<f64>, Vec<Schedule>), LocalOptError> {
    let mut costs = Vec::with_capacity(bundle.specs.len());
    let mut schedules = Vec::with_capacity(bundle.specs.len());
    for spec in &bundle.specs {
        let sol = localopt::solve_ucmp(spec, &bundle.solver)?;
        costs.push(sol.cost);
        schedules.push(sol.schedule);
    }
    Ok((costs, schedules))
}

pub fn coordinated(bundle: &ScenarioBundle) -> Result<RunOutcome, ConsensusError> {
    consensus::run(&bundle.specs, &bundle.weights, &bundle.consensus, &bundle.solver)
}

fn add_outcome(report: &mut Report, bundle: &ScenarioBundle, outcome: &RunOutcome) {
    report.run = Some(RunSummary {
        converged: outcome.converged(),
        rounds_used: outcome.trace.rounds_used,
        epsilon: bundle.consensus.epsilon,
        clearing_residual_kw: outcome.clearing_residual(),
    });
    report.push_series("coordinated.price", None, None, outcome.mean_lambda());
    let h = outcome.schedules.first().map_or(0, Schedule::horizon);
    let pool: Vec<f64> = (0..h).map(|t| outcome.schedules.iter().map(|s| s.p_et[t]).sum()).collect();
    report.push_series("coordinated.clearing_kw", None, None, pool);
    report.push_schedules(Mode::Coordinated, &ids(bundle), &outcome.schedules);
    report.push_trace(&outcome.trace);
}

fn finish_run(args: &RunArgs, outcome: &RunOutcome, report: &Report) -> Result<(), CliError> {
    data::write_trace(&outcome.trace, &args.out.join(TRACE_FILE)).map_err(output)?;
    data::write_report(report, &args.out.join(REPORT_FILE)).map_err(output)?;
    if outcome.converged() {
        Ok(())
    } else {
        Err(CliError::NotConverged { rounds: outcome.trace.rounds_used, out: args.out.clone() })
    }
}

fn run_line(outcome: &RunOutcome) -> String {
    format!(
        "{} after {} rounds, clearing residual {:.3e} kW\n",
        if outcome.converged() { "converged" } else { "NOT converged" },
        outcome.trace.rounds_used,
        outcome.clearing_residual()
    )
}

pub fn cmd_standalone(args: &RunArgs, console: &mut dyn Write) -> Result<(), CliError> {
    let bundle = prepare(args)?;
    let (costs, schedules) = standalone(&bundle)?;
    let ids = ids(&bundle);
    let mut report = Report::single(Mode::Standalone, &ids, &costs)?;
    report.push_schedules(Mode::Standalone, &ids, &schedules);
    data::write_report(&report, &args.out.join(REPORT_FILE)).map_err(output)?;
    let mut text = String::from("agent  standalone_cost\n");
    for (id, c) in ids.iter().zip(&costs) {
        let _ = writeln!(text, "{id:>5}  {c:>15.6}");
    }
    let _ = writeln!(text, "total  {:>15.6}", costs.iter().sum::<f64>());
    say(console, args.quiet, &text);
    Ok(())
}

pub fn cmd_coordinated(args: &RunArgs, console: &mut dyn Write) -> Result<(), CliError> {
    let bundle = prepare(args)?;
    let outcome = coordinated(&bundle)?;
    let ids = ids(&bundle);
    let mut report = Report::single(Mode::Coordinated, &ids, &outcome.costs)?;
    add_outcome(&mut report, &bundle, &outcome);
    let mut text = run_line(&outcome);
    let _ = writeln!(text, "agent  coordinated_cost");
    for (id, c) in ids.iter().zip(&outcome.costs) {
        let _ = writeln!(text, "{id:>5}  {c:>16.6}");
    }
    say(console, args.quiet, &text);
    finish_run(args, &outcome, &report)
}

pub fn cmd_compare(args: &RunArgs, console: &mut dyn Write) -> Result<(), CliError> {
    let bundle = prepare(args)?;
    let (base, base_schedules) = standalone(&bundle)?;
    let outcome = coordinated(&bundle)?;
    let ids = ids(&bundle);
    let mut report = Report::costs(&ids, &base, &outcome.costs)?;
    report.push_schedules(Mode::Standalone, &ids, &base_schedules);
    add_outcome(&mut report, &bundle, &outcome);
    let mut text = run_line(&outcome);
    let _ = writeln!(text, "agent  standalone   coordinated  reduction");
    for a in &report.agents {
        let _ = writeln!(
            text,
            "{:>5}  {:>10.4}  {:>12.4}  {:>9}",
            a.id,
            a.standalone.unwrap_or(f64::NAN),
            a.coordinated.unwrap_or(f64::NAN),
            a.reduction_pct.map(|r| r.to_string()).unwrap_or_default()
        );
    }
    if let Some(s) = &report.system {
        let _ = writeln!(
            text,
            "total  {:>10.4}  {:>12.4}  {:>9}",
            s.standalone_total.unwrap_or(f64::NAN),
            s.coordinated_total.unwrap_or(f64::NAN),
            s.reduction_pct.map(|r| r.to_string()).unwrap_or_default()
        );
    }
    say(console, args.quiet, &text);
    finish_run(args, &outcome, &report)
}

/// Graph, weights and spectral gap as printed by the `topology` command.
pub fn describe_topology(kind: &TopologyConfig, n: usize) -> Result<String, CliError> {
    let (graph, w) = kind.build(n)?;
    let mut text = String::new();
    let _ = writeln!(text, "topology {kind}, {n} agents, {} edges", graph.edge_count());
    let _ = writeln!(text, "adjacency");
    for i in 0..n {
        let row: Vec<&str> = (0..n).map(|j| if graph.adjacency[i][j] { "1" } else { "0" }).collect();
        let _ = writeln!(text, "  {}", row.join(" "));
    }
    let _ = writeln!(text, "weights");
    for row in &w.w {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(text, "  {}", cells.join(" "));
    }
    let rows: Vec<String> = w.w.iter().map(|r| format!("{:.6}", r.iter().sum::<f64>())).collect();
    let cols: Vec<String> = (0..n).map(|j| format!("{:.6}", w.w.iter().map(|r| r[j]).sum::<f64>())).collect();
    let _ = writeln!(text, "row sums     {}", rows.join(" "));
    let _ = writeln!(text, "column sums  {}", cols.join(" "));
    let _ = writeln!(text, "spectral gap {:.6}", topology::spectral_gap(&w));
    Ok(text)
}

pub fn cmd_topology(args: &TopologyArgs, console: &mut dyn Write) -> Result<(), CliError> {
    let config = match &args.scenario {
        Some(path) => Some(ScenarioConfig::load(path)?),
        None => None,
    };
    let kind = args
        .topology
        .clone()
        .or_else(|| config.as_ref().map(|c| c.topology.clone()))
        .unwrap_or_default();
    let n = match (args.agents, &config, &args.scenario) {
        (Some(n), _, _) => n,
        (None, Some(c), Some(path)) if c.agents.is_empty() => {
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            c.profiles(&base)?.agents.len()
        }
        (None, Some(c), _) => c.agents.len(),
        _ => return Err(CliError::Config("give --agents or --scenario".into())),
    };
    let text = describe_topology(&kind, n)?;
    if let Some(dir) = &args.out {
        let (_, w) = kind.build(n)?;
        create_dir(dir)?;
        let json = serde_json::json!({
            "format_version": data::FORMAT_VERSION,
            "topology": kind.to_string(),
            "agents": n,
            "weights": w.w,
            "spectral_gap": topology::spectral_gap(&w),
        });
        write_file(&dir.join("topology.json"), format!("{json}\n").as_bytes())?;
    }
    say(console, args.quiet, &text);
    Ok(())
}

/// Writes a scenario that reads a freshly generated profile file.
pub fn cmd_synth(args: &SynthArgs, console: &mut dyn Write) -> Result<(), CliError> {
    let mut config = match &args.scenario {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    config.apply(&Overrides::from(&args.overrides));
    if let Some(h) = args.horizon {
        config.horizon.slots = h;
    }
    let mut synth = config.synthetic.take().unwrap_or_default();
    if let Some(n) = args.agents {
        synth.agents = n;
    }
    let mix = &mut synth.mix;
    if let Some(s) = args.sellers {
        mix.sellers = s;
    }
    if let Some(b) = args.buyers {
        mix.buyers = b;
    }
    check_mix(&synth)?;
    let table = data::synth_profiles(config.seed, synth.agents, config.horizon.slots, synth.mix, &synth.params);
    config.profiles = Some(ProfilesConfig { path: PROFILES_FILE.into() });
    config.resolve_with(&table)?;
    create_dir(&args.out)?;
    data::profiles::write_profiles(&table, &args.out.join(PROFILES_FILE)).map_err(output)?;
    write_file(&args.out.join(SCENARIO_FILE), config.to_toml()?.as_bytes())?;
    say(
        console,
        args.quiet,
        &format!(
            "wrote {} agents x {} slots to {}\n",
            synth.agents,
            config.horizon.slots,
            args.out.join(SCENARIO_FILE).display()
        ),
    );
    Ok(())
}

fn check_mix(s: &SyntheticConfig) -> Result<(), CliError> {
    let ArchetypeMix { sellers, buyers } = s.mix;
    if s.agents == 0 {
        return Err(CliError::Config("synthetic scenario needs at least one agent".into()));
    }
    if !(0.0..=1.0).contains(&sellers) || !(0.0..=1.0).contains(&buyers) || sellers + buyers > 1.0 + 1e-12 {
        return Err(CliError::Config(format!(
            "archetype fractions must lie in [0, 1] and sum to at most 1, got sellers {sellers}, buyers {buyers}"
        )));
    }
    Ok(())
}
