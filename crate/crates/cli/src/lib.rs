//! The `flowtrace` command line: ingest and audit telemetry, map the value
//! stream, compute DORA metrics, validate GQM registries, prioritize
//! automation candidates, evaluate interventions, simulate pipelines, and
//! compose a summary report.
//!
//! Every subcommand writes into the output directory. Exit codes: 0 on
//! success, 1 when validation fails (audit gate, GQM violations), 2 on
//! unreadable or malformed input.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig, Settings};
use flowtrace_core::telemetry::LogFormat;

#[derive(Debug, Parser)]
#[command(name = "flowtrace", version, about = "Delivery analytics over event logs")]
pub struct Cli {
    #[command(flatten)]
    pub flags: Flags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    /// JSON Lines, one record per line.
    #[value(alias = "jsonl")]
    Json,
    Csv,
}

impl From<FormatArg> for LogFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => LogFormat::Jsonl,
            FormatArg::Csv => LogFormat::Csv,
        }
    }
}

/// Options shared by all subcommands; each overrides the config key of the
/// same name.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Event log (JSON Lines or CSV).
    #[arg(long, global = true)]
    pub log: Option<PathBuf>,
    /// GQM registry JSON.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    /// Automation candidates JSON.
    #[arg(long, global = true)]
    pub candidates: Option<PathBuf>,
    /// Simulation scenario JSON.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Minimum observability fraction for the audit gate.
    #[arg(long, global = true)]
    pub gate_threshold: Option<f64>,
    /// Confidence below which candidates go to a pilot.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub budget: Option<f64>,
    /// Format of event logs written by `ingest` and `simulate`; input logs
    /// are read by extension (`.csv`, else JSON Lines).
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
    /// Current maturity level, 1 to 4.
    #[arg(long, global = true)]
    pub maturity: Option<u8>,
    /// Intervention date or timestamp.
    #[arg(long, global = true)]
    pub intervention: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and normalize an event log.
    Ingest,
    /// Data-quality audit and observability gate.
    Audit,
    /// Activity statistics, flow efficiency, and waste inventory.
    Vsm,
    /// Deployment frequency, lead time, MTTR, change failure rate.
    Dora,
    /// GQM registry operations.
    Gqm {
        #[command(subcommand)]
        action: GqmAction,
    },
    /// Score, gate, and select automation candidates.
    Prioritize,
    /// Estimate registry metrics around an intervention.
    Evaluate,
    /// Run a simulation scenario.
    Simulate,
    /// Compose emitted artifacts into one summary.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum GqmAction {
    /// Check tuple completeness and references.
    Validate,
    /// Render the registry as a plain-text GQM form.
    Template,
}

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// The inputs were analyzed and did not pass (exit 1).
    Validation(String),
    /// The inputs could not be read or made no sense (exit 2).
    Input(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Input(_) => 2,
        }
    }
}

pub fn settings(flags: &Flags) -> anyhow::Result<Settings> {
    let cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        log: flags.log.clone(),
        registry: flags.registry.clone(),
        candidates: flags.candidates.clone(),
        scenario: flags.scenario.clone(),
        out: flags.out.clone(),
        seed: flags.seed,
        format: flags.format.map(LogFormat::from),
        gate_threshold: flags.gate_threshold,
        gamma: flags.gamma,
        budget: flags.budget,
        maturity: flags.maturity,
        intervention: flags.intervention.clone(),
    };
    Settings::resolve(cfg, overrides)
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let s = settings(&cli.flags)?;
    for w in s.windows.warnings() {
        eprintln!("warning: {w}");
    }
    match &cli.command {
        Command::Ingest => commands::ingest(&s),
        Command::Audit => commands::audit(&s),
        Command::Vsm => commands::vsm(&s),
        Command::Dora => commands::dora(&s),
        Command::Gqm { action: GqmAction::Validate } => commands::gqm_validate(&s),
        Command::Gqm { action: GqmAction::Template } => commands::gqm_template(&s),
        Command::Prioritize => commands::prioritize(&s),
        Command::Evaluate => commands::evaluate(&s),
        Command::Simulate => commands::simulate(&s),
        Command::Report => report::report(&s),
    }
}

/// Parses `args` (program name first), runs, and reports errors on stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(msg) => eprintln!("validation failed: {msg}"),
                Failure::Input(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
