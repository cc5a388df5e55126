use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use baffle_sim::harness::{
    emit_report, emit_sweep, read_report, render_text, run_experiment, sweep, ConfigBuilder, ExperimentConfig,
    ParamGrid, RoundRow, ScenarioSection, SweepSummary, TableFormat,
};

#[derive(Parser)]
#[command(name = "baffle-sim", version, about = "Federated-learning backdoor detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment.
    Run(RunArgs),
    /// Run a grid of experiments over look-back, quorum and data split.
    Sweep {
        #[command(flatten)]
        common: RunArgs,
        /// Comma-separated look-back windows.
        #[arg(long, value_delimiter = ',')]
        lookbacks: Vec<usize>,
        /// Comma-separated quorum thresholds.
        #[arg(long, value_delimiter = ',')]
        quorums: Vec<usize>,
        /// Comma-separated client data shares.
        #[arg(long, value_delimiter = ',')]
        client_shares: Vec<f64>,
    },
    /// Re-render an existing summary document.
    Report {
        /// A summary-*.json or sweep-*.json file.
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Print the effective configuration as TOML.
    Config(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (TOML with dotted keys), layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario preset; replaces the whole scenario section before `--set`.
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override a config value, e.g. `--set defense.quorum=4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Per-round table format.
    #[arg(long, value_enum, default_value_t = Table::Csv)]
    table: Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Stable,
    Early,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    Csv,
    Tsv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
    Csv,
}

impl RunArgs {
    fn config(&self) -> baffle_sim::Result<ExperimentConfig> {
        let mut builder = ConfigBuilder::new();
        if let Some(path) = &self.config {
            builder = builder.merge_file(path)?;
        }
        if let Some(s) = self.scenario {
            let mut c = builder.build()?;
            c.scenario = match s {
                Scenario::Stable => ScenarioSection::stable(),
                Scenario::Early => ScenarioSection::early(),
            };
            builder = ConfigBuilder::from_config(&c);
        }
        for o in &self.overrides {
            builder = builder.set(o)?;
        }
        if let Some(seed) = self.seed {
            builder = builder.set(&format!("master_seed={seed}"))?;
        }
        builder.build()
    }

    fn table(&self) -> TableFormat {
        match self.table {
            Table::Csv => TableFormat::Csv,
            Table::Tsv => TableFormat::Tsv,
        }
    }
}

fn run(cli: Cli) -> baffle_sim::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.config()?;
            let report = run_experiment(&config)?;
            let files = emit_report(&report, args.table(), &args.out)?;
            out(&render_text(&report));
            out(&format!("summary: {}\n", files.summary.display()));
        }
        Command::Sweep { common, lookbacks, quorums, client_shares } => {
            let config = common.config()?;
            let grid = ParamGrid { lookbacks, quorums, client_shares };
            let entries = sweep(&config, &grid)?;
            let path = emit_sweep(&config, &grid, &entries, common.table(), &common.out)?;
            for e in &entries {
                out(&render_text(&e.report));
            }
            out(&format!("sweep summary: {}\n", path.display()));
        }
        Command::Report { input, format } => render_existing(&input, format)?,
        Command::Config(args) => {
            let config = args.config()?;
            out(&toml::to_string(&config).expect("config serializes"));
            eprintln!("# config hash {}", config.hash());
        }
    }
    Ok(())
}

fn render_existing(input: &PathBuf, format: ReportFormat) -> baffle_sim::Result<()> {
    let text =
        std::fs::read_to_string(input).map_err(|source| baffle_sim::Error::Io { path: input.clone(), source })?;
    if let Ok(summary) = serde_json::from_str::<SweepSummary>(&text) {
        match format {
            ReportFormat::Json => out(&(serde_json::to_string_pretty(&summary).expect("serializes") + "\n")),
            ReportFormat::Text | ReportFormat::Csv => {
                let mut w = csv::Writer::from_writer(std::io::stdout());
                for row in &summary.rows {
                    w.serialize(row)
                        .map_err(|e| baffle_sim::Error::Parse { path: input.clone(), message: e.to_string() })?;
                }
                w.flush().ok();
            }
        }
        return Ok(());
    }
    let report = read_report(input)?;
    match format {
        ReportFormat::Text => out(&render_text(&report)),
        ReportFormat::Json => out(&(serde_json::to_string_pretty(&report).expect("serializes") + "\n")),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for rep in &report.repetitions {
                for r in &rep.rounds {
                    w.serialize(RoundRow::from(r))
                        .map_err(|e| baffle_sim::Error::Parse { path: input.clone(), message: e.to_string() })?;
                }
            }
            w.flush().ok();
        }
    }
    Ok(())
}

/// Writes to stdout; a closed pipe ends the process quietly.
fn out(text: &str) {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
