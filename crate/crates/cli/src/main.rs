use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recall_probe::config::{load_config, Overrides};
use recall_probe::pipeline::{default_backend, open_for_plan, Command, CommandOutcome, Experiment};

/// Run recall experiments: sample ON/OFF answers, grade them, audit the facts
/// in reasoning traces and derive pass@k, Ω and selection statistics.
#[derive(Parser)]
#[command(name = "recall-probe", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate samples for every configured variant.
    Sample(Common),
    /// Grade stored answers with the autorater.
    Grade(Common),
    /// Extract and filter facts from ON traces.
    Facts(Common),
    /// Verify extracted facts and label each trace.
    Verify(Common),
    /// Write pass@k curves and Ω.
    Estimate(Common),
    /// Write pooled, within-question and complexity-split statistics.
    Analyze(Common),
    /// Write the trace-selection simulation.
    Select(Common),
    /// Write the markdown report.
    Report(Common),
    /// Re-derive every analysis artefact from stored data without backend calls.
    Replay(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(short, long)]
    config: PathBuf,
    /// Print the call plan without touching the network or the run store.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<u32>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Cmd {
    fn split(self) -> (Command, Common) {
        match self {
            Cmd::Sample(c) => (Command::Sample, c),
            Cmd::Grade(c) => (Command::Grade, c),
            Cmd::Facts(c) => (Command::Facts, c),
            Cmd::Verify(c) => (Command::Verify, c),
            Cmd::Estimate(c) => (Command::Estimate, c),
            Cmd::Analyze(c) => (Command::Analyze, c),
            Cmd::Select(c) => (Command::Select, c),
            Cmd::Report(c) => (Command::Report, c),
            Cmd::Replay(c) => (Command::Replay, c),
        }
    }
}

fn print_outcome(outcome: &CommandOutcome) {
    println!(
        "{}: {} completed, {} already done, {} skipped, {} deferred",
        outcome.command, outcome.completed, outcome.already_done, outcome.skipped, outcome.deferred
    );
    for path in &outcome.outputs {
        println!("  wrote {}", path.display());
    }
    for note in &outcome.notes {
        println!("  note: {note}");
    }
}

fn run(cli: Cli) -> Result<i32, Box<dyn std::error::Error>> {
    let (command, common) = cli.command.split();
    let overrides = Overrides {
        run_id: common.run_id,
        output_dir: common.output_dir,
        n_samples: common.n_samples,
        concurrency: common.concurrency,
        seed: common.seed,
    };
    let loaded = load_config(&common.config, &overrides)?;
    if common.dry_run {
        for line in open_for_plan(&loaded)?.plan(command)? {
            println!("{line}");
        }
        return Ok(0);
    }
    let experiment = if command.uses_backends() {
        Experiment::open(&loaded, Some(&default_backend))?
    } else {
        Experiment::open(&loaded, None)?
    };
    let outcome = experiment.run(command)?;
    print_outcome(&outcome);
    if command.uses_backends() {
        println!("  backend calls: {}", experiment.backend_calls());
    }
    if outcome.skipped > 0 {
        println!("  skip log: {}", experiment.store().root().join("skips.jsonl").display());
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("RECALL_PROBE_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
