use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mia_audit::pipeline::{ErrorRecord, Overrides, Pipeline, PipelineConfig, Stage};
use serde_json::json;

/// Paraphrase, redact, score and audit a labeled corpus.
#[derive(Parser)]
#[command(name = "mia-audit", version)]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, short, global = true, default_value = "mia-audit.toml")]
    config: PathBuf,
    /// Output directory, overriding `paths.output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    fpr_target: Option<f64>,
    #[arg(long, global = true)]
    k_percent: Option<f64>,
    /// Re-run stages whose cached outputs are current.
    #[arg(long, global = true)]
    force: bool,
    /// Log progress to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Parse the corpus into sectioned documents.
    Parse,
    /// Generate semantics-preserving rewrites.
    Sage,
    /// Redact facts from the rewrites.
    SageR,
    /// Redact facts from the originals.
    FtF,
    /// Collect token scores for each configured run.
    Score,
    /// Run the attack suite over the score runs.
    Attack,
    /// Render the result table.
    Eval,
    /// Robustness audit of membership decisions.
    Audit,
    /// Every stage in order.
    All,
}

fn stages(cmd: Command, pipeline: &Pipeline) -> Vec<Stage> {
    match cmd {
        Command::Parse => vec![Stage::Parse],
        Command::Sage => vec![Stage::Sage],
        Command::SageR => vec![Stage::SageR],
        Command::FtF => vec![Stage::FtF],
        Command::Score => vec![Stage::Score],
        Command::Attack => vec![Stage::Attack],
        Command::Eval => vec![Stage::Eval],
        Command::Audit => vec![Stage::Audit],
        Command::All => pipeline.all_stages(),
    }
}

fn run(cli: &Cli) -> mia_audit::Result<serde_json::Value> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    cfg.apply(&Overrides {
        output: cli.out.clone(),
        parallelism: cli.parallelism,
        seed: cli.seed,
        fpr_target: cli.fpr_target,
        k_percent: cli.k_percent,
    });
    let pipeline = Pipeline::new(cfg)?.force(cli.force);
    let summary = pipeline.run(&stages(cli.command, &pipeline))?;
    Ok(serde_json::to_value(summary)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();

    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": ErrorRecord::from(&e) }));
            ExitCode::FAILURE
        }
    }
}
