use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use reflectrec::config::RunConfig;
use reflectrec::llm::BackendKind;
use reflectrec::pipeline::{Run, Stage};
use reflectrec::synthetic;

#[derive(Parser)]
#[command(name = "reflectrec", version, about = "Multi-perspective reflection pipeline for sequential recommendation")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Http,
    Mock,
}

#[derive(Subcommand)]
enum Command {
    Ingest,
    Split,
    TrainCf,
    Cluster,
    PredictOffline,
    /// Round-0 reflection generation.
    Reflect,
    /// Scores the round-0 reflections.
    Score,
    /// Demonstration-driven rounds.
    Iterate,
    Refine,
    TrainBandit,
    Eval,
    Report,
    /// Every stage in order, skipping the ones already complete.
    Run,
    /// Writes a synthetic catalog.jsonl and interactions.jsonl.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        users: usize,
    },
    /// Prints the effective configuration as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(b) = cli.backend {
        config.llm.kind = match b {
            Backend::Http => BackendKind::Http,
            Backend::Mock => BackendKind::Mock,
        };
    }
    Ok(config)
}

fn stage_of(command: &Command) -> Option<Stage> {
    Some(match command {
        Command::Ingest => Stage::Ingest,
        Command::Split => Stage::Split,
        Command::TrainCf => Stage::TrainCf,
        Command::Cluster => Stage::Cluster,
        Command::PredictOffline => Stage::PredictOffline,
        Command::Reflect => Stage::Reflect,
        Command::Score => Stage::Score,
        Command::Iterate => Stage::Iterate,
        Command::Refine => Stage::Refine,
        Command::TrainBandit => Stage::TrainBandit,
        Command::Eval => Stage::Eval,
        Command::Report => Stage::Report,
        _ => return None,
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Synth { out, users } => {
            let cfg = synthetic::SyntheticConfig {
                users: *users,
                seed: config.seed,
                ..Default::default()
            };
            let corpus = synthetic::generate(&cfg)?;
            synthetic::write_jsonl(&corpus, out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} users and {} items to {}", corpus.sequences().len(), corpus.items().len(), out.display());
        }
        Command::ShowConfig => print!("{}", config.to_toml()),
        Command::Run => {
            let mut run = Run::open(&cli.run_dir, config)?;
            for stage in run.run_until(Stage::Report)? {
                eprintln!("ran {stage}");
            }
            println!("{}", serde_json::to_string_pretty(&run.report().map_err(anyhow::Error::msg)?)?);
        }
        command => {
            let stage = stage_of(command).expect("stage command");
            let mut run = Run::open(&cli.run_dir, config)?;
            run.run_stage(stage)?;
            eprintln!("ran {stage}");
            if stage == Stage::Report {
                print!("{}", std::fs::read_to_string(cli.run_dir.join("report.csv"))?);
            }
        }
    }
    Ok(())
}
