use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecgbench::pipeline::{run_stages, BenchmarkConfig, Pipeline, Stage};

#[derive(Parser)]
#[command(name = "ecgbench", version, about = "Benchmark ECG backbones on a declarative config")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Check the config and referenced files without computing anything
    Validate(Common),
    /// Generate or import the dataset into the output directory
    PrepareData(Common),
    /// Pretrain or initialize every model
    Pretrain(Common),
    /// Train every (model, protocol) pair and write test predictions
    Run(Common),
    /// Bootstrap metrics, significance matrices and ranks
    Stats(Common),
    /// Data-size scaling runs, power-law fits and label efficiency
    Scaling(Common),
    /// Assemble report.json, report.md and radar.csv
    Report(Common),
    /// Every stage into an empty output directory
    All(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed everywhere
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Allow `all` to replace an earlier output directory
    #[arg(long)]
    overwrite: bool,
    /// Print the files each stage would read and write
    #[arg(long)]
    dry_run: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(verb: Verb) -> ecgbench::Result<()> {
    let (common, stages): (Common, Vec<Stage>) = match verb {
        Verb::Validate(c) => (c, Vec::new()),
        Verb::PrepareData(c) => (c, vec![Stage::PrepareData]),
        Verb::Pretrain(c) => (c, vec![Stage::Pretrain]),
        Verb::Run(c) => (c, vec![Stage::Run]),
        Verb::Stats(c) => (c, vec![Stage::Stats]),
        Verb::Scaling(c) => (c, vec![Stage::Scaling]),
        Verb::Report(c) => (c, vec![Stage::Report]),
        Verb::All(c) => (c, Stage::ALL.to_vec()),
    };
    let all = stages.len() == Stage::ALL.len();
    let mut cfg = BenchmarkConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    let pipeline = Pipeline::new(cfg)?;
    if common.dry_run {
        println!("{}", serde_json::to_string_pretty(&pipeline.plan(&stages))?);
        return Ok(());
    }
    if stages.is_empty() {
        println!("config is valid");
        return Ok(());
    }
    if all && !common.overwrite {
        pipeline.require_fresh_output()?;
    }
    run_stages(&pipeline, &stages, all && common.overwrite)
}
