use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sep_core::pipeline::{run, validate_config, Outcome, Stage};

/// Run stages of the household SEP prediction workflow.
#[derive(Parser, Debug)]
#[command(name = "sep-pipeline", version)]
struct Cli {
    /// synth, sep, split, preprocess, train-extractor, extract, fit, explain, reduce, report or all
    stage: String,
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long)]
    force: bool,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = std::env::var("SEP_PIPELINE_THREADS").ok().and_then(|v| v.parse().ok());
    sep_core::par::init_threads(threads);

    let result = cli.stage.parse::<Stage>().and_then(|stage| {
        let mut cfg = validate_config(&cli.config)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        run(stage, &cfg, cli.force)
    });
    match result {
        Ok(done) => {
            for (stage, outcome) in done {
                let what = if outcome == Outcome::Ran { "done" } else { "up to date" };
                println!("{stage}: {what}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
