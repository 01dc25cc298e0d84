use std::path::PathBuf;
use std::process::ExitCode;

use agripipe::pipeline::{run_stage, PipelineConfig, PipelineError, Stage};
use clap::Parser;

/// Run one stage of the multispectral field pipeline.
#[derive(Parser, Debug)]
#[command(name = "agripipe", version)]
struct Cli {
    /// ingest, denoise, calibrate, register, mosaic, features, tile, split,
    /// augment, train, predict, evaluate, render or synth
    stage: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: &Cli) -> Result<String, PipelineError> {
    let stage: Stage = cli.stage.parse()?;
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(jobs) = cli.jobs {
        cfg.set("jobs", &jobs.to_string())?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PipelineError::ConfigInvalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    if let Some(out) = &cli.out {
        cfg.set_out_dir(out.clone());
    }
    let report = run_stage(stage, &cfg)?;
    Ok(format!("{}: {} ({} ms)", report.stage, report.summary, report.duration_ms))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let category = e.category();
            eprintln!("error[{category}]: {e}");
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
