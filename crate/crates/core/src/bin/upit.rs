use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use upit::pipeline::{PipelineConfig, Pipeline, Stage};

/// Runs the upcycling pipeline, or one stage of it, into an output directory.
#[derive(Parser, Debug)]
#[command(name = "upit", version)]
struct Args {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory. Falls back to `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,

    /// One stage name, or `all`.
    #[arg(long, default_value = "all")]
    stage: String,
}

fn run(args: Args) -> upit::Result<()> {
    let cfg = match &args.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    let seed = args.seed.unwrap_or(cfg.seed);
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| upit::Error::Config("no output directory: pass --out or set out_dir".into()))?;
    let cfg = cfg.with_seed(seed);
    let pipeline = Pipeline::open(cfg, &out)?;
    let records = if args.stage == "all" {
        pipeline.run_all()?
    } else {
        vec![pipeline.run_stage(args.stage.parse::<Stage>()?)?]
    };
    for r in records {
        println!("{} {:?} {:.2}s outputs={}", r.stage, r.status, r.wall_time_s, r.outputs.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UPIT_LOG", "info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
