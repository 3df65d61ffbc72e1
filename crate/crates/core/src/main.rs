use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fvlab::runner::{Context, ExperimentConfig, Stage};
use fvlab::Error;

#[derive(Parser)]
#[command(name = "fvlab", version, about = "Function-vector experiments on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one pipeline stage, or `all`.
    Run {
        #[arg(value_enum)]
        stage: Stage,
        /// JSON config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory, overriding `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed, overriding `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "FVLAB_THREADS")]
        threads: Option<usize>,
    },
    /// Print the default config as JSON.
    InitConfig,
}

enum Failure {
    Validation(Error),
    Runtime(Error),
}

fn classify(e: Error) -> Failure {
    match e {
        Error::Config { .. } => Failure::Validation(e),
        other => Failure::Runtime(other),
    }
}

fn run(stage: Stage, config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>, threads: Option<usize>) -> Result<(), Failure> {
    let mut cfg = match &config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(_) => Failure::Validation(e),
            other => classify(other),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate().map_err(Failure::Validation)?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Validation(Error::Config {
                field: "--threads".into(),
                msg: "must be at least 1".into(),
            }));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(Error::InvalidArgument(e.to_string())))?;
    }
    let out_dir = cfg.out_dir.clone();
    let ctx = Context::new(cfg, out_dir).map_err(classify)?;
    let manifest = fvlab::runner::run_stage(&ctx, stage).map_err(Failure::Runtime)?;
    for rec in &manifest.stages {
        println!("{}: {:.1}s, {} artifacts", rec.stage.name(), rec.seconds, rec.artifacts.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            stage,
            config,
            out,
            seed,
            threads,
        } => run(stage, config, out, seed, threads),
        Command::InitConfig => {
            let cfg = ExperimentConfig::default();
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
