use std::path::PathBuf;
use std::process::ExitCode;

use anonet::config::{RunConfig, OUT_DIR_ENV};
use anonet::run::{self, RunOptions};
use anonet::{Error, ErrorCategory};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "anonet",
    version,
    about = "Replace faces in images and videos with synthesized ones"
)]
struct Cli {
    /// Run configuration (TOML). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory (and the ANONET_OUT variable).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Continue training from the latest checkpoint.
    #[arg(long, global = true)]
    resume: bool,
    /// Load checkpoints whose config hash differs from the current config.
    #[arg(long, global = true)]
    allow_config_mismatch: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reduce masks, crop faces and write the train/test split.
    PrepareData,
    /// Train all networks on the prepared dataset.
    Train,
    /// Anonymize an image, a directory of images or a video.
    Anonymize {
        input: PathBuf,
        output: PathBuf,
        /// Copy frames through unchanged.
        #[arg(long)]
        passthrough: bool,
    },
    /// Measure identity distance between original and anonymized faces.
    Eval {
        /// Train and save the embedding network first.
        #[arg(long)]
        train_embedding: bool,
        /// Evaluate the identity mapping instead of the trained generators.
        #[arg(long)]
        passthrough: bool,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>().map(Error::category) {
        Some(ErrorCategory::Config) => 3,
        Some(ErrorCategory::Dataset) => 4,
        Some(ErrorCategory::Model) => 5,
        Some(ErrorCategory::Media) => 6,
        Some(ErrorCategory::Io) => 7,
        None => 1,
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        cfg.output_dir = dir.into();
    }
    if let Some(dir) = &cli.out {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Anonymize {
            passthrough: true, ..
        }
        | Command::Eval {
            passthrough: true, ..
        } => cfg.anonymizer.passthrough = true,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let opts = RunOptions {
        force: cli.force,
        resume: cli.resume,
        allow_config_mismatch: cli.allow_config_mismatch,
    };
    match &cli.command {
        Command::PrepareData => {
            let m = run::prepare(&cfg, opts)?;
            println!(
                "prepared {} train and {} test pairs in {}",
                m.train.len(),
                m.test.len(),
                cfg.prepared_dir().display()
            );
            let r = &m.report;
            if !r.unpaired.is_empty() || !r.corrupt.is_empty() || !r.detector_fallbacks.is_empty() {
                println!(
                    "skipped {} unpaired and {} corrupt stems; {} without a detected face",
                    r.unpaired.len(),
                    r.corrupt.len(),
                    r.detector_fallbacks.len()
                );
                for (stem, why) in &r.corrupt {
                    println!("  corrupt {stem}: {why}");
                }
            }
        }
        Command::Train => {
            let s = run::train(&cfg, opts)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Anonymize { input, output, .. } => {
            let o = run::anonymize(&cfg, input, output, opts)?;
            print!("{}", o.summary.to_text());
            if let Some(p) = o.summary_path {
                println!("summary written to {}", p.display());
            }
        }
        Command::Eval {
            train_embedding, ..
        } => {
            if *train_embedding {
                let (path, trace) = run::train_embedding(&cfg)?;
                println!(
                    "embedding saved to {} (final loss {:.4})",
                    path.display(),
                    trace.last().copied().unwrap_or(f64::NAN)
                );
            }
            let (report, dir) = run::eval(&cfg, opts)?;
            print!("{}", report.to_text());
            println!("report written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
