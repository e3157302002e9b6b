use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demorphlab::commands;
use demorphlab::config::LoadedConfig;
use demorphlab_core::{Error, Result};
use serde_json::json;

/// Demorphing pipeline: corpus synthesis, identity-disjoint splits, GAN
/// training and biometric evaluation.
#[derive(Parser)]
#[command(name = "demorphlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults depend on the subcommand.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Relabel a manifest with an identity-disjoint train/test split.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_identities: Option<usize>,
        #[arg(long)]
        n_morphs: Option<usize>,
        /// Base-image weight of every blend.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train on the manifest's training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Demorph a single image.
    Demorph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        morph: PathBuf,
        /// Live reference of one constituent (differential models only).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Score a checkpoint on the manifest's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Base-image bias of every morph in a manifest.
    Bias {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a checkpoint on another corpus's test split.
    Xeval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn load(common: &Common) -> Result<LoadedConfig> {
    let mut cfg = LoadedConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.config = cfg.config.with_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let out = |c: &Common| c.out.clone();
    match &cli.command {
        Command::Split { common, manifest } => {
            commands::split(&load(common)?, out(common).as_deref(), manifest.as_deref())
        }
        Command::Synth { common, n_identities, n_morphs, alpha } => {
            commands::synth(&load(common)?, out(common).as_deref(), *n_identities, *n_morphs, *alpha)
        }
        Command::Train { common, manifest, resume } => {
            commands::train(&load(common)?, out(common).as_deref(), manifest.as_deref(), resume.as_deref())
        }
        Command::Demorph { common, checkpoint, morph, reference } => {
            let cfg = load(common)?;
            let seed = cfg.config.train.seed;
            commands::demorph(&cfg, out(common).as_deref(), checkpoint.as_deref(), morph, reference.as_deref(), seed)
        }
        Command::Eval { common, checkpoint, manifest } => {
            commands::eval(&load(common)?, out(common).as_deref(), checkpoint.as_deref(), manifest.as_deref())
        }
        Command::Bias { common, manifest } => commands::bias(&load(common)?, out(common).as_deref(), manifest.as_deref()),
        Command::Xeval { common, checkpoint, manifest } => {
            commands::xeval(&load(common)?, out(common).as_deref(), checkpoint.as_deref(), Path::new(manifest))
        }
    }
}

fn main() -> ExitCode {
    if std::env::var("DEMORPHLAB_DETERMINISTIC").as_deref() == Ok("1") {
        // must happen before any worker pool is created
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::HashMismatch { .. } | Error::Registry(_) => 2,
        Error::Checkpoint(_) | Error::Io(_) => 3,
        _ => 1,
    }
}
