//! Batch-style CLI: configure runs through JSON, read artifacts from out_dir.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use dct::adaptation::AdaptMode;
use dct::commands::{cmd_adapt, cmd_export, cmd_pretrain, cmd_profile, ExportWhat};
use dct::config::RunConfig;
use dct::error::{DctError, DctResult};

#[derive(Parser)]
#[command(name = "dct", about = "Domain-conditioned transformer: test-time adaptation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model on clean synthetic data.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a checkpoint online over the configured corrupted stream.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the adaptation mode (dct, static-conditioner, ln-only, none).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Attention-distance profiles at the requested severities.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated severity levels, e.g. "0,3,5".
        #[arg(long, default_value = "0,5")]
        severities: String,
    },
    /// Export embeddings or rollout saliency as CSV.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of class_tokens, conditioners, rollout.
        #[arg(long)]
        what: String,
    },
}

fn load_config(common: &Common) -> DctResult<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(s: &str) -> DctResult<AdaptMode> {
    match s {
        "dct" => Ok(AdaptMode::Dct),
        "static-conditioner" => Ok(AdaptMode::StaticConditioner),
        "ln-only" => Ok(AdaptMode::LnOnly),
        "none" => Ok(AdaptMode::None),
        other => Err(DctError::InvalidMode { message: format!("unknown mode {other:?}") }),
    }
}

fn parse_severities(s: &str) -> DctResult<Vec<u8>> {
    s.split(',')
        .map(|part| {
            let sev: u8 = part.trim().parse().map_err(|_| DctError::Config {
                message: format!("bad severity {part:?}"),
            })?;
            if sev > 5 {
                return Err(DctError::InvalidSeverity { severity: sev });
            }
            Ok(sev)
        })
        .collect()
}

fn run(cli: Cli) -> DctResult<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load_config(&common)?;
            let out = cmd_pretrain(&cfg)?;
            println!("source accuracy: {:.4}", out.source_accuracy);
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Adapt { common, checkpoint, mode } => {
            let cfg = load_config(&common)?;
            let mode = mode.as_deref().map(parse_mode).transpose()?;
            let out = cmd_adapt(&cfg, &checkpoint, mode)?;
            println!("final accuracy: {:.4}", out.summary.final_accuracy);
            println!("summary: {}", out.summary_path.display());
        }
        Command::Profile { common, checkpoint, severities } => {
            let cfg = load_config(&common)?;
            let sevs = parse_severities(&severities)?;
            let out = cmd_profile(&cfg, &checkpoint, &sevs)?;
            println!("profile: {}", out.profile_path.display());
        }
        Command::Export { common, checkpoint, what } => {
            let cfg = load_config(&common)?;
            let what = ExportWhat::from_str(&what)?;
            let out = cmd_export(&cfg, &checkpoint, what)?;
            println!("exported {} rows to {}", out.rows, out.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
