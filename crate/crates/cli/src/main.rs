mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fbnet::{AblationMode, Config, Phase};

#[derive(Parser, Debug)]
#[command(name = "fbnet", version, about = "Few-shot recognition with 3D-aware view synthesis feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML config file whose keys are the config field names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the desk-scale toy preset instead of the defaults.
    #[arg(long)]
    pub toy: bool,
    /// Override one config field, e.g. `--set lr=1e-4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural multiview toy dataset.
    MakeToy {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Target directory (must be empty unless --force).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the high-resolution teacher and cache its features.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Model directory receiving `teacher/` and the feature cache.
        #[arg(long)]
        models: PathBuf,
    },
    /// Distill the low-resolution extractor from the cached teacher features.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
    },
    /// Episodic training of one phase.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Model directory holding the distilled student (base phase).
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_parser = parse_phase)]
        phase: Phase,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AblationMode>,
        /// Run directory; a fresh timestamped one under `runs/` by default.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the latest checkpoint of this phase in the run directory.
        #[arg(long)]
        resume: bool,
        /// Run directory of a completed view_only run (aug_only mode).
        #[arg(long)]
        augmenter: Option<PathBuf>,
    },
    /// Compute metrics and export view grids for a run.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Poses per grid row sweep.
        #[arg(long, default_value_t = 6)]
        grid_poses: usize,
    },
    /// Generate images of given dataset images at given poses.
    Synthesize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory of a training run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Semicolon-separated `theta_x,theta_y,theta_z` triples in radians.
        #[arg(long)]
        poses: String,
        /// Comma-separated image ids (manifest paths) to condition on.
        #[arg(long)]
        condition: String,
        /// Image ids supplying appearance for the planar stage, one per condition.
        #[arg(long)]
        style: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    match s.parse::<Phase>() {
        Ok(p @ (Phase::Base | Phase::Novel)) => Ok(p),
        _ => Err(format!("`{s}` is not one of: base, novel")),
    }
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    s.parse::<AblationMode>().map_err(|_| format!("`{s}` is not one of: full, rec_only, view_only, aug_only"))
}

/// File, then `FBNET_SEED`, then `--set` overrides.
pub fn resolve_config(args: &ConfigArgs) -> fbnet::Result<Config> {
    let mut cfg = match (&args.config, args.toy) {
        (Some(p), _) => Config::load(p)?,
        (None, true) => Config::toy(),
        (None, false) => Config::default(),
    };
    cfg.apply_env()?;
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeToy { cfg, out, force } => commands::make_toy(&cfg, &out, force),
        Command::Pretrain { cfg, data, models } => commands::pretrain(&cfg, &data, &models),
        Command::Distill { cfg, data, models } => commands::distill(&cfg, &data, &models),
        Command::Train { cfg, data, models, phase, mode, run_dir, resume, augmenter } => commands::train(
            &cfg,
            &data,
            commands::TrainArgs { models, phase, mode, run_dir, resume, augmenter },
        ),
        Command::Eval { cfg, data, run_dir, grid_poses } => commands::eval(&cfg, &data, &run_dir, grid_poses),
        Command::Synthesize { cfg, data, checkpoint, poses, condition, style, out } => {
            commands::synthesize(&cfg, &data, &checkpoint, &poses, &condition, style.as_deref(), &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
