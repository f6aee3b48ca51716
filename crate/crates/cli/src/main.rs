use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

mod commands;
mod output;

use hdmap::Error;

#[derive(Parser, Debug)]
#[command(name = "hdmap", version, about = "Synthetic vectorized HD map training and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Prompt source at inference.
    #[arg(long, global = true, value_parser = ["full", "mimic"])]
    pub mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Comma-separated flag edits, e.g. `baseline,ua_attention` or `no_p2q`.
    #[arg(long, global = true)]
    pub flags: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes and write one JSON file per scene.
    Gen,
    /// Write the train/val split manifest.
    Split,
    /// Pretrain the image-space branch.
    PretrainPv,
    /// Train the map model on top of a pretrained image branch.
    Train {
        /// Image-branch checkpoint from `pretrain-pv`.
        #[arg(long)]
        pv_ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "val", value_parser = ["train", "val"])]
        split: String,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Predict one scene; writes predictions JSON and an SVG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene id; defaults to the first validation scene.
        #[arg(long)]
        scene: Option<String>,
    },
    /// Train and evaluate the four-row component ablation.
    Ablate {
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
    /// Merge metric or ablation JSON files into a CSV table and SVG chart.
    Report {
        inputs: Vec<PathBuf>,
        /// Accept inputs produced by different configurations.
        #[arg(long)]
        allow_mixed: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let res = match cli.command {
        Command::Gen => commands::gen(c),
        Command::Split => commands::split(c),
        Command::PretrainPv => commands::pretrain_pv(c),
        Command::Train { pv_ckpt } => commands::train(c, pv_ckpt.as_deref()),
        Command::Eval { ckpt, split, oracle } => commands::eval(c, ckpt.as_deref(), &split, oracle),
        Command::Infer { ckpt, scene } => commands::infer(c, &ckpt, scene.as_deref()),
        Command::Ablate { seeds } => commands::ablate(c, &seeds),
        Command::Report { inputs, allow_mixed } => commands::report(c, &inputs, allow_mixed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
