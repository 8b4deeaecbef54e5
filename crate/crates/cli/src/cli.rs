//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use lesion_detector::DistillMode;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{self, Split};

#[derive(Debug, Parser)]
#[command(name = "lesion", version, about = "Small-lesion detection pipeline")]
pub struct Cli {
    /// TOML run config (default: $LESION_CONFIG, else built-in defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set student.train.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    None,
    Static,
    Ppo,
}

impl From<ModeArg> for DistillMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => DistillMode::None,
            ModeArg::Static => DistillMode::Static,
            ModeArg::Ppo => DistillMode::Ppo,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and its train/val split.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop the training split into patches and train the teacher on them.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the teacher over the training images.
    PseudoLabel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tile the images and merge the per-tile detections.
        #[arg(long)]
        slice: bool,
    },
    /// Train the student on full images with gated pseudo-labels.
    TrainStudent {
        #[arg(long)]
        data: PathBuf,
        /// Teacher pseudo-labels; required unless the mode is `none`.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Overrides `distill.mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Overrides `distill.phi`.
        #[arg(long)]
        phi: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect lesions in a split with a checkpoint.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Tile the images and merge the per-tile detections.
        #[arg(long)]
        slice: bool,
    },
    /// Score detections against a split's annotations.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Row label in the report.
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Lesion area-ratio histogram.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "all")]
        split: Split,
        /// Comma-separated area-ratio bin edges.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Draw detections for one image.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        image_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one student per distillation setting and merge
    /// the results into one table.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Tile the images and merge the per-tile detections.
        #[arg(long)]
        slice: bool,
    },
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Synth { out } => {
            pipeline::synth(&cfg, &out)?;
        }
        Command::TrainTeacher { data, out } => {
            pipeline::train_teacher(&cfg, &data, &out)?;
        }
        Command::PseudoLabel { data, teacher, out, slice } => {
            pipeline::pseudo_label(&cfg, &data, &teacher, &out, slice)?;
        }
        Command::TrainStudent { data, pseudo, mode, phi, out } => {
            if let Some(m) = mode {
                cfg.distill.mode = m.into();
            }
            if let Some(p) = phi {
                cfg.distill.phi = p;
            }
            cfg.validate()?;
            pipeline::train_student(&cfg, &data, pseudo.as_deref(), &out)?;
        }
        Command::Infer { data, model, out, split, slice } => {
            pipeline::infer(&cfg, &data, split, &model, &out, slice)?;
        }
        Command::Eval { data, dets, out, split, label } => {
            let (_, text) = pipeline::eval(&cfg, &data, split, &dets, &label, &out)?;
            print!("{text}");
        }
        Command::Stats { data, out, split, thresholds } => {
            let t = thresholds.unwrap_or_else(|| pipeline::DEFAULT_THRESHOLDS.to_vec());
            let hist = pipeline::stats(&cfg, &data, split, &out, &t)?;
            print!("{}", pipeline::format_histogram(&hist));
        }
        Command::Render { image, dets, image_id, out } => {
            pipeline::render(&cfg, &image, &dets, image_id, &out)?;
        }
        Command::Ablation { data, pseudo, out_dir, slice } => {
            let runs = pipeline::ablation(&cfg, &data, &pseudo, &out_dir, slice)?;
            print!("{}", pipeline::ablation_report(&runs));
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `lesion --help` for usage");
            }
            e.exit_code()
        }
    }
}
