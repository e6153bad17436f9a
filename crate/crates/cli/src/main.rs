//! `attnflare`: label magnetograms, generate synthetic corpora, train and
//! cross-validate the forecasters, score checkpoints and render attention maps.
//!
//! Exit status is 0 on success, 1 on runtime or numeric failure and 2 on
//! usage or input problems.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use attnflare::flarenet::ModelKind;

#[derive(Parser, Debug)]
#[command(name = "attnflare", version, about = "Attention-augmented full-disk flare forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size recipe: 256 px inputs, 40 epochs.
    Full,
    /// Reduced 64 px model tuned for a single CPU core.
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    M1,
    M2,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::M1 => ModelKind::M1,
            KindArg::M2 => ModelKind::M2,
        }
    }
}

/// Config selection shared by the commands that read a run config.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat key=value config file, applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Label every timestamped image in a directory against a flare catalog.
    Label {
        #[arg(long)]
        catalog: PathBuf,
        /// Directory of images named like 20110101T000000Z.pgm.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        window_hours: u32,
    },
    /// Write a synthetic planted-blob corpus with its ground-truth boxes.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and validate one cross-validation fold.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Fold 1..=4; overrides the config's `fold`.
        #[arg(long)]
        fold: Option<u8>,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Train and validate all four folds, then aggregate.
    Crossval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Score a checkpoint on manifest rows.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Base for relative image paths; defaults to the manifest's directory.
        #[arg(long)]
        image_dir: Option<PathBuf>,
        /// Only score the test partition of this fold.
        #[arg(long)]
        fold: Option<u8>,
        #[arg(long, default_value_t = attnflare::skillscores::LIMB_BOUNDARY_DEG)]
        boundary_deg: f64,
        /// Config whose model must match the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `eval/` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one image and render an attention overlay.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = attnflare::interpret::DEFAULT_ESTIMATOR)]
        estimator: usize,
        #[arg(long, default_value_t = attnflare::interpret::DEFAULT_ALPHA)]
        alpha: f64,
        /// Synthetic boxes CSV; reports the driver box's attention mass.
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("ATTNFLARE_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("ATTNFLARE_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
