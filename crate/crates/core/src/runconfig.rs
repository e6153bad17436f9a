//! Flat `key = value` run configuration shared by every command.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are rejected. [`RunConfig::to_text`] writes every key, so a resolved
//! config saved beside a run's outputs reproduces it exactly.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flarenet::{ModelConfig, ModelKind, NUM_BLOCKS};
use crate::heliodata::SynthConfig;
use crate::skillscores::LIMB_BOUNDARY_DEG;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Manifest CSV; relative image paths inside it resolve against `image_dir`.
    pub manifest: PathBuf,
    /// Defaults to the manifest's directory when empty.
    pub image_dir: PathBuf,
    pub output_dir: PathBuf,
    /// One-based fold for `train`; `crossval` runs all four.
    pub fold: u8,
    /// Triple each training-set FL image with flips and a small rotation.
    pub augment: bool,
    pub boundary_deg: f64,
    pub window_hours: u32,
    pub eval_batch: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: ModelKind::M2,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            manifest: PathBuf::from("data/manifest.csv"),
            image_dir: PathBuf::new(),
            output_dir: PathBuf::from("runs"),
            fold: 1,
            augment: true,
            boundary_deg: LIMB_BOUNDARY_DEG,
            window_hours: 24,
            eval_batch: 64,
            synth: SynthConfig::default(),
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "kind",
    "input_side",
    "block_channels",
    "g_dim",
    "epochs",
    "batch_size",
    "lr0",
    "lr_halving_period_epochs",
    "weight_decay",
    "seed",
    "manifest",
    "image_dir",
    "output_dir",
    "fold",
    "augment",
    "boundary_deg",
    "window_hours",
    "eval_batch",
    "synth_samples",
    "synth_fl_ratio",
    "synth_blobs",
    "synth_noise_sigma",
    "synth_seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Reduced-width 64-pixel recipe that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig {
                epochs: 10,
                batch_size: 32,
                lr0: 0.05,
                lr_halving_period_epochs: 5,
                weight_decay: 5e-4,
                seed: 0,
            },
            synth: SynthConfig { samples: 2500, ..SynthConfig::default() },
            ..RunConfig::default()
        }
    }

    /// Parses `text` over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(RunConfig::default(), text)
    }

    /// Parses `text`, starting from `base` for keys it leaves out.
    pub fn parse_over(base: RunConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let k = k.trim();
            if seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v.trim())?;
            seen.push(k.to_owned());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` assignment, as used for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "kind" => self.kind = value.parse()?,
            "input_side" => self.model.input_side = parse(key, value)?,
            "block_channels" => {
                let list: Vec<usize> = value.split(',').map(|c| parse(key, c.trim())).collect::<Result<_>>()?;
                self.model.block_channels = list
                    .try_into()
                    .map_err(|_| Error::Config(format!("block_channels needs {NUM_BLOCKS} comma-separated values")))?;
            }
            "g_dim" => self.model.g_dim = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr0" => self.train.lr0 = parse(key, value)?,
            "lr_halving_period_epochs" => self.train.lr_halving_period_epochs = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "manifest" => self.manifest = PathBuf::from(value),
            "image_dir" => self.image_dir = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "fold" => self.fold = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "boundary_deg" => self.boundary_deg = parse(key, value)?,
            "window_hours" => self.window_hours = parse(key, value)?,
            "eval_batch" => self.eval_batch = parse(key, value)?,
            "synth_samples" => self.synth.samples = parse(key, value)?,
            "synth_fl_ratio" => self.synth.fl_ratio = parse(key, value)?,
            "synth_blobs" => self.synth.blobs = parse(key, value)?,
            "synth_noise_sigma" => self.synth.noise_sigma = parse(key, value)?,
            "synth_seed" => self.synth.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(1..=4).contains(&self.fold) {
            return Err(Error::Config(format!("fold {} outside 1..=4", self.fold)));
        }
        if self.window_hours == 0 || self.eval_batch == 0 {
            return Err(Error::Config("window_hours and eval_batch must be positive".into()));
        }
        if !(self.boundary_deg >= 0.0) {
            return Err(Error::Config(format!("boundary_deg {} must be non-negative", self.boundary_deg)));
        }
        self.synth_config().validate()
    }

    /// Synthetic corpus settings with the image side taken from the model.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { side: self.model.input_side, ..self.synth.clone() }
    }

    /// Image directory with the empty default resolved to the manifest's directory.
    pub fn resolved_image_dir(&self) -> PathBuf {
        if self.image_dir.as_os_str().is_empty() {
            self.manifest.parent().map(Path::to_path_buf).unwrap_or_default()
        } else {
            self.image_dir.clone()
        }
    }

    fn value_of(&self, key: &str) -> String {
        let path = |p: &Path| p.display().to_string();
        match key {
            "kind" => self.kind.to_string(),
            "input_side" => self.model.input_side.to_string(),
            "block_channels" => self.model.block_channels.map(|c| c.to_string()).join(","),
            "g_dim" => self.model.g_dim.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "lr0" => self.train.lr0.to_string(),
            "lr_halving_period_epochs" => self.train.lr_halving_period_epochs.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "seed" => self.train.seed.to_string(),
            "manifest" => path(&self.manifest),
            "image_dir" => path(&self.image_dir),
            "output_dir" => path(&self.output_dir),
            "fold" => self.fold.to_string(),
            "augment" => self.augment.to_string(),
            "boundary_deg" => self.boundary_deg.to_string(),
            "window_hours" => self.window_hours.to_string(),
            "eval_batch" => self.eval_batch.to_string(),
            "synth_samples" => self.synth.samples.to_string(),
            "synth_fl_ratio" => self.synth.fl_ratio.to_string(),
            "synth_blobs" => self.synth.blobs.to_string(),
            "synth_noise_sigma" => self.synth.noise_sigma.to_string(),
            "synth_seed" => self.synth.seed.to_string(),
            _ => unreachable!("key list and value_of disagree on {key}"),
        }
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }
}
