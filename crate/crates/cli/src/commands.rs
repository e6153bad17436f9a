use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use attnflare::flarenet::{ModelKind, ModelParams};
use attnflare::heliodata::{
    augment_minority, gray_to_tensor, items_for, load_images, make_folds, oversample_to_parity, read_driver_boxes,
    read_gray, tensor_to_gray, timestamp_from_file_name, BBox, Catalog, DatasetManifest, Fold, PartitionSummary,
};
use attnflare::interpret::{attention_locality, extract, normalize, overlay, upscale, write_overlay};
use attnflare::ndtensor::Tensor;
use attnflare::runconfig::RunConfig;
use attnflare::skillscores::{
    aggregate_csv, aggregate_folds, sfpr_csv, skill_csv, stratified_csv, stratified_table, summary_row, SkillReport,
};
use attnflare::trainer::{
    decide, fit, load_checkpoint, save_checkpoint, score_samples, EpochRecord, FitOptions, TrainData,
};

use crate::{Command, ConfigArgs, Preset};

/// A failed command: the stage it failed in and why.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Stage { stage: String, source: attnflare::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Stage { source, .. } if source.is_input_error() => 2,
            CliError::Stage { .. } => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Stage { stage, source } => write!(f, "{stage}: {source}"),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Usage(_) => None,
            CliError::Stage { source, .. } => Some(source),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

trait Stage<T> {
    fn stage(self, stage: impl Into<String>) -> CliResult<T>;
}

impl<T> Stage<T> for attnflare::Result<T> {
    fn stage(self, stage: impl Into<String>) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage: stage.into(), source })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> attnflare::Error {
    attnflare::Error::Io { path: path.to_path_buf(), source: e }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> attnflare::Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> attnflare::Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Label { catalog, images, out, window_hours } => cmd_label(&catalog, &images, &out, window_hours),
        Command::Synth { config, out } => cmd_synth(&resolve_config(&config, None, None)?, &out),
        Command::Train { config, fold, kind } => cmd_train(&resolve_config(&config, fold, kind.map(Into::into))?),
        Command::Crossval { config, kind } => cmd_crossval(&resolve_config(&config, None, kind.map(Into::into))?),
        Command::Eval { checkpoint, manifest, image_dir, fold, boundary_deg, config, out } => {
            cmd_eval(&checkpoint, &manifest, image_dir, fold, boundary_deg, config.as_deref(), out)
        }
        Command::Explain { checkpoint, image, estimator, alpha, boxes, out } => {
            cmd_explain(&checkpoint, &image, estimator, alpha, boxes.as_deref(), &out)
        }
    }
}

fn resolve_config(args: &ConfigArgs, fold: Option<u8>, kind: Option<ModelKind>) -> CliResult<RunConfig> {
    let base = match args.preset {
        Preset::Full => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
    };
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e)).stage("config")?;
            RunConfig::parse_over(base, &text).stage(format!("config {}", path.display()))?
        }
        None => base,
    };
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).stage("config override")?;
    }
    if let Some(k) = fold {
        if !(1..=4).contains(&k) {
            return Err(CliError::Usage(format!("--fold {k} outside 1..=4")));
        }
        cfg.fold = k;
    }
    if let Some(kind) = kind {
        cfg.kind = kind;
    }
    cfg.validate().stage("config")?;
    Ok(cfg)
}

/// `path` relative to `base` when it lies underneath, otherwise absolute.
fn relative_to(path: &Path, base: &Path) -> attnflare::Result<String> {
    let abs = path.canonicalize().map_err(|e| io_err(path, e))?;
    let base = base.canonicalize().map_err(|e| io_err(base, e))?;
    let rel = abs.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(abs);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

fn cmd_label(catalog: &Path, images: &Path, out: &Path, window_hours: u32) -> CliResult<()> {
    if window_hours == 0 {
        return Err(CliError::Usage("--window-hours must be positive".into()));
    }
    let catalog = Catalog::read_csv(catalog).stage("label: catalog")?;
    let entries = fs::read_dir(images).map_err(|e| io_err(images, e)).stage("label: images")?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(images, e)).stage("label: images")?.path();
        if let Some(t) = path.file_name().and_then(|n| n.to_str()).and_then(timestamp_from_file_name) {
            found.push((t, path));
        }
    }
    found.sort();
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(out_dir).stage("label: output")?;
    let mut names = std::collections::HashMap::new();
    for (t, p) in &found {
        names.insert(*t, relative_to(p, out_dir).stage("label: images")?);
    }
    let timestamps: Vec<_> = found.iter().map(|(t, _)| *t).collect();
    let manifest = DatasetManifest::label_timestamps(&timestamps, &catalog, window_hours, |t| names[t].clone())
        .stage("label")?;
    manifest.write_csv(out).stage("label: output")?;
    print!("{}", PartitionSummary::from_manifest(&manifest).render());
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let corpus = attnflare::heliodata::gen_synthetic(&cfg.synth_config()).stage("synth")?;
    create_dir(out).stage("synth: output")?;
    corpus.write(out).stage("synth: output")?;
    write_file(&out.join("config.cfg"), cfg.to_text()).stage("synth: output")?;
    print!("{}", PartitionSummary::from_manifest(&corpus.manifest).render());
    Ok(())
}

fn model_name(kind: ModelKind) -> String {
    kind.to_string().to_uppercase()
}

struct Dataset {
    manifest: DatasetManifest,
    images: Vec<Tensor<f32>>,
}

fn load_dataset(manifest_path: &Path, image_dir: &Path, side: usize) -> CliResult<Dataset> {
    let manifest = DatasetManifest::read_csv(manifest_path).stage("manifest")?;
    let paths: Vec<PathBuf> = (0..manifest.len()).map(|i| manifest.image_path(i, image_dir)).collect();
    let images = load_images(&paths, side).stage("images")?;
    Ok(Dataset { manifest, images })
}

fn write_report(dir: &Path, model: &str, report: &SkillReport, boundary_deg: f64) -> attnflare::Result<()> {
    write_file(&dir.join("skill.csv"), skill_csv(report))?;
    write_file(&dir.join("sfpr.csv"), sfpr_csv(&report.sfpr))?;
    write_file(&dir.join("stratified.csv"), stratified_csv(model, &report.stratified))?;
    write_file(&dir.join("stratified.txt"), stratified_table(model, &report.stratified, boundary_deg))
}

fn print_epoch(fold: u8, r: &EpochRecord) {
    let opt = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{x:.3}"));
    eprintln!(
        "fold {fold} epoch {:>3} lr {:.2e} loss {:.4} val_tss {} val_hss {}",
        r.epoch,
        r.lr,
        r.train_loss,
        opt(r.val_tss),
        opt(r.val_hss)
    );
}

fn run_fold(cfg: &RunConfig, data: &Dataset, fold: &Fold, dir: &Path) -> CliResult<SkillReport> {
    let stage = |s: &str| format!("fold {}: {s}", fold.test_partition);
    create_dir(dir).stage(stage("output"))?;
    write_file(&dir.join("config.cfg"), cfg.to_text()).stage(stage("output"))?;
    let seed = cfg.train.seed;
    let items = items_for(&data.manifest, &fold.train);
    let items = if cfg.augment { augment_minority(&items, seed) } else { items };
    let train = oversample_to_parity(&items, seed).stage(stage("balance"))?;
    let validation = items_for(&data.manifest, &fold.test);

    // Each run starts its own log so reruns reproduce the same file.
    let log_path = dir.join("train_log.csv");
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| io_err(&log_path, e)).stage(stage("output"))?;
    }
    let options = FitOptions { log_path: Some(log_path), eval_batch: Some(cfg.eval_batch) };
    let outcome = fit(
        cfg.kind,
        &cfg.model,
        &cfg.train,
        TrainData { images: &data.images, train: &train, validation: &validation },
        &options,
    )
    .stage(stage("train"))?;
    for r in &outcome.history {
        print_epoch(fold.test_partition, r);
    }
    save_checkpoint(&dir.join("checkpoint.flnt"), &outcome.checkpoint).stage(stage("checkpoint"))?;
    let scored = score_samples(&outcome.checkpoint.model, &data.images, &data.manifest, &fold.test, cfg.eval_batch)
        .stage(stage("evaluate"))?;
    let report = SkillReport::evaluate(&scored, cfg.boundary_deg).stage(stage("evaluate"))?;
    write_report(dir, &model_name(cfg.kind), &report, cfg.boundary_deg).stage(stage("output"))?;
    Ok(report)
}

fn kind_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(cfg.kind.to_string())
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let data = load_dataset(&cfg.manifest, &cfg.resolved_image_dir(), cfg.model.input_side)?;
    let folds = make_folds(&data.manifest).stage("folds")?;
    let fold = &folds[usize::from(cfg.fold - 1)];
    let dir = kind_dir(cfg).join(format!("fold{}", cfg.fold));
    let report = run_fold(cfg, &data, fold, &dir)?;
    print!("{}", skill_csv(&report));
    print!("{}", stratified_table(&model_name(cfg.kind), &report.stratified, cfg.boundary_deg));
    Ok(())
}

fn cmd_crossval(cfg: &RunConfig) -> CliResult<()> {
    let data = load_dataset(&cfg.manifest, &cfg.resolved_image_dir(), cfg.model.input_side)?;
    let folds = make_folds(&data.manifest).stage("folds")?;
    let root = kind_dir(cfg);
    let mut reports = Vec::with_capacity(folds.len());
    for fold in &folds {
        let fold_cfg = RunConfig { fold: fold.test_partition, ..cfg.clone() };
        reports.push(run_fold(&fold_cfg, &data, fold, &root.join(format!("fold{}", fold.test_partition)))?);
    }
    let agg = aggregate_folds(&reports).stage("aggregate")?;
    let name = model_name(cfg.kind);
    let summary = format!("{:<6} {:>12} {:>12}\n{}\n", "Models", "TSS", "HSS", summary_row(&name, &agg));
    let out = || -> attnflare::Result<()> {
        write_file(&root.join("config.cfg"), cfg.to_text())?;
        write_file(&root.join("aggregate.csv"), aggregate_csv(&name, &agg))?;
        write_file(&root.join("summary.txt"), &summary)?;
        write_file(&root.join("sfpr.csv"), sfpr_csv(&agg.sfpr))?;
        write_file(&root.join("stratified.csv"), stratified_csv(&name, &agg.stratified))?;
        write_file(&root.join("stratified.txt"), stratified_table(&name, &agg.stratified, cfg.boundary_deg))
    };
    out().stage("crossval: output")?;
    print!("{summary}");
    print!("{}", stratified_table(&name, &agg.stratified, cfg.boundary_deg));
    Ok(())
}

fn check_compatible(model: &ModelParams<f32>, config: Option<&Path>) -> CliResult<()> {
    let Some(path) = config else { return Ok(()) };
    let cfg = RunConfig::load(path).stage("config")?;
    if cfg.kind != model.kind() || &cfg.model != model.config() {
        return Err(CliError::Stage {
            stage: "checkpoint".into(),
            source: attnflare::Error::Compatibility(format!(
                "checkpoint holds {} {:?}, config asks for {} {:?}",
                model.kind(),
                model.config(),
                cfg.kind,
                cfg.model
            )),
        });
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    image_dir: Option<PathBuf>,
    fold: Option<u8>,
    boundary_deg: f64,
    config: Option<&Path>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    if let Some(k) = fold.filter(|k| !(1..=4).contains(k)) {
        return Err(CliError::Usage(format!("--fold {k} outside 1..=4")));
    }
    let ckpt = load_checkpoint(checkpoint).stage("checkpoint")?;
    check_compatible(&ckpt.model, config)?;
    let image_dir = image_dir.unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    let data = load_dataset(manifest, &image_dir, ckpt.model.config().input_side)?;
    let indices: Vec<usize> = match fold {
        Some(k) => data.manifest.samples.iter().enumerate().filter(|(_, s)| s.partition == k).map(|(i, _)| i).collect(),
        None => (0..data.manifest.len()).collect(),
    };
    let scored = score_samples(&ckpt.model, &data.images, &data.manifest, &indices, 64).stage("evaluate")?;
    let report = SkillReport::evaluate(&scored, boundary_deg).stage("evaluate")?;
    let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    create_dir(&out).stage("eval: output")?;
    let name = model_name(ckpt.model.kind());
    write_report(&out, &name, &report, boundary_deg).stage("eval: output")?;
    print!("{}", skill_csv(&report));
    print!("{}", stratified_table(&name, &report.stratified, boundary_deg));
    Ok(())
}

fn cmd_explain(
    checkpoint: &Path,
    image: &Path,
    estimator: usize,
    alpha: f64,
    boxes: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    if !(1..=3).contains(&estimator) {
        return Err(CliError::Usage(format!("--estimator {estimator} outside 1..=3")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CliError::Usage(format!("--alpha {alpha} outside [0, 1]")));
    }
    let ckpt = load_checkpoint(checkpoint).stage("checkpoint")?;
    let model = &ckpt.model;
    if model.kind() != ModelKind::M2 {
        return Err(CliError::Stage {
            stage: "explain".into(),
            source: attnflare::Error::Compatibility("only M2 checkpoints carry attention maps".into()),
        });
    }
    let side = model.config().input_side;
    let original = read_gray(image).stage("image")?;
    let input = gray_to_tensor(&original, side).stage("image")?;
    let batch = input.clone().reshape(&[1, 1, side, side]).stage("explain")?;
    let (probs, bundle) = model.predict_with_attention(&batch).stage("explain")?;
    let bundle = bundle.expect("M2 forward yields attention");
    let raw = extract(&bundle, estimator, 0).stage("explain")?;
    let heat = upscale(&normalize(&raw), side).stage("explain")?;
    let base = tensor_to_gray(&input).stage("explain")?;
    let rgb = overlay(&base, &heat, alpha).stage("explain")?;

    create_dir(out).stage("explain: output")?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let raster = out.join(format!("{stem}_e{estimator}_overlay.ppm"));
    let sidecar = out.join(format!("{stem}_e{estimator}.attn"));
    write_overlay(&raster, &sidecar, &rgb, &raw).stage("explain: output")?;
    let p = probs[0];
    let label = decide(&p);
    let mut summary = format!("predicted,p_nf,p_fl\n{label},{},{}\n", p[0], p[1]);

    if let Some(boxes_path) = boxes {
        let text = fs::read_to_string(boxes_path).map_err(|e| io_err(boxes_path, e)).stage("boxes")?;
        let name = image.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let all = read_driver_boxes(&text).stage("boxes")?;
        let (_, bbox) = all.iter().find(|(p, _)| Path::new(p).file_name().and_then(|n| n.to_str()) == Some(name)).ok_or_else(
            || CliError::Stage {
                stage: "boxes".into(),
                source: attnflare::Error::Input(format!("no driver box for {name} in {}", boxes_path.display())),
            },
        )?;
        // boxes are in the file's pixels, the map covers the model's input
        let scale = side as f64 / f64::from(original.width());
        let scaled = BBox { x0: bbox.x0 * scale, y0: bbox.y0 * scale, x1: bbox.x1 * scale, y1: bbox.y1 * scale };
        let m = attention_locality(&raw, side, &[scaled]).stage("explain")?[0];
        summary.push_str(&format!("driver_box_mass,area_fraction,concentration_ratio\n{},{},{}\n", m.mass, m.area_fraction, m.ratio));
    }
    write_file(&out.join(format!("{stem}_prediction.csv")), &summary).stage("explain: output")?;
    print!("{summary}");
    eprintln!("overlay written to {}", raster.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        let input = CliError::Stage { stage: "s".into(), source: attnflare::Error::Format("bad".into()) };
        assert_eq!(input.exit_code(), 2);
        let numeric = CliError::Stage {
            stage: "s".into(),
            source: attnflare::Error::Divergence { epoch: 1, batch: 2, loss: f64::NAN },
        };
        assert_eq!(numeric.exit_code(), 1);
        assert!(numeric.to_string().starts_with("s: training diverged at epoch 1, batch 2"));
    }
}
