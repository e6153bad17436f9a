//! Plain SGD training with a step learning-rate schedule, validation
//! scoring and checkpointing.

mod checkpoint;

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flarenet::{build_model, ModelConfig, ModelKind, ModelParams, ParamKind};
use crate::heliodata::{DatasetManifest, Label, TrainItem, Transform};
use crate::ndtensor::{Graph, Mode, Real, Tensor};
use crate::skillscores::{confusion, hss, tss, ScoredSample};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_tss,val_hss";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_halving_period_epochs: usize,
    /// Applied to [`ParamKind::Weight`] tensors only.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 40, batch_size: 128, lr0: 0.001, lr_halving_period_epochs: 3, weight_decay: 0.5, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_period_epochs == 0 {
            return bad("epochs, batch_size and lr_halving_period_epochs must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size > train_len {
            return bad(format!("batch_size {} exceeds the {train_len} training samples", self.batch_size));
        }
        Ok(())
    }

    /// `lr0 * 0.5^floor(epoch / period)` for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.lr_halving_period_epochs) as i32)
    }
}

/// One SGD update, `w <- w - lr * (grad + wd * w)` with decay on weights
/// only, then clears every gradient buffer.
pub fn sgd_step<T: Real>(model: &mut ModelParams<T>, lr: f64, weight_decay: f64) -> Result<()> {
    if let Some(p) = model.params.iter().find(|p| p.tensor.requires_grad && p.tensor.grad.is_none()) {
        return Err(Error::Optimizer(format!("parameter {} has no gradient buffer", p.name)));
    }
    let lr = T::of(lr);
    for p in model.params.iter_mut().filter(|p| p.tensor.requires_grad) {
        let wd = T::of(if p.kind == ParamKind::Weight { weight_decay } else { 0.0 });
        let grad = p.tensor.grad.take().expect("checked above");
        for (w, g) in p.tensor.data_mut().iter_mut().zip(&grad) {
            *w -= lr * (*g + wd * *w);
        }
        p.tensor.grad = Some(grad);
        p.tensor.zero_grad();
    }
    Ok(())
}

/// Visiting order of the training list in `epoch`: a seeded permutation.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Batch boundaries over `len` items. The last partial batch is kept; a
/// trailing single item is folded into the previous batch because train-mode
/// batch norm on a 1x1 map needs at least two samples.
pub fn batch_ranges(len: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..len).step_by(batch_size).map(|s| s..(s + batch_size).min(len)).collect();
    if out.len() >= 2 && out.last().map_or(false, |r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("two batches").end = last.end;
    }
    out
}

/// Stacks the transformed source images of `items` into `[B, 1, S, S]`.
pub fn assemble_batch(images: &[Tensor<f32>], items: &[TrainItem]) -> Result<Tensor<f32>> {
    let first = images.get(items.first().map_or(0, |i| i.source)).ok_or_else(|| Error::Index("empty image set".into()))?;
    let shape = first.shape().to_vec();
    let per = first.numel();
    let mut data = Vec::with_capacity(per * items.len());
    for item in items {
        let img = images
            .get(item.source)
            .ok_or_else(|| Error::Index(format!("image {} outside the {} loaded images", item.source, images.len())))?;
        if img.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!("image {} has shape {:?}, expected {shape:?}", item.source, img.shape())));
        }
        match item.transform {
            Transform::Identity => data.extend_from_slice(img.data()),
            t => data.extend_from_slice(t.apply(img)?.data()),
        }
    }
    let mut full = vec![items.len()];
    full.extend(if shape.len() == 2 { vec![1, shape[0], shape[1]] } else { shape });
    Tensor::new(&full, data)
}

/// Eval-mode class probabilities for `indices` into `images`, in order.
/// Batches run in parallel on the current rayon pool; results do not depend
/// on the batching because eval mode uses running statistics.
pub fn predict(model: &ModelParams<f32>, images: &[Tensor<f32>], indices: &[usize], batch: usize) -> Result<Vec<[f32; 2]>> {
    let items: Vec<TrainItem> =
        indices.iter().map(|&i| TrainItem { source: i, label: Label::NF, transform: Transform::Identity }).collect();
    let chunks: Vec<Vec<[f32; 2]>> = items
        .par_chunks(batch.max(1))
        .map(|chunk| model.predict_proba(&assemble_batch(images, chunk)?))
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// FL when its probability is at least one half.
pub fn decide(p: &[f32; 2]) -> Label {
    if p[1] >= 0.5 {
        Label::FL
    } else {
        Label::NF
    }
}

/// Predictions for manifest rows `indices`, paired with the metadata the
/// skill scores stratify on.
pub fn score_samples(
    model: &ModelParams<f32>,
    images: &[Tensor<f32>],
    manifest: &DatasetManifest,
    indices: &[usize],
    batch: usize,
) -> Result<Vec<ScoredSample>> {
    let probs = predict(model, images, indices, batch)?;
    Ok(indices
        .iter()
        .zip(&probs)
        .map(|(&i, p)| {
            let s = &manifest.samples[i];
            ScoredSample { label: s.label, predicted: decide(p), window_max_class: s.window_max_class, hg_lon_deg: s.hg_lon_deg }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `None` when the validation set lacks one of the classes.
    pub val_tss: Option<f64>,
    pub val_hss: Option<f64>,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.epoch, self.lr, self.train_loss, opt(self.val_tss), opt(self.val_hss))
    }
}

/// Images and splits for [`fit`].
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    /// Every manifest image, indexed by [`TrainItem::source`].
    pub images: &'a [Tensor<f32>],
    /// Balanced, possibly augmented training list.
    pub train: &'a [TrainItem],
    /// Untouched held-out samples.
    pub validation: &'a [TrainItem],
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Append one CSV line per epoch here, writing the header first if the
    /// file is new or empty.
    pub log_path: Option<PathBuf>,
    /// Batch size used for validation forward passes.
    pub eval_batch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

/// Builds a freshly initialised model of `kind` and trains it.
pub fn fit(
    kind: ModelKind,
    model_config: &ModelConfig,
    config: &TrainConfig,
    data: TrainData<'_>,
    options: &FitOptions,
) -> Result<FitOutcome> {
    let model = build_model(kind, model_config, config.seed)?;
    fit_model(model, config, data, options)
}

fn log_writer(options: &FitOptions) -> Result<Option<(PathBuf, std::fs::File)>> {
    let Some(path) = &options.log_path else { return Ok(None) };
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    if empty {
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(Some((path.clone(), file)))
}

/// Mean cross-entropy of one batch, with gradients accumulated into `model`
/// and batch-norm running statistics updated.
fn train_batch(model: &mut ModelParams<f32>, input: Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(input);
    let fwd = model.forward(&mut g, x, Mode::Train)?;
    let loss = g.cross_entropy(fwd.logits, labels)?;
    let value = f64::from(g.value(loss).data()[0]);
    g.backward(loss)?;
    model.accumulate_grads(&g, &fwd.params);
    model.commit_running_stats(&g);
    Ok(value)
}

/// Validation TSS and HSS, `None` where undefined.
pub fn validate(model: &ModelParams<f32>, images: &[Tensor<f32>], items: &[TrainItem], batch: usize) -> Result<(Option<f64>, Option<f64>)> {
    if items.is_empty() {
        return Ok((None, None));
    }
    let indices: Vec<usize> = items.iter().map(|i| i.source).collect();
    let preds: Vec<Label> = predict(model, images, &indices, batch)?.iter().map(decide).collect();
    let labels: Vec<Label> = items.iter().map(|i| i.label).collect();
    let cm = confusion(&preds, &labels)?;
    Ok((tss(&cm).ok(), hss(&cm).ok()))
}

/// Trains `model` in place for `config.epochs`, recording mean training loss
/// and validation skill each epoch.
pub fn fit_model(
    mut model: ModelParams<f32>,
    config: &TrainConfig,
    data: TrainData<'_>,
    options: &FitOptions,
) -> Result<FitOutcome> {
    config.validate(data.train.len())?;
    if let Some(v) = data.validation.iter().find(|v| v.transform != Transform::Identity) {
        return Err(Error::Input(format!("validation sample {} carries an augmentation transform", v.source)));
    }
    let mut log = log_writer(options)?;
    let eval_batch = options.eval_batch.unwrap_or(config.batch_size);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let order = epoch_order(config.seed, epoch, data.train.len());
        let mut loss_sum = 0.0;
        for (b, range) in batch_ranges(order.len(), config.batch_size).into_iter().enumerate() {
            let items: Vec<TrainItem> = order[range].iter().map(|&i| data.train[i]).collect();
            let labels: Vec<usize> = items.iter().map(|i| i.label.index()).collect();
            let input = assemble_batch(data.images, &items)?;
            let loss = match train_batch(&mut model, input, &labels) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(Error::Divergence { epoch: epoch + 1, batch: b + 1, loss: l }),
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Divergence { epoch: epoch + 1, batch: b + 1, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss * items.len() as f64;
            sgd_step(&mut model, lr, config.weight_decay)?;
        }
        let (val_tss, val_hss) = validate(&model, data.images, data.validation, eval_batch)?;
        let record = EpochRecord { epoch: epoch + 1, lr, train_loss: loss_sum / order.len() as f64, val_tss, val_hss };
        if let Some((path, file)) = log.as_mut() {
            writeln!(file, "{}", record.csv_line()).map_err(|e| Error::io(path.as_path(), e))?;
            file.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        history.push(record);
    }
    Ok(FitOutcome { history, checkpoint: Checkpoint { model, epoch: config.epochs, rng_seed: config.seed } })
}
