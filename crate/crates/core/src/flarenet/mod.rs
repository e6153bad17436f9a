//! Baseline (M1) and attention (M2) flare classifiers.
//!
//! Both share a VGG-like trunk of six conv blocks (3x3 conv, batch norm, ReLU,
//! 2x2 max-pool) followed by a final un-normalized convolution that collapses
//! the remaining spatial extent into the global descriptor `g`. M2 taps the
//! outputs of blocks 3, 4 and 5 (before pooling) with trainable attention
//! estimators and classifies the concatenation of their summaries.

mod attention;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndtensor::{BatchStats, Graph, Mode, Real, Tensor, Var};

pub use attention::{
    attention_aggregate, attention_compatibility, attention_normalize, AttentionBundle, AttentionVars,
    EstimatorOutput, EstimatorVars,
};
pub use config::{ModelConfig, ModelKind, ATTENTION_TAPS, NUM_BLOCKS, NUM_CLASSES};

/// Running-statistic momentum: `new = (1 - m) * old + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv/dense/projection weights and attention directions; weight-decayed.
    Weight,
    Bias,
    /// Batch-norm gamma/beta.
    NormAffine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Real = f32> {
    /// Unique dotted path, e.g. `block3.conv.weight`.
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNormState {
    fn new(channels: usize) -> Self {
        BatchNormState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        let m = BN_MOMENTUM;
        for (r, &b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = ((1.0 - m) * *r as f64 + m * b) as f32;
        }
        for (r, &b) in self.var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r as f64 + m * b) as f32;
        }
    }
}

/// Shape and initialisation metadata of one parameter slot.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    fan_in: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockSlots {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct EstimatorSlots {
    projection: usize,
    u: usize,
}

/// Index map from architectural role to parameter slot.
#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    blocks: [BlockSlots; NUM_BLOCKS],
    final_weight: usize,
    final_bias: usize,
    estimators: Option<[EstimatorSlots; 3]>,
    classifier_weight: usize,
    classifier_bias: usize,
}

impl Layout {
    fn new(kind: ModelKind, cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, kind: ParamKind, shape: Vec<usize>, fan_in: usize| {
            specs.push(ParamSpec { name, kind, shape, fan_in });
            specs.len() - 1
        };
        let mut cin = 1;
        let blocks = std::array::from_fn(|b| {
            let cout = cfg.block_channels[b];
            let n = b + 1;
            let slots = BlockSlots {
                weight: add(format!("block{n}.conv.weight"), ParamKind::Weight, vec![cout, cin, 3, 3], cin * 9),
                bias: add(format!("block{n}.conv.bias"), ParamKind::Bias, vec![cout], 0),
                gamma: add(format!("block{n}.bn.gamma"), ParamKind::NormAffine, vec![cout], 0),
                beta: add(format!("block{n}.bn.beta"), ParamKind::NormAffine, vec![cout], 0),
            };
            cin = cout;
            slots
        });
        let k = cfg.final_kernel();
        let final_weight = add("final.conv.weight".into(), ParamKind::Weight, vec![cfg.g_dim, cin, k, k], cin * k * k);
        let final_bias = add("final.conv.bias".into(), ParamKind::Bias, vec![cfg.g_dim], 0);
        let estimators = match kind {
            ModelKind::M1 => None,
            ModelKind::M2 => Some(std::array::from_fn(|s| {
                let c = cfg.block_channels[ATTENTION_TAPS[s]];
                let n = s + 1;
                EstimatorSlots {
                    projection: add(format!("attn{n}.proj.weight"), ParamKind::Weight, vec![cfg.g_dim, c], c),
                    u: add(format!("attn{n}.u"), ParamKind::Weight, vec![cfg.g_dim], cfg.g_dim),
                }
            })),
        };
        let features = match kind {
            ModelKind::M1 => cfg.g_dim,
            ModelKind::M2 => 3 * cfg.g_dim,
        };
        let classifier_weight = add("classifier.weight".into(), ParamKind::Weight, vec![NUM_CLASSES, features], features);
        let classifier_bias = add("classifier.bias".into(), ParamKind::Bias, vec![NUM_CLASSES], 0);
        Layout {
            specs,
            blocks,
            final_weight,
            final_bias,
            estimators,
            classifier_weight,
            classifier_bias,
        }
    }
}

/// Output of the shared trunk.
#[derive(Clone, Copy, Debug)]
pub struct Trunk {
    /// Block 3, 4, 5 activations after ReLU, before pooling.
    pub locals: [Var; 3],
    /// `[B, g_dim]` global descriptor.
    pub global: Var,
}

/// Result of [`ModelParams::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// Graph handles of every parameter, parallel to [`ModelParams::params`].
    pub params: Vec<Var>,
    pub attention: Option<AttentionVars>,
}

/// Named parameters plus batch-norm running statistics of one model.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Real = f32> {
    kind: ModelKind,
    config: ModelConfig,
    layout: Layout,
    pub params: Vec<Parameter<T>>,
    pub bn: Vec<BatchNormState>,
}

/// Kaiming-uniform initialisation: weights in `[-b, b]` with `b = sqrt(6 / fan_in)`,
/// zero biases, unit gamma and zero beta.
pub fn build_model(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    config.validate()?;
    let layout = Layout::new(kind, config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = layout
        .specs
        .iter()
        .map(|spec| {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<f32> = match spec.kind {
                ParamKind::Weight => {
                    let bound = kaiming_bound(spec.fan_in) as f32;
                    (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
                ParamKind::Bias => vec![0.0; numel],
                ParamKind::NormAffine if spec.name.ends_with("gamma") => vec![1.0; numel],
                ParamKind::NormAffine => vec![0.0; numel],
            };
            Parameter {
                name: spec.name.clone(),
                kind: spec.kind,
                tensor: Tensor::from_parts(spec.shape.clone(), data).with_grad(),
            }
        })
        .collect();
    let bn = config.block_channels.iter().map(|&c| BatchNormState::new(c)).collect();
    Ok(ModelParams {
        kind,
        config: config.clone(),
        layout,
        params,
        bn,
    })
}

pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl<T: Real> ModelParams<T> {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Same model in another float type (for finite-difference oracles).
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            kind: self.kind,
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            bn: self.bn.clone(),
        }
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut t = Tensor::from_parts(p.tensor.shape().to_vec(), p.tensor.data().to_vec());
                t.requires_grad = p.tensor.requires_grad;
                g.leaf(t)
            })
            .collect()
    }

    fn check_input(&self, g: &Graph<T>, input: Var) -> Result<()> {
        let s = self.config.input_side;
        match g.shape(input) {
            [_, 1, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::Dimension(format!("model expects [B, 1, {s}, {s}] input, got {other:?}"))),
        }
    }

    /// Shared convolutional trunk.
    pub fn forward_trunk(&self, g: &mut Graph<T>, bound: &[Var], input: Var, mode: Mode) -> Result<Trunk> {
        self.check_input(g, input)?;
        let mut x = input;
        let mut locals = [input; 3];
        for (b, slots) in self.layout.blocks.iter().enumerate() {
            x = g.conv2d(x, bound[slots.weight], bound[slots.bias], 1, 1)?;
            let bn = &self.bn[b];
            x = g.batchnorm2d(x, bound[slots.gamma], bound[slots.beta], (&bn.mean, &bn.var), mode, b)?;
            x = g.relu(x)?;
            if let Some(tap) = ATTENTION_TAPS.iter().position(|&t| t == b) {
                locals[tap] = x;
            }
            if self.config.block_pools(b) {
                x = g.maxpool2d(x, 2, 2)?;
            }
        }
        let x = g.conv2d(x, bound[self.layout.final_weight], bound[self.layout.final_bias], 1, 0)?;
        let batch = g.shape(x)[0];
        let global = g.reshape(x, &[batch, self.config.g_dim])?;
        Ok(Trunk { locals, global })
    }

    /// Baseline logits: classifier applied to `g`.
    pub fn forward_m1(&self, g: &mut Graph<T>, bound: &[Var], input: Var, mode: Mode) -> Result<Var> {
        let trunk = self.forward_trunk(g, bound, input, mode)?;
        g.dense(trunk.global, bound[self.layout.classifier_weight], bound[self.layout.classifier_bias])
    }

    /// Attention logits plus per-estimator scores, weights and summaries.
    pub fn forward_m2(&self, g: &mut Graph<T>, bound: &[Var], input: Var, mode: Mode) -> Result<(Var, AttentionVars)> {
        let Some(estimators) = self.layout.estimators else {
            return Err(Error::Config("forward_m2 called on an M1 model".into()));
        };
        let trunk = self.forward_trunk(g, bound, input, mode)?;
        let mut outs = Vec::with_capacity(3);
        for (s, slots) in estimators.iter().enumerate() {
            let (projected, scores) =
                attention_compatibility(g, bound[slots.projection], bound[slots.u], trunk.locals[s], trunk.global)?;
            let weights = attention_normalize(g, scores)?;
            let summary = attention_aggregate(g, weights, projected)?;
            outs.push(EstimatorVars {
                scores,
                weights,
                summary,
                side: self.config.attention_side(s + 1),
            });
        }
        let summaries: Vec<Var> = outs.iter().map(|e| e.summary).collect();
        let features = g.concat(&summaries)?;
        let logits = g.dense(features, bound[self.layout.classifier_weight], bound[self.layout.classifier_bias])?;
        let estimators: [EstimatorVars; 3] = outs.try_into().expect("three estimators");
        Ok((logits, AttentionVars { estimators }))
    }

    /// Binds parameters and runs the forward pass for this model's kind.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, mode: Mode) -> Result<Forward> {
        let params = self.bind(g);
        match self.kind {
            ModelKind::M1 => {
                let logits = self.forward_m1(g, &params, input, mode)?;
                Ok(Forward { logits, params, attention: None })
            }
            ModelKind::M2 => {
                let (logits, att) = self.forward_m2(g, &params, input, mode)?;
                Ok(Forward { logits, params, attention: Some(att) })
            }
        }
    }

    /// Folds train-mode batch statistics recorded by `graph` into the running estimates.
    pub fn commit_running_stats(&mut self, graph: &Graph<T>) {
        for stats in graph.batch_stats() {
            self.bn[stats.layer].update(stats);
        }
    }

    /// Adds the gradients held by `graph` into each parameter's grad buffer.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let (Some(src), Some(dst)) = (graph.grad(v), p.tensor.grad.as_mut()) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Replaces parameter values and statistics from another model of the same layout.
    pub(crate) fn from_named(
        kind: ModelKind,
        config: &ModelConfig,
        mut lookup: impl FnMut(&ParamSpec) -> Result<Vec<T>>,
        bn: Vec<BatchNormState>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(kind, config);
        let params = layout
            .specs
            .iter()
            .map(|spec| {
                let data = lookup(spec)?;
                let t = Tensor::new(&spec.shape, data)?.with_grad();
                Ok(Parameter { name: spec.name.clone(), kind: spec.kind, tensor: t })
            })
            .collect::<Result<Vec<_>>>()?;
        if bn.len() != NUM_BLOCKS
            || bn.iter().zip(&config.block_channels).any(|(s, &c)| s.mean.len() != c || s.var.len() != c)
        {
            return Err(Error::Compatibility("batch-norm statistics do not match the config".into()));
        }
        Ok(ModelParams { kind, config: config.clone(), layout, params, bn })
    }
}

impl ModelParams<f32> {
    /// Class probabilities for a batch in eval mode.
    pub fn predict_proba(&self, images: &Tensor<f32>) -> Result<Vec<[f32; 2]>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let fwd = self.forward(&mut g, x, Mode::Eval)?;
        let probs = g.softmax(fwd.logits)?;
        Ok(g.value(probs).data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    /// Eval-mode probabilities together with the attention values (M2 only).
    pub fn predict_with_attention(&self, images: &Tensor<f32>) -> Result<(Vec<[f32; 2]>, Option<AttentionBundle>)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let fwd = self.forward(&mut g, x, Mode::Eval)?;
        let probs = g.softmax(fwd.logits)?;
        let bundle = fwd.attention.as_ref().map(|vars| AttentionBundle::from_graph(&g, vars));
        Ok((g.value(probs).data().chunks(2).map(|c| [c[0], c[1]]).collect(), bundle))
    }
}
