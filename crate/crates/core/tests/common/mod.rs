//! Finite-difference oracle shared by the gradient and acceptance suites.
//!
//! The analytic side comes from the graph's backward sweep; the numeric side
//! re-runs plain forward passes with one coordinate nudged by `+-h`, in f64.
#![allow(dead_code)]

use attnflare::flarenet::ModelParams;
use attnflare::ndtensor::{Graph, Mode, Real, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod cases;

pub const FD_STEP: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Builds a scalar loss from graph leaves, for any element type.
pub trait LossFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> attnflare::Result<Var>;
}

fn loss_value<L: LossFn>(loss: &L, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = loss.build(&mut g, &vars).unwrap();
    g.value(out).data()[0]
}

fn coords(numel: usize, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= per_tensor {
        (0..numel).collect()
    } else {
        sample(rng, numel, per_tensor).into_vec()
    }
}

/// Worst relative error per differentiable input, with the analytic gradient
/// taken in `A` arithmetic and finite differences in f64.
pub fn check_op<A: Real, L: LossFn>(
    loss: &L,
    inputs: &[Tensor<f64>],
    differentiable: &[bool],
    per_tensor: usize,
    seed: u64,
) -> Vec<f64> {
    let mut g = Graph::<A>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| {
            let mut c = t.cast::<A>();
            c.requires_grad = d;
            g.leaf(c)
        })
        .collect();
    let out = loss.build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let analytic = g.grad(vars[i]).expect("gradient present");
        let mut w = 0.0f64;
        for j in coords(t.numel(), per_tensor, &mut rng) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (loss_value(loss, &plus) - loss_value(loss, &minus)) / (2.0 * FD_STEP);
            w = w.max(rel_err(analytic[j].as_f64(), fd));
        }
        worst.push(w);
    }
    worst
}

/// Mean cross-entropy of a model forward pass in train mode.
pub fn model_loss<T: Real>(model: &ModelParams<T>, input: &Tensor<T>, labels: &[usize]) -> (Graph<T>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let fwd = model.forward(&mut g, x, Mode::Train).unwrap();
    let loss = g.cross_entropy(fwd.logits, labels).unwrap();
    (g, fwd.params, loss)
}

/// Step for whole-model checks. Activations a unit-scale step away from a
/// ReLU or max-pool kink would otherwise be crossed, so this is much smaller
/// than [`FD_STEP`]; f64 evaluation keeps the round-off negligible.
pub const MODEL_FD_STEP: f64 = 1e-6;

/// Per-parameter-tensor comparison from [`check_model`].
#[derive(Debug)]
pub struct ParamCheck {
    pub name: String,
    pub worst_rel: f64,
    pub max_analytic: f64,
    pub max_numeric: f64,
}

impl ParamCheck {
    /// Either the relative error is within `tol`, or both sides agree that the
    /// gradient vanishes (conv biases feeding a batch norm, say).
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel < tol || (self.max_analytic < 1e-10 && self.max_numeric < 1e-7)
    }
}

/// Compares the analytic gradient of every parameter tensor, computed in `A`,
/// against f64 central differences on sampled coordinates.
pub fn check_model<A: Real>(
    model: &ModelParams<f32>,
    input: &Tensor<f32>,
    labels: &[usize],
    per_tensor: usize,
    seed: u64,
) -> Vec<ParamCheck> {
    let ma = model.cast::<A>();
    let (mut g, bound, loss) = model_loss(&ma, &input.cast(), labels);
    g.backward(loss).unwrap();

    let m64 = model.cast::<f64>();
    let x64 = input.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (p_idx, p) in model.params.iter().enumerate() {
        let analytic = g.grad(bound[p_idx]).expect("parameter gradient");
        let mut check = ParamCheck { name: p.name.clone(), worst_rel: 0.0, max_analytic: 0.0, max_numeric: 0.0 };
        for j in coords(p.tensor.numel(), per_tensor, &mut rng) {
            let eval = |delta: f64| {
                let mut m = m64.clone();
                m.params[p_idx].tensor.data_mut()[j] += delta;
                let (g, _, l) = model_loss(&m, &x64, labels);
                g.value(l).data()[0]
            };
            let fd = (eval(MODEL_FD_STEP) - eval(-MODEL_FD_STEP)) / (2.0 * MODEL_FD_STEP);
            let a = analytic[j].as_f64();
            check.worst_rel = check.worst_rel.max(rel_err(a, fd));
            check.max_analytic = check.max_analytic.max(a.abs());
            check.max_numeric = check.max_numeric.max(fd.abs());
        }
        out.push(check);
    }
    out
}

/// Elementwise-weighted sum `sum(y * r)` as a generic scalar head for op checks.
pub fn weighted_head<T: Real>(g: &mut Graph<T>, y: Var, seed: u64) -> attnflare::Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(&shape, &mut rng, 1.0).cast::<T>();
    let rv = g.constant(r);
    let prod = g.mul(y, rv)?;
    g.sum(prod)
}
