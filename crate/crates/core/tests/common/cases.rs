//! Gradient-check cases for every differentiable op, shared by the gradient
//! suite and the acceptance run. Each case returns the worst relative error
//! per differentiable input, labelled by configuration.

use super::*;
use attnflare::ndtensor::{Graph, Mode, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type CaseResult = Vec<(String, Vec<f64>)>;

const COORDS: usize = 20;

struct Conv {
    stride: usize,
    pad: usize,
}
impl LossFn for Conv {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> attnflare::Result<Var> {
        let y = g.conv2d(v[0], v[1], v[2], self.stride, self.pad)?;
        weighted_head(g, y, 99)
    }
}

pub fn conv2d() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        random_tensor(&[1, 2, 6, 6], &mut rng, 1.0),
        random_tensor(&[3, 2, 3, 3], &mut rng, 1.0),
        random_tensor(&[3], &mut rng, 1.0),
    ];
    let mut out = Vec::new();
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let errs = check_op::<f32, _>(&Conv { stride, pad }, &inputs, &[true; 3], COORDS, 5);
        out.push((format!("conv2d s{stride} p{pad}"), errs));
    }
    // pointwise fast path
    let inputs = vec![
        random_tensor(&[2, 3, 4, 4], &mut rng, 1.0),
        random_tensor(&[2, 3, 1, 1], &mut rng, 1.0),
        random_tensor(&[2], &mut rng, 1.0),
    ];
    out.push(("conv2d 1x1".into(), check_op::<f32, _>(&Conv { stride: 1, pad: 0 }, &inputs, &[true; 3], COORDS, 6)));
    out
}

struct Bn(Mode);
impl LossFn for Bn {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> attnflare::Result<Var> {
        let mean = [0.1f32, -0.2, 0.05];
        let var = [0.8f32, 1.3, 0.6];
        let y = g.batchnorm2d(v[0], v[1], v[2], (&mean, &var), self.0, 0)?;
        weighted_head(g, y, 7)
    }
}

pub fn batchnorm() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        random_tensor(&[2, 3, 3, 3], &mut rng, 2.0),
        random_tensor(&[3], &mut rng, 1.5),
        random_tensor(&[3], &mut rng, 1.0),
    ];
    [Mode::Train, Mode::Eval]
        .into_iter()
        .map(|mode| (format!("batchnorm {mode:?}"), check_op::<f32, _>(&Bn(mode), &inputs, &[true; 3], COORDS, 8)))
        .collect()
}

struct Pool;
impl LossFn for Pool {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> attnflare::Result<Var> {
        let y = g.maxpool2d(v[0], 2, 2)?;
        weighted_head(g, y, 3)
    }
}

/// Distinct values spaced well beyond the finite-difference step.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025 + 0.0125).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).unwrap()
}

pub fn maxpool() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![spaced(&[2, 2, 4, 6], &mut rng)];
    vec![("maxpool".into(), check_op::<f32, _>(&Pool, &inputs, &[true], COORDS, 1))]
}

struct ReluHead;
impl LossFn for ReluHead {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> attnflare::Result<Var> {
        let y = g.relu(v[0])?;
        weighted_head(g, y, 4)
    }
}

pub fn relu() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![spaced(&[3, 10], &mut rng)];
    vec![("relu".into(), check_op::<f32, _>(&ReluHead, &inputs, &[true], 30, 2))]
}

struct DenseCe;
impl LossFn for DenseCe {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> attnflare::Result<Var> {
        let y = g.dense(v[0], v[1], v[2])?;
        g.cross_entropy(y, &[0, 1, 1, 0])
    }
}

pub fn dense_cross_entropy() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        random_tensor(&[4, 5], &mut rng, 1.0),
        random_tensor(&[2, 5], &mut rng, 1.0),
        random_tensor(&[2], &mut rng, 1.0),
    ];
    vec![("dense+ce".into(), check_op::<f32, _>(&DenseCe, &inputs, &[true; 3], COORDS, 3))]
}

struct Ce;
impl LossFn for Ce {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> attnflare::Result<Var> {
        g.cross_entropy(v[0], &[1, 0, 0, 1, 1])
    }
}

pub fn cross_entropy() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![random_tensor(&[5, 2], &mut rng, 3.0)];
    vec![("cross_entropy".into(), check_op::<f32, _>(&Ce, &inputs, &[true], COORDS, 4))]
}

struct SoftmaxHead;
impl LossFn for SoftmaxHead {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> attnflare::Result<Var> {
        let y = g.softmax(v[0])?;
        weighted_head(g, y, 5)
    }
}

pub fn softmax() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![random_tensor(&[3, 6], &mut rng, 2.0)];
    vec![("softmax".into(), check_op::<f32, _>(&SoftmaxHead, &inputs, &[true], COORDS, 5))]
}

struct AttentionChain;
impl LossFn for AttentionChain {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> attnflare::Result<Var> {
        let lt = g.project_locals(v[0], v[1])?;
        let c = g.additive_scores(lt, v[2], v[3])?;
        let a = g.softmax(c)?;
        let s = g.weighted_sum(a, lt)?;
        let both = g.concat(&[s, v[2]])?;
        let flat = g.reshape(both, &[2 * 2 * 4])?;
        weighted_head(g, flat, 6)
    }
}

pub fn attention_chain() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![
        random_tensor(&[2, 3, 2, 3], &mut rng, 1.0),
        random_tensor(&[4, 3], &mut rng, 1.0),
        random_tensor(&[2, 4], &mut rng, 1.0),
        random_tensor(&[4], &mut rng, 1.0),
    ];
    vec![("attention chain".into(), check_op::<f32, _>(&AttentionChain, &inputs, &[true; 4], COORDS, 7))]
}

struct Scores;
impl LossFn for Scores {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> attnflare::Result<Var> {
        let c = g.additive_scores(v[0], v[1], v[2])?;
        weighted_head(g, c, 8)
    }
}

pub fn additive_scores() -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![
        random_tensor(&[2, 5, 3], &mut rng, 1.0),
        random_tensor(&[2, 3], &mut rng, 1.0),
        random_tensor(&[3], &mut rng, 1.0),
    ];
    vec![("additive_scores".into(), check_op::<f32, _>(&Scores, &inputs, &[true; 3], COORDS, 9))]
}

/// Every op case in one list.
pub fn all_ops() -> CaseResult {
    [conv2d, batchnorm, maxpool, relu, dense_cross_entropy, cross_entropy, softmax, attention_chain, additive_scores]
        .into_iter()
        .flat_map(|case| case())
        .collect()
}
