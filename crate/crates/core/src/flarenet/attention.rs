use crate::error::{Error, Result};
use crate::ndtensor::{Graph, Real, Var};

/// Graph handles for one attention estimator's intermediate results.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorVars {
    /// `[B, n]` compatibility scores.
    pub scores: Var,
    /// `[B, n]` softmax-normalised weights.
    pub weights: Var,
    /// `[B, g_dim]` attention-weighted summary.
    pub summary: Var,
    /// Side of the square location grid, `n = side * side`.
    pub side: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub estimators: [EstimatorVars; 3],
}

/// Projects the tapped local features to `g_dim` and scores each location
/// against the global descriptor with `c_i = u . (proj(l_i) + g)`.
///
/// Returns `(projected [B, n, g_dim], scores [B, n])`.
pub fn attention_compatibility<T: Real>(
    g: &mut Graph<T>,
    projection: Var,
    u: Var,
    locals: Var,
    global: Var,
) -> Result<(Var, Var)> {
    let projected = g.project_locals(locals, projection)?;
    let scores = g.additive_scores(projected, global, u)?;
    Ok((projected, scores))
}

/// Softmax over locations.
pub fn attention_normalize<T: Real>(g: &mut Graph<T>, scores: Var) -> Result<Var> {
    g.softmax(scores)
}

/// `g_a = sum_i a_i * proj(l_i)`.
pub fn attention_aggregate<T: Real>(g: &mut Graph<T>, weights: Var, projected: Var) -> Result<Var> {
    g.weighted_sum(weights, projected)
}

/// Materialised values of one estimator for a whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorOutput {
    pub side: usize,
    pub batch: usize,
    pub scores: Vec<f32>,
    pub weights: Vec<f32>,
    pub summary: Vec<f32>,
    pub g_dim: usize,
}

impl EstimatorOutput {
    pub fn locations(&self) -> usize {
        self.side * self.side
    }

    pub fn weights_of(&self, sample: usize) -> &[f32] {
        let n = self.locations();
        &self.weights[sample * n..(sample + 1) * n]
    }

    pub fn scores_of(&self, sample: usize) -> &[f32] {
        let n = self.locations();
        &self.scores[sample * n..(sample + 1) * n]
    }

    pub fn summary_of(&self, sample: usize) -> &[f32] {
        &self.summary[sample * self.g_dim..(sample + 1) * self.g_dim]
    }
}

/// Scores, weights and summaries of the three estimators.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBundle {
    pub estimators: [EstimatorOutput; 3],
}

impl AttentionBundle {
    pub fn from_graph<T: Real>(g: &Graph<T>, vars: &AttentionVars) -> Self {
        let to_f32 = |v: Var| g.value(v).data().iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let estimators = vars.estimators.map(|e| {
            let shape = g.shape(e.summary);
            EstimatorOutput {
                side: e.side,
                batch: shape[0],
                g_dim: shape[1],
                scores: to_f32(e.scores),
                weights: to_f32(e.weights),
                summary: to_f32(e.summary),
            }
        });
        AttentionBundle { estimators }
    }

    /// Estimator by its one-based index.
    pub fn estimator(&self, index: usize) -> Result<&EstimatorOutput> {
        match index {
            1..=3 => Ok(&self.estimators[index - 1]),
            _ => Err(Error::Index(format!("attention estimator {index} outside 1..=3"))),
        }
    }
}
