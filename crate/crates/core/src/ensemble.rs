//! Stacked generalization: a multinomial logistic head over the concatenated
//! class probabilities of the ensemble members, fitted on the validation set.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::learner::{argmax, softmax, LearnerError, PredictionProfile, ResidualMlp};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    NoMembers,
    #[error("stacking diverged at iteration {0}")]
    Diverged(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self { iterations: 200, learning_rate: 0.5 }
    }
}

/// `scores = W · [p¹ ‖ … ‖ pᴱ] + b`, with `W` of shape `C × (E·C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingModel {
    pub members: usize,
    pub classes: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub iterations: usize,
}

impl StackingModel {
    /// Starts as the plain average of member probabilities.
    pub fn averaging(members: usize, classes: usize) -> Self {
        let mut weights = vec![vec![0.0; members * classes]; classes];
        for (c, row) in weights.iter_mut().enumerate() {
            for e in 0..members {
                row[e * classes + c] = 1.0 / members as f64;
            }
        }
        Self { members, classes, weights, bias: vec![0.0; classes], iterations: 0 }
    }

    fn weight_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.classes, self.members * self.classes), |(i, j)| self.weights[i][j])
    }

    pub fn scores(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>, EnsembleError> {
        if inputs.ncols() != self.members * self.classes {
            return Err(EnsembleError::Shape(format!(
                "stack expects {} inputs, got {}",
                self.members * self.classes,
                inputs.ncols()
            )));
        }
        Ok(inputs.dot(&self.weight_matrix().t()) + &Array1::from(self.bias.clone()))
    }

    /// Reorders members; `order[k]` is the old index of new member `k`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let c = self.classes;
        let weights = self
            .weights
            .iter()
            .map(|row| order.iter().flat_map(|&old| row[old * c..(old + 1) * c].iter().copied()).collect())
            .collect();
        Self { weights, ..self.clone() }
    }
}

fn stack_inputs(member_probs: &[Array2<f64>]) -> Result<Array2<f64>, EnsembleError> {
    if member_probs.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    let rows = member_probs[0].nrows();
    let classes = member_probs[0].ncols();
    if member_probs.iter().any(|p| p.nrows() != rows || p.ncols() != classes) {
        return Err(EnsembleError::Shape("member probability matrices differ in shape".into()));
    }
    let views: Vec<_> = member_probs.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| EnsembleError::Shape(e.to_string()))
}

/// Full-batch gradient descent on mean cross-entropy, from the averaging
/// initialisation.
pub fn fit_stacking_probs(
    member_probs: &[Array2<f64>],
    labels: &[usize],
    cfg: &StackConfig,
) -> Result<StackingModel, EnsembleError> {
    let z = stack_inputs(member_probs)?;
    if z.nrows() != labels.len() || labels.is_empty() {
        return Err(EnsembleError::Shape(format!("{} rows vs {} labels", z.nrows(), labels.len())));
    }
    let classes = member_probs[0].ncols();
    let mut model = StackingModel::averaging(member_probs.len(), classes);
    let mut w = model.weight_matrix();
    let mut b = Array1::from(model.bias.clone());
    let n = labels.len() as f64;
    for it in 0..cfg.iterations {
        let scores = z.dot(&w.t()) + &b;
        let mut grad = softmax(&scores);
        for (i, &y) in labels.iter().enumerate() {
            grad[[i, y]] -= 1.0;
        }
        grad /= n;
        let gw = grad.t().dot(&z);
        let gb = grad.sum_axis(Axis(0));
        w.scaled_add(-cfg.learning_rate, &gw);
        b.scaled_add(-cfg.learning_rate, &gb);
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(EnsembleError::Diverged(it));
        }
    }
    model.weights = w.outer_iter().map(|r| r.to_vec()).collect();
    model.bias = b.to_vec();
    model.iterations = cfg.iterations;
    Ok(model)
}

pub fn member_probabilities(members: &[ResidualMlp], data: &LabeledDataset) -> Result<Vec<Array2<f64>>, EnsembleError> {
    if members.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    let x = data.features().view();
    members.par_iter().map(|m| m.predict_proba(&x).map_err(EnsembleError::from)).collect()
}

pub fn fit_stacking(members: &[ResidualMlp], val: &LabeledDataset, cfg: &StackConfig) -> Result<StackingModel, EnsembleError> {
    fit_stacking_probs(&member_probabilities(members, val)?, val.labels(), cfg)
}

pub fn predict_from_probs(
    member_probs: &[Array2<f64>],
    stack: &StackingModel,
    labels: &[usize],
) -> Result<PredictionProfile, EnsembleError> {
    let scores = stack.scores(&stack_inputs(member_probs)?.view())?;
    let predictions = scores.axis_iter(Axis(0)).map(argmax).collect();
    Ok(PredictionProfile::new(predictions, labels)?)
}

pub fn predict_ensemble(
    members: &[ResidualMlp],
    stack: &StackingModel,
    data: &LabeledDataset,
) -> Result<PredictionProfile, EnsembleError> {
    predict_from_probs(&member_probabilities(members, data)?, stack, data.labels())
}
