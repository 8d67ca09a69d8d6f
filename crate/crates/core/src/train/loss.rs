use super::{Result, TrainError};
use crate::tensor::{Function, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[P_MIN, 1 − P_MIN]` before the logarithm.
pub const P_MIN: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum ClassWeightMode {
    /// `w_c = N / (C · N_c)`.
    #[default]
    Balanced,
    None,
    Explicit(Vec<f64>),
}


pub fn compute_class_weights(labels: &[usize], num_classes: usize, mode: &ClassWeightMode) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(TrainError::ConfigInvalid(format!("label {l} outside 0..{num_classes}")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(TrainError::MissingClass(c));
    }
    Ok(match mode {
        ClassWeightMode::Balanced => {
            let n = labels.len() as f64;
            counts.iter().map(|&nc| n / (num_classes as f64 * nc as f64)).collect()
        }
        ClassWeightMode::None => vec![1.0; num_classes],
        ClassWeightMode::Explicit(w) => {
            if w.len() != num_classes || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(TrainError::ConfigInvalid(format!("explicit class weights {w:?}")));
            }
            w.clone()
        }
    })
}

fn check(probs: &Tensor, targets: &[usize], weights: &[f64]) -> Result<(usize, usize)> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(TrainError::ShapeMismatch(format!("probabilities {s:?} for {} targets", targets.len())));
    }
    if weights.len() != s[1] {
        return Err(TrainError::ShapeMismatch(format!("{} class weights for {} classes", weights.len(), s[1])));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= s[1]) {
        return Err(TrainError::ShapeMismatch(format!("target class {t} for {} classes", s[1])));
    }
    Ok((s[0], s[1]))
}

fn term(p_raw: f64, w: f64, gamma: f64) -> f64 {
    let p = p_raw.clamp(P_MIN, 1.0 - P_MIN);
    -w * (1.0 - p).powf(gamma) * p.ln()
}

/// Mean over rows of `−w_y (1 − p_y)^γ ln p_y`.
pub fn focal_loss_value(probs: &Tensor, targets: &[usize], weights: &[f64], gamma: f64) -> Result<f64> {
    let (n, k) = check(probs, targets, weights)?;
    let d = probs.data();
    Ok(targets.iter().enumerate().map(|(i, &y)| term(d[i * k + y], weights[y], gamma)).sum::<f64>() / n as f64)
}

struct FocalBackward {
    targets: Vec<usize>,
    weights: Vec<f64>,
    gamma: f64,
}

impl Function for FocalBackward {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let probs = inputs[0];
        let (n, k) = (probs.shape()[0], probs.shape()[1]);
        let g = grad.data()[0] / n as f64;
        let mut d = Tensor::zeros(probs.shape());
        for (i, &y) in self.targets.iter().enumerate() {
            let p = probs.data()[i * k + y];
            if !(P_MIN..=1.0 - P_MIN).contains(&p) {
                continue;
            }
            let w = self.weights[y];
            let q = 1.0 - p;
            let modulating = if self.gamma == 0.0 { 0.0 } else { self.gamma * q.powf(self.gamma - 1.0) * p.ln() };
            d.data_mut()[i * k + y] = g * w * (modulating - q.powf(self.gamma) / p);
        }
        vec![Some(d)]
    }
}

/// Class-weighted focal loss on softmax outputs, recorded on the tape.
pub fn focal_loss(tape: &mut Tape, probs: Var, targets: &[usize], weights: &[f64], gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(TrainError::ConfigInvalid(format!("focal gamma {gamma}")));
    }
    let value = focal_loss_value(tape.value(probs), targets, weights, gamma)?;
    let f = FocalBackward { targets: targets.to_vec(), weights: weights.to_vec(), gamma };
    Ok(tape.custom(&[probs], Tensor::scalar(value), Box::new(f)))
}
