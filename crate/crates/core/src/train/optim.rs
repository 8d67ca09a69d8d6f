use super::{Result, TrainError};
use crate::net::{Model, TensorRole};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with f64 moments. Parameters are updated in f64 and stored back
/// as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// One entry per model parameter, in model order.
    pub moments: Vec<Moments>,
}

impl Adam {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        let moments = model
            .tensors()
            .iter()
            .filter(|t| t.role == TensorRole::Parameter)
            .map(|t| Moments { name: t.name.clone(), m: vec![0.0; t.data.len()], v: vec![0.0; t.data.len()] })
            .collect();
        Self { config, step: 0, moments }
    }

    /// Applies one update from `(parameter name, gradient)` pairs. Parameters
    /// without a gradient keep their values and moments.
    pub fn update(&mut self, model: &mut Model, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let slot = self
                .moments
                .iter_mut()
                .find(|m| &m.name == name)
                .ok_or_else(|| TrainError::UnknownTensorName(name.clone()))?;
            let mut values = model.tensor(name)?.data.clone();
            if g.numel() != values.len() {
                return Err(TrainError::ShapeMismatch(format!("gradient for '{name}'")));
            }
            for (i, &gi) in g.data().iter().enumerate() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * gi;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                values[i] = (values[i] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
            model.set_tensor(name, values)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::DenseNetConfig;

    fn model() -> Model {
        Model::build(DenseNetConfig::tiny(2, 16), 1).unwrap()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut m = model();
        let before = m.tensors().to_vec();
        let mut opt = Adam::new(&m, AdamConfig::default());
        let grads: Vec<(String, Tensor)> = m
            .parameter_names()
            .iter()
            .map(|n| (n.to_string(), Tensor::full(&m.tensor(n).unwrap().shape, 0.37)))
            .collect();
        opt.update(&mut m, &grads, 0.0).unwrap();
        assert_eq!(m.tensors(), before.as_slice());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = model();
        let before = m.tensor("head.bias").unwrap().data.clone();
        let mut opt = Adam::new(&m, AdamConfig::default());
        opt.update(&mut m, &[("head.bias".into(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())], 0.01).unwrap();
        let after = &m.tensor("head.bias").unwrap().data;
        assert!(((before[0] - after[0]) as f64 - 0.01).abs() < 1e-6);
        assert!(((after[1] - before[1]) as f64 - 0.01).abs() < 1e-6);
        assert!(opt.update(&mut m, &[("nope".into(), Tensor::scalar(1.0))], 0.1).is_err());
    }
}
