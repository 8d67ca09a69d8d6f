use super::tape::{Op, Tape, Var};
use super::{split_nc_spatial, Result, Tensor, TensorError};

/// Batch normalization mode.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics over `(N, *spatial)`.
    Train { eps: f64 },
    /// Normalize with frozen running statistics.
    Eval { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-channel statistics of one training batch, for running-average updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

impl BatchStats {
    /// `running = momentum·running + (1 − momentum)·batch`.
    pub fn update_running(&self, momentum: f64, mean: &mut [f64], var: &mut [f64]) {
        for c in 0..self.mean.len() {
            mean[c] = momentum * mean[c] + (1.0 - momentum) * self.mean[c];
            var[c] = momentum * var[c] + (1.0 - momentum) * self.var[c];
        }
    }
}

pub(crate) struct BnSaved {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
    n: usize,
    c: usize,
    plane: usize,
    shape: Vec<usize>,
}

pub(crate) fn backward(g: &Tensor, gamma: &Tensor, s: &BnSaved) -> (Tensor, Tensor, Tensor) {
    let (n, c, plane) = (s.n, s.c, s.plane);
    let m = (n * plane) as f64;
    let gd = g.data();
    let mut dx = vec![0.0; gd.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sum_g += gd[i];
                sum_gx += gd[i] * s.xhat[i];
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let gm = gamma.data()[ch];
        let k = gm * s.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = if s.train {
                    k * (gd[i] - sum_g / m - s.xhat[i] * sum_gx / m)
                } else {
                    k * gd[i]
                };
            }
        }
    }
    (
        Tensor::new(s.shape.clone(), dx).expect("shape"),
        Tensor::new(vec![c], dgamma).expect("shape"),
        Tensor::new(vec![c], dbeta).expect("shape"),
    )
}

impl Tape {
    /// Per-channel batch normalization of `[N, C, *spatial]`.
    ///
    /// In train mode the batch statistics are returned so the caller can
    /// update its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, sp) = split_nc_spatial(&shape)?;
        let plane: usize = sp.iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch(format!("batch norm affine params must be [{c}]")));
        }
        let m = n * plane;
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut stats = None;
        match mode {
            BatchNormMode::Train { eps } => {
                if n < 2 {
                    return Err(TensorError::BatchTooSmall(n));
                }
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        sum += xd[off..off + plane].iter().sum::<f64>();
                    }
                    let mean = sum / m as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        ss += xd[off..off + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = ss / m as f64;
                    means[ch] = mean;
                    vars[ch] = ss / (m - 1) as f64;
                    inv_std[ch] = 1.0 / (var + eps).sqrt();
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            xhat[i] = (xd[i] - mean) * inv_std[ch];
                        }
                    }
                }
                stats = Some(BatchStats { mean: means, var: vars });
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::ShapeMismatch("running statistics length".into()));
                }
                for ch in 0..c {
                    inv_std[ch] = 1.0 / (var[ch] + eps).sqrt();
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    y[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let saved = BnSaved {
            xhat,
            inv_std,
            train: matches!(mode, BatchNormMode::Train { .. }),
            n,
            c,
            plane,
            shape: shape.clone(),
        };
        let out = self.push(Tensor::new(shape, y)?, Op::BatchNorm { x, gamma, beta, saved });
        Ok((out, stats))
    }
}
