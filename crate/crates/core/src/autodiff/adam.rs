use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (first_moment, second_moment): (Vec<_>, Vec<_>) =
            params.into_iter().map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape()))).unzip();
        Self { config, first_moment, second_moment, step_count: 0 }
    }

    /// One bias-corrected Adam update.
    ///
    /// A parameter whose gradient is identically zero is treated as absent
    /// from this step: its value and moments are left untouched.
    pub fn step(&mut self, names: &[String], params: &mut [Tensor], grads: &[Tensor]) -> Result<(), AutodiffError> {
        let n = params.len();
        if grads.len() != n || self.first_moment.len() != n || names.len() != n {
            return Err(AutodiffError::Shape {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, {} names, state for {}",
                    n,
                    grads.len(),
                    names.len(),
                    self.first_moment.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(AutodiffError::Shape {
                    op: "adam_step",
                    detail: format!(
                        "parameter `{}` shape {:?}, gradient {:?}, moments {:?}",
                        names[i],
                        p.shape(),
                        g.shape(),
                        self.first_moment[i].shape()
                    ),
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(names[i].clone()));
            }
        }

        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
