//! Adam with classic L2 weight decay, plus the step-decay schedule.

use super::tensor::Tensor;
use super::NumError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            weight_decay: 1e-4,
            eps: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

/// Adam state: step counter plus first/second moment buffers, one pair per
/// parameter in the (stable) order they are passed to `step`.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Drops moment buffers and the step counter; used at distillation
    /// phase boundaries.
    pub fn reset_moments(&mut self) {
        self.first.clear();
        self.second.clear();
        self.step_count = 0;
    }

    /// One update over `params`. Weight decay is added to the raw gradient
    /// (classic L2). Gradients are cleared afterwards; parameters whose
    /// gradient buffer is absent are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), NumError> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.first.len() != params.len() {
            return Err(NumError::OptimizerParamCount {
                expected: self.first.len(),
                got: params.len(),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if self.first[i].len() != p.len() {
                return Err(NumError::OptimizerShape {
                    index: i,
                    expected: self.first[i].len(),
                    got: p.len(),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.cfg;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad[j] + c.weight_decay * data[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            p.clear_grad();
        }
        Ok(())
    }
}

/// base_lr · gamma^(number of milestones ≤ epoch). Milestones must be
/// sorted ascending.
pub fn lr_schedule(base_lr: f64, epoch: usize, milestones: &[usize], gamma: f64) -> f64 {
    let decays = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * gamma.powi(decays as i32)
}
