//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning-rate schedule evaluated per epoch.
#[derive(Clone, Debug)]
pub enum LrSchedule {
    Constant(f64),
    /// Cosine decay from `initial` at epoch 0 to `final_lr` at the last
    /// epoch (`total - 1`).
    Cosine { initial: f64, final_lr: f64, total_epochs: usize },
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Cosine { initial, final_lr, total_epochs } => {
                if total_epochs <= 1 {
                    return initial;
                }
                let last = (total_epochs - 1) as f64;
                let t = (epoch as f64).min(last) / last;
                final_lr + 0.5 * (initial - final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Per-parameter Adam state.
#[derive(Clone, Debug)]
pub struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(param_lens: &[usize], schedule: LrSchedule, weight_decay: f64) -> Self {
        OptimState {
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }

    pub fn for_params(params: &[Tensor], schedule: LrSchedule, weight_decay: f64) -> Self {
        let lens: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(&lens, schedule, weight_decay)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction and decoupled weight decay.
    /// `epoch` selects the scheduled learning rate.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[&[f64]], epoch: usize) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state holds {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() || grads[i].len() != self.m[i].len() {
                return Err(Error::Contract(format!(
                    "parameter {i} shape mismatch: state {}, param {}, grad {}",
                    self.m[i].len(),
                    p.len(),
                    grads[i].len()
                )));
            }
        }
        self.step += 1;
        let lr = self.schedule.lr(epoch);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((x, &g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + self.epsilon) + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}
