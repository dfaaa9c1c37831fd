//! Adam with bias correction, plus the two learning-rate schedules used in training.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second[index]
    }

    /// Applies one bias-corrected update from the stored gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if p.trainable {
                let m = self.first[i].data_mut();
                let v = self.second[i].data_mut();
                let grad = p.grad.data();
                for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
            p.grad.fill(0.0);
        }
    }
}

/// How the learning rate evolves during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` after every optimizer iteration.
    PerIteration { factor: f64 },
    /// Multiply by `factor` when the monitored training accuracy fails to
    /// improve for `patience` consecutive evaluation windows.
    Plateau { factor: f64, patience: usize },
}

/// Mutable bookkeeping for an [`LrSchedule`].
#[derive(Clone, Debug)]
pub struct Scheduler {
    pub schedule: LrSchedule,
    best: f64,
    stale: usize,
}

impl Scheduler {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            schedule,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    pub fn after_iteration(&mut self, opt: &mut Adam) {
        if let LrSchedule::PerIteration { factor } = self.schedule {
            opt.lr *= factor;
        }
    }

    /// Feeds one training-accuracy observation; returns true if the rate decayed.
    pub fn after_window(&mut self, opt: &mut Adam, train_accuracy: f64) -> bool {
        let LrSchedule::Plateau { factor, patience } = self.schedule else {
            return false;
        };
        if train_accuracy > self.best {
            self.best = train_accuracy;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= patience {
            opt.lr *= factor;
            self.stale = 0;
            return true;
        }
        false
    }
}
