use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::model::ParameterSet;
use crate::tensor::Matrix;

/// Linear warmup to `peak`, then cosine decay to `floor` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak: f64,
    pub floor: f64,
}

impl LrSchedule {
    /// Learning rate for the 1-based optimizer step `step`.
    pub fn at(&self, step: u64) -> f64 {
        if self.peak == 0.0 {
            return 0.0;
        }
        if step <= self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.floor.min(self.peak);
        floor + 0.5 * (self.peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    schedule: LrSchedule,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: f64,
    freeze_decoder: bool,
    t: u64,
    m: Vec<Matrix<f32>>,
    v: Vec<Matrix<f32>>,
}

impl Adam {
    pub fn new(params: &ParameterSet<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Matrix<f32>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            schedule: cfg.schedule(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip_norm: cfg.clip_norm,
            freeze_decoder: cfg.freeze_decoder,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Learning rate the next call to [`Self::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.at(self.t + 1)
    }

    /// Applies one update from `grads` (clipped in place). A zero learning rate
    /// advances the step counter only.
    pub fn step(&mut self, params: &mut ParameterSet<f32>, grads: &mut ParameterSet<f32>) {
        self.t += 1;
        let lr = self.schedule.at(self.t);
        if lr == 0.0 {
            return;
        }
        let norm = grads
            .named_tensors()
            .iter()
            .map(|(_, g)| g.sum_squares())
            .sum::<f64>()
            .sqrt();
        if norm > self.clip_norm {
            grads.scale((self.clip_norm / norm) as f32);
        }
        let trainable = if self.freeze_decoder {
            params.compressor_tensor_count()
        } else {
            usize::MAX
        };
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step_size = (lr / c1) as f32;
        let c2 = c2 as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        let grads = grads.named_tensors();
        for (i, p) in params.tensors_mut().into_iter().enumerate().take(trainable) {
            let g = grads[i].1.as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= step_size * m[j] / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}
