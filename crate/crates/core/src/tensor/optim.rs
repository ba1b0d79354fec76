use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Nothing is modified if any gradient is
    /// non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i} is {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter {i} at element {j}; step aborted"),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::shape(
                "adam_step",
                "parameter set differs from the one this optimizer was started with",
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gv = gv as f64;
                let m_new = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gv;
                let v_new = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gv * gv;
                *mv = m_new as f32;
                *vv = v_new as f32;
                let delta = lr * (m_new / c1) / ((v_new / c2).sqrt() + self.eps);
                *pv = (*pv as f64 * decay - delta) as f32;
            }
        }
        Ok(())
    }
}

/// Period of the step-decay schedule, in epochs.
pub const STEP_DECAY_EVERY: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    CosineWarmup,
    StepDecay,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub total: usize,
    pub warmup: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, base: f64, total: usize, warmup: usize) -> Result<Self> {
        if !(base.is_finite() && base >= 0.0) {
            return Err(Error::invalid(format!("base learning rate {base} must be >= 0")));
        }
        if total == 0 || warmup > total {
            return Err(Error::invalid(format!(
                "schedule needs 0 <= warmup ({warmup}) <= total ({total}) and total > 0"
            )));
        }
        Ok(Self {
            base,
            total,
            warmup,
            kind,
        })
    }

    pub fn cosine_warmup(base: f64, total: usize, warmup: usize) -> Result<Self> {
        Self::new(ScheduleKind::CosineWarmup, base, total, warmup)
    }

    pub fn step_decay(base: f64, total: usize) -> Result<Self> {
        Self::new(ScheduleKind::StepDecay, base, total, 0)
    }

    pub fn at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total
            )));
        }
        Ok(match self.kind {
            ScheduleKind::CosineWarmup if epoch < self.warmup => {
                self.base * (epoch + 1) as f64 / self.warmup as f64
            }
            ScheduleKind::CosineWarmup => {
                let frac = (epoch - self.warmup) as f64 / (self.total - self.warmup) as f64;
                self.base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            ScheduleKind::StepDecay => {
                self.base * 10f64.powi(-((epoch / STEP_DECAY_EVERY) as i32))
            }
        })
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
