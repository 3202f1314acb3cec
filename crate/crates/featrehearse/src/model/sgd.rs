//! Minibatch SGD with momentum, weight decay and a milestone step schedule.

use crate::error::{Error, Result};
use crate::real::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0-based epoch indices at which the learning rate is divided by
    /// `decay_factor` (cumulative).
    pub decay_milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl SgdConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate / self.decay_factor.powi(drops as i32)
    }
}

/// Optimizer state over one flat parameter vector. The update is
/// p <- p - lr_t * (grad + weight_decay * p + momentum * velocity),
/// with velocity accumulating grad + weight_decay * p each step.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    cfg: SgdConfig,
    velocity: Vec<F>,
}

impl<F: Real> Sgd<F> {
    pub fn new(cfg: SgdConfig, param_count: usize) -> Self {
        Self {
            cfg,
            velocity: vec![F::zero(); param_count],
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn velocity(&self) -> &[F] {
        &self.velocity
    }

    pub fn restore_velocity(&mut self, v: Vec<F>) -> Result<()> {
        if v.len() != self.velocity.len() {
            return Err(Error::Dimension(format!(
                "optimizer state holds {} values, expected {}",
                v.len(),
                self.velocity.len()
            )));
        }
        self.velocity = v;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F], epoch: usize) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Dimension(format!(
                "sgd step over {} params with {} grads and {} velocity entries",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged(format!(
                "non-finite gradient at parameter {bad}"
            )));
        }
        let lr = F::from_f64(self.cfg.lr_at(epoch));
        let mu = F::from_f64(self.cfg.momentum);
        let wd = F::from_f64(self.cfg.weight_decay);
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
        Ok(())
    }
}
