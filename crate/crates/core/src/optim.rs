//! SGD with momentum and weight decay for the student, Adam for the meta network.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: Vec::new(),
            decay: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{section}.lr"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{section}.momentum"), "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("{section}.weight_decay"), "must be non-negative"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("{section}.decay"), "must lie in (0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("{section}.milestones"), "must be strictly increasing"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        (0..passed).fold(self.lr, |lr, _| lr * self.decay)
    }
}

fn check_grads(params: &ModelParams, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "{name}: gradient shape {:?} does not match {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
    }
    Ok(())
}

/// Momentum buffers for one parameter set.
///
/// Update: `d = g + wd·θ`, `v = μ·v + d`, `θ -= lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::contract("momentum buffers do not match the parameters"));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        check_grads(params, grads)?;
        for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            let theta = p.data_mut();
            for ((x, &gi), vi) in theta.iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gi + weight_decay * *x;
                *vi = momentum * *vi + d;
                *x -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{section}.lr"), "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{section}.{name}"), "must lie in [0, 1)"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config(format!("{section}.eps"), "must be positive"));
        }
        Ok(())
    }
}

/// Bias-corrected adaptive-moment optimizer without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros = || params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, first: Vec<Tensor>, second: Vec<Tensor>, steps: u64) -> Result<()> {
        let fits = |v: &[Tensor], w: &[Tensor]| {
            v.len() == w.len() && v.iter().zip(w).all(|(a, b)| a.shape() == b.shape())
        };
        if !fits(&first, &self.first) || !fits(&second, &self.second) {
            return Err(Error::contract("adam moments do not match the parameters"));
        }
        self.first = first;
        self.second = second;
        self.steps = steps;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        check_grads(params, grads)?;
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.push("w", Tensor::vector(vec![v]).unwrap());
        p
    }

    #[test]
    fn sgd_momentum_by_hand() {
        let mut p = single(1.0);
        let mut opt = Sgd::new(&p);
        let g = [Tensor::vector(vec![0.5]).unwrap()];
        opt.step(&mut p, &g, 0.1, 0.9, 0.01).unwrap();
        // d = 0.5 + 0.01, v = 0.51, θ = 1 - 0.051
        assert!((p.get("w").unwrap().data()[0] - 0.949).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1, 0.9, 0.01).unwrap();
        let d = 0.5 + 0.01 * 0.949;
        let v = 0.9 * 0.51 + d;
        assert!((p.get("w").unwrap().data()[0] - (0.949 - 0.1 * v)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &[Tensor::vector(vec![3.0]).unwrap()]).unwrap();
        assert!((p.get("w").unwrap().data()[0] + 1e-3).abs() < 1e-9);
        let mut q = single(0.5);
        let mut opt = Adam::new(&q, AdamConfig::default());
        opt.step(&mut q, &[Tensor::vector(vec![0.0]).unwrap()]).unwrap();
        assert_eq!(q.get("w").unwrap().data()[0], 0.5);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = SgdConfig {
            milestones: vec![2, 4],
            ..SgdConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.05);
        assert_eq!(cfg.lr_at(2), 0.05 * 0.1);
        assert_eq!(cfg.lr_at(5), 0.05 * 0.1 * 0.1);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut p = single(1.0);
        let mut opt = Sgd::new(&p);
        assert!(opt.step(&mut p, &[], 0.1, 0.9, 0.0).is_err());
        assert!(opt.step(&mut p, &[Tensor::vector(vec![1.0, 2.0]).unwrap()], 0.1, 0.9, 0.0).is_err());
        assert!(SgdConfig { lr: 0.0, ..SgdConfig::default() }.validate("optimizer").is_err());
    }
}
