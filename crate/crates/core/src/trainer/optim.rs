use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdNesterov,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `(step, lr)` pairs: from `step` on, use `lr`. Sorted by step.
    #[serde(default)]
    pub lr_schedule: Vec<(u64, f64)>,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_schedule: Vec::new(),
        }
    }

    pub fn sgd_nesterov(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdNesterov,
            momentum,
            weight_decay,
            ..Self::adam(lr)
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<(u64, f64)>) -> Self {
        self.lr_schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr) || self.lr_schedule.iter().any(|&(_, lr)| !positive(lr)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !positive(self.eps) {
            return Err(Error::Config("adam needs betas in [0, 1) and eps > 0".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("lr schedule steps must increase".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (0-based count of completed updates).
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|&&(s, _)| s <= step)
            .last()
            .map_or(self.lr, |&(_, lr)| lr)
    }
}

/// Optimizer state over a fixed list of flat parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    /// First moment (Adam) or velocity (SGD).
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, shapes: &[usize]) -> Result<Self> {
        config.validate()?;
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let v = match config.kind {
            OptimizerKind::Adam => zeros(),
            OptimizerKind::SgdNesterov => Vec::new(),
        };
        Ok(Optimizer {
            config,
            step: 0,
            m: zeros(),
            v,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params[i]` and `grads[i]` must match the shape
    /// list given at construction.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let wd = c.weight_decay;
        self.step += 1;
        match c.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (c.beta1, c.beta2);
                let bias1 = 1.0 - b1.powf(self.step as f64);
                let bias2 = 1.0 - b2.powf(self.step as f64);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.len() {
                        let gi = g[i] + wd * p[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
            OptimizerKind::SgdNesterov => {
                let mu = c.momentum;
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for i in 0..p.len() {
                        let gi = g[i] + wd * p[i];
                        vel[i] = mu * vel[i] + gi;
                        p[i] -= lr * (gi + mu * vel[i]);
                    }
                }
            }
        }
    }
}
