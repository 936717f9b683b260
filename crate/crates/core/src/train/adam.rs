use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameter;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0008,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// One Adam update of a flat parameter at step `t` (1-based). Moments are
/// kept in `f64` whatever the parameter precision.
pub fn adam_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::Shape {
            what: "adam state".into(),
            expected: vec![n; 3],
            found: vec![grad.len(), m.len(), v.len()],
        });
    }
    if t == 0 {
        return Err(Error::Config("adam step counter starts at 1".into()));
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..n {
        let g = grad[i].as_f64();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let update = cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        if update != 0.0 {
            param[i] = T::of(param[i].as_f64() - update);
        }
    }
    Ok(())
}

/// Adam state for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, params: &[Parameter<T>]) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Ok(Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies the accumulated gradients. Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step<T: Real>(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.tensor.numel()],
            };
            adam_step(p.tensor.data_mut(), &grad, m, v, self.t, &self.cfg)?;
        }
        Ok(())
    }
}
