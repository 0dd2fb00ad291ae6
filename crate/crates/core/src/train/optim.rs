//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: [0.9, 0.99],
            weight_decay: 5e-4,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.betas.iter().all(|b| (0.0..1.0).contains(b))
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "optimizer: need lr >= 0, betas in [0, 1), weight_decay >= 0, eps > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Moments are kept in 64-bit regardless of the parameter precision.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<T: Element>(cfg: AdamWConfig, params: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Ok(Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// One update from the gradients accumulated in `params`. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step<T: Element>(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (id, p) in params.iter() {
            if p.grad.numel() != self.m[id.index()].len() {
                return Err(Error::shape(format!("optimizer moment shape mismatch for {}", p.name)));
            }
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at index {i} is {}; step rejected",
                    p.name,
                    p.grad.data()[i]
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            betas: [b1, b2],
            weight_decay,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let updated: Vec<T> = p
                .value
                .data()
                .iter()
                .zip(p.grad.data())
                .enumerate()
                .map(|(i, (&theta, &g))| {
                    let g = g.to_f64();
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let (m_hat, v_hat) = (m[i] / bc1, v[i] / bc2);
                    let decayed = theta.to_f64() * (1.0 - lr * weight_decay);
                    T::from_f64(decayed - lr * m_hat / (v_hat.sqrt() + eps))
                })
                .collect();
            let shape = p.value.shape().to_vec();
            params.set_value(id, Tensor::new(&shape, updated)?)?;
        }
        Ok(())
    }
}
