//! Rectified Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment estimates and the shared step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RAdam {
    pub config: RAdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl RAdam {
    pub fn new(config: RAdamConfig) -> Self {
        Self { config, ..Self::default() }
    }

    /// Variance-rectification factor for step `t`, or `None` while the
    /// approximated SMA length is at most 5 (plain momentum update).
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let b2 = self.config.beta2;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powi(t as i32);
        let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        (rho > 5.0).then(|| {
            ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        })
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step;
        let RAdamConfig { lr, beta1, beta2, eps } = self.config;
        let bias1 = 1.0 - beta1.powi(t as i32);
        let bias2 = 1.0 - beta2.powi(t as i32);
        let rect = self.rectification(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            });
            match rect {
                Some(r) => ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    let adaptive = bias2.sqrt() / (v.sqrt() + eps);
                    *p -= lr * (m / bias1) * adaptive * r;
                }),
                None => ndarray::Zip::from(p).and(&*m).for_each(|p, &m| *p -= lr * m / bias1),
            }
        }
    }
}
