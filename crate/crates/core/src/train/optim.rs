use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one bias-corrected update given per-tensor gradients.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let t = self.t as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let step = (self.cfg.lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t))) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.cfg.eps as f32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }

    pub fn moment_tensors(&self, params: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (kind, bufs) in [("m", &self.m), ("v", &self.v)] {
            for ((name, t), buf) in params.iter().zip(bufs) {
                out.push((
                    format!("adam.{kind}.{name}"),
                    Tensor::new(t.shape().to_vec(), buf.clone()).expect("moment shape"),
                ));
            }
        }
        out
    }
}
