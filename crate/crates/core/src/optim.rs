//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// Optimizer state. Moment buffers are allocated on the first step and
/// matched to tensors by position, so callers must pass tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, m: Vec::new(), v: Vec::new() })
    }

    /// One update over parallel lists of parameter and gradient tensors.
    pub fn update(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} parameter tensors but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape(format!("optimizer tracks {} tensors, got {}", self.m.len(), params.len())));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr = c.lr as f32;
        let decay = (c.lr * c.weight_decay) as f32;
        let step_size = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if p.len() != g.len() || m.len() != g.len() {
                return Err(Error::Shape(format!("tensor {i}: parameter/gradient/moment sizes differ")));
            }
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                if lr == 0.0 {
                    continue;
                }
                p[j] -= decay * p[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Updates the trainable tensors of `params` (adapters only when LoRA is attached).
    pub fn step_model(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>) -> Result<()> {
        let trainable: Vec<bool> = {
            let mut names = Vec::new();
            params.visit(&mut |n, _, _| names.push(params.is_trainable(n)));
            names
        };
        let g: Vec<&[f32]> = grads.tensors().into_iter().map(|(_, d)| d).collect();
        let mut ps = Vec::new();
        let mut gs = Vec::new();
        for (((_, p), gd), keep) in params.tensors_mut().into_iter().zip(g).zip(trainable) {
            if keep {
                ps.push(p);
                gs.push(gd);
            }
        }
        self.update(ps, gs)
    }

    /// Moment buffers as `(first, second)` lists for checkpointing.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Checkpoint("optimizer moment buffers are inconsistent".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
