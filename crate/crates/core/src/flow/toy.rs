//! Two-dimensional flow matching with a small MLP velocity field, used as an
//! unconditional sanity check of the objective and sampler on a ring of
//! Gaussians.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::sampler::{integrate, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::{silu, silu_grad, Linear};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Mat;

/// Equal-weight isotropic Gaussians placed evenly on a circle.
#[derive(Clone, Debug, PartialEq)]
pub struct RingMixture {
    pub modes: Vec<[f64; 2]>,
    pub sigma: f64,
}

impl RingMixture {
    pub fn new(n_modes: usize, radius: f64, sigma: f64) -> Self {
        let modes = (0..n_modes)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n_modes as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self { modes, sigma }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let m = self.modes[rng.random_range(0..self.modes.len())];
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        [m[0] + self.sigma * nx, m[1] + self.sigma * ny]
    }

    pub fn nearest_mode_distance(&self, p: [f64; 2]) -> f64 {
        self.modes.iter().map(|m| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
    }
}

const TIME_DIM: usize = 16;

/// `t` followed by low-frequency Fourier features; the transformer's
/// 1000-scaled embedding is far too oscillatory for a 2-D field this small.
fn time_features(t: f64) -> [f32; TIME_DIM] {
    let mut f = [0.0f32; TIME_DIM];
    f[0] = t as f32;
    for k in 1..=(TIME_DIM - 1) / 2 {
        let a = std::f64::consts::PI * k as f64 * t;
        f[2 * k - 1] = a.sin() as f32;
        f[2 * k] = a.cos() as f32;
    }
    f
}

/// `v(x, t)` as an MLP over `[x, time_embedding(t)]` with SiLU activations.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpField {
    pub layers: Vec<Linear<f32>>,
}

struct MlpTape {
    inputs: Vec<Mat<f32>>,
    pre: Vec<Mat<f32>>,
}

impl MlpField {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut input = dim + TIME_DIM;
        for _ in 0..depth {
            layers.push(Linear::xavier(input, hidden, rng));
            input = hidden;
        }
        layers.push(Linear::xavier(input, dim, rng));
        Self { layers }
    }

    pub fn dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    fn features(&self, x: &[f32], t: &[f64]) -> Mat<f32> {
        let d = self.dim();
        let mut m = Mat::zeros(t.len(), d + TIME_DIM);
        for (i, &ti) in t.iter().enumerate() {
            let row = m.row_mut(i);
            row[..d].copy_from_slice(&x[i * d..(i + 1) * d]);
            row[d..].copy_from_slice(&time_features(ti));
        }
        m
    }

    fn run(&self, x: &[f32], t: &[f64]) -> (Mat<f32>, MlpTape) {
        let mut h = self.features(x, t);
        let mut tape = MlpTape { inputs: Vec::new(), pre: Vec::new() };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&h);
            tape.inputs.push(h);
            if i == last {
                return (pre, tape);
            }
            h = Mat { rows: pre.rows, cols: pre.cols, data: pre.data.iter().map(|&v| silu(v)).collect() };
            tape.pre.push(pre);
        }
        unreachable!("loop returns at the last layer")
    }

    /// Velocities for a batch of row-major points at per-point times.
    pub fn predict(&self, x: &[f32], t: &[f64]) -> Vec<f32> {
        self.run(x, t).0.data
    }

    /// Flow-matching loss and gradients on `(data, noise, t)` triples.
    pub fn loss_and_grad(&self, data: &[f32], noise: &[f32], t: &[f64]) -> (f64, Vec<Linear<f32>>) {
        let d = self.dim();
        let x_t: Vec<f32> = (0..data.len())
            .map(|j| {
                let ti = t[j / d] as f32;
                (1.0 - ti) * data[j] + ti * noise[j]
            })
            .collect();
        let (out, tape) = self.run(&x_t, t);
        let n = data.len() as f32;
        let mut loss = 0.0f64;
        let mut dy = Mat::zeros(out.rows, out.cols);
        for j in 0..data.len() {
            let r = out.data[j] - (data[j] - noise[j]);
            loss += (r * r) as f64;
            dy.data[j] = 2.0 * r / n;
        }
        let mut grads: Vec<Linear<f32>> =
            self.layers.iter().map(|l| Linear::zeros(l.in_dim(), l.out_dim())).collect();
        for i in (0..self.layers.len()).rev() {
            let need = i > 0;
            let dx = self.layers[i].backward(&tape.inputs[i], &dy, &mut grads[i], false, need);
            if let Some(mut dx) = dx {
                for (g, &p) in dx.data.iter_mut().zip(&tape.pre[i - 1].data) {
                    *g *= silu_grad(p);
                }
                dy = dx;
            }
        }
        (loss / n as f64, grads)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine: bool,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch: 1024, hidden: 192, depth: 4, lr: 2e-3, cosine: true, seed: 0 }
    }
}

/// Trains an [`MlpField`] on samples of `target`; returns the field and per-step losses.
pub fn train_ring(target: &RingMixture, cfg: &ToyTrainConfig) -> Result<(MlpField, Vec<f64>)> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::InvalidArgument("toy training needs positive steps and batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut field = MlpField::new(2, cfg.hidden, cfg.depth, &mut rng);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() })?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cfg.cosine {
            opt.config.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        }
        let mut data = Vec::with_capacity(2 * cfg.batch);
        let mut noise = Vec::with_capacity(2 * cfg.batch);
        let mut t = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let p = target.sample(&mut rng);
            data.extend([p[0] as f32, p[1] as f32]);
            noise.push(StandardNormal.sample(&mut rng));
            noise.push(StandardNormal.sample(&mut rng));
            t.push(rng.random::<f64>());
        }
        let (loss, grads) = field.loss_and_grad(&data, &noise, &t);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step: losses.len(), loss });
        }
        losses.push(loss);
        let mut ps = Vec::new();
        for l in &mut field.layers {
            ps.push(l.weight.data.as_mut_slice());
            ps.push(l.bias.as_mut_slice());
        }
        let gs = grads.iter().flat_map(|g| [g.weight.data.as_slice(), g.bias.as_slice()]).collect();
        opt.update(ps, gs)?;
    }
    Ok((field, losses))
}

/// Draws `n` points by integrating the field from seeded noise.
pub fn sample_field(field: &MlpField, n: usize, sampler: &SamplerConfig, seed: u64) -> Result<Vec<[f64; 2]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut f = |x: &[f64], t: f64| {
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        Ok(field.predict(&xf, &vec![t; n]).into_iter().map(f64::from).collect())
    };
    let out = integrate(&mut f, x0, sampler)?;
    Ok(out.chunks(2).map(|c| [c[0], c[1]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_modes_on_circle() {
        let ring = RingMixture::new(8, 2.0, 0.1);
        assert_eq!(ring.modes.len(), 8);
        for m in &ring.modes {
            assert!(((m[0] * m[0] + m[1] * m[1]).sqrt() - 2.0).abs() < 1e-12);
        }
        assert!(ring.nearest_mode_distance([2.0, 0.0]) < 1e-12);
    }

    #[test]
    fn mlp_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = MlpField::new(2, 8, 2, &mut rng);
        let data = [0.5f32, -1.0, 1.5, 0.25];
        let noise = [0.1f32, 0.3, -0.7, 0.9];
        let t = [0.3, 0.8];
        let (_, grads) = field.loss_and_grad(&data, &noise, &t);
        for (li, wi) in [(0usize, 3usize), (1, 10), (2, 5)] {
            let h = 1e-2f32;
            let mut plus = field.clone();
            plus.layers[li].weight.data[wi] += h;
            let mut minus = field.clone();
            minus.layers[li].weight.data[wi] -= h;
            let fd = (plus.loss_and_grad(&data, &noise, &t).0 - minus.loss_and_grad(&data, &noise, &t).0) / (2.0 * h as f64);
            let an = grads[li].weight.data[wi] as f64;
            assert!((fd - an).abs() <= 1e-2 * an.abs().max(1e-2), "layer {li}: fd {fd} vs {an}");
        }
    }
}
