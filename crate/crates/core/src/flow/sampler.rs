use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gaussian_image;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{forward, unpatchify_raw, ModelInput, ModelParams};
use crate::posindex::ConditionSlot;

/// Fixed-grid Euler settings; the grid is uniform from `t = 1` to `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

impl SamplerConfig {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("sampler needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    /// `steps + 1` strictly decreasing times with exact endpoints 1 and 0.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.steps;
        (0..=n).map(|k| if k == n { 0.0 } else { 1.0 - k as f64 / n as f64 }).collect()
    }
}

/// Velocity `v(x, t)` on a flat state vector.
pub trait VelocityField {
    fn velocity(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[f64], f64) -> Result<Vec<f64>>> VelocityField for F {
    fn velocity(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self(x, t)
    }
}

/// Euler integration from `t = 1` to `t = 0` with `x <- x + (t_k - t_{k+1}) v(x, t_k)`.
pub fn integrate(field: &mut dyn VelocityField, mut x: Vec<f64>, cfg: &SamplerConfig) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    let grid = cfg.grid();
    for (k, w) in grid.windows(2).enumerate() {
        let v = field.velocity(&x, w[0])?;
        if v.len() != x.len() {
            return Err(Error::Shape(format!("velocity has {} entries, state has {}", v.len(), x.len())));
        }
        let dt = w[0] - w[1];
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerDiverged { step: k });
        }
    }
    Ok(x)
}

/// The transformer as a velocity field over the id-0 image, with fixed conditions.
pub struct ModelField<'a> {
    params: &'a ModelParams<f32>,
    input: ModelInput<f32>,
    shape: (usize, usize, usize),
}

impl<'a> ModelField<'a> {
    pub fn new(
        params: &'a ModelParams<f32>,
        shape: (usize, usize),
        conditions: &[(ConditionSlot, &Image)],
    ) -> Result<Self> {
        let cfg = &params.config;
        let shape = (shape.0, shape.1, cfg.out_channels);
        let input = ModelInput::new(cfg, &Image::new(shape.0, shape.1, shape.2), conditions)?;
        Ok(Self { params, input, shape })
    }
}

impl VelocityField for ModelField<'_> {
    fn velocity(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (h, w, c) = self.shape;
        let noisy = Image::from_vec(h, w, c, x.iter().map(|&v| v as f32).collect())?;
        self.input.set_noisy(&self.params.config, &noisy)?;
        let out = forward(self.params, &self.input, t)?;
        let v = unpatchify_raw(&out, self.params.config.patch_size, h, w, c)?;
        Ok(v.data.iter().map(|&v| v as f64).collect())
    }
}

/// Integrates the model's probability-flow ODE from seeded Gaussian noise.
///
/// Conditions and the returned image are in model space; the result is
/// clipped to `[-1, 1]`.
pub fn sample_ode(
    params: &ModelParams<f32>,
    conditions: &[(ConditionSlot, &Image)],
    shape: (usize, usize),
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Image> {
    let mut field = ModelField::new(params, shape, conditions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_image(shape.0, shape.1, params.config.out_channels, &mut rng);
    let x0 = noise.data.iter().map(|&v| v as f64).collect();
    let x = integrate(&mut field, x0, cfg)?;
    let data = x.iter().map(|&v| (v as f32).clamp(-1.0, 1.0)).collect();
    Image::from_vec(shape.0, shape.1, params.config.out_channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        let g = SamplerConfig::new(3).unwrap().grid();
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[3], 0.0);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert!(SamplerConfig::new(0).is_err());
    }

    #[test]
    fn constant_field_adds_constant() {
        for steps in [1, 7, 50] {
            let mut f = |x: &[f64], _t: f64| Ok(vec![0.5; x.len()]);
            let out = integrate(&mut f, vec![1.0, -2.0], &SamplerConfig::new(steps).unwrap()).unwrap();
            assert!((out[0] - 1.5).abs() < 1e-12 && (out[1] + 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_reports_step() {
        let mut f = |x: &[f64], _t: f64| Ok(x.iter().map(|v| if v.abs() > 1e300 { f64::INFINITY } else { v * 1e200 }).collect());
        let err = integrate(&mut f, vec![1.0], &SamplerConfig::new(10).unwrap()).unwrap_err();
        assert!(matches!(err, Error::SamplerDiverged { step } if step < 10));
    }
}
