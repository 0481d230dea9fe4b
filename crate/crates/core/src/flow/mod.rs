//! Conditional flow matching with the straight-line interpolant
//! `x_t = (1 - t) x + t eps` (data at `t = 0`, noise at `t = 1`).
//!
//! The regression target is the constant velocity `x - eps`, so sampling
//! walks `t` from 1 down to 0 and *adds* `dt * v`.
//!
//! Images handed to this module are in model space (`2 * pixel - 1`); see
//! [`to_model_space`] and [`to_pixel_space`].

mod sampler;
pub mod toy;

pub use sampler::{integrate, sample_ode, ModelField, SamplerConfig, VelocityField};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{patchify_raw, ModelInput, ModelParams, Tape};
use crate::posindex::ConditionSlot;
use crate::tensor::{Mat, Scalar};

/// `[0, 1]` pixels to the symmetric `[-1, 1]` range the model works in.
pub fn to_model_space(img: &Image) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    out
}

/// Inverse of [`to_model_space`], clamped to `[0, 1]`.
pub fn to_pixel_space(img: &Image) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = ((*v + 1.0) * 0.5).clamp(0.0, 1.0));
    out
}

/// Standard-normal image drawn from `rng`.
pub fn gaussian_image<R: Rng + ?Sized>(height: usize, width: usize, channels: usize, rng: &mut R) -> Image {
    let mut img = Image::new(height, width, channels);
    for v in &mut img.data {
        *v = StandardNormal.sample(rng);
    }
    img
}

/// `(1 - t) * x_data + t * noise`.
pub fn interpolate(x_data: &Image, noise: &Image, t: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("flow time {t} outside [0, 1]")));
    }
    if !x_data.same_shape(noise) {
        return Err(Error::Shape("data and noise shapes differ".into()));
    }
    let data = x_data.data.iter().zip(&noise.data).map(|(&x, &e)| ((1.0 - t) * x as f64 + t * e as f64) as f32).collect();
    Image::from_vec(x_data.height, x_data.width, x_data.channels, data)
}

/// One training example: target, its noise draw, flow time and conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x_data: Image,
    pub noise: Image,
    pub t: f64,
    pub conditions: Vec<(ConditionSlot, Image)>,
}

impl FlowSample {
    /// Draws `noise ~ N(0, I)` and `t ~ U(0, 1)`.
    pub fn draw<R: Rng + ?Sized>(x_data: Image, conditions: Vec<(ConditionSlot, Image)>, rng: &mut R) -> Self {
        let noise = gaussian_image(x_data.height, x_data.width, x_data.channels, rng);
        let t = rng.random::<f64>();
        Self { x_data, noise, t, conditions }
    }

    fn check_finite(&self, i: usize) -> Result<()> {
        let bad = |img: &Image| img.data.iter().any(|v| !v.is_finite());
        if !self.t.is_finite() || bad(&self.x_data) || bad(&self.noise) || self.conditions.iter().any(|(_, c)| bad(c)) {
            return Err(Error::NonFinite(format!("batch element {i} contains NaN or infinity")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowBatch {
    pub samples: Vec<FlowSample>,
}

impl FlowBatch {
    pub fn new(samples: Vec<FlowSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let first = self.samples.first().ok_or_else(|| Error::InvalidArgument("empty flow batch".into()))?;
        for (i, s) in self.samples.iter().enumerate() {
            s.check_finite(i)?;
            if !s.x_data.same_shape(&first.x_data) || !s.noise.same_shape(&first.x_data) {
                return Err(Error::Shape(format!("batch element {i} has inconsistent image shapes")));
            }
            if !(0.0..=1.0).contains(&s.t) {
                return Err(Error::InvalidArgument(format!("batch element {i}: t = {} outside [0, 1]", s.t)));
            }
        }
        Ok(())
    }
}

/// Mean squared error between predicted and target velocity over every
/// element of the batch, plus its gradient with respect to the parameters.
///
/// When adapters are attached only adapter gradients are populated.
pub fn fm_loss<T: Scalar>(params: &ModelParams<T>, batch: &FlowBatch) -> Result<(f64, ModelParams<T>)> {
    batch.validate()?;
    let cfg = &params.config;
    let per_sample = batch.samples[0].x_data.data.len();
    let norm = T::from_f64(2.0 / (batch.len() * per_sample) as f64);
    let mut grads = params.zeros_like();
    let mut total = 0.0f64;
    for s in &batch.samples {
        let x_t = interpolate(&s.x_data, &s.noise, s.t)?;
        let conds: Vec<_> = s.conditions.iter().map(|(slot, img)| (*slot, img)).collect();
        let input = ModelInput::<T>::new(cfg, &x_t, &conds)?;
        let (out, tape) = Tape::record(params, &input, s.t)?;
        let target = velocity_target::<T>(s, cfg.patch_size)?;
        if target.rows != out.rows || target.cols != out.cols {
            return Err(Error::Shape(format!(
                "model emits {}x{} velocity patches, target is {}x{}",
                out.rows, out.cols, target.rows, target.cols
            )));
        }
        let mut d_out = Mat::zeros(out.rows, out.cols);
        for ((d, &o), &y) in d_out.data.iter_mut().zip(&out.data).zip(&target.data) {
            let r = o - y;
            total += (r * r).as_f64();
            *d = norm * r;
        }
        tape.backward(params, &d_out, &mut grads);
    }
    let loss = total / (batch.len() * per_sample) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("flow-matching loss".into()));
    }
    Ok((loss, grads))
}

/// Loss only, for evaluation.
pub fn fm_loss_value<T: Scalar>(params: &ModelParams<T>, batch: &FlowBatch) -> Result<f64> {
    batch.validate()?;
    let cfg = &params.config;
    let per_sample = batch.samples[0].x_data.data.len();
    let mut total = 0.0f64;
    for s in &batch.samples {
        let x_t = interpolate(&s.x_data, &s.noise, s.t)?;
        let conds: Vec<_> = s.conditions.iter().map(|(slot, img)| (*slot, img)).collect();
        let input = ModelInput::<T>::new(cfg, &x_t, &conds)?;
        let out = crate::model::forward(params, &input, s.t)?;
        let target = velocity_target::<T>(s, cfg.patch_size)?;
        total += out.data.iter().zip(&target.data).map(|(&o, &y)| (o - y).as_f64().powi(2)).sum::<f64>();
    }
    Ok(total / (batch.len() * per_sample) as f64)
}

/// Patchified `x_data - noise`, subtracted in `T`.
fn velocity_target<T: Scalar>(s: &FlowSample, ps: usize) -> Result<Mat<T>> {
    let mut v: Mat<T> = patchify_raw(&s.x_data, ps, s.x_data.channels)?;
    let e: Mat<T> = patchify_raw(&s.noise, ps, s.noise.channels)?;
    for (a, &b) in v.data.iter_mut().zip(&e.data) {
        *a = *a - b;
    }
    Ok(v)
}
