//! Image-quality metrics: SSIM, FID, KID and a feature-space perceptual
//! distance, plus the plain-text report they are collected into.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    k
}

fn gray_values(img: &Image) -> Vec<f64> {
    img.to_gray().data.iter().map(|&v| v as f64).collect()
}

/// Per-pixel SSIM on the grayscale images, with the 11x11 Gaussian window
/// truncated and renormalised at the borders.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "ssim inputs are {}x{}x{} and {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    let (h, w) = (a.height, a.width);
    let x = gray_values(a);
    let y = gray_values(b);
    let k = gaussian_kernel();
    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (mut sw, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in 0..k.len() {
                let rr = r as isize + dr as isize - SSIM_RADIUS as isize;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dc in 0..k.len() {
                    let cc = c as isize + dc as isize - SSIM_RADIUS as isize;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let wt = k[dr] * k[dc];
                    let i = rr as usize * w + cc as usize;
                    sw += wt;
                    mx += wt * x[i];
                    my += wt * y[i];
                    xx += wt * x[i] * x[i];
                    yy += wt * y[i] * y[i];
                    xy += wt * x[i] * y[i];
                }
            }
            let (mx, my) = (mx / sw, my / sw);
            let vx = xx / sw - mx * mx;
            let vy = yy / sw - my * my;
            let cov = xy / sw - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            out.push(s);
        }
    }
    Ok(out)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean of the SSIM map over the pixels where `mask` is set.
pub fn masked_ssim(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    let map = ssim_map(a, b)?;
    if mask.len() != map.len() {
        return Err(Error::Shape(format!("mask has {} entries for {} pixels", mask.len(), map.len())));
    }
    let (sum, n) = map.iter().zip(mask).filter(|(_, &m)| m).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// `n x d` feature matrix tagged with the extractor that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub extractor: String,
}

impl FeatureSet {
    pub fn new(features: DMatrix<f64>, extractor: impl Into<String>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self { features, extractor: extractor.into() })
    }

    pub fn from_rows(rows: &[Vec<f64>], extractor: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows have different lengths".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]), extractor)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(set: &FeatureSet) -> Result<GaussianStats> {
    let n = set.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 feature rows, got {n}")));
    }
    let f = &set.features;
    let mean = DVector::from_fn(set.dim(), |j, _| f.column(j).sum() / n as f64);
    let mut centered = f.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

/// Square roots of the eigenvalues of a symmetric matrix, with everything
/// below the rounding floor `n * eps * max|eigenvalue|` treated as zero.
/// Without the floor a rank-deficient covariance (fewer samples than feature
/// dimensions) adds `sqrt(eps)`-sized noise per null direction.
fn clipped_roots(eigenvalues: &DVector<f64>) -> DVector<f64> {
    let scale = eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = eigenvalues.len() as f64 * f64::EPSILON * scale;
    eigenvalues.map(|v| if v > floor { v.sqrt() } else { 0.0 })
}

/// Symmetric PSD square root.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = clipped_roots(&eig.eigenvalues);
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Frechet distance between two fitted Gaussians.
///
/// `Tr((S1 S2)^1/2)` is evaluated as `Tr((S1^1/2 S2 S1^1/2)^1/2)`, whose
/// argument is symmetric.
pub fn fid(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    if s1.mean.len() != s2.mean.len() {
        return Err(Error::Shape(format!("feature dims {} and {}", s1.mean.len(), s2.mean.len())));
    }
    let diff = &s1.mean - &s2.mean;
    let r1 = psd_sqrt(&s1.cov);
    let inner = &r1 * &s2.cov * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = clipped_roots(&SymmetricEigen::new(inner).eigenvalues).sum();
    let value = diff.norm_squared() + s1.cov.trace() + s2.cov.trace() - 2.0 * cross;
    if !value.is_finite() {
        let cond = |c: &DMatrix<f64>| {
            let e = SymmetricEigen::new((c + c.transpose()) * 0.5).eigenvalues;
            e.max() / e.min().abs().max(f64::MIN_POSITIVE)
        };
        return Err(Error::NonFinite(format!(
            "fid is not finite (covariance condition numbers {:.3e}, {:.3e})",
            cond(&s1.cov),
            cond(&s2.cov)
        )));
    }
    Ok(value)
}

/// `(x.y / d + 1)^3`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel.
pub fn kid(f1: &FeatureSet, f2: &FeatureSet) -> Result<f64> {
    let (m, n) = (f1.len(), f2.len());
    if m < 2 || n < 2 {
        return Err(Error::InvalidArgument(format!("kid needs at least 2 rows per set, got {m} and {n}")));
    }
    if f1.dim() != f2.dim() {
        return Err(Error::Shape(format!("feature dims {} and {}", f1.dim(), f2.dim())));
    }
    let rows = |f: &FeatureSet| -> Vec<Vec<f64>> { f.features.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (x, y) = (rows(f1), rows(f2));
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in &x {
        for b in &y {
            cross += poly_kernel(a, b);
        }
    }
    Ok(within(&x) + within(&y) - 2.0 * cross / (m * n) as f64)
}

/// Channel-major feature map `[channels][h * w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

pub trait FeatureExtractor {
    fn id(&self) -> String;

    /// Intermediate feature maps, shallow to deep.
    fn feature_maps(&self, image: &Image) -> Result<Vec<FeatureMap>>;

    /// Global descriptor: average-pooled last feature map.
    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        let maps = self.feature_maps(image)?;
        let last = maps.last().ok_or_else(|| Error::InvalidArgument("extractor produced no maps".into()))?;
        let hw = last.height * last.width;
        Ok((0..last.channels).map(|c| last.data[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect())
    }
}

struct Conv {
    weight: Vec<f64>,
    bias: Vec<f64>,
    cin: usize,
    cout: usize,
}

/// Fixed seeded stack of three 3x3 stride-2 convolutions with leaky ReLU;
/// the global descriptor has 64 dimensions.
pub struct RandomConvExtractor {
    seed: u64,
    layers: Vec<Conv>,
}

impl RandomConvExtractor {
    pub const CHANNELS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut layers = Vec::new();
        for &cout in &Self::CHANNELS {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weight = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            let bias = (0..cout).map(|_| normal.sample(&mut rng) * 0.1).collect();
            layers.push(Conv { weight, bias, cin, cout });
            cin = cout;
        }
        Self { seed, layers }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(0)
    }
}

fn conv_stride2(input: &FeatureMap, conv: &Conv) -> FeatureMap {
    let (h, w) = (input.height.div_ceil(2), input.width.div_ceil(2));
    let mut data = vec![0.0; conv.cout * h * w];
    let plane = input.height * input.width;
    for o in 0..conv.cout {
        for r in 0..h {
            for c in 0..w {
                let mut acc = conv.bias[o];
                for i in 0..conv.cin {
                    for kr in 0..3 {
                        let rr = (2 * r + kr) as isize - 1;
                        if rr < 0 || rr >= input.height as isize {
                            continue;
                        }
                        for kc in 0..3 {
                            let cc = (2 * c + kc) as isize - 1;
                            if cc < 0 || cc >= input.width as isize {
                                continue;
                            }
                            let x = input.data[i * plane + rr as usize * input.width + cc as usize];
                            acc += conv.weight[((o * conv.cin + i) * 3 + kr) * 3 + kc] * x;
                        }
                    }
                }
                data[(o * h + r) * w + c] = if acc > 0.0 { acc } else { 0.2 * acc };
            }
        }
    }
    FeatureMap { channels: conv.cout, height: h, width: w, data }
}

impl FeatureExtractor for RandomConvExtractor {
    fn id(&self) -> String {
        format!("random-conv-{}", self.seed)
    }

    fn feature_maps(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        if image.channels != 3 {
            return Err(Error::Shape(format!("extractor expects RGB, got {} channels", image.channels)));
        }
        let (h, w) = (image.height, image.width);
        let mut data = vec![0.0; 3 * h * w];
        for r in 0..h {
            for c in 0..w {
                for (ch, &v) in image.pixel(r, c).iter().enumerate() {
                    data[(ch * h + r) * w + c] = 2.0 * v as f64 - 1.0;
                }
            }
        }
        let mut x = FeatureMap { channels: 3, height: h, width: w, data };
        let mut maps = Vec::with_capacity(self.layers.len());
        for conv in &self.layers {
            x = conv_stride2(&x, conv);
            maps.push(x.clone());
        }
        Ok(maps)
    }
}

/// Stacks per-image global descriptors into a [`FeatureSet`].
pub fn extract_features(images: &[Image], extractor: &dyn FeatureExtractor) -> Result<FeatureSet> {
    let rows = images.iter().map(|im| extractor.extract(im)).collect::<Result<Vec<_>>>()?;
    FeatureSet::from_rows(&rows, extractor.id())
}

fn unit_normalize_channels(map: &FeatureMap) -> Vec<f64> {
    let hw = map.height * map.width;
    let mut out = map.data.clone();
    for p in 0..hw {
        let norm = (0..map.channels).map(|c| map.data[c * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
        for c in 0..map.channels {
            out[c * hw + p] /= norm;
        }
    }
    out
}

/// Mean over layers of the mean squared difference between channel-normalised
/// feature maps.
pub fn perceptual_distance(a: &Image, b: &Image, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("perceptual distance inputs differ in shape".into()));
    }
    let (fa, fb) = (extractor.feature_maps(a)?, extractor.feature_maps(b)?);
    if fa.is_empty() {
        return Err(Error::InvalidArgument("extractor produced no maps".into()));
    }
    let mut total = 0.0;
    for (ma, mb) in fa.iter().zip(&fb) {
        let (na, nb) = (unit_normalize_channels(ma), unit_normalize_channels(mb));
        total += na.iter().zip(&nb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / na.len() as f64;
    }
    Ok(total / fa.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Paired,
    Unpaired,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Paired => "paired",
            Protocol::Unpaired => "unpaired",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub protocol: Protocol,
    pub mode: String,
    pub value: f64,
}

/// Table of `(metric, protocol, mode, value)` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, metric: &str, protocol: Protocol, mode: &str, value: f64) {
        self.rows.push(MetricRow { metric: metric.into(), protocol, mode: mode.into(), value });
    }

    pub fn get(&self, metric: &str, mode: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.mode == mode).map(|r| r.value)
    }

    pub fn modes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.mode) {
                out.push(r.mode.clone());
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# kid values are raw (not scaled by 1000)\n");
        let _ = writeln!(s, "{:<22} {:<9} {:<12} {:>16}", "metric", "protocol", "mode", "value");
        for r in &self.rows {
            let _ = writeln!(s, "{:<22} {:<9} {:<12} {:>16.9}", r.metric, r.protocol.name(), r.mode, r.value);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
