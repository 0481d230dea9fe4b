use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Describer, EditRequest, Edited, Editor};
use crate::error::{Error, Result};
use crate::image::{quantize_u8, Image};
use crate::metrics::{FeatureExtractor, FeatureMap};
use crate::synthworld::{render_person, sample_other_person, PersonParams, ARM_ANGLE_RANGE, BASE, HAIR_COLORS, SKIN_TONES};

fn nearest<const N: usize>(table: &[(&'static str, [f32; 3]); N], px: &[f32]) -> (usize, f32) {
    table
        .iter()
        .enumerate()
        .map(|(i, (_, c))| (i, c.iter().zip(px).map(|(a, b)| (a - b).powi(2)).sum::<f32>()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty table")
}

/// Hair colour name listed as the contrast to `name`.
pub fn opposite_hair(name: &str) -> &'static str {
    match HAIR_COLORS.iter().position(|(n, _)| *n == name) {
        Some(i) => HAIR_COLORS[(i + 2) % HAIR_COLORS.len()].0,
        None => HAIR_COLORS[0].0,
    }
}

pub fn opposite_skin(name: &str) -> &'static str {
    match SKIN_TONES.iter().position(|(n, _)| *n == name) {
        Some(i) => SKIN_TONES[(i + 2) % SKIN_TONES.len()].0,
        None => SKIN_TONES[0].0,
    }
}

/// Reads skin tone and hair off fixed head pixels of a procedural person and
/// fills a fixed sentence template.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateDescriber;

impl TemplateDescriber {
    /// `(skin name, hair name or None when bald)`.
    pub fn read(image: &Image) -> Result<(&'static str, Option<&'static str>)> {
        if image.height != image.width || image.height % BASE != 0 || image.channels != 3 {
            return Err(Error::Shape(format!("expected a square RGB person canvas, got {}x{}", image.height, image.width)));
        }
        let s = image.height / BASE;
        let face = image.pixel(5 * s, 15 * s);
        let top = image.pixel(2 * s, 15 * s);
        let (skin, _) = nearest(&SKIN_TONES, face);
        let bald = face.iter().zip(top).all(|(a, b)| (a - b).abs() < 1e-3);
        let hair = (!bald).then(|| HAIR_COLORS[nearest(&HAIR_COLORS, top).0].0);
        Ok((SKIN_TONES[skin].0, hair))
    }
}

impl Describer for TemplateDescriber {
    fn describe(&mut self, image: &Image, _instruction: &str, _seed: u64) -> Result<String> {
        let (skin, hair) = Self::read(image)?;
        let hair_text = |h: Option<&str>| h.map_or("no hair".to_string(), |h| format!("{h} hair"));
        let contrast = Some(opposite_hair(hair.unwrap_or("")));
        Ok(format!(
            "Positive: a person with {} skin and {}, calm expression. Negative: a person with {skin} skin and {}, calm expression.",
            opposite_skin(skin),
            hair_text(contrast),
            hair_text(hair)
        ))
    }
}

/// Re-renders the same garment on a different procedural person, steering
/// skin, hair and arm pose from the positive prompt.
#[derive(Clone, Debug)]
pub struct SyntheticEditor {
    /// Probability of flagging the result as back-facing.
    pub back_facing_rate: f64,
}

impl Default for SyntheticEditor {
    fn default() -> Self {
        Self { back_facing_rate: 0.05 }
    }
}

fn quantized(c: [f32; 3]) -> [f32; 3] {
    c.map(|v| quantize_u8(v) as f32 / 255.0)
}

fn mentioned<const N: usize>(text: &str, table: &[(&'static str, [f32; 3]); N], suffix: &str) -> Option<[f32; 3]> {
    table.iter().find(|(n, _)| text.contains(&format!("{n} {suffix}"))).map(|(_, c)| quantized(*c))
}

impl SyntheticEditor {
    fn steer<R: Rng + ?Sized>(&self, person: &mut PersonParams, positive: &str, rng: &mut R) {
        if let Some(c) = mentioned(positive, &SKIN_TONES, "skin") {
            person.skin = c;
        }
        if let Some(c) = mentioned(positive, &HAIR_COLORS, "hair") {
            person.hair_color = c;
            if person.hair_style == 3 {
                person.hair_style = rng.random_range(0..3);
            }
        }
        let (lo, hi) = ARM_ANGLE_RANGE;
        let mid = 0.5 * (lo + hi);
        if positive.contains("arms raised") {
            person.arm_angles = [rng.random_range(mid..=hi), rng.random_range(mid..=hi)];
        } else if positive.contains("arms relaxed") {
            person.arm_angles = [rng.random_range(lo..=mid), rng.random_range(lo..=mid)];
        }
    }
}

impl Editor for SyntheticEditor {
    fn edit(&mut self, request: &EditRequest<'_>) -> Result<Edited> {
        let (target, garment) = request
            .world
            .ok_or_else(|| Error::Service("the synthetic editor needs the procedural parameters of the image".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let base = sample_other_person(&target, garment.category, &mut rng);
        let mut steered = base;
        self.steer(&mut steered, &request.prompts.positive, &mut rng);
        // steering must not undo the "different person" guarantee
        let person = if steered.differing_fields(&target) >= 2 { steered } else { base };
        let mut flags = Vec::new();
        if rng.random::<f64>() < self.back_facing_rate {
            flags.push("back-facing".to_string());
        }
        Ok(Edited { image: render_person(&person, &garment), person: Some(person), flags })
    }
}

/// Fixed random projection of per-patch colour histograms.
///
/// The image is cut into a 4x4 grid; each cell contributes a 27-bin colour
/// histogram (3 levels per channel). Pixels in the background colour's bin
/// are skipped, so an empty canvas maps to the zero vector.
#[derive(Clone, Debug)]
pub struct PatchHistogramExtractor {
    seed: u64,
    projection: Vec<f64>,
}

impl PatchHistogramExtractor {
    pub const DIM: usize = 64;
    const GRID: usize = 4;
    const BINS: usize = 27;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::GRID * Self::GRID * Self::BINS;
        let projection = (0..Self::DIM * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { seed, projection }
    }

    fn bin(px: &[f32]) -> usize {
        px.iter().fold(0, |acc, &v| acc * 3 + ((v * 3.0) as usize).min(2))
    }

    fn histogram(image: &Image) -> Vec<f64> {
        let g = Self::GRID;
        let mut h = vec![0.0; g * g * Self::BINS];
        let bg = Self::bin(&crate::synthworld::BACKGROUND);
        let (ch, cw) = (image.height.div_ceil(g), image.width.div_ceil(g));
        for r in 0..image.height {
            for c in 0..image.width {
                let cell = (r / ch) * g + c / cw;
                let b = Self::bin(image.pixel(r, c));
                if b != bg {
                    h[cell * Self::BINS + b] += 1.0 / (ch * cw) as f64;
                }
            }
        }
        h
    }
}

impl Default for PatchHistogramExtractor {
    fn default() -> Self {
        Self::new(0)
    }
}

impl FeatureExtractor for PatchHistogramExtractor {
    fn id(&self) -> String {
        format!("patch-histogram-{}", self.seed)
    }

    fn feature_maps(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        if image.channels != 3 {
            return Err(Error::Shape(format!("expected RGB, got {} channels", image.channels)));
        }
        let h = Self::histogram(image);
        let n = h.len();
        let data = (0..Self::DIM).map(|k| self.projection[k * n..(k + 1) * n].iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
        Ok(vec![FeatureMap { channels: Self::DIM, height: 1, width: 1, data }])
    }
}
