//! Procedural try-on world with an exact renderer.
//!
//! A person is a flat-coloured stick body on a 32x32 canvas (optionally
//! upsampled to 64x64). Garments are drawn over programmatic category regions:
//! upper = torso rows, lower = leg rows plus a hip band, dress = both. A
//! translucent garment mixes 50/50 with the grey level of whatever lies
//! underneath, which is invisible in the flat cloth image by construction.
//!
//! All colours are quantised to 8-bit levels inside the renderer so that PNG
//! round trips are exact and the oracle comparison can be bitwise.

mod dataset;

pub use dataset::{
    build_dataset, build_record, parse_manifest_line, read_dataset, role_path, write_dataset, CategoryMix, ManifestEntry,
    SampleRecord, MANIFEST, ROLES,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{hsv_to_rgb, luma, quantize_u8, rgb_to_hsv, Image};

/// Base canvas side; larger canvases are nearest-neighbour upsamplings.
pub const BASE: usize = 32;

pub const BACKGROUND: [f32; 3] = [0.85, 0.88, 0.92];
pub const CLOTH_BACKGROUND: [f32; 3] = [0.95, 0.95, 0.95];
pub const AGNOSTIC_GRAY: f32 = 0.5;
pub const TRANSLUCENT_ALPHA: f32 = 0.5;

const TORSO_ROWS: (usize, usize) = (10, 20);
const BODY_COLS: (usize, usize) = (10, 22);
const LEG_ROWS: (usize, usize) = (20, 32);
const LEG_CENTERS: [f32; 2] = [13.0, 18.0];
const LEG_HALF_WIDTH: f32 = 1.2;
const SHOULDERS: [(f32, f32); 2] = [(10.0, 9.0), (10.0, 22.0)];
const ARM_LENGTH: f32 = 11.0;
const ARM_RADIUS: f32 = 0.9;

pub const ARM_ANGLE_RANGE: (f32, f32) = (0.15, 0.9);
pub const LEG_SPREAD_MAX: f32 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Upper,
    Lower,
    Dress,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Upper, Category::Lower, Category::Dress];

    pub fn name(self) -> &'static str {
        match self {
            Category::Upper => "upper",
            Category::Lower => "lower",
            Category::Dress => "dress",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown garment category {s:?}")))
    }

    fn noun(self) -> &'static str {
        match self {
            Category::Upper => "top",
            Category::Lower => "trousers",
            Category::Dress => "dress",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
    Logo,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Solid, Pattern::Stripes, Pattern::Dots, Pattern::Logo];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Solid => "solid",
            Pattern::Stripes => "stripes",
            Pattern::Dots => "dots",
            Pattern::Logo => "logo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pattern {s:?}")))
    }

    /// Colour at garment-local `(row, col)`. Every motif is aligned to 2x2
    /// blocks so that 2x pooling keeps it intact.
    fn color(self, base: [f32; 3], lr: usize, lc: usize) -> [f32; 3] {
        let scaled = |k: f32| [base[0] * k, base[1] * k, base[2] * k];
        match self {
            Pattern::Solid => base,
            Pattern::Stripes if (lr / 2) % 2 == 1 => scaled(0.6),
            Pattern::Dots if lr % 4 >= 2 && lc % 4 >= 2 => scaled(0.5),
            Pattern::Logo if logo_pixel(lr, lc) => [0.95; 3],
            _ => base,
        }
    }
}

/// An "L" glyph in local rows 2..6, cols 4..8.
fn logo_pixel(lr: usize, lc: usize) -> bool {
    (2..6).contains(&lr) && ((4..6).contains(&lc) || ((4..6).contains(&lr) && (6..8).contains(&lc)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GarmentParams {
    pub category: Category,
    pub color: [f32; 3],
    pub pattern: Pattern,
    pub translucent: bool,
    /// Fraction of the category's full extent covered, in `(0, 1]`.
    pub length: f32,
}

impl GarmentParams {
    pub fn random<R: Rng + ?Sized>(category: Category, rng: &mut R) -> Self {
        let hue = rng.random::<f32>();
        let sat = rng.random_range(0.6..=0.95);
        let val = rng.random_range(0.3..=0.55);
        Self {
            category,
            color: quantize3(hsv_to_rgb(hue, sat, val)),
            pattern: Pattern::ALL[rng.random_range(0..Pattern::ALL.len())],
            translucent: rng.random_bool(0.5),
            length: rng.random_range(0.5..=1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length <= 1.0) {
            return Err(Error::InvalidArgument(format!("garment length {} outside (0, 1]", self.length)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument(format!("garment colour {:?} outside [0, 1]", self.color)));
        }
        Ok(())
    }

    pub fn hue(&self) -> f32 {
        rgb_to_hsv(&self.color).0
    }

    /// Same garment with the translucency flag flipped.
    pub fn twin(&self) -> Self {
        Self { translucent: !self.translucent, ..*self }
    }

    /// Short human-readable name such as "green striped top".
    pub fn name(&self) -> String {
        let pattern = match self.pattern {
            Pattern::Solid => "",
            Pattern::Stripes => "striped ",
            Pattern::Dots => "dotted ",
            Pattern::Logo => "logo ",
        };
        format!("{} {pattern}{}", hue_name(self.hue()), self.category.noun())
    }

    fn rows(&self) -> usize {
        let full = match self.category {
            Category::Upper => TORSO_ROWS.1 - TORSO_ROWS.0,
            Category::Lower => LEG_ROWS.1 - LEG_ROWS.0,
            Category::Dress => LEG_ROWS.1 - TORSO_ROWS.0,
        };
        ((self.length * full as f32).round() as usize).clamp(1, full)
    }

    fn top(&self) -> usize {
        match self.category {
            Category::Upper | Category::Dress => TORSO_ROWS.0,
            Category::Lower => LEG_ROWS.0,
        }
    }
}

pub fn hue_name(h: f32) -> &'static str {
    const NAMES: [&str; 12] = [
        "red", "orange", "yellow", "lime", "green", "teal", "cyan", "azure", "blue", "violet", "magenta", "pink",
    ];
    NAMES[((h.rem_euclid(1.0) * 12.0 + 0.5) as usize) % 12]
}

pub const SKIN_TONES: [(&str, [f32; 3]); 4] = [
    ("fair", [0.98, 0.87, 0.78]),
    ("light", [0.94, 0.78, 0.65]),
    ("medium", [0.85, 0.65, 0.50]),
    ("tan", [0.76, 0.57, 0.42]),
];

pub const HAIR_COLORS: [(&str, [f32; 3]); 5] = [
    ("black", [0.10, 0.09, 0.08]),
    ("brown", [0.40, 0.25, 0.13]),
    ("blonde", [0.90, 0.78, 0.45]),
    ("red", [0.65, 0.20, 0.10]),
    ("gray", [0.60, 0.60, 0.62]),
];

pub const HAIR_STYLES: [&str; 4] = ["short", "long", "bun", "bald"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PersonParams {
    /// Outward angle of each arm from vertical, radians.
    pub arm_angles: [f32; 2],
    /// Outward lean of each leg from vertical, radians.
    pub leg_spread: [f32; 2],
    pub skin: [f32; 3],
    pub hair_style: u8,
    pub hair_color: [f32; 3],
    /// What the person wears when not trying anything on.
    pub outfit_upper: GarmentParams,
    pub outfit_lower: GarmentParams,
    pub canvas: usize,
}

impl PersonParams {
    pub fn random<R: Rng + ?Sized>(canvas: usize, rng: &mut R) -> Self {
        let angle = |rng: &mut R| rng.random_range(ARM_ANGLE_RANGE.0..=ARM_ANGLE_RANGE.1);
        let spread = |rng: &mut R| rng.random_range(0.0..=LEG_SPREAD_MAX);
        let arm_angles = [angle(rng), angle(rng)];
        let leg_spread = [spread(rng), spread(rng)];
        let skin = quantize3(SKIN_TONES[rng.random_range(0..SKIN_TONES.len())].1);
        let hair_style = rng.random_range(0..HAIR_STYLES.len()) as u8;
        let hair_color = quantize3(HAIR_COLORS[rng.random_range(0..HAIR_COLORS.len())].1);
        let mut outfit_upper = GarmentParams::random(Category::Upper, rng);
        let mut outfit_lower = GarmentParams::random(Category::Lower, rng);
        outfit_upper.translucent = false;
        outfit_lower.translucent = false;
        Self { arm_angles, leg_spread, skin, hair_style, hair_color, outfit_upper, outfit_lower, canvas }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.canvas != BASE && self.canvas != 2 * BASE {
            return bad(format!("canvas {} must be {BASE} or {}", self.canvas, 2 * BASE));
        }
        if self.arm_angles.iter().any(|a| !(ARM_ANGLE_RANGE.0..=ARM_ANGLE_RANGE.1).contains(a)) {
            return bad(format!("arm angles {:?} outside {ARM_ANGLE_RANGE:?}", self.arm_angles));
        }
        if self.leg_spread.iter().any(|a| !(0.0..=LEG_SPREAD_MAX).contains(a)) {
            return bad(format!("leg spread {:?} outside [0, {LEG_SPREAD_MAX}]", self.leg_spread));
        }
        if (self.hair_style as usize) >= HAIR_STYLES.len() {
            return bad(format!("hair style {} unknown", self.hair_style));
        }
        if self.skin.iter().chain(&self.hair_color).any(|c| !(0.0..=1.0).contains(c)) {
            return bad("colours must lie in [0, 1]".into());
        }
        self.outfit_upper.validate()?;
        self.outfit_lower.validate()
    }

    /// Number of top-level fields that differ from `other`.
    pub fn differing_fields(&self, other: &PersonParams) -> usize {
        [
            self.arm_angles != other.arm_angles,
            self.leg_spread != other.leg_spread,
            self.skin != other.skin,
            self.hair_style != other.hair_style,
            self.hair_color != other.hair_color,
            self.outfit_upper != other.outfit_upper,
            self.outfit_lower != other.outfit_lower,
        ]
        .iter()
        .filter(|&&d| d)
        .count()
    }
}

fn quantize3(c: [f32; 3]) -> [f32; 3] {
    c.map(|v| quantize_u8(v) as f32 / 255.0)
}

/// A 32x32 render plus per-pixel bookkeeping.
struct Canvas {
    img: Image,
    garment: Vec<bool>,
    legs: Vec<bool>,
}

impl Canvas {
    fn new(bg: [f32; 3]) -> Self {
        Self { img: Image::filled(BASE, BASE, &bg), garment: vec![false; BASE * BASE], legs: vec![false; BASE * BASE] }
    }

    fn paint(&mut self, r: usize, c: usize, color: [f32; 3]) {
        self.img.set_pixel(r, c, &color);
    }

    fn finish(mut self, canvas: usize) -> (Image, Vec<bool>) {
        self.img.quantize();
        if canvas == 2 * BASE {
            let img = self.img.upsample2();
            let mask = upsample_mask(&self.garment, BASE);
            (img, mask)
        } else {
            (self.img, self.garment)
        }
    }
}

fn upsample_mask(mask: &[bool], side: usize) -> Vec<bool> {
    let mut out = vec![false; 4 * side * side];
    for r in 0..2 * side {
        for c in 0..2 * side {
            out[r * 2 * side + c] = mask[(r / 2) * side + c / 2];
        }
    }
    out
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn arm_end(person: &PersonParams, side: usize) -> (f32, f32) {
    let (r0, c0) = SHOULDERS[side];
    let a = person.arm_angles[side];
    let dir = if side == 0 { -1.0 } else { 1.0 };
    (r0 + ARM_LENGTH * a.cos(), c0 + dir * ARM_LENGTH * a.sin())
}

fn leg_center(person: &PersonParams, side: usize, row: usize) -> f32 {
    let dir = if side == 0 { -1.0 } else { 1.0 };
    LEG_CENTERS[side] + dir * person.leg_spread[side].tan() * (row - LEG_ROWS.0) as f32
}

fn draw_body(cv: &mut Canvas, person: &PersonParams) {
    let skin = person.skin;
    for r in LEG_ROWS.0..LEG_ROWS.1 {
        for side in 0..2 {
            let center = leg_center(person, side, r);
            for c in 0..BASE {
                if (c as f32 - center).abs() <= LEG_HALF_WIDTH {
                    cv.paint(r, c, skin);
                    cv.legs[r * BASE + c] = true;
                }
            }
        }
    }
    for r in TORSO_ROWS.0..TORSO_ROWS.1 {
        for c in BODY_COLS.0..BODY_COLS.1 {
            cv.paint(r, c, skin);
        }
    }
    for side in 0..2 {
        let (a, b) = (SHOULDERS[side], arm_end(person, side));
        for r in 0..BASE {
            for c in 0..BASE {
                if segment_distance((r as f32, c as f32), a, b) <= ARM_RADIUS {
                    cv.paint(r, c, skin);
                }
            }
        }
    }
    for c in 15..17 {
        cv.paint(9, c, skin);
    }
    for r in 2..9 {
        for c in 13..19 {
            cv.paint(r, c, skin);
        }
    }
    let hair = person.hair_color;
    let mut put = |r: usize, c: usize| cv.paint(r, c, hair);
    match person.hair_style {
        0 => (2..4).for_each(|r| (13..19).for_each(|c| put(r, c))),
        1 => {
            (2..4).for_each(|r| (13..19).for_each(|c| put(r, c)));
            (2..11).for_each(|r| [12, 19].into_iter().for_each(|c| put(r, c)));
        }
        2 => {
            (2..4).for_each(|r| (13..19).for_each(|c| put(r, c)));
            (0..2).for_each(|r| (15..17).for_each(|c| put(r, c)));
        }
        _ => {}
    }
}

/// Pixels covered by `g` when worn, in garment-local coordinates.
fn worn_pixels(g: &GarmentParams, legs: &[bool]) -> Vec<(usize, usize)> {
    let (top, rows) = (g.top(), g.rows());
    let mut out = Vec::new();
    for r in top..top + rows {
        for c in 0..BASE {
            let inside = match g.category {
                Category::Upper => (BODY_COLS.0..BODY_COLS.1).contains(&c),
                Category::Lower => legs[r * BASE + c] || (r < LEG_ROWS.0 + 2 && (11..21).contains(&c)),
                Category::Dress => (BODY_COLS.0..BODY_COLS.1).contains(&c),
            };
            if inside {
                out.push((r, c));
            }
        }
    }
    out
}

fn draw_garment(cv: &mut Canvas, g: &GarmentParams, mark: bool) {
    let top = g.top();
    for (r, c) in worn_pixels(g, &cv.legs) {
        let mut color = g.pattern.color(g.color, r - top, c - BODY_COLS.0);
        if g.translucent {
            let under = luma(cv.img.pixel(r, c));
            color = color.map(|v| (1.0 - TRANSLUCENT_ALPHA) * v + TRANSLUCENT_ALPHA * under);
        }
        cv.paint(r, c, color);
        if mark {
            cv.garment[r * BASE + c] = true;
        }
    }
}

fn render_canvas(person: &PersonParams, garment: Option<&GarmentParams>) -> Canvas {
    let mut cv = Canvas::new(BACKGROUND);
    draw_body(&mut cv, person);
    match garment.map(|g| g.category) {
        None => {
            draw_garment(&mut cv, &person.outfit_lower, false);
            draw_garment(&mut cv, &person.outfit_upper, false);
        }
        Some(Category::Upper) => {
            draw_garment(&mut cv, &person.outfit_lower, false);
            draw_garment(&mut cv, garment.unwrap(), true);
        }
        Some(Category::Lower) => {
            draw_garment(&mut cv, &person.outfit_upper, false);
            draw_garment(&mut cv, garment.unwrap(), true);
        }
        Some(Category::Dress) => draw_garment(&mut cv, garment.unwrap(), true),
    }
    cv
}

/// The person wearing `garment` (plus the non-conflicting part of their outfit).
pub fn render_person(person: &PersonParams, garment: &GarmentParams) -> Image {
    render_canvas(person, Some(garment)).finish(person.canvas).0
}

/// The person in their own outfit.
pub fn render_outfit(person: &PersonParams) -> Image {
    render_canvas(person, None).finish(person.canvas).0
}

/// Pixels covered by `garment` in [`render_person`]'s output.
pub fn garment_mask(person: &PersonParams, garment: &GarmentParams) -> Vec<bool> {
    render_canvas(person, Some(garment)).finish(person.canvas).1
}

/// The fixed region replaced by grey in the agnostic image (row-major, 32x32 base).
fn category_region(category: Category) -> (usize, usize) {
    match category {
        Category::Upper => TORSO_ROWS,
        Category::Lower => LEG_ROWS,
        Category::Dress => (TORSO_ROWS.0, LEG_ROWS.1),
    }
}

/// Agnostic mask for `category` on a `canvas`-sized image.
pub fn category_mask(category: Category, canvas: usize) -> Vec<bool> {
    let (r0, r1) = category_region(category);
    let mut mask = vec![false; BASE * BASE];
    for r in r0..r1 {
        for c in BODY_COLS.0..BODY_COLS.1 {
            mask[r * BASE + c] = true;
        }
    }
    if canvas == 2 * BASE {
        upsample_mask(&mask, BASE)
    } else {
        mask
    }
}

/// `(agnostic image, mask)`: the try-on target with the category region set to grey.
pub fn render_agnostic(person: &PersonParams, garment: &GarmentParams) -> (Image, Vec<bool>) {
    let mut img = render_person(person, garment);
    let mask = category_mask(garment.category, person.canvas);
    for (px, &m) in img.data.chunks_exact_mut(3).zip(&mask) {
        if m {
            px.fill(quantize_u8(AGNOSTIC_GRAY) as f32 / 255.0);
        }
    }
    (img, mask)
}

/// Single-channel 0/1 image of a boolean mask.
pub fn mask_image(mask: &[bool], side: usize) -> Image {
    Image::from_vec(side, side, 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).expect("square mask")
}

pub fn mask_from_image(img: &Image) -> Vec<bool> {
    img.data.chunks_exact(img.channels).map(|px| px[0] >= 0.5).collect()
}

/// Garment laid flat on a light background. Translucency is not visible here.
pub fn render_cloth(garment: &GarmentParams, canvas: usize) -> Image {
    let mut cv = Canvas::new(CLOTH_BACKGROUND);
    // laid out on the body template, so cloth rows line up with worn rows
    let top = garment.top();
    for lr in 0..garment.rows() {
        for c in BODY_COLS.0..BODY_COLS.1 {
            let lc = c - BODY_COLS.0;
            // trousers split into two legs below the waistband
            if garment.category == Category::Lower && lr >= 2 && (5..7).contains(&lc) {
                continue;
            }
            cv.paint(top + lr, c, garment.pattern.color(garment.color, lr, lc));
        }
    }
    cv.finish(canvas).0
}

const POSE_COLORS: [[f32; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
];

/// Stick-figure pose map on black; depends only on the body pose.
pub fn render_pose_map(person: &PersonParams) -> Image {
    let mut cv = Canvas::new([0.0; 3]);
    let mid = 15.5;
    let mut segments = vec![
        ((4.0, mid), (9.0, mid), POSE_COLORS[0]),
        ((9.0, mid), (20.0, mid), POSE_COLORS[1]),
        ((10.0, 9.0), (10.0, 22.0), POSE_COLORS[1]),
        (SHOULDERS[0], arm_end(person, 0), POSE_COLORS[2]),
        (SHOULDERS[1], arm_end(person, 1), POSE_COLORS[3]),
    ];
    for side in 0..2 {
        let a = (LEG_ROWS.0 as f32, LEG_CENTERS[side]);
        let b = ((LEG_ROWS.1 - 1) as f32, leg_center(person, side, LEG_ROWS.1 - 1));
        segments.push((a, b, POSE_COLORS[4 + side]));
    }
    for (a, b, color) in segments {
        for r in 0..BASE {
            for c in 0..BASE {
                if segment_distance((r as f32, c as f32), a, b) <= 0.5 {
                    cv.paint(r, c, color);
                }
            }
        }
    }
    cv.finish(person.canvas).0
}

/// Draws a person different from `avoid` in at least two fields (and, for
/// upper garments, with a different lower outfit).
pub fn sample_other_person<R: Rng + ?Sized>(avoid: &PersonParams, category: Category, rng: &mut R) -> PersonParams {
    loop {
        let p = PersonParams::random(avoid.canvas, rng);
        let outfit_ok = category != Category::Upper || p.outfit_lower != avoid.outfit_lower;
        if p.differing_fields(avoid) >= 2 && outfit_ok {
            return p;
        }
    }
}

/// The same garment worn by a freshly sampled, different person.
pub fn make_reference<R: Rng + ?Sized>(garment: &GarmentParams, avoid: &PersonParams, rng: &mut R) -> (Image, PersonParams) {
    let other = sample_other_person(avoid, garment.category, rng);
    (render_person(&other, garment), other)
}

/// Oracle translucency read-out: whether `img` is closer, over the garment
/// pixels, to the translucent or to the opaque render of `garment` on `person`.
pub fn classify_translucency(img: &Image, person: &PersonParams, garment: &GarmentParams) -> bool {
    let opaque = GarmentParams { translucent: false, ..*garment };
    let sheer = GarmentParams { translucent: true, ..*garment };
    let mask = garment_mask(person, garment);
    let dist = |g: &GarmentParams| {
        let r = render_person(person, g);
        img.data
            .chunks_exact(3)
            .zip(r.data.chunks_exact(3))
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>())
            .sum::<f32>()
    };
    dist(&sheer) < dist(&opaque)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn person(seed: u64) -> PersonParams {
        PersonParams::random(BASE, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn hue_names_cover_circle() {
        assert_eq!(hue_name(0.0), "red");
        assert_eq!(hue_name(0.99), "red");
        assert_eq!(hue_name(1.0 / 3.0), "green");
        assert_eq!(hue_name(2.0 / 3.0), "blue");
    }

    #[test]
    fn patterns_align_to_2x2_blocks() {
        for p in Pattern::ALL {
            for lr in (0..22).step_by(2) {
                for lc in (0..12).step_by(2) {
                    let c = p.color([0.4, 0.2, 0.1], lr, lc);
                    assert_eq!(c, p.color([0.4, 0.2, 0.1], lr + 1, lc));
                    assert_eq!(c, p.color([0.4, 0.2, 0.1], lr, lc + 1));
                    assert_eq!(c, p.color([0.4, 0.2, 0.1], lr + 1, lc + 1));
                }
            }
        }
    }

    #[test]
    fn random_params_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            PersonParams::random(BASE, &mut rng).validate().unwrap();
        }
    }

    #[test]
    fn large_canvas_is_upsampled_base() {
        let p = person(4);
        let g = GarmentParams::random(Category::Dress, &mut ChaCha8Rng::seed_from_u64(5));
        let big = PersonParams { canvas: 2 * BASE, ..p };
        assert_eq!(render_person(&big, &g), render_person(&p, &g).upsample2());
        assert_eq!(render_person(&big, &g).height, 64);
    }

    #[test]
    fn garment_name_mentions_colour_and_category() {
        let g = GarmentParams {
            category: Category::Dress,
            color: hsv_to_rgb(0.0, 0.9, 0.5),
            pattern: Pattern::Solid,
            translucent: false,
            length: 1.0,
        };
        assert_eq!(g.name(), "red dress");
    }
}
