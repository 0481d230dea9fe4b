use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    make_reference, mask_from_image, mask_image, render_agnostic, render_cloth, render_outfit, render_person,
    render_pose_map, Category, GarmentParams, Pattern, PersonParams,
};
use crate::error::{Error, Result};
use crate::image::Image;

/// File roles written per record, in manifest order.
pub const ROLES: [&str; 7] = ["person", "agnostic", "mask", "pose", "cloth", "ref", "target"];

pub const MANIFEST: &str = "manifest.txt";

/// Probabilities of drawing each garment category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryMix {
    pub upper: f64,
    pub lower: f64,
    pub dress: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        Self { upper: 1.0 / 3.0, lower: 1.0 / 3.0, dress: 1.0 / 3.0 }
    }
}

impl CategoryMix {
    pub fn new(upper: f64, lower: f64, dress: f64) -> Result<Self> {
        let parts = [upper, lower, dress];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || ((upper + lower + dress) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "category mix ({upper}, {lower}, {dress}) must be non-negative and sum to 1"
            )));
        }
        Ok(Self { upper, lower, dress })
    }

    /// Parses `"u,l,d"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("category mix {s:?} is not three numbers")))?;
        match parts[..] {
            [u, l, d] => Self::new(u, l, d),
            _ => Err(Error::InvalidArgument(format!("category mix {s:?} is not three numbers"))),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Category {
        let u = rng.random::<f64>();
        let weights = [self.upper, self.lower, self.dress];
        let mut acc = 0.0;
        for (c, w) in Category::ALL.into_iter().zip(weights) {
            acc += w;
            if u < acc {
                return c;
            }
        }
        // rounding slack: fall back to the last category with weight
        Category::ALL.into_iter().zip(weights).rev().find(|(_, w)| *w > 0.0).map_or(Category::Upper, |(c, _)| c)
    }
}

/// One try-on example with every conditioning image and the oracle target.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub idx: usize,
    pub person_params: PersonParams,
    pub garment: GarmentParams,
    pub reference_person: PersonParams,
    /// The person in their own outfit (mask-free input).
    pub person: Image,
    pub agnostic: Image,
    pub mask: Vec<bool>,
    pub pose: Image,
    pub cloth: Image,
    pub reference: Option<Image>,
    pub target: Image,
}

impl SampleRecord {
    pub fn render(idx: usize, person_params: PersonParams, garment: GarmentParams, reference_person: PersonParams) -> Self {
        let (agnostic, mask) = render_agnostic(&person_params, &garment);
        Self {
            idx,
            person: render_outfit(&person_params),
            agnostic,
            mask,
            pose: render_pose_map(&person_params),
            cloth: render_cloth(&garment, person_params.canvas),
            reference: Some(render_person(&reference_person, &garment)),
            target: render_person(&person_params, &garment),
            person_params,
            garment,
            reference_person,
        }
    }

    pub fn category(&self) -> Category {
        self.garment.category
    }

    pub fn canvas(&self) -> usize {
        self.person_params.canvas
    }
}

/// Generates `n` records; record `i` uses its own stream of the seeded
/// generator, so any index range can be rebuilt independently.
pub fn build_dataset(n: usize, mix: CategoryMix, seed: u64, canvas: usize) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    (0..n).map(|idx| build_record(idx, mix, seed, canvas)).collect()
}

pub fn build_record(idx: usize, mix: CategoryMix, seed: u64, canvas: usize) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx as u64);
    let category = mix.draw(&mut rng);
    let garment = GarmentParams::random(category, &mut rng);
    let person = PersonParams::random(canvas, &mut rng);
    person.validate()?;
    let (_, reference_person) = make_reference(&garment, &person, &mut rng);
    Ok(SampleRecord::render(idx, person, garment, reference_person))
}

fn fmt3(c: [f32; 3]) -> String {
    format!("{},{},{}", c[0], c[1], c[2])
}

fn fmt_garment(g: &GarmentParams) -> String {
    format!("{}/{}/{}/{}/{}", g.category.name(), fmt3(g.color), g.pattern.name(), u8::from(g.translucent), g.length)
}

fn fmt_person(p: &PersonParams) -> String {
    format!(
        "{},{};{},{};{};{};{};{};{};{}",
        p.arm_angles[0],
        p.arm_angles[1],
        p.leg_spread[0],
        p.leg_spread[1],
        fmt3(p.skin),
        p.hair_style,
        fmt3(p.hair_color),
        fmt_garment(&p.outfit_upper),
        fmt_garment(&p.outfit_lower),
        p.canvas
    )
}

fn manifest_line(r: &SampleRecord) -> String {
    format!(
        "idx={} category={} garment={} person={} ref_person={}",
        r.idx,
        r.category().name(),
        fmt_garment(&r.garment),
        fmt_person(&r.person_params),
        fmt_person(&r.reference_person)
    )
}

fn parse_floats<const N: usize>(s: &str) -> Option<[f32; N]> {
    let v: Vec<f32> = s.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

fn parse_garment(s: &str) -> Option<GarmentParams> {
    let f: Vec<&str> = s.split('/').collect();
    if f.len() != 5 {
        return None;
    }
    Some(GarmentParams {
        category: Category::parse(f[0]).ok()?,
        color: parse_floats(f[1])?,
        pattern: Pattern::parse(f[2]).ok()?,
        translucent: match f[3] {
            "1" => true,
            "0" => false,
            _ => return None,
        },
        length: f[4].parse().ok()?,
    })
}

fn parse_person(s: &str) -> Option<PersonParams> {
    let f: Vec<&str> = s.split(';').collect();
    if f.len() != 8 {
        return None;
    }
    Some(PersonParams {
        arm_angles: parse_floats(f[0])?,
        leg_spread: parse_floats(f[1])?,
        skin: parse_floats(f[2])?,
        hair_style: f[3].parse().ok()?,
        hair_color: parse_floats(f[4])?,
        outfit_upper: parse_garment(f[5])?,
        outfit_lower: parse_garment(f[6])?,
        canvas: f[7].parse().ok()?,
    })
}

/// Parameters stored on one manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub idx: usize,
    pub garment: GarmentParams,
    pub person: PersonParams,
    pub reference_person: PersonParams,
}

pub fn parse_manifest_line(line: &str) -> Option<ManifestEntry> {
    let mut idx = None;
    let mut garment = None;
    let mut person = None;
    let mut reference_person = None;
    for tok in line.split_whitespace() {
        let (k, v) = tok.split_once('=')?;
        match k {
            "idx" => idx = v.parse().ok(),
            "category" => {}
            "garment" => garment = parse_garment(v),
            "person" => person = parse_person(v),
            "ref_person" => reference_person = parse_person(v),
            _ => return None,
        }
    }
    Some(ManifestEntry { idx: idx?, garment: garment?, person: person?, reference_person: reference_person? })
}

pub fn role_path(dir: &Path, idx: usize, role: &str) -> PathBuf {
    dir.join(format!("{idx}_{role}.png"))
}

/// Writes PNGs and the manifest under `root/split`; returns the manifest path.
pub fn write_dataset(records: &[SampleRecord], root: &Path, split: &str) -> Result<PathBuf> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = String::new();
    for r in records {
        let side = r.canvas();
        let mask = mask_image(&r.mask, side);
        let images: [(&str, Option<&Image>); 7] = [
            ("person", Some(&r.person)),
            ("agnostic", Some(&r.agnostic)),
            ("mask", Some(&mask)),
            ("pose", Some(&r.pose)),
            ("cloth", Some(&r.cloth)),
            ("ref", r.reference.as_ref()),
            ("target", Some(&r.target)),
        ];
        for (role, img) in images {
            if let Some(img) = img {
                img.save_png(&role_path(&dir, r.idx, role))?;
            }
        }
        manifest.push_str(&manifest_line(r));
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a split written by [`write_dataset`]. Missing reference images are
/// allowed; any other missing role is an error naming every absent file.
pub fn read_dataset(root: &Path, split: &str) -> Result<Vec<SampleRecord>> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "split directory does not exist"),
        });
    }
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e = parse_manifest_line(line).ok_or_else(|| Error::format(&path, format!("line {}: malformed entry", n + 1)))?;
        let missing: Vec<String> = ROLES
            .iter()
            .filter(|&&role| role != "ref")
            .map(|role| role_path(&dir, e.idx, role))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingInputs { mode: "dataset".into(), missing });
        }
        let load = |role: &str| Image::load_png(&role_path(&dir, e.idx, role));
        let ref_path = role_path(&dir, e.idx, "ref");
        out.push(SampleRecord {
            idx: e.idx,
            person_params: e.person,
            garment: e.garment,
            reference_person: e.reference_person,
            person: load("person")?,
            agnostic: load("agnostic")?,
            mask: mask_from_image(&load("mask")?),
            pose: load("pose")?,
            cloth: load("cloth")?,
            reference: if ref_path.is_file() { Some(Image::load_png(&ref_path)?) } else { None },
            target: load("target")?,
        });
    }
    Ok(out)
}
