//! Reference-image generation: describe the person's appearance, assemble
//! positive/negative edit prompts from a description bank, have an editor
//! re-render the garment on a different person, then drop near-duplicates and
//! low-quality results.
//!
//! The describer and editor are traits. In-process synthetic implementations
//! work on the procedural world; [`service`] talks to an external model
//! server over a local socket.

pub mod service;
mod synthetic;

pub use synthetic::{opposite_hair, opposite_skin, PatchHistogramExtractor, SyntheticEditor, TemplateDescriber};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{dominant_hue, hue_distance, Image};
use crate::metrics::FeatureExtractor;
use crate::synthworld::{garment_mask, Category, GarmentParams, PersonParams, SampleRecord};

/// Instruction sent to the describer.
pub const DESCRIBE_INSTRUCTION: &str = "Describe only the person's skin tone and hair. Answer in two parts: \
start with 'Positive:' and give a clearly different skin tone and hair, then 'Negative:' and give the skin tone \
and hair as shown.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    pub positive: String,
    pub negative: String,
}

pub trait Describer {
    fn describe(&mut self, image: &Image, instruction: &str, seed: u64) -> Result<String>;
}

/// Everything an editor may look at. `world` carries the procedural
/// parameters behind `image`; model-backed editors ignore it.
#[derive(Clone, Debug)]
pub struct EditRequest<'a> {
    pub image: &'a Image,
    pub prompts: &'a PromptPair,
    pub seed: u64,
    pub world: Option<(PersonParams, GarmentParams)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edited {
    pub image: Image,
    /// Parameters of the rendered person, when the editor knows them.
    pub person: Option<PersonParams>,
    /// Quality flags raised by the editor (for example `back-facing`).
    pub flags: Vec<String>,
}

pub trait Editor {
    fn edit(&mut self, request: &EditRequest<'_>) -> Result<Edited>;
}

/// Splits describer output into `(positive, negative)`.
pub fn parse_description(raw: &str) -> Result<(String, String)> {
    let fail = |reason: &str| Error::DescriberParse { reason: reason.into(), raw: raw.into() };
    let p = raw.find("Positive:").ok_or_else(|| fail("missing 'Positive:' marker"))?;
    let n = raw.find("Negative:").ok_or_else(|| fail("missing 'Negative:' marker"))?;
    if n < p {
        return Err(fail("'Negative:' appears before 'Positive:'"));
    }
    let positive = raw[p + "Positive:".len()..n].trim().trim_end_matches(['.', ',']).trim().to_string();
    let negative = raw[n + "Negative:".len()..].trim().trim_end_matches(['.', ',']).trim().to_string();
    if positive.is_empty() || negative.is_empty() {
        return Err(fail("empty section"));
    }
    Ok((positive, negative))
}

/// `(contrasting appearance, original appearance)` for the person in `image`.
pub fn describe_appearance(image: &Image, describer: &mut dyn Describer, seed: u64) -> Result<(String, String)> {
    let raw = describer.describe(image, DESCRIBE_INSTRUCTION, seed)?;
    parse_description(&raw)
}

/// Words naming each category's own garment; an outfit entry for a category
/// must not contain any of them.
fn garment_words(category: Category) -> &'static [&'static str] {
    match category {
        Category::Upper => &["top", "shirt", "blouse", "sweater", "jacket"],
        Category::Lower => &["trousers", "pants", "jeans", "shorts", "skirt"],
        Category::Dress => &["dress", "gown"],
    }
}

/// Per-category outfit and action descriptions plus accessories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptionBank {
    pub outfits: BTreeMap<Category, Vec<String>>,
    pub actions: BTreeMap<Category, Vec<String>>,
    pub accessories: Vec<String>,
}

impl DescriptionBank {
    pub fn validate(&self) -> Result<()> {
        for (cat, entries) in &self.outfits {
            for e in entries {
                let lower = e.to_lowercase();
                if let Some(w) = garment_words(*cat).iter().find(|w| lower.split(|c: char| !c.is_alphanumeric()).any(|t| t == **w)) {
                    return Err(Error::InvalidArgument(format!(
                        "{} outfit entry {e:?} describes the {} garment itself ({w:?})",
                        cat.name(),
                        cat.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut bank = Self::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let sec = section.as_deref().ok_or_else(|| {
                Error::InvalidArgument(format!("bank line {}: entry before any [section] header", n + 1))
            })?;
            if sec == "accessories" {
                bank.accessories.push(line.to_string());
                continue;
            }
            let cat = Category::parse(sec)
                .map_err(|_| Error::InvalidArgument(format!("bank line {}: unknown section [{sec}]", n + 1)))?;
            let (kind, value) = line
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("bank line {}: expected 'outfit:' or 'action:'", n + 1)))?;
            let value = value.trim().to_string();
            match kind.trim() {
                "outfit" => bank.outfits.entry(cat).or_default().push(value),
                "action" => bank.actions.entry(cat).or_default().push(value),
                other => return Err(Error::InvalidArgument(format!("bank line {}: unknown kind {other:?}", n + 1))),
            }
        }
        bank.validate()?;
        Ok(bank)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for cat in Category::ALL {
            s.push_str(&format!("[{}]\n", cat.name()));
            for o in self.outfits.get(&cat).into_iter().flatten() {
                s.push_str(&format!("outfit: {o}\n"));
            }
            for a in self.actions.get(&cat).into_iter().flatten() {
                s.push_str(&format!("action: {a}\n"));
            }
        }
        s.push_str("[accessories]\n");
        for a in &self.accessories {
            s.push_str(a);
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Bank used when none is supplied.
    pub fn builtin() -> Self {
        let list = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let actions = list(&["standing with arms raised", "standing with arms relaxed", "walking forward", ""]);
        let mut bank = Self::default();
        bank.outfits.insert(Category::Upper, list(&["wearing navy trousers", "wearing a pleated grey skirt", "wearing white shorts"]));
        bank.outfits.insert(Category::Lower, list(&["wearing a plain white shirt", "wearing a striped sweater", "wearing a black jacket"]));
        bank.outfits.insert(Category::Dress, list(&["wearing white sneakers", "wearing black boots", "with a denim belt"]));
        for cat in Category::ALL {
            bank.actions.insert(cat, actions.clone());
        }
        bank.accessories = list(&["a silver necklace", "a straw hat", "round glasses"]);
        bank
    }

    fn pick<R: Rng + ?Sized>(list: Option<&Vec<String>>, rng: &mut R) -> String {
        match list {
            Some(v) if !v.is_empty() => v[rng.random_range(0..v.len())].clone(),
            _ => String::new(),
        }
    }
}

/// Builds the edit prompts: the contrasting appearance, action and outfit
/// followed by the garment-preservation clause; the negative prompt is the
/// original appearance.
pub fn assemble_prompts(
    appearance: &(String, String),
    action: &str,
    outfit: &str,
    garment_name: &str,
    category: Category,
    bank: &DescriptionBank,
) -> Result<PromptPair> {
    if !outfit.is_empty() && !bank.outfits.get(&category).is_some_and(|v| v.iter().any(|o| o == outfit)) {
        return Err(Error::InvalidArgument(format!("outfit {outfit:?} is not in the {} bank", category.name())));
    }
    let clause = format!("keep the {garment_name} cloth unchanged");
    let positive = [appearance.0.trim(), action.trim(), outfit.trim(), clause.as_str()]
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(", ");
    Ok(PromptPair { positive, negative: appearance.1.trim().to_string() })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Greedy first-wins deduplication: an item is dropped iff its cosine
/// similarity to an already kept item reaches `threshold`. Returns kept indices.
pub fn dedup_features(ids: &[String], features: &[Vec<f64>], threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("dedup threshold {threshold} outside (0, 1]")));
    }
    if ids.len() != features.len() {
        return Err(Error::Shape(format!("{} ids for {} features", ids.len(), features.len())));
    }
    for (id, f) in ids.iter().zip(features) {
        if f.iter().map(|x| x * x).sum::<f64>() == 0.0 {
            return Err(Error::ZeroNormFeature(id.clone()));
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for (i, f) in features.iter().enumerate() {
        if kept.iter().all(|&k| cosine(f, &features[k]) < threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn dedup_by_features(items: &[(String, Image)], extractor: &dyn FeatureExtractor, threshold: f64) -> Result<Vec<usize>> {
    let feats = items.iter().map(|(_, img)| extractor.extract(img)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
    dedup_features(&ids, &feats, threshold)
}

/// A named pure check on an item.
pub struct Predicate<'a, T> {
    pub name: &'a str,
    pub check: &'a dyn Fn(&T) -> bool,
}

/// Keeps the items passing every predicate; the log lists `(item index,
/// failed predicate)` for each failure.
pub fn quality_filter<T>(items: &[T], predicates: &[Predicate<'_, T>]) -> (Vec<usize>, Vec<(usize, String)>) {
    let mut kept = Vec::new();
    let mut log = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let failed: Vec<&str> = predicates.iter().filter(|p| !(p.check)(item)).map(|p| p.name).collect();
        if failed.is_empty() {
            kept.push(i);
        }
        log.extend(failed.into_iter().map(|n| (i, n.to_string())));
    }
    (kept, log)
}

/// Candidate reference for one garment.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub garment_idx: usize,
    pub garment: GarmentParams,
    pub target_person: PersonParams,
    pub prompts: PromptPair,
    pub edited: Edited,
}

/// Reference keeps the garment's hue (within 0.05 over the worn garment pixels).
pub fn garment_preserved(c: &Candidate) -> bool {
    let Some(person) = c.edited.person else { return true };
    let mask = garment_mask(&person, &c.garment);
    dominant_hue(&c.edited.image, &mask, 0.15).is_some_and(|h| hue_distance(h, c.garment.hue()) <= 0.05)
}

pub fn not_back_facing(c: &Candidate) -> bool {
    !c.edited.flags.iter().any(|f| f == "back-facing")
}

pub fn not_distorted(c: &Candidate) -> bool {
    !c.edited.flags.iter().any(|f| f == "distorted")
}

/// Reference person is not (nearly) the target person.
pub fn different_person(c: &Candidate) -> bool {
    c.edited.person.is_none_or(|p| p.differing_fields(&c.target_person) >= 2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairEntry {
    pub garment_idx: usize,
    pub reference_path: Option<PathBuf>,
    pub kept: bool,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefgenConfig {
    pub dedup_threshold: f64,
}

impl Default for RefgenConfig {
    fn default() -> Self {
        Self { dedup_threshold: 0.95 }
    }
}

pub const PAIR_MANIFEST: &str = "pairs.txt";

/// Runs describe, assemble, edit, dedup and filter for every record and
/// writes the kept references as `{idx}_ref.png` plus a pair manifest under
/// `out_dir`. Editor failures skip the record and are logged.
#[allow(clippy::too_many_arguments)]
pub fn generate_reference_set<R: Rng + ?Sized>(
    records: &[SampleRecord],
    editor: &mut dyn Editor,
    describer: &mut dyn Describer,
    bank: &DescriptionBank,
    extractor: &dyn FeatureExtractor,
    cfg: &RefgenConfig,
    out_dir: &Path,
    rng: &mut R,
) -> Result<Vec<PairEntry>> {
    bank.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries: Vec<PairEntry> = Vec::new();
    let mut candidates = Vec::new();
    for r in records {
        let seed = rng.random::<u64>();
        let appearance = describe_appearance(&r.person, describer, seed)?;
        let action = DescriptionBank::pick(bank.actions.get(&r.category()), rng);
        let outfit = DescriptionBank::pick(bank.outfits.get(&r.category()), rng);
        let prompts = assemble_prompts(&appearance, &action, &outfit, &r.garment.name(), r.category(), bank)?;
        let req = EditRequest { image: &r.person, prompts: &prompts, seed, world: Some((r.person_params, r.garment)) };
        match editor.edit(&req) {
            Ok(edited) => candidates.push(Candidate {
                garment_idx: r.idx,
                garment: r.garment,
                target_person: r.person_params,
                prompts,
                edited,
            }),
            Err(e) => entries.push(PairEntry {
                garment_idx: r.idx,
                reference_path: None,
                kept: false,
                reason: format!("editor failed: {e}"),
            }),
        }
    }

    let items: Vec<(String, Image)> = candidates.iter().map(|c| (c.garment_idx.to_string(), c.edited.image.clone())).collect();
    let unique = dedup_by_features(&items, extractor, cfg.dedup_threshold)?;
    let predicates: [Predicate<'_, Candidate>; 4] = [
        Predicate { name: "garment-preserved", check: &garment_preserved },
        Predicate { name: "different-person", check: &different_person },
        Predicate { name: "not-back-facing", check: &not_back_facing },
        Predicate { name: "not-distorted", check: &not_distorted },
    ];
    let (passed, log) = quality_filter(&candidates, &predicates);
    for (i, c) in candidates.iter().enumerate() {
        let failed: Vec<&str> = log.iter().filter(|(j, _)| *j == i).map(|(_, n)| n.as_str()).collect();
        let entry = if !unique.contains(&i) {
            PairEntry { garment_idx: c.garment_idx, reference_path: None, kept: false, reason: "duplicate".into() }
        } else if !passed.contains(&i) {
            PairEntry { garment_idx: c.garment_idx, reference_path: None, kept: false, reason: format!("failed {}", failed.join("+")) }
        } else {
            let path = out_dir.join(format!("{}_ref.png", c.garment_idx));
            c.edited.image.save_png(&path)?;
            PairEntry { garment_idx: c.garment_idx, reference_path: Some(path), kept: true, reason: "ok".into() }
        };
        entries.push(entry);
    }
    entries.sort_by_key(|e| e.garment_idx);
    write_pair_manifest(&entries, &out_dir.join(PAIR_MANIFEST))?;
    Ok(entries)
}

/// Lines `garment_id, reference_path, kept|dropped, reason` (`-` when no file).
pub fn write_pair_manifest(entries: &[PairEntry], path: &Path) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        let p = e.reference_path.as_ref().and_then(|p| p.file_name()).map_or("-".to_string(), |f| f.to_string_lossy().into_owned());
        s.push_str(&format!("{}, {}, {}, {}\n", e.garment_idx, p, if e.kept { "kept" } else { "dropped" }, e.reason));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
