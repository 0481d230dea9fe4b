//! Two-stage try-on training: a mask-based stage-1 model, synthesis of
//! unpaired persons with it, and a stage-2 person-to-person model trained with
//! stochastic condition dropout. Also the evaluation loop over the four
//! input modes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{fm_loss, sample_ode, to_model_space, to_pixel_space, FlowBatch, FlowSample, SamplerConfig};
use crate::image::{dominant_hue, hue_distance, Image};
use crate::metrics::{
    extract_features, fid, fit_gaussian, kid, masked_ssim, perceptual_distance, ssim, FeatureExtractor, FeatureSet,
    GaussianStats, MetricReport, Protocol,
};
use crate::model::ModelParams;
use crate::optim::{AdamW, AdamWConfig};
use crate::posindex::ConditionSlot;
use crate::synthworld::{
    classify_translucency, garment_mask, render_cloth, GarmentParams, SampleRecord,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    /// Probability that slot 1 carries the person image instead of the agnostic one.
    pub p_person: f64,
    /// Probability that the reference image is appended.
    pub p_reference: f64,
    pub category_match: bool,
    pub optimizer: AdamWConfig,
    /// Linear learning-rate warm-up length in steps.
    pub warmup: usize,
    /// Cosine decay of the learning rate to zero at `steps`.
    pub cosine: bool,
    pub seed: u64,
}

impl StageConfig {
    pub fn stage1(steps: usize, batch: usize) -> Self {
        Self {
            stage: Stage::One,
            steps,
            batch,
            p_person: 0.0,
            p_reference: 0.0,
            category_match: true,
            optimizer: AdamWConfig::default(),
            warmup: 0,
            cosine: false,
            seed: 0,
        }
    }

    pub fn stage2(steps: usize, batch: usize) -> Self {
        Self { stage: Stage::Two, p_person: 0.5, p_reference: 0.25, ..Self::stage1(steps, batch) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        for (name, p) in [("p_person", self.p_person), ("p_reference", self.p_reference)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.stage == Stage::One && (self.p_person != 0.0 || self.p_reference != 0.0) {
            return bad("stage one trains on agnostic inputs only: p_person and p_reference must be 0".into());
        }
        self.optimizer.validate()
    }

    /// Learning rate used for the update that produces step `step + 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.optimizer.lr;
        let warm = if self.warmup > 0 { ((step + 1) as f64 / self.warmup as f64).min(1.0) } else { 1.0 };
        let decay = if self.cosine && self.steps > 0 {
            0.5 * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
        } else {
            1.0
        };
        base * warm * decay
    }
}

/// Which optional inputs one training sample sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionPattern {
    pub person: bool,
    pub reference: bool,
}

impl ConditionPattern {
    /// Independent coins for the person slot and the reference.
    pub fn draw<R: Rng + ?Sized>(cfg: &StageConfig, rng: &mut R) -> Self {
        let person = rng.random::<f64>() < cfg.p_person;
        let reference = rng.random::<f64>() < cfg.p_reference;
        Self { person, reference }
    }
}

/// One of the four evaluation input settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mode {
    pub mask_free: bool,
    pub reference: bool,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode { mask_free: false, reference: false },
        Mode { mask_free: false, reference: true },
        Mode { mask_free: true, reference: false },
        Mode { mask_free: true, reference: true },
    ];

    pub fn name(self) -> &'static str {
        match (self.mask_free, self.reference) {
            (false, false) => "mask",
            (false, true) => "mask+R",
            (true, false) => "mask-free",
            (true, true) => "mask-free+R",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?} (expected mask, mask+R, mask-free, mask-free+R)")))
    }

    /// File roles this mode reads besides the cloth and pose map.
    pub fn required_roles(self) -> Vec<&'static str> {
        let mut roles = vec![if self.mask_free { "person" } else { "agnostic" }, "pose", "cloth"];
        if self.reference {
            roles.push("ref");
        }
        roles
    }
}

/// Resolution reductions applied to condition images before patching
/// (number of 2x average pools).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputLayout {
    pub cloth_pool: usize,
    pub reference_pool: usize,
}

impl Default for InputLayout {
    fn default() -> Self {
        Self { cloth_pool: 0, reference_pool: 1 }
    }
}

fn pooled(img: &Image, times: usize) -> Image {
    (0..times).fold(img.clone(), |acc, _| acc.avg_pool2())
}

/// Conditioning images for one try-on, in pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct TryOnInputs {
    pub agnostic: Image,
    pub pose: Image,
    /// Person wearing a different garment (mask-free input).
    pub person: Option<Image>,
    pub cloth: Image,
    pub reference: Option<Image>,
}

impl TryOnInputs {
    pub fn from_record(r: &SampleRecord) -> Self {
        Self {
            agnostic: r.agnostic.clone(),
            pose: r.pose.clone(),
            person: Some(r.person.clone()),
            cloth: r.cloth.clone(),
            reference: r.reference.clone(),
        }
    }

    /// Model-space `(slot, image)` list for `mode`. Slot 1 is the agnostic
    /// or person image with the pose map appended as three more channels.
    pub fn conditions(&self, mode: Mode, layout: InputLayout, params: &ModelParams<f32>) -> Result<Vec<(ConditionSlot, Image)>> {
        let codec = params.config.codec;
        let mut missing = Vec::new();
        let slot1 = if mode.mask_free {
            self.person.as_ref().ok_or(()).map_err(|_| missing.push("person".to_string())).ok()
        } else {
            Some(&self.agnostic)
        };
        if mode.reference && self.reference.is_none() {
            missing.push("ref".into());
        }
        if !missing.is_empty() {
            return Err(Error::MissingInputs { mode: mode.name().into(), missing });
        }
        let enc = |img: &Image, pool: usize| to_model_space(&pooled(&codec.encode(img), pool));
        let mut out = vec![
            (ConditionSlot::Person, enc(slot1.expect("checked"), 0).concat_channels(&enc(&self.pose, 0))?),
            (ConditionSlot::Cloth, enc(&self.cloth, layout.cloth_pool)),
        ];
        if mode.reference {
            out.push((ConditionSlot::Reference, enc(self.reference.as_ref().expect("checked"), layout.reference_pool)));
        }
        Ok(out)
    }
}

/// Conditions plus pixel-space target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub inputs: TryOnInputs,
    pub target: Image,
}

/// `[synthesized person wearing donor garment, original cloth, ground truth]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedRecord {
    pub record: SampleRecord,
    pub donor_idx: usize,
    pub donor_garment: GarmentParams,
    pub synthesized: Image,
}

impl UnpairedRecord {
    pub fn example(&self) -> TrainExample {
        let mut inputs = TryOnInputs::from_record(&self.record);
        inputs.person = Some(self.synthesized.clone());
        TrainExample { inputs, target: self.record.target.clone() }
    }
}

pub fn stage1_examples(records: &[SampleRecord]) -> Vec<TrainExample> {
    records
        .iter()
        .map(|r| TrainExample { inputs: TryOnInputs { person: None, reference: None, ..TryOnInputs::from_record(r) }, target: r.target.clone() })
        .collect()
}

/// Model, optimizer and progress of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub optimizer: AdamW,
    pub step: usize,
    pub losses: Vec<(usize, f64)>,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>, cfg: &StageConfig) -> Result<Self> {
        Ok(Self { params, optimizer: AdamW::new(cfg.optimizer.clone())?, step: 0, losses: Vec::new() })
    }
}

/// Generator for the randomness of step `step`; independent of how the run
/// was split by resumes.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// The batch drawn at `step`: example indices and condition patterns.
pub fn draw_batch(cfg: &StageConfig, n_examples: usize, step: usize) -> Vec<(usize, ConditionPattern)> {
    let mut rng = step_rng(cfg.seed, step);
    (0..cfg.batch)
        .map(|_| {
            let i = rng.random_range(0..n_examples);
            (i, ConditionPattern::draw(cfg, &mut rng))
        })
        .collect()
}

fn build_batch(
    examples: &[TrainExample],
    cfg: &StageConfig,
    layout: InputLayout,
    params: &ModelParams<f32>,
    step: usize,
) -> Result<FlowBatch> {
    let draws = draw_batch(cfg, examples.len(), step);
    // noise and flow times come from a separate stream so the dropout pattern
    // is a function of (seed, step) alone
    let mut rng = step_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, step);
    let mut samples = Vec::with_capacity(draws.len());
    for (i, pat) in draws {
        let ex = &examples[i];
        let mode = Mode { mask_free: pat.person, reference: pat.reference };
        let conds = ex.inputs.conditions(mode, layout, params)?;
        let x = to_model_space(&params.config.codec.encode(&ex.target));
        samples.push(FlowSample::draw(x, conds, &mut rng));
    }
    Ok(FlowBatch::new(samples))
}

/// Runs steps `state.step..cfg.steps`, calling `on_step` after each update.
pub fn train(
    examples: &[TrainExample],
    cfg: &StageConfig,
    layout: InputLayout,
    state: &mut TrainState,
    mut on_step: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    while state.step < cfg.steps {
        let step = state.step;
        let batch = build_batch(examples, cfg, layout, &state.params, step)?;
        let (loss, grads) = match fm_loss(&state.params, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::TrainingDiverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        state.optimizer.config.lr = cfg.lr_at(step);
        state.optimizer.step_model(&mut state.params, &grads)?;
        state.step += 1;
        state.losses.push((state.step, loss));
        on_step(state)?;
    }
    Ok(())
}

/// Mask-based training on `[agnostic ⊕ pose, cloth]`.
pub fn train_stage1(
    records: &[SampleRecord],
    cfg: &StageConfig,
    layout: InputLayout,
    params: ModelParams<f32>,
) -> Result<(ModelParams<f32>, Vec<(usize, f64)>)> {
    if cfg.stage != Stage::One {
        return Err(Error::InvalidArgument("train_stage1 needs a stage-one config".into()));
    }
    let mut state = TrainState::new(params, cfg)?;
    train(&stage1_examples(records), cfg, layout, &mut state, |_| Ok(()))?;
    Ok((state.params, state.losses))
}

/// Person-to-person training on synthesized unpaired persons, usually warm
/// started from the stage-1 weights.
pub fn train_stage2(
    unpaired: &[UnpairedRecord],
    cfg: &StageConfig,
    layout: InputLayout,
    params: ModelParams<f32>,
) -> Result<(ModelParams<f32>, Vec<(usize, f64)>)> {
    if cfg.stage != Stage::Two {
        return Err(Error::InvalidArgument("train_stage2 needs a stage-two config".into()));
    }
    let examples: Vec<_> = unpaired.iter().map(UnpairedRecord::example).collect();
    let mut state = TrainState::new(params, cfg)?;
    train(&examples, cfg, layout, &mut state, |_| Ok(()))?;
    Ok((state.params, state.losses))
}

/// Uniform donor from the records other than `i` (of the same category when
/// `category_match`).
pub fn draw_donor<R: Rng + ?Sized>(records: &[SampleRecord], i: usize, category_match: bool, rng: &mut R) -> Result<usize> {
    let cat = records[i].category();
    let pool: Vec<usize> =
        (0..records.len()).filter(|&j| j != i && (!category_match || records[j].category() == cat)).collect();
    if pool.is_empty() {
        return Err(Error::EmptyDonorPool(cat.name().into()));
    }
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Generates a try-on image in pixel space.
pub fn generate(
    params: &ModelParams<f32>,
    inputs: &TryOnInputs,
    mode: Mode,
    layout: InputLayout,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Image> {
    let conds = inputs.conditions(mode, layout, params)?;
    let refs: Vec<_> = conds.iter().map(|(s, img)| (*s, img)).collect();
    let (h, w) = (inputs.agnostic.height, inputs.agnostic.width);
    let f = params.config.codec.factor();
    let out = sample_ode(params, &refs, (h / f, w / f), sampler, seed)?;
    let mut img = params.config.codec.decode(&to_pixel_space(&out));
    img.quantize();
    Ok(img)
}

/// For every record, draws a donor garment and renders the person wearing it
/// with the stage-1 model from `[agnostic, donor cloth, pose]`.
pub fn synthesize_unpaired<R: Rng + ?Sized>(
    params: &ModelParams<f32>,
    records: &[SampleRecord],
    layout: InputLayout,
    sampler: &SamplerConfig,
    category_match: bool,
    rng: &mut R,
) -> Result<Vec<UnpairedRecord>> {
    let mut out = Vec::with_capacity(records.len());
    for i in 0..records.len() {
        let j = draw_donor(records, i, category_match, rng)?;
        let seed = rng.random::<u64>();
        let r = &records[i];
        let inputs = TryOnInputs { person: None, reference: None, cloth: records[j].cloth.clone(), ..TryOnInputs::from_record(r) };
        let synthesized = generate(params, &inputs, Mode { mask_free: false, reference: false }, layout, sampler, seed)?;
        out.push(UnpairedRecord { record: r.clone(), donor_idx: records[j].idx, donor_garment: records[j].garment, synthesized });
    }
    Ok(out)
}

pub const UNPAIRED_MANIFEST: &str = "unpaired.txt";

/// Writes `{idx}_synth.png` files and a manifest of donor choices under `dir`.
pub fn write_unpaired(records: &[UnpairedRecord], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for u in records {
        u.synthesized.save_png(&dir.join(format!("{}_synth.png", u.record.idx)))?;
        manifest.push_str(&format!(
            "idx={} donor={} category={}\n",
            u.record.idx,
            u.donor_idx,
            u.record.category().name()
        ));
    }
    let path = dir.join(UNPAIRED_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads the output of [`write_unpaired`], joining it with the source records.
pub fn read_unpaired(records: &[SampleRecord], dir: &Path) -> Result<Vec<UnpairedRecord>> {
    let path = dir.join(UNPAIRED_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let by_idx = |idx: usize| records.iter().find(|r| r.idx == idx);
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::format(&path, format!("line {}: malformed entry", n + 1));
        let mut idx = None;
        let mut donor = None;
        for tok in line.split_whitespace() {
            match tok.split_once('=') {
                Some(("idx", v)) => idx = v.parse::<usize>().ok(),
                Some(("donor", v)) => donor = v.parse::<usize>().ok(),
                Some(("category", _)) => {}
                _ => return Err(bad()),
            }
        }
        let (idx, donor) = (idx.ok_or_else(bad)?, donor.ok_or_else(bad)?);
        let record = by_idx(idx).ok_or_else(|| Error::format(&path, format!("record {idx} not in dataset")))?;
        let donor_rec = by_idx(donor).ok_or_else(|| Error::format(&path, format!("donor {donor} not in dataset")))?;
        let synthesized = Image::load_png(&dir.join(format!("{idx}_synth.png")))?;
        out.push(UnpairedRecord { record: record.clone(), donor_idx: donor, donor_garment: donor_rec.garment, synthesized });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub modes: Vec<Mode>,
    pub sampler: SamplerConfig,
    pub layout: InputLayout,
    pub seed: u64,
    /// Also generate with a swapped same-category cloth and score the set
    /// with distribution metrics.
    pub unpaired: bool,
    /// Minimum saturation for the dominant-hue read-out.
    pub hue_min_saturation: f32,
    pub hue_tolerance: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.to_vec(),
            sampler: SamplerConfig::default(),
            layout: InputLayout::default(),
            seed: 0,
            unpaired: false,
            hue_min_saturation: 0.15,
            hue_tolerance: 0.1,
        }
    }
}

/// Per-mode generated images and the per-record scores behind the report.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeOutputs {
    pub mode: Mode,
    pub images: Vec<Image>,
    pub garment_ssim: Vec<f64>,
    pub hue_ok: Vec<bool>,
    pub translucency_ok: Vec<bool>,
    pub unpaired_images: Vec<Image>,
}

/// Names of input files a mode would need but the records lack.
pub fn missing_inputs(records: &[SampleRecord], mode: Mode) -> Vec<String> {
    records
        .iter()
        .filter(|r| mode.reference && r.reference.is_none())
        .map(|r| format!("{}_ref.png", r.idx))
        .collect()
}

/// Sampling seed for record `idx`; shared by all modes so they see the same noise.
pub fn record_seed(seed: u64, idx: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx as u64);
    rng.random()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Whether the garment has an invisible attribute: its translucent and opaque
/// versions give the same flat cloth image.
pub fn cloth_is_ambiguous(g: &GarmentParams, canvas: usize) -> bool {
    render_cloth(g, canvas) == render_cloth(&g.twin(), canvas)
}

/// Per-record paired scores behind the report rows of one mode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedScores {
    pub garment_ssim: Vec<f64>,
    pub hue_ok: Vec<bool>,
    pub translucency_ok: Vec<bool>,
}

/// Target features shared by every scored set.
struct RealSet {
    features: FeatureSet,
    stats: GaussianStats,
}

impl RealSet {
    fn new(records: &[SampleRecord], extractor: &dyn FeatureExtractor) -> Result<Self> {
        let targets: Vec<Image> = records.iter().map(|r| r.target.clone()).collect();
        let features = extract_features(&targets, extractor)?;
        let stats = fit_gaussian(&features)?;
        Ok(Self { features, stats })
    }
}

fn score_paired(
    records: &[SampleRecord],
    images: &[Image],
    label: &str,
    cfg: &EvalConfig,
    extractor: &dyn FeatureExtractor,
    real: &RealSet,
    report: &mut MetricReport,
) -> Result<PairedScores> {
    if images.len() != records.len() {
        return Err(Error::Shape(format!("{} images for {} records", images.len(), records.len())));
    }
    let mut scores = PairedScores::default();
    let mut full_ssim = Vec::new();
    let mut lpips = Vec::new();
    for (r, img) in records.iter().zip(images) {
        let mask = garment_mask(&r.person_params, &r.garment);
        full_ssim.push(ssim(img, &r.target)?);
        scores.garment_ssim.push(masked_ssim(img, &r.target, &mask)?);
        lpips.push(perceptual_distance(img, &r.target, extractor)?);
        let hue = dominant_hue(img, &mask, cfg.hue_min_saturation);
        scores.hue_ok.push(hue.is_some_and(|h| hue_distance(h, r.garment.hue()) <= cfg.hue_tolerance));
        scores.translucency_ok.push(classify_translucency(img, &r.person_params, &r.garment) == r.garment.translucent);
    }
    let ambiguous: Vec<bool> = records.iter().map(|r| cloth_is_ambiguous(&r.garment, r.canvas())).collect();
    report.push("ssim", Protocol::Paired, label, mean(full_ssim.iter().copied()));
    report.push("garment_ssim", Protocol::Paired, label, mean(scores.garment_ssim.iter().copied()));
    report.push("perceptual", Protocol::Paired, label, mean(lpips.iter().copied()));
    report.push("hue_accuracy", Protocol::Paired, label, mean(scores.hue_ok.iter().map(|&b| b as u8 as f64)));
    report.push(
        "translucency_accuracy",
        Protocol::Paired,
        label,
        mean(scores.translucency_ok.iter().zip(&ambiguous).filter(|(_, &a)| a).map(|(&b, _)| b as u8 as f64)),
    );
    score_distribution(images, Protocol::Paired, label, extractor, real, report)?;
    Ok(scores)
}

fn score_distribution(
    images: &[Image],
    protocol: Protocol,
    label: &str,
    extractor: &dyn FeatureExtractor,
    real: &RealSet,
    report: &mut MetricReport,
) -> Result<()> {
    let generated = extract_features(images, extractor)?;
    report.push("fid", protocol, label, fid(&fit_gaussian(&generated)?, &real.stats)?);
    report.push("kid", protocol, label, kid(&generated, &real.features)?);
    Ok(())
}

/// Scores already generated images (one per record, same order) against the
/// records' targets under the paired protocol.
pub fn score_images(
    records: &[SampleRecord],
    images: &[Image],
    label: &str,
    cfg: &EvalConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<(MetricReport, PairedScores)> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least 2 records".into()));
    }
    let real = RealSet::new(records, extractor)?;
    let mut report = MetricReport::default();
    let scores = score_paired(records, images, label, cfg, extractor, &real, &mut report)?;
    Ok((report, scores))
}

/// Record whose cloth and reference replace those of `records[i]` in the
/// unpaired protocol: the next record of the same category, cyclically.
pub fn unpaired_partner(records: &[SampleRecord], i: usize) -> usize {
    let cat = records[i].category();
    let pool: Vec<usize> = (0..records.len()).filter(|&j| records[j].category() == cat).collect();
    let k = pool.iter().position(|&x| x == i).expect("record is in its own category pool");
    pool[(k + 1) % pool.len()]
}

/// Generates every requested mode on `records` and scores the outputs.
pub fn evaluate_run(
    params: &ModelParams<f32>,
    records: &[SampleRecord],
    cfg: &EvalConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<(MetricReport, Vec<ModeOutputs>)> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least 2 records".into()));
    }
    for &mode in &cfg.modes {
        let missing = missing_inputs(records, mode);
        if !missing.is_empty() {
            return Err(Error::MissingInputs { mode: mode.name().into(), missing });
        }
    }
    let real = RealSet::new(records, extractor)?;
    let mut report = MetricReport::default();
    let mut outputs = Vec::new();
    for &mode in &cfg.modes {
        let name = mode.name();
        let images = records
            .iter()
            .map(|r| generate(params, &TryOnInputs::from_record(r), mode, cfg.layout, &cfg.sampler, record_seed(cfg.seed, r.idx)))
            .collect::<Result<Vec<_>>>()?;
        let scores = score_paired(records, &images, name, cfg, extractor, &real, &mut report)?;
        let mut unpaired_images = Vec::new();
        if cfg.unpaired {
            for (i, r) in records.iter().enumerate() {
                let donor = &records[unpaired_partner(records, i)];
                let mut inputs = TryOnInputs::from_record(r);
                inputs.cloth = donor.cloth.clone();
                inputs.reference = donor.reference.clone();
                let seed = record_seed(cfg.seed, r.idx);
                unpaired_images.push(generate(params, &inputs, mode, cfg.layout, &cfg.sampler, seed)?);
            }
            score_distribution(&unpaired_images, Protocol::Unpaired, name, extractor, &real, &mut report)?;
        }
        outputs.push(ModeOutputs {
            mode,
            images,
            garment_ssim: scores.garment_ssim,
            hue_ok: scores.hue_ok,
            translucency_ok: scores.translucency_ok,
            unpaired_images,
        });
    }
    Ok((report, outputs))
}
