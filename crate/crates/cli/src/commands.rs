//! Command implementations. Each writes into `--out` and snapshots its
//! resolved settings there first.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tryon_core::flow::SamplerConfig;
use tryon_core::image::Image;
use tryon_core::metrics::RandomConvExtractor;
use tryon_core::model::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Codec, ModelConfig, ModelParams, LORA_TARGETS,
};
use tryon_core::optim::AdamWConfig;
use tryon_core::pipeline::{
    evaluate_run, generate, missing_inputs, read_unpaired, record_seed, score_images, stage1_examples,
    synthesize_unpaired, train, write_unpaired, EvalConfig, InputLayout, Mode, Stage, StageConfig, TrainExample,
    TrainState, TryOnInputs, UnpairedRecord,
};
use tryon_core::refgen::service::{ServiceClient, ServiceDescriber, ServiceEditor};
use tryon_core::refgen::{
    generate_reference_set, write_pair_manifest, Describer, DescriptionBank, Editor, PatchHistogramExtractor,
    RefgenConfig, SyntheticEditor, TemplateDescriber, PAIR_MANIFEST,
};
use tryon_core::synthworld::{build_dataset, read_dataset, role_path, write_dataset, CategoryMix, SampleRecord};
use tryon_core::Error;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_DIR: &str = "final";
pub const REPORT_FILE: &str = "report.txt";

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io { path: path.to_path_buf(), source: e })
}

/// Creates the output directory and writes the settings snapshot.
fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.require_path("run", "out")?;
    fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).map_err(|e| io(&path, e))?;
    Ok(out)
}

fn load_records(cfg: &RunConfig) -> CliResult<Vec<SampleRecord>> {
    let root = cfg.require_path("data", "dir")?;
    let mut records = read_dataset(&root, cfg.text("data", "split"))?;
    let limit = cfg.int("data", "limit");
    if limit > 0 {
        records.truncate(limit);
    }
    if let Some(refs) = cfg.has("data", "refs").then(|| cfg.path("data", "refs")).flatten() {
        if !refs.is_dir() {
            return Err(io(&refs, std::io::Error::new(std::io::ErrorKind::NotFound, "reference directory does not exist")));
        }
        for r in &mut records {
            let p = role_path(&refs, r.idx, "ref");
            r.reference = if p.is_file() { Some(Image::load_png(&p)?) } else { None };
        }
    }
    Ok(records)
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    let mix = CategoryMix::parse(cfg.text("data", "mix")).map_err(|e| CliError::Usage(e.to_string()))?;
    let canvas = cfg.int("data", "canvas");
    let out = prepare_out(cfg)?;
    let records = build_dataset(cfg.int("data", "n"), mix, cfg.u64("run", "seed"), canvas)
        .map_err(|e| match e {
            Error::InvalidArgument(m) => CliError::Usage(m),
            e => e.into(),
        })?;
    let manifest = write_dataset(&records, &out, cfg.text("data", "split"))?;
    println!("{}", manifest.display());
    Ok(())
}

fn model_config(cfg: &RunConfig) -> CliResult<ModelConfig> {
    let m = ModelConfig {
        patch_size: cfg.int("model", "patch_size"),
        width: cfg.int("model", "width"),
        depth: cfg.int("model", "depth"),
        heads: cfg.int("model", "heads"),
        mlp_ratio: cfg.int("model", "mlp_ratio"),
        time_embed_dim: cfg.int("model", "time_embed_dim"),
        lora_rank: cfg.int("model", "lora_rank"),
        lora_alpha: cfg.float("model", "lora_alpha"),
        codec: Codec::parse(cfg.text("model", "codec")).map_err(|e| CliError::Usage(e.to_string()))?,
        ..ModelConfig::default()
    };
    m.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(m)
}

fn layout_from_meta(meta: &CheckpointMeta) -> CliResult<InputLayout> {
    let get = |k: &str, default: usize| -> CliResult<usize> {
        match meta.extra.get(k) {
            Some(v) => v.parse().map_err(|_| CliError::Core(Error::Checkpoint(format!("bad {k} value {v:?}")))),
            None => Ok(default),
        }
    };
    let d = InputLayout::default();
    Ok(InputLayout { cloth_pool: get("cloth_pool", d.cloth_pool)?, reference_pool: get("reference_pool", d.reference_pool)? })
}

fn load_model(dir: &Path) -> CliResult<(ModelParams<f32>, InputLayout, CheckpointMeta)> {
    let ckpt: Checkpoint<f32> = load_checkpoint(dir)?;
    let layout = layout_from_meta(&ckpt.meta)?;
    Ok((ckpt.params, layout, ckpt.meta))
}

fn stage_config(cfg: &RunConfig, stage: Stage) -> StageConfig {
    let (steps, batch) = (cfg.int("train", "steps"), cfg.int("train", "batch"));
    let mut sc = match stage {
        Stage::One => StageConfig::stage1(steps, batch),
        Stage::Two => StageConfig {
            p_person: cfg.float("train", "p_person"),
            p_reference: cfg.float("train", "p_reference"),
            ..StageConfig::stage2(steps, batch)
        },
    };
    sc.optimizer = AdamWConfig { lr: cfg.float("train", "lr"), weight_decay: cfg.float("train", "weight_decay"), ..Default::default() };
    sc.warmup = cfg.int("train", "warmup");
    sc.cosine = cfg.flag("train", "cosine");
    sc.seed = cfg.u64("run", "seed");
    sc
}

fn checkpoint_of(state: &TrainState, stage: Stage, layout: InputLayout, parent: Option<&Path>) -> Checkpoint<f32> {
    let mut meta = CheckpointMeta { step: state.step as u64, ..Default::default() };
    let stage = match stage {
        Stage::One => "1",
        Stage::Two => "2",
    };
    meta.extra.insert("stage".into(), stage.into());
    meta.extra.insert("cloth_pool".into(), layout.cloth_pool.to_string());
    meta.extra.insert("reference_pool".into(), layout.reference_pool.to_string());
    meta.extra.insert("optimizer_step".into(), state.optimizer.step.to_string());
    if let Some(p) = parent {
        meta.extra.insert("init_from".into(), p.display().to_string().replace(char::is_whitespace, "_"));
    }
    let (m, v) = state.optimizer.moments();
    let mut aux = Vec::new();
    for (i, (a, b)) in m.iter().zip(v).enumerate() {
        aux.push((format!("adam.m.{i}"), a.clone()));
        aux.push((format!("adam.v.{i}"), b.clone()));
    }
    Checkpoint { meta, params: state.params.clone(), aux }
}

fn restore_state(ckpt: Checkpoint<f32>, sc: &StageConfig) -> CliResult<TrainState> {
    let mut state = TrainState::new(ckpt.params, sc)?;
    state.step = ckpt.meta.step as usize;
    let opt_step = ckpt.meta.extra.get("optimizer_step").and_then(|s| s.parse().ok()).unwrap_or(ckpt.meta.step);
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (name, data) in ckpt.aux {
        if name.starts_with("adam.m.") {
            m.push(data);
        } else if name.starts_with("adam.v.") {
            v.push(data);
        }
    }
    state.optimizer.restore(opt_step, m, v)?;
    Ok(state)
}

fn step_dir(out: &Path, step: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:07}"))
}

fn latest_checkpoint(out: &Path) -> CliResult<Option<PathBuf>> {
    let dir = out.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| io(&dir, e))? {
        let entry = entry.map_err(|e| io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("step_").and_then(|s| s.parse::<usize>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn read_losses(path: &Path, upto: usize) -> CliResult<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let bad = || CliError::Core(Error::Format { path: path.to_path_buf(), message: format!("bad row {line:?}") });
        let (s, l) = line.split_once(',').ok_or_else(bad)?;
        let step: usize = s.parse().map_err(|_| bad())?;
        if step <= upto {
            out.push((step, l.parse().map_err(|_| bad())?));
        }
    }
    Ok(out)
}

fn write_losses(path: &Path, losses: &[(usize, f64)]) -> CliResult<()> {
    let mut s = String::from("step,loss\n");
    for (step, loss) in losses {
        let _ = writeln!(s, "{step},{loss:?}");
    }
    fs::write(path, s).map_err(|e| io(path, e))
}

/// Shared training driver for both stages.
fn run_training(cfg: &RunConfig, stage: Stage, examples: &[TrainExample]) -> CliResult<()> {
    let sc = stage_config(cfg, stage);
    sc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let out = cfg.require_path("run", "out")?;
    let init_from = cfg.path("train", "init_from");
    let resume = if cfg.flag("train", "resume") { latest_checkpoint(&out)? } else { None };

    let config_layout = InputLayout { cloth_pool: cfg.int("model", "cloth_pool"), reference_pool: cfg.int("model", "reference_pool") };
    let (mut state, layout) = if let Some(dir) = &resume {
        let ckpt: Checkpoint<f32> = load_checkpoint(dir)?;
        let layout = layout_from_meta(&ckpt.meta)?;
        let mut state = restore_state(ckpt, &sc)?;
        state.losses = read_losses(&out.join(LOSS_FILE), state.step)?;
        println!("resuming from {} at step {}", dir.display(), state.step);
        (state, layout)
    } else if let Some(dir) = &init_from {
        let (mut params, layout, _) = load_model(dir)?;
        if stage == Stage::Two && cfg.flag("train", "lora") {
            if params.has_lora() {
                params = params.merge_lora()?;
            }
            params = params.attach_lora(&LORA_TARGETS, &mut ChaCha8Rng::seed_from_u64(sc.seed))?;
        }
        (TrainState::new(params, &sc)?, layout)
    } else {
        let mc = model_config(cfg)?;
        let mut params = ModelParams::init(&mc, &mut ChaCha8Rng::seed_from_u64(sc.seed))?;
        if stage == Stage::Two && cfg.flag("train", "lora") {
            params = params.attach_lora(&LORA_TARGETS, &mut ChaCha8Rng::seed_from_u64(sc.seed))?;
        }
        (TrainState::new(params, &sc)?, config_layout)
    };

    // the snapshot records the architecture actually trained
    let mut snapshot = cfg.clone();
    let mc = &state.params.config;
    for (k, v) in [
        ("patch_size", mc.patch_size.to_string()),
        ("width", mc.width.to_string()),
        ("depth", mc.depth.to_string()),
        ("heads", mc.heads.to_string()),
        ("mlp_ratio", mc.mlp_ratio.to_string()),
        ("time_embed_dim", mc.time_embed_dim.to_string()),
        ("lora_rank", mc.lora_rank.to_string()),
        ("lora_alpha", format!("{:?}", mc.lora_alpha)),
        ("codec", mc.codec.name().to_string()),
        ("cloth_pool", layout.cloth_pool.to_string()),
        ("reference_pool", layout.reference_pool.to_string()),
    ] {
        snapshot.set("model", k, &v)?;
    }
    prepare_out(&snapshot)?;

    let every = cfg.int("train", "checkpoint_every").max(1);
    let loss_path = out.join(LOSS_FILE);
    let parent = init_from.as_deref();
    train(examples, &sc, layout, &mut state, |s| {
        if s.step % every == 0 && s.step < sc.steps {
            save_checkpoint(&step_dir(&out, s.step), &checkpoint_of(s, stage, layout, parent))?;
            write_losses(&loss_path, &s.losses).map_err(|e| match e {
                CliError::Core(e) => e,
                CliError::Usage(m) => Error::InvalidArgument(m),
            })?;
            let recent = &s.losses[s.losses.len().saturating_sub(every)..];
            let avg = recent.iter().map(|x| x.1).sum::<f64>() / recent.len().max(1) as f64;
            println!("step {} loss {avg:.5}", s.step);
        }
        Ok(())
    })?;
    let ckpt = checkpoint_of(&state, stage, layout, parent);
    save_checkpoint(&step_dir(&out, state.step), &ckpt)?;
    save_checkpoint(&out.join(FINAL_DIR), &ckpt)?;
    write_losses(&loss_path, &state.losses)?;
    println!("{}", out.join(FINAL_DIR).display());
    Ok(())
}

pub fn train_stage1(cfg: &RunConfig) -> CliResult<()> {
    let records = load_records(cfg)?;
    run_training(cfg, Stage::One, &stage1_examples(&records))
}

pub fn train_stage2(cfg: &RunConfig) -> CliResult<()> {
    let records = load_records(cfg)?;
    let dir = cfg.require_path("data", "unpaired")?;
    let unpaired = read_unpaired(&records, &dir)?;
    let examples: Vec<TrainExample> = unpaired.iter().map(UnpairedRecord::example).collect();
    run_training(cfg, Stage::Two, &examples)
}

fn sampler(cfg: &RunConfig) -> CliResult<SamplerConfig> {
    SamplerConfig::new(cfg.int("sample", "steps")).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn synth_unpaired(cfg: &RunConfig) -> CliResult<()> {
    let sampler = sampler(cfg)?;
    let records = load_records(cfg)?;
    let (params, layout, _) = load_model(&cfg.require_path("sample", "checkpoint")?)?;
    let out = prepare_out(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64("run", "seed"));
    let unpaired = synthesize_unpaired(&params, &records, layout, &sampler, cfg.flag("sample", "category_match"), &mut rng)?;
    println!("{}", write_unpaired(&unpaired, &out)?.display());
    Ok(())
}

pub fn gen_refs(cfg: &RunConfig) -> CliResult<()> {
    let records = load_records(cfg)?;
    let bank = match cfg.path("refgen", "bank") {
        Some(p) => DescriptionBank::load(&p)?,
        None => DescriptionBank::builtin(),
    };
    let rc = RefgenConfig { dedup_threshold: cfg.float("refgen", "threshold") };
    let out = prepare_out(cfg)?;
    let service = cfg.text("refgen", "service");
    let (mut editor, mut describer): (Box<dyn Editor>, Box<dyn Describer>) = if service.is_empty() {
        let rate = cfg.float("refgen", "back_facing_rate");
        (Box::new(SyntheticEditor { back_facing_rate: rate }), Box::new(TemplateDescriber))
    } else {
        let work = out.join("service_work");
        (
            Box::new(ServiceEditor(ServiceClient::new(service, &work))),
            Box::new(ServiceDescriber(ServiceClient::new(service, &work))),
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64("run", "seed"));
    let extractor = PatchHistogramExtractor::default();
    let entries = generate_reference_set(&records, editor.as_mut(), describer.as_mut(), &bank, &extractor, &rc, &out, &mut rng)?;
    let manifest = out.join(PAIR_MANIFEST);
    write_pair_manifest(&entries, &manifest)?;
    let kept = entries.iter().filter(|e| e.kept).count();
    println!("{} kept {kept} of {}", manifest.display(), entries.len());
    Ok(())
}

fn sample_mode(cfg: &RunConfig) -> CliResult<Mode> {
    let mask_free = match cfg.text("sample", "mode") {
        "mask" => false,
        "mask-free" => true,
        other => return Err(CliError::Usage(format!("mode must be mask or mask-free, got {other:?}"))),
    };
    Ok(Mode { mask_free, reference: cfg.flag("sample", "ref") })
}

pub fn sample(cfg: &RunConfig) -> CliResult<()> {
    let mode = sample_mode(cfg)?;
    let sampler = sampler(cfg)?;
    let records = load_records(cfg)?;
    let missing = missing_inputs(&records, mode);
    if !missing.is_empty() {
        return Err(Error::MissingInputs { mode: mode.name().into(), missing }.into());
    }
    let (params, layout, _) = load_model(&cfg.require_path("sample", "checkpoint")?)?;
    let out = prepare_out(cfg)?;
    let seed = cfg.u64("run", "seed");
    for r in &records {
        let img = generate(&params, &TryOnInputs::from_record(r), mode, layout, &sampler, record_seed(seed, r.idx))?;
        img.save_png(&role_path(&out, r.idx, "gen"))?;
    }
    println!("{} images in {}", records.len(), out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CliResult<()> {
    let records = load_records(cfg)?;
    let extractor = RandomConvExtractor::default();
    let mut ec = EvalConfig { seed: cfg.u64("run", "seed"), unpaired: cfg.flag("eval", "unpaired"), ..Default::default() };
    let report = if let Some(dir) = cfg.path("eval", "generated") {
        let role = cfg.text("eval", "role");
        let missing: Vec<String> = records
            .iter()
            .map(|r| role_path(&dir, r.idx, role))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingInputs { mode: "generated".into(), missing }.into());
        }
        let images = records.iter().map(|r| Image::load_png(&role_path(&dir, r.idx, role))).collect::<Result<Vec<_>, _>>()?;
        prepare_out(cfg)?;
        score_images(&records, &images, "given", &ec, &extractor)?.0
    } else {
        ec.modes = cfg
            .text("eval", "modes")
            .split(',')
            .map(|m| Mode::parse(m.trim()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        ec.sampler = sampler(cfg)?;
        let ckpt = cfg.path("sample", "checkpoint").ok_or_else(|| CliError::Usage("eval needs --checkpoint or --generated".into()))?;
        let (params, layout, _) = load_model(&ckpt)?;
        ec.layout = layout;
        let out = prepare_out(cfg)?;
        let (report, outputs) = evaluate_run(&params, &records, &ec, &extractor)?;
        for o in &outputs {
            let dir = out.join(o.mode.name());
            fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
            for (r, img) in records.iter().zip(&o.images) {
                img.save_png(&role_path(&dir, r.idx, "gen"))?;
            }
        }
        report
    };
    let out = cfg.require_path("run", "out")?;
    let path = out.join(REPORT_FILE);
    report.write(&path)?;
    print!("{}", report.to_text());
    Ok(())
}
