use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tryon_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelParams};

const TINY: &[&str] =
    &["--width", "24", "--depth", "1", "--heads", "2", "--patch-size", "8", "--time-embed-dim", "16"];

fn tryon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tryon")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tryon(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32, class: &str) -> String {
    let out = tryon(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with(&format!("error[{class}]: ")), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Sorted (relative path, bytes) of every file under `root`.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Generated files, without the settings snapshot (it records the output path).
fn outputs(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    tree(root).into_iter().filter(|(p, _)| p != Path::new("config.txt")).collect()
}

fn gen_data(dir: &Path, n: &str) {
    ok(&["gen-data", "--out", s(dir), "--n", n, "--seed", "7"]);
}

fn train1(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train-stage1", "--data", s(data), "--out", s(out), "--steps", "4", "--batch", "2", "--lr", "1e-3"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_data_is_reproducible_and_creates_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a/nested"), tmp.path().join("b"));
    let stdout = ok(&["gen-data", "--out", s(&a), "--n", "6", "--seed", "7"]);
    assert!(stdout.trim().ends_with("manifest.txt"));
    gen_data(&b, "6");
    assert_eq!(outputs(&a), outputs(&b));
    assert!(a.join("train/0_target.png").is_file() && a.join("config.txt").is_file());
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    fails(&["gen-data", "--out", s(&out), "--mix", "0.5,0.5,0.5"], 2, "usage");
    fails(&["gen-data", "--out", s(&out), "--bogus", "1"], 2, "usage");
    fails(&["gen-data", "--out", s(&out), "--n", "many"], 2, "usage");
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "[data]\nsize = 3\n").unwrap();
    fails(&["gen-data", "--out", s(&out), "--config", s(&cfg)], 2, "usage");
    fails(&["gen-data"], 2, "usage");
    fails(&[], 2, "usage");
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_data(&data, "6");
    train1(&data, &run, &["--lr", "0", "--seed", "3"]);
    let ckpt: Checkpoint<f32> = load_checkpoint(&run.join("final")).unwrap();
    let cfg = ModelConfig { width: 24, depth: 1, heads: 2, patch_size: 8, time_embed_dim: 16, ..Default::default() };
    let init: ModelParams<f32> = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(ckpt.params, init);
    assert_eq!(ckpt.meta.step, 4);
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn resume_continues_the_step_counter() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "6");
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    train1(&data, &full, &["--steps", "6", "--checkpoint-every", "2"]);
    train1(&data, &split, &["--steps", "3", "--checkpoint-every", "2"]);
    train1(&data, &split, &["--steps", "6", "--checkpoint-every", "2", "--resume"]);
    let a: Checkpoint<f32> = load_checkpoint(&full.join("final")).unwrap();
    let b: Checkpoint<f32> = load_checkpoint(&split.join("final")).unwrap();
    assert_eq!(b.meta.step, 6);
    assert_eq!(a.params, b.params);
    assert_eq!(fs::read(full.join("loss.csv")).unwrap(), fs::read(split.join("loss.csv")).unwrap());
    assert!(split.join("checkpoints/step_0000002").is_dir());
}

#[test]
fn config_snapshot_reproduces_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "6");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train1(&data, &a, &["--checkpoint-every", "2"]);
    ok(&["train-stage1", "--config", s(&a.join("config.txt")), "--out", s(&b)]);
    assert_eq!(outputs(&a), outputs(&b));
}

#[test]
fn checkpoints_round_trip_and_detect_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_data(&data, "4");
    train1(&data, &run, &[]);
    let src = run.join("final");
    let ckpt: Checkpoint<f32> = load_checkpoint(&src).unwrap();
    let copy = tmp.path().join("copy");
    save_checkpoint(&copy, &ckpt).unwrap();
    assert_eq!(tree(&src), tree(&copy));
    let manifest = fs::read_to_string(src.join("manifest.txt")).unwrap();
    let model_tensors = manifest.lines().filter(|l| l.starts_with("tensor ") && !l.contains("aux:")).count();
    assert_eq!(model_tensors, ckpt.params.tensor_count());

    let blob = copy.join("tensors.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_checkpoint::<f32>(&copy).unwrap_err().to_string();
    let tensor_names: Vec<&str> = manifest.lines().filter_map(|l| l.strip_prefix("tensor ")).map(|l| l.split(' ').next().unwrap()).collect();
    assert!(tensor_names.iter().any(|n| err.contains(n)), "{err}");
}

#[test]
fn two_stage_flow_through_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "6");
    let s1 = tmp.path().join("s1");
    train1(&data, &s1, &[]);
    let unpaired = tmp.path().join("unpaired");
    let ckpt1 = s1.join("final");
    ok(&["synth-unpaired", "--data", s(&data), "--checkpoint", s(&ckpt1), "--out", s(&unpaired), "--steps", "2"]);
    assert!(unpaired.join("unpaired.txt").is_file());

    let s2 = tmp.path().join("s2");
    let args = ["train-stage2", "--data", s(&data), "--unpaired", s(&unpaired), "--init-from", s(&ckpt1), "--out", s(&s2), "--steps", "3", "--batch", "2", "--lr", "0"];
    ok(&args);
    let a: Checkpoint<f32> = load_checkpoint(&ckpt1).unwrap();
    let b: Checkpoint<f32> = load_checkpoint(&s2.join("final")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(b.meta.extra["stage"], "2");
    assert_eq!(b.meta.extra["init_from"], s(&ckpt1));
    let snap = fs::read_to_string(s2.join("config.txt")).unwrap();
    assert!(snap.contains("width = 24"), "{snap}");

    let lora = tmp.path().join("lora");
    let mut args = args.to_vec();
    args[8] = s(&lora);
    args.extend(["--lora", "--lr", "1e-2"]);
    ok(&args);
    let c: Checkpoint<f32> = load_checkpoint(&lora.join("final")).unwrap();
    assert!(c.params.has_lora());
    assert_eq!(c.params.merge_lora().unwrap().config, a.params.config);
}

#[test]
fn sampling_checks_inputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_data(&data, "4");
    train1(&data, &run, &[]);
    let ckpt = run.join("final");
    let empty = tmp.path().join("norefs");
    fs::create_dir_all(&empty).unwrap();
    let base = |out: &Path| vec!["sample".to_string(), "--data".into(), s(&data).into(), "--checkpoint".into(), s(&ckpt).into(), "--out".into(), s(out).into()];
    let call = |v: Vec<String>, extra: &[&str]| {
        let mut v = v;
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    };
    let args = call(base(&tmp.path().join("x")), &["--mode", "mask", "--ref", "--refs", s(&empty)]);
    let err = fails(&args.iter().map(String::as_str).collect::<Vec<_>>(), 1, "missing-inputs");
    assert!(err.contains("0_ref.png"), "{err}");

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&call(base(out), &["--steps", "1", "--seed", "5", "--mode", "mask-free", "--ref"]).iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(outputs(&a), outputs(&b));
    assert!(a.join("3_gen.png").is_file());
}

fn report_value(report: &str, metric: &str, mode: &str) -> f64 {
    report
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .find(|f| f.len() == 4 && f[0] == metric && f[1] == "paired" && f[2] == mode)
        .unwrap_or_else(|| panic!("{metric} {mode} in {report}"))[3]
        .parse()
        .unwrap()
}

#[test]
fn evaluation_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "8");
    let out = tmp.path().join("self");
    let split = data.join("train");
    ok(&["eval", "--data", s(&data), "--generated", s(&split), "--role", "target", "--out", s(&out)]);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(report_value(&report, "ssim", "given"), 1.0);
    assert!(report_value(&report, "fid", "given").abs() <= 1e-8);
    assert_eq!(report_value(&report, "hue_accuracy", "given"), 1.0);

    let run = tmp.path().join("run");
    train1(&data, &run, &[]);
    let ev = tmp.path().join("ev");
    let ckpt = run.join("final");
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&ev), "--steps", "2", "--modes", "mask,mask-free+R"]);
    let report = fs::read_to_string(ev.join("report.txt")).unwrap();
    for mode in ["mask", "mask-free+R"] {
        report_value(&report, "garment_ssim", mode);
        report_value(&report, "kid", mode);
    }
    assert!(!report.contains(" mask+R "));

    let err = fails(&["eval", "--data", s(&data), "--split", "test", "--checkpoint", s(&ckpt), "--out", s(&ev)], 1, "io");
    assert!(err.contains(s(&data.join("test"))), "{err}");
}

#[test]
fn reference_generation_writes_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, "10");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen-refs", "--data", s(&data), "--out", s(out), "--seed", "2"]);
    }
    assert_eq!(outputs(&a), outputs(&b));
    let pairs = fs::read_to_string(a.join("pairs.txt")).unwrap();
    assert_eq!(pairs.lines().count(), 10);
    for line in pairs.lines() {
        let f: Vec<&str> = line.split(", ").collect();
        assert_eq!(f[2] == "kept", a.join(format!("{}_ref.png", f[0])).is_file(), "{line}");
    }
    // the generated references plug into sampling
    let run = tmp.path().join("run");
    train1(&data, &run, &[]);
    let smp = tmp.path().join("smp");
    let ckpt = run.join("final");
    let args = ["sample", "--data", s(&data), "--refs", s(&a), "--limit", "1", "--checkpoint", s(&ckpt), "--out", s(&smp), "--steps", "1", "--ref"];
    if pairs.lines().next().unwrap().contains(", kept") {
        assert!(ok(&args).contains("1 images"));
    } else {
        fails(&args, 1, "missing-inputs");
    }
}
