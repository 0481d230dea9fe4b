//! Checkpoints: a text manifest (`manifest.txt`) describing every tensor by
//! name, shape and byte offset, plus one blob (`tensors.bin`) of
//! little-endian `f32` values.
//!
//! ```text
//! tryon-checkpoint 1
//! step 120
//! config width 96
//! ...
//! meta key value
//! tensor blocks.0.attn.q.weight 96x96 36864 36864
//! ```
//! The last two tensor fields are byte offset and byte length.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::{Lora, ModelParams};
use super::{Codec, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";
const MAGIC: &str = "tryon-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Free-form string metadata (stage name, parent checkpoint, ...).
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ModelParams<T>,
    /// Extra named tensors stored after the model (optimizer moments).
    pub aux: Vec<(String, Vec<f32>)>,
}

fn config_lines(cfg: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("patch_size".into(), cfg.patch_size.to_string()),
        ("in_channels".into(), cfg.in_channels.to_string()),
        ("out_channels".into(), cfg.out_channels.to_string()),
        ("width".into(), cfg.width.to_string()),
        ("depth".into(), cfg.depth.to_string()),
        ("heads".into(), cfg.heads.to_string()),
        ("mlp_ratio".into(), cfg.mlp_ratio.to_string()),
        ("time_embed_dim".into(), cfg.time_embed_dim.to_string()),
        ("lora_rank".into(), cfg.lora_rank.to_string()),
        ("lora_alpha".into(), format!("{:?}", cfg.lora_alpha)),
        ("rope_base".into(), format!("{:?}", cfg.rope_base)),
        ("codec".into(), cfg.codec.name().into()),
    ]
}

fn parse_config(map: &BTreeMap<String, String>, path: &Path) -> Result<ModelConfig> {
    let get = |k: &str| map.get(k).ok_or_else(|| Error::format(path, format!("missing config key {k}")));
    let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::format(path, format!("bad integer for {k}"))) };
    let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::format(path, format!("bad number for {k}"))) };
    Ok(ModelConfig {
        patch_size: int("patch_size")?,
        in_channels: int("in_channels")?,
        out_channels: int("out_channels")?,
        width: int("width")?,
        depth: int("depth")?,
        heads: int("heads")?,
        mlp_ratio: int("mlp_ratio")?,
        time_embed_dim: int("time_embed_dim")?,
        lora_rank: int("lora_rank")?,
        lora_alpha: float("lora_alpha")?,
        rope_base: float("rope_base")?,
        codec: Codec::parse(get("codec")?).map_err(|e| Error::format(path, e.to_string()))?,
    })
}

/// Writes `dir/manifest.txt` and `dir/tensors.bin`, creating `dir` if needed.
pub fn save_checkpoint<T: Scalar>(dir: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("step {}\n", ckpt.meta.step));
    for (k, v) in config_lines(&ckpt.params.config) {
        manifest.push_str(&format!("config {k} {v}\n"));
    }
    for (k, v) in &ckpt.meta.extra {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::InvalidArgument(format!("metadata key {k:?} or value is not single-token")));
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: &str, shape: String, data: &mut dyn Iterator<Item = f32>, manifest: &mut String| {
        let offset = blob.len();
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push_str(&format!("tensor {name} {shape} {offset} {}\n", blob.len() - offset));
    };
    ckpt.params.visit(&mut |name, shape, data| {
        push(name, format!("{}x{}", shape[0], shape[1]), &mut data.iter().map(|v| v.as_f64() as f32), &mut manifest);
    });
    for (name, data) in &ckpt.aux {
        push(&format!("aux:{name}"), format!("1x{}", data.len()), &mut data.iter().copied(), &mut manifest);
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::format(&mpath, "not a tryon checkpoint manifest"));
    }
    let mut meta = CheckpointMeta::default();
    let mut config = BTreeMap::new();
    let mut tensors = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(&mpath, format!("malformed line {}: {line:?}", ln + 2));
        match fields.as_slice() {
            ["step", s] => meta.step = s.parse().map_err(|_| bad())?,
            ["config", k, v] => {
                config.insert(k.to_string(), v.to_string());
            }
            ["meta", k, rest @ ..] => {
                meta.extra.insert(k.to_string(), rest.join(" "));
            }
            ["tensor", name, shape, offset, len] => {
                let (r, c) = shape.split_once('x').ok_or_else(bad)?;
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    shape: [r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?],
                    offset: offset.parse().map_err(|_| bad())?,
                    len: len.parse().map_err(|_| bad())?,
                });
            }
            [] => {}
            _ => return Err(bad()),
        }
    }
    let cfg = parse_config(&config, &mpath)?;
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let read = |t: &TensorEntry| -> Result<Vec<f32>> {
        let n = t.shape[0] * t.shape[1];
        if t.len != n * 4 {
            return Err(Error::Checkpoint(format!("tensor {} declares {} bytes for shape {:?}", t.name, t.len, t.shape)));
        }
        let end = t.offset.checked_add(t.len).filter(|&e| e <= blob.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "tensor {} needs bytes {}..{} but blob has {}",
                t.name,
                t.offset,
                t.offset + t.len,
                blob.len()
            ))
        })?;
        Ok(blob[t.offset..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    };

    let mut params = ModelParams::<T>::zeros(&cfg)?;
    // Recreate adapter slots listed in the manifest before filling data.
    for t in tensors.iter().filter(|t| t.name.ends_with(".lora_a")) {
        let lin_name = t.name.trim_end_matches(".lora_a");
        let (block, proj) = parse_projection(lin_name).ok_or_else(|| Error::Checkpoint(format!("adapter on unsupported tensor {}", t.name)))?;
        let lin = params
            .blocks
            .get_mut(block)
            .and_then(|b| b.projection_mut(proj))
            .ok_or_else(|| Error::Checkpoint(format!("adapter {} does not match the model", t.name)))?;
        let rank = t.shape[0];
        lin.lora = Some(Lora { alpha: cfg.lora_alpha, a: Mat::zeros(rank, lin.in_dim()), b: Mat::zeros(lin.out_dim(), rank) });
    }
    let model_entries: Vec<&TensorEntry> = tensors.iter().filter(|t| !t.name.starts_with("aux:")).collect();
    let slots = params.tensors_mut();
    if slots.len() != model_entries.len() {
        return Err(Error::Checkpoint(format!("manifest lists {} model tensors, model has {}", model_entries.len(), slots.len())));
    }
    for ((name, dst), entry) in slots.into_iter().zip(&model_entries) {
        if name != entry.name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, manifest has {}", entry.name)));
        }
        let data = read(entry)?;
        if data.len() != dst.len() {
            return Err(Error::Checkpoint(format!("tensor {name} has {} values, model expects {}", data.len(), dst.len())));
        }
        for (d, v) in dst.iter_mut().zip(data) {
            *d = T::from_f64(v as f64);
        }
    }
    let mut aux = Vec::new();
    for t in tensors.iter().filter(|t| t.name.starts_with("aux:")) {
        aux.push((t.name["aux:".len()..].to_string(), read(t)?));
    }
    Ok(Checkpoint { meta, params, aux })
}

fn parse_projection(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("blocks.")?;
    let (idx, rest) = rest.split_once('.')?;
    let proj = rest.strip_prefix("attn.")?;
    Some((idx.parse().ok()?, proj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { patch_size: 2, width: 12, depth: 2, heads: 2, time_embed_dim: 8, lora_rank: 2, ..Default::default() }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params: ModelParams<f32> = ModelParams::randomized(&small(), 0.3, &mut rng).unwrap();
        let params = params.attach_lora(&["q", "v"], &mut rng).unwrap();
        let mut meta = CheckpointMeta { step: 42, ..Default::default() };
        meta.extra.insert("stage".into(), "one".into());
        let ckpt = Checkpoint { meta, params, aux: vec![("adam.t".into(), vec![3.0])] };
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(&a, &ckpt).unwrap();
        let loaded: Checkpoint<f32> = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&b, &loaded).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
        let manifest = fs::read_to_string(a.join(MANIFEST_FILE)).unwrap();
        let n = manifest.lines().filter(|l| l.starts_with("tensor ") && !l.contains("aux:")).count();
        assert_eq!(n, ckpt.params.tensor_count());
    }

    #[test]
    fn truncated_blob_names_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: ModelParams<f32> = ModelParams::randomized(&small(), 0.3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &Checkpoint { meta: Default::default(), params, aux: vec![] }).unwrap();
        let bpath = dir.path().join(BLOB_FILE);
        let blob = fs::read(&bpath).unwrap();
        fs::write(&bpath, &blob[..blob.len() - 10]).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("unembed.bias"), "{err}");
    }
}
