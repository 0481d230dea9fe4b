//! Run configuration: a registry of known `section.key` settings, the
//! line-oriented `key = value` file format, and command-line overrides.
//!
//! ```text
//! [train]
//! steps = 2000
//! lr = 1e-3
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Text,
    Path,
}

/// One known setting.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub section: &'static str,
    pub name: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(section: &'static str, name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Key {
    Key { section, name, kind, default, help }
}

use Kind::*;

pub const KEYS: &[Key] = &[
    key("run", "seed", Int, "0", "seed for every random draw of the command"),
    key("run", "out", Path, "", "output directory"),
    key("data", "dir", Path, "", "dataset root written by gen-data"),
    key("data", "split", Text, "train", "split name under the dataset root"),
    key("data", "n", Int, "100", "number of records to generate"),
    key("data", "mix", Text, "0.3333333333333333,0.3333333333333333,0.3333333333333334", "upper,lower,dress proportions"),
    key("data", "canvas", Int, "32", "image side in pixels"),
    key("data", "refs", Path, "", "directory of {idx}_ref.png files replacing the dataset references"),
    key("data", "unpaired", Path, "", "directory written by synth-unpaired"),
    key("data", "limit", Int, "0", "use only the first N records (0 = all)"),
    key("model", "patch_size", Int, "4", "pixels per patch side"),
    key("model", "width", Int, "96", "transformer width"),
    key("model", "depth", Int, "4", "number of transformer blocks"),
    key("model", "heads", Int, "6", "attention heads"),
    key("model", "mlp_ratio", Int, "4", "MLP hidden width / width"),
    key("model", "time_embed_dim", Int, "64", "sinusoidal time embedding width"),
    key("model", "lora_rank", Int, "8", "adapter rank"),
    key("model", "lora_alpha", Float, "16", "adapter scale numerator"),
    key("model", "codec", Text, "pixel", "pixel or pool2"),
    key("model", "cloth_pool", Int, "0", "2x average pools applied to the cloth image"),
    key("model", "reference_pool", Int, "1", "2x average pools applied to the reference image"),
    key("train", "steps", Int, "1000", "total optimizer steps"),
    key("train", "batch", Int, "8", "samples per step"),
    key("train", "lr", Float, "1e-4", "peak learning rate"),
    key("train", "weight_decay", Float, "0.01", "AdamW decoupled weight decay"),
    key("train", "warmup", Int, "0", "linear warm-up steps"),
    key("train", "cosine", Bool, "false", "cosine decay to zero at the last step"),
    key("train", "p_person", Float, "0.5", "stage two: probability of the person image in slot 1"),
    key("train", "p_reference", Float, "0.25", "stage two: probability of appending the reference"),
    key("train", "lora", Bool, "false", "stage two: train low-rank adapters only"),
    key("train", "checkpoint_every", Int, "500", "steps between checkpoints"),
    key("train", "init_from", Path, "", "checkpoint directory to start from"),
    key("train", "resume", Bool, "false", "continue from the latest checkpoint in the output directory"),
    key("sample", "checkpoint", Path, "", "checkpoint directory"),
    key("sample", "steps", Int, "50", "Euler steps of the sampler"),
    key("sample", "mode", Text, "mask", "mask or mask-free"),
    key("sample", "ref", Bool, "false", "condition on the reference image"),
    key("sample", "category_match", Bool, "true", "synth-unpaired: donors share the target's category"),
    key("eval", "modes", Text, "mask,mask+R,mask-free,mask-free+R", "comma-separated modes to score"),
    key("eval", "unpaired", Bool, "false", "also score cloth-swapped generations"),
    key("eval", "generated", Path, "", "score images from this directory instead of sampling"),
    key("eval", "role", Text, "gen", "file role of pre-generated images: {idx}_{role}.png"),
    key("refgen", "threshold", Float, "0.95", "cosine similarity above which a reference is a duplicate"),
    key("refgen", "service", Text, "", "host:port of an external editor/describer service"),
    key("refgen", "bank", Path, "", "description bank file (built-in bank when empty)"),
    key("refgen", "back_facing_rate", Float, "0.05", "synthetic editor: rate of back-facing results"),
];

pub fn lookup(section: &str, name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.section == section && k.name == name)
}

/// Resolved settings for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    sections: Vec<&'static str>,
    values: BTreeMap<(&'static str, &'static str), String>,
}

fn check_value(k: &Key, value: &str) -> CliResult<()> {
    let ok = match k.kind {
        Int => value.parse::<u64>().is_ok(),
        Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Bool => matches!(value, "true" | "false"),
        Text | Path => true,
    };
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}.{} = {value:?} is not a valid {:?}", k.section, k.name, k.kind)))
    }
}

impl RunConfig {
    /// Defaults for the selected keys; a selector is a whole `section` or a
    /// single `section.name`.
    pub fn new(command: &str, selectors: &[&str]) -> Self {
        let selected = |k: &Key| {
            selectors.iter().any(|s| match s.split_once('.') {
                Some((sec, name)) => sec == k.section && name == k.name,
                None => *s == k.section,
            })
        };
        let mut sections = Vec::new();
        let mut values = BTreeMap::new();
        for k in KEYS.iter().filter(|k| selected(k)) {
            if !sections.contains(&k.section) {
                sections.push(k.section);
            }
            values.insert((k.section, k.name), k.default.to_string());
        }
        Self { command: command.into(), sections, values }
    }

    /// Selected keys in registry order.
    pub fn keys(&self) -> impl Iterator<Item = &'static Key> + '_ {
        KEYS.iter().filter(|k| self.values.contains_key(&(k.section, k.name)))
    }

    /// Applies a config file. Every key must be known; known keys the command
    /// does not use are ignored so one file can serve several commands.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> CliResult<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| CliError::Usage(format!("{}:{}: {m}", origin.display(), n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !KEYS.iter().any(|k| k.section == section) {
                    return Err(at(format!("unknown section [{section}]")));
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let spec = lookup(&section, k).ok_or_else(|| at(format!("unknown key {k:?} in [{section}]")))?;
            check_value(spec, v).map_err(|e| at(e.to_string()))?;
            if let Some(slot) = self.values.get_mut(&(spec.section, spec.name)) {
                *slot = v.to_string();
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    pub fn set(&mut self, section: &str, name: &str, value: &str) -> CliResult<()> {
        let spec = lookup(section, name)
            .filter(|k| self.values.contains_key(&(k.section, k.name)))
            .ok_or_else(|| CliError::Usage(format!("unknown setting {section}.{name} for {}", self.command)))?;
        check_value(spec, value)?;
        self.values.insert((spec.section, spec.name), value.to_string());
        Ok(())
    }

    /// Whether the command reads this setting.
    pub fn has(&self, section: &str, name: &str) -> bool {
        self.values.keys().any(|(s, n)| *s == section && *n == name)
    }

    fn raw(&self, section: &str, name: &str) -> &str {
        self.values
            .iter()
            .find(|((s, n), _)| *s == section && *n == name)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("setting {section}.{name} is not part of {}", self.command))
    }

    pub fn int(&self, section: &str, name: &str) -> usize {
        self.raw(section, name).parse().expect("validated on insert")
    }

    pub fn u64(&self, section: &str, name: &str) -> u64 {
        self.raw(section, name).parse().expect("validated on insert")
    }

    pub fn float(&self, section: &str, name: &str) -> f64 {
        self.raw(section, name).parse().expect("validated on insert")
    }

    pub fn flag(&self, section: &str, name: &str) -> bool {
        self.raw(section, name) == "true"
    }

    pub fn text(&self, section: &str, name: &str) -> &str {
        self.raw(section, name)
    }

    /// `None` for an empty path setting.
    pub fn path(&self, section: &str, name: &str) -> Option<PathBuf> {
        let v = self.raw(section, name);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn require_path(&self, section: &str, name: &str) -> CliResult<PathBuf> {
        self.path(section, name)
            .ok_or_else(|| CliError::Usage(format!("{} needs --{}", self.command, name.replace('_', "-"))))
    }

    /// The resolved settings in file format, readable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut out = format!("# tryon {}\n", self.command);
        for section in &self.sections {
            let _ = writeln!(out, "\n[{section}]");
            for k in self.keys().filter(|k| k.section == *section) {
                let _ = writeln!(out, "{} = {}", k.name, self.values[&(k.section, k.name)]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_unique() {
        for (i, a) in KEYS.iter().enumerate() {
            assert!(KEYS[i + 1..].iter().all(|b| (a.section, a.name) != (b.section, b.name)));
            check_value(a, a.default).unwrap();
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::new("train-stage1", &["run", "model", "train"]);
        c.set("train", "lr", "0.003").unwrap();
        c.set("model", "width", "48").unwrap();
        let mut d = RunConfig::new("train-stage1", &["run", "model", "train"]);
        d.apply_text(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.float("train", "lr"), 0.003);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::new("sample", &["run", "sample"]);
        assert!(c.apply_text("[sample]\nstepz = 3\n", Path::new("f")).is_err());
        assert!(c.apply_text("[nope]\n", Path::new("f")).is_err());
        assert!(c.apply_text("[sample]\nsteps = many\n", Path::new("f")).is_err());
        assert!(c.apply_text("steps = 3\n", Path::new("f")).is_err());
        assert!(c.set("train", "lr", "1").is_err());
        // other commands' sections are accepted but ignored
        c.apply_text("[train]\nlr = 0.5\n[sample]\nsteps = 3 # comment\n", Path::new("f")).unwrap();
        assert_eq!(c.int("sample", "steps"), 3);
    }
}
