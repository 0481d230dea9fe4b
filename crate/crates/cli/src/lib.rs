//! The `tryon` command line: argument parsing and command dispatch.
//!
//! Every command resolves a [`config::RunConfig`] from defaults, an optional
//! `--config` file and `--key value` flags, in that order, and stores the
//! resolved settings as `config.txt` in its output directory.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{Key, Kind, RunConfig};
pub use error::{CliError, CliResult};

/// A subcommand and the settings it reads.
pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [&'static str],
    pub run: fn(&RunConfig) -> CliResult<()>,
}

const DATA_IN: [&str; 3] = ["data.dir", "data.split", "data.limit"];

pub const COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "gen-data",
        about: "Render a synthetic try-on dataset split",
        keys: &["run", "data.n", "data.mix", "data.canvas", "data.split"],
        run: commands::gen_data,
    },
    CommandSpec {
        name: "train-stage1",
        about: "Train the mask-based model on agnostic inputs",
        keys: &[
            "run", "data.dir", "data.split", "data.limit", "model", "train.steps", "train.batch", "train.lr",
            "train.weight_decay", "train.warmup", "train.cosine", "train.checkpoint_every", "train.init_from",
            "train.resume",
        ],
        run: commands::train_stage1,
    },
    CommandSpec {
        name: "synth-unpaired",
        about: "Dress every record's person in a donor garment with a stage-1 model",
        keys: &["run", DATA_IN[0], DATA_IN[1], DATA_IN[2], "sample.checkpoint", "sample.steps", "sample.category_match"],
        run: commands::synth_unpaired,
    },
    CommandSpec {
        name: "train-stage2",
        about: "Train the person-to-person model on synthesized unpaired persons",
        keys: &["run", DATA_IN[0], DATA_IN[1], DATA_IN[2], "data.refs", "data.unpaired", "model", "train"],
        run: commands::train_stage2,
    },
    CommandSpec {
        name: "gen-refs",
        about: "Generate reference images of other people wearing each garment",
        keys: &["run", DATA_IN[0], DATA_IN[1], DATA_IN[2], "refgen"],
        run: commands::gen_refs,
    },
    CommandSpec {
        name: "sample",
        about: "Generate try-on images with a trained checkpoint",
        keys: &[
            "run", DATA_IN[0], DATA_IN[1], DATA_IN[2], "data.refs", "sample.checkpoint", "sample.steps", "sample.mode",
            "sample.ref",
        ],
        run: commands::sample,
    },
    CommandSpec {
        name: "eval",
        about: "Score a checkpoint (or pre-generated images) and write a metric report",
        keys: &["run", DATA_IN[0], DATA_IN[1], DATA_IN[2], "data.refs", "sample.checkpoint", "sample.steps", "eval"],
        run: commands::eval,
    },
];

/// Command-line flag of a setting.
pub fn flag_name(k: &Key) -> String {
    match (k.section, k.name) {
        ("data", "dir") => "data".into(),
        _ => k.name.replace('_', "-"),
    }
}

fn id(k: &Key) -> String {
    format!("{}.{}", k.section, k.name)
}

fn cli() -> Command {
    let mut root = Command::new("tryon")
        .about("Flow-matching virtual try-on on a synthetic world")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        let mut sub = Command::new(spec.name).about(spec.about).args_override_self(true).arg(
            Arg::new("config").long("config").value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("settings file"),
        );
        for k in RunConfig::new(spec.name, spec.keys).keys() {
            let mut arg = Arg::new(id(k)).long(flag_name(k)).help(format!("{} [default: {:?}]", k.help, k.default));
            if k.kind == Kind::Bool {
                arg = arg.num_args(0..=1).default_missing_value("true").value_name("BOOL").action(ArgAction::Set);
            }
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

fn resolve(spec: &CommandSpec, m: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::new(spec.name, spec.keys);
    if let Some(path) = m.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    let keys: Vec<&Key> = cfg.keys().collect();
    for k in keys {
        if let Some(v) = m.get_one::<String>(&id(k)) {
            cfg.set(k.section, k.name, v)?;
        }
    }
    Ok(cfg)
}

/// Parses `args` (program name first) and runs the selected command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) if e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            print!("{e}");
            return Err(CliError::Usage("no command given".into()));
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            return Err(CliError::Usage(first.to_string()));
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let spec = COMMANDS.iter().find(|c| c.name == name).expect("registered command");
    let cfg = resolve(spec, sub)?;
    (spec.run)(&cfg)
}
