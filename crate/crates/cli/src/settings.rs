//! Run settings: preset, then config file, then command-line flags.

use std::path::{Path, PathBuf};

use layoutmask::heads::{TaskHeadConfig, TaskKind};
use layoutmask::masking::MaskingConfig;
use layoutmask::model::Precision;
use layoutmask::objectives::ObjectiveSwitches;
use layoutmask::{Error, ModelConfig, Result, RunConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::TrainArgs;

/// Everything a config file may set. Tables mirror the flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSettings {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub accumulation: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub precision: Option<Precision>,
    pub objectives: Option<ObjectiveSwitches>,
    pub task: Option<TaskKind>,
    pub classes: Option<usize>,
    pub model: Option<Table>,
    pub masking: Option<MaskingConfig>,
    pub optimizer: Option<Table>,
}

pub fn load_file(path: Option<&Path>) -> Result<FileSettings> {
    let Some(path) = path else { return Ok(FileSettings::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "base" => Ok(ModelConfig::base()),
        "large" => Ok(ModelConfig::large()),
        "gradcheck" => Ok(ModelConfig::gradcheck()),
        other => Err(Error::Config(format!("unknown preset {other:?} (desk, base, large, gradcheck)"))),
    }
}

/// Overlays `overrides` on the serialized `base` and reads the result back,
/// so a file can change single fields of a preset or of the defaults.
pub fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, overrides: Option<&Table>, what: &str) -> Result<T> {
    let mut table = match Value::try_from(base) {
        Ok(Value::Table(t)) => t,
        _ => return Err(Error::Config(format!("{what} does not serialize to a table"))),
    };
    if let Some(o) = overrides {
        for (k, v) in o {
            if !table.contains_key(k) {
                return Err(Error::Config(format!("unknown {what} field {k:?}")));
            }
            table.insert(k.clone(), v.clone());
        }
    }
    Value::Table(table).try_into().map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn parse_objectives(list: &str) -> Result<ObjectiveSwitches> {
    let mut s = ObjectiveSwitches::NONE;
    for part in list.split([',', '+']).map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
        match part.to_ascii_lowercase().as_str() {
            "mlm" => s.mlm = true,
            "mim" => s.mim = true,
            "wpa" => s.wpa = true,
            other => return Err(Error::Config(format!("unknown objective {other:?} (mlm, mim, wpa)"))),
        }
    }
    Ok(s)
}

/// Resolved settings of a training or inspection command.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub run: RunConfig,
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn resolve(args: &TrainArgs, task: Option<(TaskKind, Option<usize>)>) -> Result<Resolved> {
    let file = load_file(args.config.as_deref())?;
    let preset_name = args.preset.clone().or(file.preset.clone());
    let base_model = match &preset_name {
        Some(n) => preset(n)?,
        None => ModelConfig::desk(),
    };
    let model = overlay(&base_model, file.model.as_ref(), "model")?;
    let mut optimizer = overlay(&RunConfig::default().optimizer, file.optimizer.as_ref(), "optimizer")?;
    if let Some(lr) = args.lr {
        optimizer.peak_lr = lr;
    }
    if let Some(w) = args.warmup {
        optimizer.warmup_frac = w;
    }
    let switches = match &args.objectives {
        Some(list) => parse_objectives(list)?,
        None => file.objectives.unwrap_or(ObjectiveSwitches::ALL),
    };
    let task_config = match task {
        Some((kind, classes)) => {
            let n = classes.or(file.classes).unwrap_or(match kind {
                TaskKind::TokenLabel => layoutmask::docmodel::ENTITY_TAGS.len(),
                TaskKind::DocClass => 4,
                TaskKind::ExtractiveQa => 2,
            });
            Some(TaskHeadConfig::new(kind, n))
        }
        None => None,
    };
    let seed = args.seed.or(file.seed);
    let run = RunConfig {
        seed: seed.unwrap_or(0),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(8),
        accumulation: args.accumulation.or(file.accumulation).unwrap_or(1),
        total_steps: args.steps.or(file.steps).unwrap_or(100),
        switches,
        task: task_config,
        model,
        masking: file.masking.clone().unwrap_or_default(),
        optimizer,
        precision: args.precision.or(file.precision).unwrap_or_default(),
        checkpoint_every: args.checkpoint_every.or(file.checkpoint_every).unwrap_or(0),
        out_dir: args.out_dir.clone().or(file.out_dir.clone()),
    };
    Ok(Resolved {
        run,
        corpus: args.corpus.clone().or(file.corpus),
        eval_corpus: args.eval_corpus.clone().or(file.eval_corpus),
        init: args.init.clone().or(file.init),
        vocab: args.vocab.clone().or(file.vocab),
        seed,
    })
}

pub fn task_from_file(args: &TrainArgs) -> Result<Option<TaskKind>> {
    Ok(load_file(args.config.as_deref())?.task)
}
