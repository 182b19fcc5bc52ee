//! Run configuration: presets, ablations and flat dotted-key overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use envdecode::inference::TailPolicy;
use envdecode::model::ModelConfig;
use envdecode::objective::LossConfig;
use envdecode::training::OptimConfig;
use envdecode::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub tail_policy: TailPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Published configuration.
    Paper,
    /// Two narrow blocks for desk-scale synthetic runs.
    Small,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoConditioner,
    NoPreLn,
    NoL1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub ablations: Vec<Ablation>,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub paths: Paths,
    pub eval: EvalSettings,
}

/// Keys the paper preset fixes.
pub const PINNED: &[&str] = &[
    "model.n_blocks",
    "model.n_heads",
    "model.use_conditioner",
    "model.use_pre_ln",
    "model.sample_rate_hz",
    "model.segment_seconds",
    "optim.lr0",
    "optim.decay_factor",
    "optim.epochs",
    "loss.alpha",
    "loss.l1_enabled",
];

/// Keys filled in from the dataset at train time.
pub const FROM_DATA: &[&str] = &["model.in_channels", "model.n_subjects"];

const SECTIONS: &[&str] = &["model", "optim", "loss", "paths", "eval"];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = RunConfig {
            preset,
            ablations: Vec::new(),
            model: ModelConfig {
                use_conditioner: true,
                use_pre_ln: true,
                ..ModelConfig::default()
            },
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            paths: Paths::default(),
            eval: EvalSettings::default(),
        };
        if preset == Preset::Small {
            cfg.model.hidden_dim = 32;
            cfg.model.n_blocks = 2;
            cfg.optim.epochs = 300;
            cfg.optim.eval_every_epochs = 10;
        }
        cfg
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        match a {
            Ablation::NoConditioner => self.model.use_conditioner = false,
            Ablation::NoPreLn => self.model.use_pre_ln = false,
            Ablation::NoL1 => self.loss.l1_enabled = false,
        }
        if !self.ablations.contains(&a) {
            self.ablations.push(a);
        }
    }

    /// Flat `section.key → value` view.
    pub fn to_flat(&self) -> Result<Map<String, Value>> {
        let tree = serde_json::to_value(self)?;
        let mut flat = Map::new();
        for section in SECTIONS {
            if let Some(Value::Object(fields)) = tree.get(*section) {
                for (k, v) in fields {
                    flat.insert(format!("{section}.{k}"), v.clone());
                }
            }
        }
        Ok(flat)
    }

    /// Sets one dotted key. Unknown keys and ill-typed values are config errors.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let slot = key
            .split_once('.')
            .filter(|(s, _)| SECTIONS.contains(s))
            .and_then(|(s, k)| tree.get_mut(s)?.as_object_mut()?.get_mut(k))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        *slot = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("bad value for {key}: {e}")))?;
        Ok(())
    }

    /// `key=value`; the value is parsed as JSON when possible, else taken as a string.
    pub fn set_from_str(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key.trim(), value)
    }

    /// Applies a JSON object of dotted keys. `preset` and `ablations` are
    /// also accepted; the preset is applied before anything else.
    pub fn apply_file_object(&mut self, obj: &Map<String, Value>) -> Result<()> {
        for (k, v) in obj {
            match k.as_str() {
                "preset" | "ablations" => {}
                _ => self.set(k, v.clone())?,
            }
        }
        if let Some(list) = obj.get("ablations") {
            let list: Vec<Ablation> = serde_json::from_value(list.clone())
                .map_err(|e| Error::Config(format!("bad ablations: {e}")))?;
            for a in list {
                self.apply_ablation(a);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.validate()?;
        if self.model.dropout_rate < 0.0 || self.model.dropout_rate >= 1.0 {
            return Err(Error::Config("model.dropout_rate must be in [0, 1)".into()));
        }
        self.model.segment_samples()?;
        Ok(())
    }
}

pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match serde_json::from_str(&text)? {
        Value::Object(obj) => Ok(obj),
        _ => Err(Error::Config(format!("{}: expected a JSON object of dotted keys", path.display()))),
    }
}

/// Builds a config in override order: preset, file, ablations, `--set`.
pub fn resolve(
    preset: Option<Preset>,
    file: Option<&Path>,
    ablations: &[Ablation],
    sets: &[String],
) -> Result<RunConfig> {
    let file_obj = file.map(read_config_file).transpose()?;
    let file_preset = match file_obj.as_ref().and_then(|o| o.get("preset")) {
        Some(v) => Some(
            serde_json::from_value::<Preset>(v.clone())
                .map_err(|e| Error::Config(format!("bad preset: {e}")))?,
        ),
        None => None,
    };
    let mut cfg = RunConfig::preset(preset.or(file_preset).unwrap_or(Preset::Paper));
    if let Some(obj) = &file_obj {
        cfg.apply_file_object(obj)?;
    }
    for &a in ablations {
        cfg.apply_ablation(a);
    }
    for s in sets {
        cfg.set_from_str(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Table of every config key: default, the `paper` preset value where that
/// preset pins the key, and the `small` preset value.
pub fn key_table() -> String {
    let default = RunConfig::preset(Preset::Paper).to_flat().expect("config serializes");
    let small = RunConfig::preset(Preset::Small).to_flat().expect("config serializes");
    let width = default.keys().map(String::len).max().unwrap_or(0);
    let rows: Vec<(&String, String, String, String)> = default
        .iter()
        .map(|(k, v)| {
            let paper = if PINNED.contains(&k.as_str()) {
                show(v)
            } else if FROM_DATA.contains(&k.as_str()) {
                "from data".into()
            } else {
                "-".into()
            };
            (k, show(v), paper, show(&small[k]))
        })
        .collect();
    let col = rows
        .iter()
        .flat_map(|(_, a, b, c)| [a.len(), b.len(), c.len()])
        .max()
        .unwrap_or(0);
    let mut out = String::from("Config keys (JSON file of dotted keys, or --set key=value):\n");
    let _ = writeln!(out, "  {:width$}  {:>col$}  {:>col$}  {:>col$}", "key", "default", "paper", "small");
    for (k, d, p, s) in rows {
        let _ = writeln!(out, "  {k:width$}  {d:>col$}  {p:>col$}  {s:>col$}");
    }
    out.push_str("\nAblations: no-conditioner, no-pre-ln, no-l1.");
    out
}
