//! Run configuration: model, training and dataset settings merged from
//! preset defaults, an optional `key = value` file and `--key value`
//! command-line overrides, in that order of precedence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset '{s}' (expected desk or full)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            n_train: 2048,
            n_val: 256,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Directory for checkpoints and logs.
    pub run_dir: PathBuf,
}

impl RunConfig {
    pub fn preset(preset: Preset, vocab_size: usize) -> Self {
        let model = match preset {
            Preset::Desk => ModelConfig::desk(vocab_size),
            Preset::Full => ModelConfig::full(vocab_size),
        };
        let mut data = DataConfig::default();
        data.scene.feature_dim = model.feature_dim_region;
        Self {
            preset,
            seed: 0,
            model,
            train: TrainConfig::default(),
            data,
            run_dir: PathBuf::from("runs"),
        }
    }

    /// Defaults for `preset`, then `file` entries, then `overrides`. The
    /// preset itself may be chosen in either source; the later one wins.
    pub fn resolve(vocab_size: usize, file: &[Entry], overrides: &[Entry]) -> Result<Self> {
        let preset = file
            .iter()
            .chain(overrides)
            .filter(|e| e.key == "preset")
            .last()
            .map(|e| e.value.parse())
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut cfg = Self::preset(preset, vocab_size);
        for e in file.iter().chain(overrides) {
            cfg.set(&e.key, &e.value).map_err(|err| match &e.origin {
                Some(origin) => Error::Config(format!("{origin}: {err}")),
                None => err,
            })?;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.scene.validate()?;
        if self.model.feature_dim_region != self.data.scene.feature_dim
            || self.model.feature_dim_seg != self.data.scene.feature_dim
        {
            return Err(Error::Config(format!(
                "feature_dim {} does not match the model's input widths {}/{}",
                self.data.scene.feature_dim, self.model.feature_dim_region, self.model.feature_dim_seg
            )));
        }
        if self.train.batch_size == 0 || self.train.scst_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.train.lr_scale <= 0.0 || self.train.scst_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Assigns one schema key; keys use `_` or `-` interchangeably.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        let entry = SCHEMA
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        (entry.apply)(self, value).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{key}: {msg}")),
            other => other,
        })
    }

    /// Every schema key with its current value, in schema order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        SCHEMA.iter().map(|k| (k.name, (k.show)(self))).collect()
    }

    /// The configuration as a file `resolve` reads back unchanged.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub origin: Option<String>,
}

impl Entry {
    pub fn new(key: &str, value: &str) -> Self {
        Self {
            key: normalize_key(key),
            value: value.to_string(),
            origin: None,
        }
    }
}

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_config_text(text: &str, source: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{source}:{}: expected 'key = value'", i + 1)))?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(Error::Config(format!("{source}:{}: empty key", i + 1)));
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
            origin: Some(format!("{source}:{}", i + 1)),
        });
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text, &path.display().to_string())
}

/// Parses `--key value` pairs (or `--key=value`).
pub fn parse_overrides(args: &[String]) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument '{arg}'")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push(Entry::new(&key, &value));
    }
    Ok(out)
}

/// Separates schema-key overrides (`--key value` or `--key=value`) from the
/// remaining arguments, preserving the order of both.
pub fn split_overrides(args: &[String]) -> (Vec<String>, Vec<String>) {
    let (mut rest, mut overrides) = (Vec::new(), Vec::new());
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").map(|f| normalize_key(f.split('=').next().unwrap_or("")));
        match key {
            Some(k) if SCHEMA.iter().any(|s| s.name == k) => {
                overrides.push(arg.clone());
                if !arg.contains('=') {
                    if let Some(v) = it.next() {
                        overrides.push(v.clone());
                    }
                }
            }
            _ => rest.push(arg.clone()),
        }
    }
    (rest, overrides)
}

struct KeySpec {
    name: &'static str,
    apply: fn(&mut RunConfig, &str) -> Result<()>,
    show: fn(&RunConfig) -> String,
}

fn parse<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("invalid value '{v}': {e}")))
}

fn parse_opt_f64(v: &str) -> Result<Option<f64>> {
    match v {
        "off" | "none" => Ok(None),
        _ => parse(v).map(Some),
    }
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "off".to_string(), |x| x.to_string())
}

macro_rules! key {
    ($name:literal, |$c:ident| $field:expr) => {
        KeySpec {
            name: $name,
            apply: |$c, v| {
                $field = parse(v)?;
                Ok(())
            },
            show: |$c| $field.to_string(),
        }
    };
}

const SCHEMA: &[KeySpec] = &[
    KeySpec {
        name: "preset",
        apply: |c, v| {
            c.preset = parse(v)?;
            Ok(())
        },
        show: |c| c.preset.to_string(),
    },
    key!("seed", |c| c.seed),
    KeySpec {
        name: "data_dir",
        apply: |c, v| {
            c.data.dir = PathBuf::from(v);
            Ok(())
        },
        show: |c| c.data.dir.display().to_string(),
    },
    KeySpec {
        name: "run_dir",
        apply: |c, v| {
            c.run_dir = PathBuf::from(v);
            Ok(())
        },
        show: |c| c.run_dir.display().to_string(),
    },
    key!("n_train", |c| c.data.n_train),
    key!("n_val", |c| c.data.n_val),
    key!("noise_std", |c| c.data.scene.noise_std),
    key!("min_objects", |c| c.data.scene.min_objects),
    key!("max_objects", |c| c.data.scene.max_objects),
    KeySpec {
        name: "feature_dim",
        apply: |c, v| {
            let d = parse(v)?;
            c.data.scene.feature_dim = d;
            c.model.feature_dim_region = d;
            c.model.feature_dim_seg = d;
            Ok(())
        },
        show: |c| c.data.scene.feature_dim.to_string(),
    },
    key!("d_model", |c| c.model.d_model),
    key!("heads", |c| c.model.heads),
    key!("enc_layers", |c| c.model.enc_layers),
    key!("dec_layers", |c| c.model.dec_layers),
    key!("d_ff", |c| c.model.d_ff),
    key!("max_len", |c| c.model.max_len),
    key!("keep_prob", |c| c.model.keep_prob),
    key!("beam", |c| c.model.beam),
    key!("length_alpha", |c| c.model.length_alpha),
    key!("gumbel_temperature", |c| c.model.gumbel.temperature),
    KeySpec {
        name: "gumbel_anneal_to",
        apply: |c, v| {
            c.model.gumbel.anneal_to = parse_opt_f64(v)?;
            Ok(())
        },
        show: |c| show_opt(c.model.gumbel.anneal_to),
    },
    key!("gumbel_anneal_steps", |c| c.model.gumbel.anneal_steps),
    KeySpec {
        name: "fusion",
        apply: |c, v| {
            c.model.fusion = parse(v)?;
            Ok(())
        },
        show: |c| c.model.fusion.to_string(),
    },
    KeySpec {
        name: "activation",
        apply: |c, v| {
            c.model.activation = parse(v)?;
            Ok(())
        },
        show: |c| c.model.activation.to_string(),
    },
    key!("ln_eps", |c| c.model.ln_eps),
    key!("steps", |c| c.train.steps),
    key!("batch_size", |c| c.train.batch_size),
    key!("warmup", |c| c.train.warmup),
    key!("lr_scale", |c| c.train.lr_scale),
    key!("checkpoint_every", |c| c.train.checkpoint_every),
    KeySpec {
        name: "grad_clip",
        apply: |c, v| {
            c.train.grad_clip = parse_opt_f64(v)?;
            Ok(())
        },
        show: |c| show_opt(c.train.grad_clip),
    },
    key!("scst_steps", |c| c.train.scst_steps),
    key!("scst_batch", |c| c.train.scst_batch),
    key!("scst_lr", |c| c.train.scst_lr),
    key!("scst_beam", |c| c.train.scst_beam),
];

/// Names of every accepted key.
pub fn schema_keys() -> impl Iterator<Item = &'static str> {
    SCHEMA.iter().map(|k| k.name)
}
