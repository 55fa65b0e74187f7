//! Flat `key = value` run configuration.
//!
//! A config file holds one setting per line; `#` starts a comment. Values
//! given on the command line (`--seed`, `--out`, `--set key=value`) override
//! the file. Every key must be known to the command reading it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hiercrf::corpus::SynthSizes;
use hiercrf::train::TrainConfig;

/// Rejected configuration; maps to the usage exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = Result<T, ConfigError>;

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Raw settings. A later `set` replaces an earlier value for the same key.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse_file(path: &Path) -> Res<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_pair(line).ok_or_else(|| bad(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            if s.values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("{}:{}: duplicate key {k:?}", path.display(), i + 1)));
            }
        }
        Ok(s)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Res<()> {
        let (k, v) = split_pair(pair).ok_or_else(|| bad(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k, v);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    fn reject_unknown(&self, known: &[&str]) -> Res<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .map(String::as_str)
            .filter(|k| !known.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(bad(format!("unknown config key(s): {}", unknown.join(", "))))
        }
    }
}

fn split_pair(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_fromstr!(
    f64,
    usize,
    u64,
    bool,
    hiercrf::encoder::Pooling,
    hiercrf::model::Variant,
    hiercrf::model::Classifier,
    hiercrf::extensions::FusionPoint
);

struct Field<C> {
    key: &'static str,
    get: fn(&C) -> String,
    set: fn(&mut C, &str) -> Result<(), String>,
}

macro_rules! field {
    ($key:literal, $($path:ident).+) => {
        Field {
            key: $key,
            get: |c| Value::render(&c.$($path).+),
            set: |c, v| {
                c.$($path).+ = Value::parse_value(v)?;
                Ok(())
            },
        }
    };
}

fn train_fields() -> Vec<Field<TrainConfig>> {
    vec![
        field!("variant", model.variant),
        field!("classifier", model.classifier),
        field!("embedding_dim", model.embedding_dim),
        field!("hidden_size", model.encoder.hidden_size),
        field!("num_layers", model.encoder.num_layers),
        field!("pooling", model.encoder.pooling),
        field!("dropout", model.encoder.dropout),
        field!("embedding_dropout", model.encoder.embedding_dropout),
        field!("attention.enabled", model.attention.enabled),
        field!("attention.window", model.attention.window),
        field!("attention.scaled", model.attention.scaled),
        field!("pos.enabled", model.pos.enabled),
        field!("pos.dim", model.pos.dim),
        field!("pos.fusion_point", model.pos.fusion_point),
        field!("decay_transitions", model.decay_transitions),
        field!("learning_rate", learning_rate),
        field!("lr_halving_period", lr_halving_period),
        field!("weight_decay", weight_decay),
        field!("rho", rho),
        field!("eps", eps),
        field!("clip_norm", clip_norm),
        field!("max_batch", max_batch),
        field!("early_stop_patience", early_stop_patience),
        field!("max_epochs", max_epochs),
        field!("normalize_loss", normalize_loss),
        field!("min_count", min_count),
        field!("seed", seed),
    ]
}

fn synth_fields() -> Vec<Field<SynthSizes>> {
    vec![
        field!("conversations", conversations),
        field!("min_utterances", min_utterances),
        field!("max_utterances", max_utterances),
        field!("min_fillers", min_fillers),
        field!("max_fillers", max_fillers),
        field!("labels", labels),
        field!("filler_vocab", filler_vocab),
    ]
}

pub const PATH_KEYS: [&str; 6] = ["train", "valid", "test", "embeddings", "labels", "out"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision {s:?} (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Everything `train`, `ablate` and `gradcheck` need.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub precision: Precision,
    pub paths: BTreeMap<&'static str, PathBuf>,
}

impl RunConfig {
    /// Starts from `base` and applies `settings`.
    pub fn from_settings(base: TrainConfig, settings: &Settings) -> Res<Self> {
        let fields = train_fields();
        let mut known: Vec<&str> = fields.iter().map(|f| f.key).collect();
        known.extend(PATH_KEYS);
        known.push("precision");
        settings.reject_unknown(&known)?;
        let mut rc = RunConfig {
            train: base,
            ..RunConfig::default()
        };
        for (k, v) in &settings.values {
            if let Some(f) = fields.iter().find(|f| f.key == k) {
                (f.set)(&mut rc.train, v).map_err(|e| bad(format!("{k}: {e}")))?;
            } else if k == "precision" {
                rc.precision = v.parse().map_err(|e| bad(format!("{k}: {e}")))?;
            } else {
                let key = PATH_KEYS.iter().find(|p| **p == k).expect("checked above");
                rc.paths.insert(key, PathBuf::from(v));
            }
        }
        rc.train.validate().map_err(|e| bad(e.to_string()))?;
        Ok(rc)
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }

    pub fn require(&self, key: &str) -> Res<&Path> {
        self.path(key).ok_or_else(|| bad(format!("missing required path {key:?}")))
    }

    /// Every effective setting, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for f in train_fields() {
            let _ = writeln!(out, "{} = {}", f.key, (f.get)(&self.train));
        }
        let _ = writeln!(out, "precision = {}", self.precision);
        for (k, p) in &self.paths {
            let _ = writeln!(out, "{k} = {}", p.display());
        }
        out
    }
}

/// Generator sizes for `synth`; `seed` and `scheme` come from flags.
pub fn synth_sizes(settings: &Settings) -> Res<SynthSizes> {
    let fields = synth_fields();
    settings.reject_unknown(&fields.iter().map(|f| f.key).collect::<Vec<_>>())?;
    let mut sizes = SynthSizes::default();
    for (k, v) in &settings.values {
        let f = fields.iter().find(|f| f.key == k).expect("checked above");
        (f.set)(&mut sizes, v).map_err(|e| bad(format!("{k}: {e}")))?;
    }
    Ok(sizes)
}

pub fn echo_sizes(sizes: &SynthSizes) -> String {
    synth_fields()
        .iter()
        .map(|f| format!("{} = {}\n", f.key, (f.get)(sizes)))
        .collect()
}
