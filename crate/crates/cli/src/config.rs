//! Experiment configuration: flat `key = value` lines grouped under
//! `[section]` headers. Keys may also be written fully qualified
//! (`model.d_model = 64`). Relative paths resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmt_probe::decode::DecodeConfig;
use mmt_probe::metrics::Criterion;
use mmt_probe::train::{AdamConfig, Schedule, TrainConfig};
use mmt_probe::{Error, ModelConfig, ProbingTask, Result};

/// Input paths that must exist when the file is loaded.
const INPUT_PATHS: [&str; 8] = [
    "paths.src",
    "paths.tgt",
    "paths.image_ids",
    "paths.features",
    "paths.valid_src",
    "paths.valid_tgt",
    "paths.valid_image_ids",
    "paths.lexicon",
];

const KEYS: [&str; 35] = [
    "paths.src",
    "paths.tgt",
    "paths.image_ids",
    "paths.features",
    "paths.valid_src",
    "paths.valid_tgt",
    "paths.valid_image_ids",
    "paths.lexicon",
    "paths.out_dir",
    "model.enc_layers",
    "model.dec_layers",
    "model.d_model",
    "model.d_ffn",
    "model.heads",
    "model.dropout",
    "model.label_smoothing",
    "model.fusion_mode",
    "model.gate_mode",
    "model.raw_qkv",
    "model.max_len",
    "optim.max_steps",
    "optim.batch_tokens",
    "optim.peak_lr",
    "optim.floor_lr",
    "optim.warmup",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.valid_every",
    "optim.patience",
    "optim.average_last",
    "decode.beam",
    "decode.max_out_len",
    "probe.task",
    "probe.criterion",
];

/// Keys outside the sectioned table.
const EXTRA_KEYS: [&str; 1] = ["run.seed"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

fn known(key: &str) -> bool {
    KEYS.contains(&key) || EXTRA_KEYS.contains(&key)
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig {
            values: BTreeMap::new(),
            base: origin.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let fail = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            let key = if k.contains('.') || section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if !known(&key) {
                return Err(fail(format!("unknown key `{key}`")));
            }
            if cfg
                .values
                .insert(key.clone(), v.trim().to_string())
                .is_some()
            {
                return Err(fail(format!("duplicate key `{key}`")));
            }
        }
        Ok(cfg)
    }

    /// Reads, parses and checks that every input path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::parse(&text, path)?;
        for key in INPUT_PATHS {
            if let Some(p) = cfg.path(key) {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{key} = {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(cfg)
    }

    /// Overrides one key, as from a `--set key=value` flag.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let k = k.trim();
        if !known(k) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        self.values.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`"))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.base.join(v))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("run.seed", 1)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let fusion_mode = self
            .get("model.fusion_mode")
            .map_or(Ok(d.fusion_mode), str::parse)?;
        let gate_mode = self
            .get("model.gate_mode")
            .map_or(Ok(d.gate_mode), str::parse)?;
        Ok(ModelConfig {
            enc_layers: self.parsed("model.enc_layers", d.enc_layers)?,
            dec_layers: self.parsed("model.dec_layers", d.dec_layers)?,
            d_model: self.parsed("model.d_model", d.d_model)?,
            d_ffn: self.parsed("model.d_ffn", d.d_ffn)?,
            heads: self.parsed("model.heads", d.heads)?,
            dropout: self.parsed("model.dropout", d.dropout)?,
            label_smoothing: self.parsed("model.label_smoothing", d.label_smoothing)?,
            fusion_mode,
            gate_mode,
            raw_qkv: self.parsed("model.raw_qkv", d.raw_qkv)?,
            max_len: self.parsed("model.max_len", d.max_len)?,
            ..d
        })
    }

    pub fn decode(&self) -> Result<DecodeConfig> {
        let d = DecodeConfig::default();
        let cfg = DecodeConfig {
            beam: self.parsed("decode.beam", d.beam)?,
            max_out_len: self.parsed("decode.max_out_len", d.max_out_len)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let (s, a) = (Schedule::default(), AdamConfig::default());
        let cfg = TrainConfig {
            max_steps: self.parsed("optim.max_steps", d.max_steps)?,
            batch_tokens: self.parsed("optim.batch_tokens", d.batch_tokens)?,
            schedule: Schedule {
                floor: self.parsed("optim.floor_lr", s.floor)?,
                peak: self.parsed("optim.peak_lr", s.peak)?,
                warmup: self.parsed("optim.warmup", s.warmup)?,
            },
            adam: AdamConfig {
                beta1: self.parsed("optim.beta1", a.beta1)?,
                beta2: self.parsed("optim.beta2", a.beta2)?,
                eps: self.parsed("optim.eps", a.eps)?,
            },
            valid_every: self.parsed("optim.valid_every", d.valid_every)?,
            patience: self.parsed("optim.patience", d.patience)?,
            average_last: self.parsed("optim.average_last", d.average_last)?,
            decode: self.decode()?,
            seed: self.seed()?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task(&self) -> Result<Option<ProbingTask>> {
        self.get("probe.task").map(str::parse).transpose()
    }

    pub fn criterion(&self) -> Result<Criterion> {
        self.get("probe.criterion")
            .map_or(Ok(Criterion::Relaxed), str::parse)
    }
}
