//! Run configuration as flat `key = value` text.
//!
//! Resolution order is defaults, then the config file, then explicit
//! overrides. The resolved config is echoed next to run outputs and reloads
//! to an equal value.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::contrast::Strategy;
use crate::corpus::SplitSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "SLOTMOCO_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// `vocab_size` is ignored here and taken from the vocabulary at use time.
    pub encoder: EncoderConfig,
    pub target_domain: Option<String>,
    pub few_shot: usize,
    pub dev_size: usize,
    pub min_freq: usize,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            target_domain: None,
            few_shot: 0,
            dev_size: 500,
            min_freq: 1,
            corpus: None,
            vocab: None,
            weights: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "batch_size",
    "beta1",
    "beta2",
    "corpus",
    "d_ff",
    "d_model",
    "dev_size",
    "dropout",
    "early_stop_f1",
    "eval_interval",
    "few_shot",
    "lambda",
    "lr",
    "max_len",
    "max_steps",
    "min_freq",
    "momentum",
    "n_heads",
    "n_layers",
    "out_dir",
    "seed",
    "set_size",
    "strategy",
    "target_domain",
    "tau",
    "templatize_all",
    "vocab",
    "warmup_steps",
    "weight_decay",
    "weights",
];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let t = &mut self.train;
        let e = &mut self.encoder;
        let opt_path = |raw: &str| (!raw.is_empty()).then(|| PathBuf::from(raw));
        match key {
            "lambda" => t.lambda = parse_value(key, raw)?,
            "lr" => t.lr = parse_value(key, raw)?,
            "warmup_steps" => t.warmup_steps = parse_value(key, raw)?,
            "max_steps" => t.max_steps = parse_value(key, raw)?,
            "batch_size" => t.batch_size = parse_value(key, raw)?,
            "tau" => t.tau = parse_value(key, raw)?,
            "momentum" => t.momentum = parse_value(key, raw)?,
            "set_size" => t.set_size = parse_value(key, raw)?,
            "strategy" => t.strategy = parse_value::<Strategy>(key, raw)?,
            "weight_decay" => t.weight_decay = parse_value(key, raw)?,
            "beta1" => t.beta1 = parse_value(key, raw)?,
            "beta2" => t.beta2 = parse_value(key, raw)?,
            "seed" => t.seed = parse_value(key, raw)?,
            "eval_interval" => t.eval_interval = parse_value(key, raw)?,
            "templatize_all" => t.templatize_all = parse_value(key, raw)?,
            "early_stop_f1" => {
                t.early_stop_f1 = if raw.is_empty() { None } else { Some(parse_value(key, raw)?) }
            }
            "d_model" => e.d_model = parse_value(key, raw)?,
            "n_layers" => e.n_layers = parse_value(key, raw)?,
            "n_heads" => e.n_heads = parse_value(key, raw)?,
            "d_ff" => e.d_ff = parse_value(key, raw)?,
            "max_len" => e.max_len = parse_value(key, raw)?,
            "dropout" => e.dropout_prob = parse_value(key, raw)?,
            "target_domain" => self.target_domain = (!raw.is_empty()).then(|| raw.to_string()),
            "few_shot" => self.few_shot = parse_value(key, raw)?,
            "dev_size" => self.dev_size = parse_value(key, raw)?,
            "min_freq" => self.min_freq = parse_value(key, raw)?,
            "corpus" => self.corpus = opt_path(raw),
            "vocab" => self.vocab = opt_path(raw),
            "weights" => self.weights = opt_path(raw),
            "out_dir" => self.out_dir = PathBuf::from(raw),
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key {key:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (k, v) in kv.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply(kv)?;
        Ok(config)
    }

    /// Defaults, then `path` (if any), then `overrides` in order.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(seed) = std::env::var_os(SEED_ENV) {
            let seed = seed.to_string_lossy();
            config.set("seed", &seed)?;
        }
        if let Some(path) = path {
            config.apply(&KeyValues::load(path)?)?;
        }
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        Ok(config)
    }

    pub fn to_kv(&self) -> KeyValues {
        let t = &self.train;
        let e = &self.encoder;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut kv = KeyValues::default();
        kv.set("lambda", t.lambda);
        kv.set("lr", t.lr);
        kv.set("warmup_steps", t.warmup_steps);
        kv.set("max_steps", t.max_steps);
        kv.set("batch_size", t.batch_size);
        kv.set("tau", t.tau);
        kv.set("momentum", t.momentum);
        kv.set("set_size", t.set_size);
        kv.set("strategy", t.strategy);
        kv.set("weight_decay", t.weight_decay);
        kv.set("beta1", t.beta1);
        kv.set("beta2", t.beta2);
        kv.set("seed", t.seed);
        kv.set("eval_interval", t.eval_interval);
        kv.set("templatize_all", t.templatize_all);
        kv.set("early_stop_f1", t.early_stop_f1.map(|f| f.to_string()).unwrap_or_default());
        kv.set("d_model", e.d_model);
        kv.set("n_layers", e.n_layers);
        kv.set("n_heads", e.n_heads);
        kv.set("d_ff", e.d_ff);
        kv.set("max_len", e.max_len);
        kv.set("dropout", e.dropout_prob);
        kv.set("target_domain", self.target_domain.clone().unwrap_or_default());
        kv.set("few_shot", self.few_shot);
        kv.set("dev_size", self.dev_size);
        kv.set("min_freq", self.min_freq);
        kv.set("corpus", path(&self.corpus));
        kv.set("vocab", path(&self.vocab));
        kv.set("weights", path(&self.weights));
        kv.set("out_dir", self.out_dir.display());
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let probe = EncoderConfig {
            vocab_size: self.encoder.vocab_size.max(4),
            ..self.encoder
        };
        probe.validate()
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus path given (set `corpus` or pass --corpus)".into()))
    }

    pub fn target(&self) -> Result<&str> {
        self.target_domain
            .as_deref()
            .ok_or_else(|| Error::Config("no target domain given (set `target_domain`)".into()))
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        Ok(SplitSpec {
            target_domain: self.target()?.to_string(),
            few_shot_k: self.few_shot,
            dev_size: self.dev_size,
            seed: self.train.seed,
        })
    }

    pub fn encoder_for(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            ..self.encoder
        }
    }
}
