//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key is optional except
//! where noted in [`TrainConfig`]; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::DEFAULT_MAX_LEN;
use crate::error::{Error, Result};
use crate::fsio;
use crate::losses::LossWeights;
use crate::net::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    /// Mini-batch size `l`.
    pub batch_size: usize,
    pub lr: f64,
    /// Total optimizer steps, counted across resumes.
    pub max_steps: u64,
    pub seed: u64,
    pub max_len: usize,
    /// Extra soft-decode steps past the longest source row of a batch.
    pub decode_slack: usize,
    pub clip_norm: f64,
    /// Validation runs every this many steps (0 disables validation).
    pub eval_interval: u64,
    /// Non-improving validations tolerated before stopping.
    pub patience: usize,
    /// `last.ckpt` is refreshed every this many steps (0: only at the end).
    pub checkpoint_interval: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attr_dim: usize,
    pub feature_maps: usize,
    pub filter_widths: Vec<usize>,
    /// Directory produced by `prepare-data`.
    pub data_dir: PathBuf,
    /// Noun lexicon file; defaults to `<data_dir>/nouns.txt`.
    pub lexicon: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            batch_size: 32,
            lr: 1e-3,
            max_steps: 5000,
            seed: 1,
            max_len: DEFAULT_MAX_LEN,
            decode_slack: 2,
            clip_norm: 5.0,
            eval_interval: 250,
            patience: 5,
            checkpoint_interval: 500,
            embed_dim: 64,
            hidden_dim: 64,
            attr_dim: 8,
            feature_maps: 32,
            filter_widths: vec![3, 4, 5],
            data_dir: PathBuf::from("data"),
            lexicon: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

/// Documented keys, in file order.
pub const KEYS: &[&str] = &[
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lambda5",
    "lambda6",
    "batch_size",
    "lr",
    "max_steps",
    "seed",
    "max_len",
    "decode_slack",
    "clip_norm",
    "eval_interval",
    "patience",
    "checkpoint_interval",
    "embed_dim",
    "hidden_dim",
    "attr_dim",
    "feature_maps",
    "filter_widths",
    "data_dir",
    "lexicon",
    "out_dir",
];

/// Keys that may change between a run and its resumption.
const RESUMABLE: &[&str] = &["max_steps", "checkpoint_interval", "out_dir", "data_dir", "lexicon"];

/// Splits a config file into ordered key/value pairs.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl TrainConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut l = c.weights.to_array();
        for (k, v) in parse_pairs(text)? {
            let path = || base.join(&v);
            match k.as_str() {
                "lambda1" | "lambda2" | "lambda3" | "lambda4" | "lambda5" | "lambda6" => {
                    let i: usize = k[6..].parse().expect("key suffix is a digit");
                    l[i - 1] = num(&k, &v)?;
                }
                "batch_size" => c.batch_size = num(&k, &v)?,
                "lr" => c.lr = num(&k, &v)?,
                "max_steps" => c.max_steps = num(&k, &v)?,
                "seed" => c.seed = num(&k, &v)?,
                "max_len" => c.max_len = num(&k, &v)?,
                "decode_slack" => c.decode_slack = num(&k, &v)?,
                "clip_norm" => c.clip_norm = num(&k, &v)?,
                "eval_interval" => c.eval_interval = num(&k, &v)?,
                "patience" => c.patience = num(&k, &v)?,
                "checkpoint_interval" => c.checkpoint_interval = num(&k, &v)?,
                "embed_dim" => c.embed_dim = num(&k, &v)?,
                "hidden_dim" => c.hidden_dim = num(&k, &v)?,
                "attr_dim" => c.attr_dim = num(&k, &v)?,
                "feature_maps" => c.feature_maps = num(&k, &v)?,
                "filter_widths" => {
                    c.filter_widths = v
                        .split(',')
                        .map(|s| num(&k, s.trim()))
                        .collect::<Result<Vec<usize>>>()?
                }
                "data_dir" => c.data_dir = path(),
                "lexicon" => c.lexicon = Some(path()),
                "out_dir" => c.out_dir = path(),
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        c.weights = LossWeights::from_array(l);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        TrainConfig::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attr_dim", self.attr_dim),
            ("feature_maps", self.feature_maps),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be at least 1")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("`lr` must be positive".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config("`clip_norm` must be positive".into()));
        }
        if self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
            return Err(Error::Config("`filter_widths` needs positive widths".into()));
        }
        Ok(())
    }

    /// The value of `key` rendered as it would appear in a config file.
    fn render(&self, key: &str) -> String {
        let l = self.weights.to_array();
        match key {
            "lambda1" => l[0].to_string(),
            "lambda2" => l[1].to_string(),
            "lambda3" => l[2].to_string(),
            "lambda4" => l[3].to_string(),
            "lambda5" => l[4].to_string(),
            "lambda6" => l[5].to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "seed" => self.seed.to_string(),
            "max_len" => self.max_len.to_string(),
            "decode_slack" => self.decode_slack.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "patience" => self.patience.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "attr_dim" => self.attr_dim.to_string(),
            "feature_maps" => self.feature_maps.to_string(),
            "filter_widths" => self
                .filter_widths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "data_dir" => self.data_dir.display().to_string(),
            "lexicon" => self
                .lexicon
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("render called with undocumented key"),
        }
    }

    /// Config file text listing every key.
    pub fn to_file_string(&self) -> String {
        KEYS.iter()
            .filter(|k| **k != "lexicon" || self.lexicon.is_some())
            .map(|k| format!("{k} = {}\n", self.render(k)))
            .collect()
    }

    /// Hash over every key that shapes the optimization trajectory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| !RESUMABLE.contains(k)) {
            h.update(format!("{k}={}\n", self.render(k)));
        }
        hex::encode(h.finalize())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attr_dim: self.attr_dim,
            filter_widths: self.filter_widths.clone(),
            feature_maps: self.feature_maps,
        }
    }

    pub fn lexicon_path(&self) -> PathBuf {
        self.lexicon.clone().unwrap_or_else(|| self.data_dir.join("nouns.txt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let text = "# run\nlambda2 = 0.5  # content\nbatch_size=8\nfilter_widths = 2, 3\ndata_dir = d\n";
        let c = TrainConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.weights.cnt_rec, 0.5);
        assert_eq!(c.weights.rec, 1.0);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.filter_widths, vec![2, 3]);
        assert_eq!(c.data_dir, PathBuf::from("/base/d"));
        assert_eq!(c.lexicon_path(), PathBuf::from("/base/d/nouns.txt"));
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new(".");
        for text in [
            "nonsense",
            "bogus = 1",
            "lr = 1\nlr = 2",
            "lambda3 = -1",
            "batch_size = 0",
            "lr = fast",
            "filter_widths = 3,0",
        ] {
            assert!(
                matches!(TrainConfig::parse(text, base), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn file_string_round_trips() {
        let mut c = TrainConfig::default();
        c.weights = LossWeights::from_array([1.0, 0.25, 2.0, 0.0, 1.5, 3.0]);
        c.lexicon = Some(PathBuf::from("/x/nouns.txt"));
        c.data_dir = PathBuf::from("/x");
        c.out_dir = PathBuf::from("/y");
        let back = TrainConfig::parse(&c.to_file_string(), Path::new("/")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn hash_ignores_run_length_but_not_weights() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.max_steps += 100;
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.weights.class_td = 0.5;
        assert_ne!(a.hash(), b.hash());
    }
}
