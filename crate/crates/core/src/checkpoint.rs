//! Versioned binary checkpoints.
//!
//! Layout: `ATXCKPT\0`, a little-endian `u32` version, a `u64` header length,
//! a JSON header, then every parameter's values as little-endian `f64` in
//! header order, followed by the Adam first and second moments when present.

use std::collections::BTreeMap;
use std::path::Path;

use numcore::{Adam, AdamConfig, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::fsio;
use crate::net::ModelConfig;

pub const MAGIC: &[u8; 8] = b"ATXCKPT\0";
pub const VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Transfer,
    Identity,
    Oracle,
    Lm,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Transfer => "transfer",
            Kind::Identity => "identity",
            Kind::Oracle => "oracle",
            Kind::Lm => "lm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    vocab_size: usize,
    embed_dim: usize,
    hidden_dim: usize,
    attr_dim: usize,
    filter_widths: Vec<usize>,
    feature_maps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    /// Moments are allocated lazily on the first update.
    moments: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    model: ModelHeader,
    params: Vec<(String, Vec<usize>)>,
    adam: Option<AdamHeader>,
    step: u64,
    best_val: Option<f64>,
    bad_evals: usize,
    config_hash: String,
    vocab_hash: String,
    vocab: Vec<String>,
    meta: BTreeMap<String, String>,
}

/// Complete saved state of a model and, for training runs, its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    pub step: u64,
    pub best_val: Option<f64>,
    pub bad_evals: usize,
    pub config_hash: String,
    pub vocab: Vocab,
    /// Free-form annotations such as held-out scores.
    pub meta: BTreeMap<String, String>,
}

fn push_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

impl Checkpoint {
    pub fn vocab_hash(&self) -> String {
        self.vocab.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            model: ModelHeader {
                vocab_size: self.model.vocab_size,
                embed_dim: self.model.embed_dim,
                hidden_dim: self.model.hidden_dim,
                attr_dim: self.model.attr_dim,
                filter_widths: self.model.filter_widths.clone(),
                feature_maps: self.model.feature_maps,
            },
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                lr: a.config.lr,
                beta1: a.config.beta1,
                beta2: a.config.beta2,
                eps: a.config.eps,
                step: a.step_count(),
                moments: !a.moments().0.is_empty(),
            }),
            step: self.step,
            best_val: self.best_val,
            bad_evals: self.bad_evals,
            config_hash: self.config_hash.clone(),
            vocab_hash: self.vocab.hash(),
            vocab: self.vocab.words().to_vec(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 20 + 8 * self.params.num_values() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            push_f64s(&mut out, t.values());
        }
        if let Some(a) = &self.adam {
            let (m, v) = a.moments();
            for part in m.iter().chain(v) {
                push_f64s(&mut out, part);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let vocab = Vocab::from_words(header.vocab.iter().cloned())?;
        if vocab.words() != header.vocab.as_slice() || vocab.hash() != header.vocab_hash {
            return Err(Error::Checkpoint("embedded vocabulary is inconsistent".into()));
        }
        let mut params = ParamStore::new();
        for (name, shape) in &header.params {
            let n = shape.iter().product();
            let t = Tensor::new(shape.clone(), r.f64s(n)?)?;
            params.add(name.clone(), t);
        }
        let adam = match &header.adam {
            None => None,
            Some(h) => {
                let sizes: Vec<usize> = if h.moments {
                    params.iter().map(|(_, t)| t.numel()).collect()
                } else {
                    Vec::new()
                };
                let m = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
                let config = AdamConfig {
                    lr: h.lr,
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                };
                Some(Adam::from_parts(config, h.step, m, v))
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let m = header.model;
        Ok(Checkpoint {
            kind: header.kind,
            model: ModelConfig {
                vocab_size: m.vocab_size,
                embed_dim: m.embed_dim,
                hidden_dim: m.hidden_dim,
                attr_dim: m.attr_dim,
                filter_widths: m.filter_widths,
                feature_maps: m.feature_maps,
            },
            params,
            adam,
            step: header.step,
            best_val: header.best_val,
            bad_evals: header.bad_evals,
            config_hash: header.config_hash,
            vocab,
            meta: header.meta,
        })
    }

    /// Atomic write: a crash mid-save leaves any previous file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fsio::read_bytes(path)?)
    }

    /// Fails unless this checkpoint was built on `vocab`.
    pub fn expect_vocab(&self, vocab_hash: &str) -> Result<()> {
        let found = self.vocab.hash();
        if found != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: vocab_hash.to_string(),
                found,
            });
        }
        Ok(())
    }

    pub fn expect_kind(&self, kinds: &[Kind]) -> Result<()> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("unexpected checkpoint kind `{}`", self.kind.name())))
        }
    }
}

/// Copies `saved` into `target` after checking names and shapes line up.
pub fn restore_params(target: &mut ParamStore, saved: &ParamStore) -> Result<()> {
    if target.len() != saved.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            target.len(),
            saved.len()
        )));
    }
    for ((tn, tt), (sn, st)) in target.iter().zip(saved.iter()) {
        if tn != sn || tt.shape() != st.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{sn}` {:?} does not fit `{tn}` {:?}",
                st.shape(),
                tt.shape()
            )));
        }
    }
    *target = saved.clone();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a", Tensor::new([2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap());
        params.add("b", Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap());
        for id in params.ids().collect::<Vec<_>>() {
            let n = params.get(id).numel();
            params.get_mut(id).accumulate_grad(&vec![0.5; n]).unwrap();
        }
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params).unwrap();
        Checkpoint {
            kind: Kind::Transfer,
            model: ModelConfig::new(6),
            params,
            adam: Some(adam),
            step: 1,
            best_val: Some(0.75),
            bad_evals: 2,
            config_hash: "abc".into(),
            vocab: Vocab::from_words(["x", "y"]).unwrap(),
            meta: BTreeMap::from([("note".to_string(), "hi".to_string())]),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Checkpoint(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
    }

    #[test]
    fn vocab_mismatch_is_reported() {
        let c = sample();
        let other = Vocab::from_words(["x", "z"]).unwrap();
        assert!(matches!(c.expect_vocab(&other.hash()), Err(Error::VocabMismatch { .. })));
        c.expect_vocab(&c.vocab.hash()).unwrap();
    }

    #[test]
    fn restore_checks_layout() {
        let c = sample();
        let mut wrong = ParamStore::new();
        wrong.add("a", Tensor::zeros([4]).unwrap());
        wrong.add("b", Tensor::zeros([3]).unwrap());
        assert!(restore_params(&mut wrong, &c.params).is_err());
        let mut right = ParamStore::new();
        right.add("a", Tensor::zeros([2, 2]).unwrap());
        right.add("b", Tensor::zeros([3]).unwrap());
        restore_params(&mut right, &c.params).unwrap();
        assert_eq!(right, c.params);
    }
}
