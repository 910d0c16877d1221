//! Seeded train/valid/test splits of the two attribute corpora, plus the
//! vocabulary built from the training split.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{build_vocab, load_corpus, AttributeLabel, NounLexicon, TextCorpus};
use crate::error::{Error, Result};
use crate::fsio;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const META_FILE: &str = "meta.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LEXICON_FILE: &str = "nouns.txt";

/// `p/q/r` fractions for train, valid and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions([f64; 3]);

impl SplitFractions {
    pub fn new(f: [f64; 3]) -> Result<Self> {
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split fractions {f:?} must be nonnegative and sum to 1")));
        }
        Ok(SplitFractions(f))
    }

    /// Sizes for `n` lines; valid and test are rounded, train takes the rest.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let valid = (self.0[1] * n as f64).round() as usize;
        let test = ((self.0[2] * n as f64).round() as usize).min(n - valid.min(n));
        [n - valid.min(n) - test, valid.min(n), test]
    }
}

impl FromStr for SplitFractions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let bad = || Error::Config(format!("split `{s}` is not of the form p/q/r"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut f = [0.0; 3];
        for (x, p) in f.iter_mut().zip(&parts) {
            *x = p.trim().parse().map_err(|_| bad())?;
        }
        SplitFractions::new(f)
    }
}

impl fmt::Display for SplitFractions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    /// Label-0 sentences.
    pub neg: PathBuf,
    /// Label-1 sentences.
    pub pos: PathBuf,
    pub out: PathBuf,
    pub min_count: usize,
    pub split: SplitFractions,
    pub seed: u64,
    pub max_len: usize,
    /// Copied to `<out>/nouns.txt` when given.
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareReport {
    /// `counts[label][split]`.
    pub counts: [[usize; 3]; 2],
    pub vocab_size: usize,
    pub truncated: usize,
}

impl PrepareReport {
    pub fn to_kv(&self, opts: &PrepareOptions) -> String {
        let mut s = format!(
            "seed={}\nmin_count={}\nsplit={}\nmax_len={}\nvocab_size={}\ntruncated={}\n",
            opts.seed, opts.min_count, opts.split, opts.max_len, self.vocab_size, self.truncated
        );
        for (label, row) in self.counts.iter().enumerate() {
            for (name, n) in SPLITS.iter().zip(row) {
                s.push_str(&format!("{name}.{label}={n}\n"));
            }
        }
        s
    }
}

fn corpus_text(sentences: &[crate::data::TextSentence]) -> String {
    let mut s = String::new();
    for t in sentences {
        s.push_str(&t.words.join(" "));
        s.push('\n');
    }
    s
}

/// Splits one shuffled corpus per label into `[train, valid, test]`.
pub fn split_corpus(corpus: &TextCorpus, split: SplitFractions, seed: u64) -> [TextCorpus; 3] {
    let mut sentences = corpus.sentences.clone();
    sentences.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = split.counts(sentences.len());
    let test = sentences.split_off(a + b);
    let valid = sentences.split_off(a);
    [
        TextCorpus { sentences },
        TextCorpus { sentences: valid },
        TextCorpus { sentences: test },
    ]
}

/// Writes `<split>.<label>.txt` for every split, `vocab.txt`, `meta.txt`
/// and optionally `nouns.txt`. Both inputs are read before anything is written.
pub fn prepare(opts: &PrepareOptions) -> Result<PrepareReport> {
    let (neg, rn) = load_corpus(&opts.neg, AttributeLabel::ZERO, opts.max_len)?;
    let (pos, rp) = load_corpus(&opts.pos, AttributeLabel::ONE, opts.max_len)?;
    let lexicon = opts.lexicon.as_deref().map(NounLexicon::load).transpose()?;
    let parts = [
        split_corpus(&neg, opts.split, opts.seed),
        split_corpus(&pos, opts.split, opts.seed ^ 1),
    ];
    let vocab = build_vocab(&[&parts[0][0], &parts[1][0]], opts.min_count)?;
    let mut counts = [[0; 3]; 2];
    for (label, split) in parts.iter().enumerate() {
        for (i, c) in split.iter().enumerate() {
            counts[label][i] = c.len();
            let path = opts.out.join(format!("{}.{label}.txt", SPLITS[i]));
            fsio::write_atomic(&path, corpus_text(&c.sentences).as_bytes())?;
        }
    }
    vocab.save(&opts.out.join(VOCAB_FILE))?;
    if let Some(lex) = lexicon {
        lex.save(&opts.out.join(LEXICON_FILE))?;
    }
    let report = PrepareReport {
        counts,
        vocab_size: vocab.len(),
        truncated: rn.truncated.len() + rp.truncated.len(),
    };
    fsio::write_atomic(&opts.out.join(META_FILE), report.to_kv(opts).as_bytes())?;
    Ok(report)
}

/// The split a corpus directory was prepared with, read back from `meta.txt`.
pub fn read_meta(dir: &Path) -> Result<Vec<(String, String)>> {
    let text = fsio::read_to_string(&dir.join(META_FILE))?;
    Ok(crate::config::parse_pairs(&text)?.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_counts() {
        let s: SplitFractions = "0.8/0.1/0.1".parse().unwrap();
        assert_eq!(s.counts(100), [80, 10, 10]);
        assert_eq!(s.counts(7), [5, 1, 1]);
        assert_eq!(s.counts(1), [1, 0, 0]);
        assert_eq!(s.to_string(), "0.8/0.1/0.1");
        for bad in ["0.8/0.1", "0.5/0.5/0.5", "a/b/c", "1.2/-0.1/-0.1"] {
            assert!(bad.parse::<SplitFractions>().is_err(), "{bad}");
        }
    }
}
