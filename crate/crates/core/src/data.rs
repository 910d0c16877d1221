//! Corpora, vocabulary, padded batches and noun lookup.
//!
//! Input text is pre-tokenized: one lowercase sentence per line, tokens
//! separated by whitespace.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsio;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;
const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const DEFAULT_MAX_LEN: usize = 20;

/// One of the two attribute values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeLabel(u8);

impl AttributeLabel {
    pub const ZERO: AttributeLabel = AttributeLabel(0);
    pub const ONE: AttributeLabel = AttributeLabel(1);

    pub fn new(value: u8) -> Result<Self> {
        match value {
            0 | 1 => Ok(AttributeLabel(value)),
            v => Err(Error::Data(format!("attribute label must be 0 or 1, got {v}"))),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// The other attribute value.
    pub fn flip(self) -> Self {
        AttributeLabel(1 - self.0)
    }
}

impl fmt::Display for AttributeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for AttributeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "0" | "neg" | "negative" => Ok(AttributeLabel::ZERO),
            "1" | "pos" | "positive" => Ok(AttributeLabel::ONE),
            other => Err(Error::Data(format!("unknown attribute label `{other}`"))),
        }
    }
}

/// A tokenized line before vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSentence {
    pub words: Vec<String>,
    pub label: AttributeLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextCorpus {
    pub sentences: Vec<TextSentence>,
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn count(&self, label: AttributeLabel) -> usize {
        self.sentences.iter().filter(|s| s.label == label).count()
    }

    pub fn m(&self) -> usize {
        self.count(AttributeLabel::ZERO)
    }

    pub fn n(&self) -> usize {
        self.count(AttributeLabel::ONE)
    }

    pub fn extend(&mut self, other: TextCorpus) {
        self.sentences.extend(other.sentences);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    pub skipped_empty: usize,
    /// 1-based line numbers that were cut to `max_len` tokens.
    pub truncated: Vec<usize>,
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Parses corpus text; empty lines are skipped, long lines truncated.
pub fn parse_corpus(text: &str, label: AttributeLabel, max_len: usize) -> (TextCorpus, LoadReport) {
    let mut corpus = TextCorpus::default();
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        report.lines += 1;
        let mut words = tokenize(line);
        if words.is_empty() {
            report.skipped_empty += 1;
            continue;
        }
        if words.len() > max_len {
            words.truncate(max_len);
            report.truncated.push(i + 1);
        }
        corpus.sentences.push(TextSentence { words, label });
    }
    (corpus, report)
}

pub fn load_corpus(path: &Path, label: AttributeLabel, max_len: usize) -> Result<(TextCorpus, LoadReport)> {
    let text = fsio::read_to_string(path)?;
    let (corpus, report) = parse_corpus(&text, label, max_len);
    if corpus.is_empty() {
        return Err(Error::Data(format!("{}: corpus has no sentences", path.display())));
    }
    Ok((corpus, report))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary over `words` in the given order, after the reserved ids.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids = HashMap::new();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocab token {w:?}")));
            }
            if ids.insert(w.clone(), tokens.len()).is_some() {
                return Err(Error::Data(format!("duplicate vocab token `{w}`")));
            }
            tokens.push(w);
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn sentence(&self, text: &TextSentence) -> Sentence {
        Sentence {
            tokens: self.encode(&text.words),
            label: text.label,
            raw: text.words.join(" "),
        }
    }

    pub fn index(&self, corpus: &TextCorpus) -> Corpus {
        Corpus {
            sentences: corpus.sentences.iter().map(|s| self.sentence(s)).collect(),
        }
    }

    /// Hex SHA-256 over the token list; identifies the id assignment.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One non-reserved token per line; line `k` (0-based) holds id `k + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in self.words() {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_words(text.lines().filter(|l| !l.is_empty()).map(str::trim_end))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsio::read_to_string(path)?)
    }
}

/// Tokens with frequency ≥ `min_count`, most frequent first, ties broken
/// lexicographically.
pub fn build_vocab(corpora: &[&TextCorpus], min_count: usize) -> Result<Vocab> {
    if corpora.iter().all(|c| c.is_empty()) {
        return Err(Error::Data("cannot build a vocabulary from empty corpora".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in corpora {
        for s in &c.sentences {
            for w in &s.words {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::from_words(kept.into_iter().map(|(w, _)| w))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    pub label: AttributeLabel,
    pub raw: String,
}

impl Sentence {
    pub fn new(tokens: Vec<usize>, label: AttributeLabel, vocab: &Vocab) -> Self {
        let raw = vocab.decode(&tokens);
        Sentence { tokens, label, raw }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.raw.split_whitespace()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn count(&self, label: AttributeLabel) -> usize {
        self.sentences.iter().filter(|s| s.label == label).count()
    }

    pub fn m(&self) -> usize {
        self.count(AttributeLabel::ZERO)
    }

    pub fn n(&self) -> usize {
        self.count(AttributeLabel::ONE)
    }

    pub fn with_label(&self, label: AttributeLabel) -> Corpus {
        Corpus {
            sentences: self.sentences.iter().filter(|s| s.label == label).cloned().collect(),
        }
    }
}

/// Padded mini-batch. Row `k` holds `lengths[k]` real tokens followed by PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub mask: Vec<Vec<f64>>,
    pub labels: Vec<AttributeLabel>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_sentences<'a, I>(sentences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let rows: Vec<&Sentence> = sentences.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(s) = rows.iter().find(|s| s.is_empty()) {
            return Err(Error::Data(format!("empty sentence in batch: {:?}", s.raw)));
        }
        let width = rows.iter().map(|s| s.len()).max().unwrap();
        let mut batch = Batch {
            tokens: Vec::with_capacity(rows.len()),
            mask: Vec::with_capacity(rows.len()),
            labels: Vec::with_capacity(rows.len()),
            lengths: Vec::with_capacity(rows.len()),
        };
        for s in rows {
            let mut t = s.tokens.clone();
            t.resize(width, PAD);
            let mut m = vec![1.0; s.len()];
            m.resize(width, 0.0);
            batch.tokens.push(t);
            batch.mask.push(m);
            batch.labels.push(s.label);
            batch.lengths.push(s.len());
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn width(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn flipped_labels(&self) -> Vec<AttributeLabel> {
        self.labels.iter().map(|l| l.flip()).collect()
    }

    /// Unpadded tokens of row `k`.
    pub fn row(&self, k: usize) -> &[usize] {
        &self.tokens[k][..self.lengths[k]]
    }
}

/// Seeded permutation of `0..n` cut into chunks of `l`; the last chunk may
/// be short. `l > n` yields a single chunk of size `n`.
pub fn batch_indices(n: usize, l: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.chunks(l.max(1)).map(<[usize]>::to_vec).collect()
}

/// One epoch of shuffled batches over `corpus`.
pub fn make_batches(corpus: &Corpus, l: usize, seed: u64) -> Result<Vec<Batch>> {
    if l == 0 {
        return Err(Error::Data("batch size must be at least 1".into()));
    }
    batch_indices(corpus.len(), l, seed)
        .into_iter()
        .map(|chunk| Batch::from_sentences(chunk.iter().map(|&i| &corpus.sentences[i])))
        .collect()
}

/// Closed set of surface tokens treated as nouns.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NounLexicon {
    words: BTreeSet<String>,
}

impl NounLexicon {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        NounLexicon {
            words: words.into_iter().map(Into::into).collect(),
        }
    }

    pub fn parse(text: &str) -> Self {
        Self::new(text.split_whitespace())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&fsio::read_to_string(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        fsio::write_atomic(path, s.as_bytes())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Vocabulary ids of the lexicon words present in `vocab`.
    pub fn ids(&self, vocab: &Vocab) -> BTreeSet<usize> {
        self.words.iter().filter_map(|w| vocab.get(w)).collect()
    }
}

/// Positions of `sentence` whose surface token is a lexicon noun.
pub fn nouns_of(sentence: &Sentence, lex: &NounLexicon) -> Vec<usize> {
    sentence
        .words()
        .enumerate()
        .filter(|(_, w)| lex.contains(w))
        .map(|(i, _)| i)
        .collect()
}
