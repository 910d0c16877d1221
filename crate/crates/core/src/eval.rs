//! Measurement: an oracle attribute classifier, a language model for
//! perplexity, noun-overlap content preservation, and the report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use numcore::{Adam, AdamConfig, ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{restore_params, Checkpoint, Kind};
use crate::config::TrainConfig;
use crate::data::{make_batches, AttributeLabel, Batch, Corpus, NounLexicon, Sentence, Vocab, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::fsio;
use crate::losses::label_nll;
use crate::net::{Classifier, LanguageModel, ModelConfig, TransferModel};
use crate::trainer::{META_DECODE_SLACK, META_MAX_LEN};

/// Optimization settings for the measurement models.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_maps: usize,
    pub filter_widths: Vec<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 1500,
            batch_size: 32,
            lr: 2e-3,
            seed: 11,
            clip_norm: 5.0,
            embed_dim: 64,
            hidden_dim: 64,
            feature_maps: 32,
            filter_widths: vec![3, 4, 5],
        }
    }
}

impl FitConfig {
    fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attr_dim: 1,
            filter_widths: self.filter_widths.clone(),
            feature_maps: self.feature_maps,
        }
    }
}

/// Shared mini-batch loop: `loss` builds a scalar on the tape for one batch.
fn fit<F>(store: &mut ParamStore, corpus: &Corpus, cfg: &FitConfig, loss: F) -> Result<()>
where
    F: Fn(&mut Tape, &numcore::Binding, &Batch) -> Result<numcore::Var>,
{
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        for batch in make_batches(corpus, cfg.batch_size, cfg.seed.wrapping_add(epoch))? {
            if step == cfg.steps {
                break;
            }
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let l = loss(&mut tape, &b, &batch)?;
            let v = tape.item(l);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: "fit",
                    value: v,
                    step,
                    dump: format!("batch tokens {:?}", batch.tokens),
                });
            }
            let grads = tape.backward(l)?;
            store.accumulate(&b, &grads)?;
            store.clip_grad_norm(cfg.clip_norm);
            adam.step(store)?;
            step += 1;
        }
        epoch += 1;
    }
    Ok(())
}

fn chunks(sentences: &[Sentence], size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
    sentences.chunks(size.max(1)).map(Batch::from_sentences)
}

/// Independently trained attribute classifier used only for measurement.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Classifier,
    pub vocab: Vocab,
    /// Held-out accuracy (percent) measured after training.
    pub held_out_accuracy: Option<f64>,
}

impl OracleClassifier {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Classifier::new(&mut store, "oracle", &config, &mut rng);
        OracleClassifier {
            config,
            store,
            net,
            vocab,
            held_out_accuracy: None,
        }
    }

    pub fn vocab_hash(&self) -> String {
        self.vocab.hash()
    }

    /// Sets the output layer to zero so every input scores `[0.5, 0.5]`.
    pub fn zero_output_layer(&mut self) {
        let (w, b) = self.net.output_layer();
        for id in [w, b] {
            self.store.get_mut(id).values_mut().fill(0.0);
        }
    }

    /// `[p(0), p(1)]` for every sentence, in order.
    pub fn probs(&self, sentences: &[Sentence]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(sentences.len());
        for batch in chunks(sentences, 64) {
            let batch = batch?;
            let mut tape = Tape::new();
            let b = self.store.bind_frozen(&mut tape);
            let p = self.net.classify_hard(&mut tape, &b, &batch)?;
            out.extend(tape.value(p).chunks(2).map(|r| [r[0], r[1]]));
        }
        Ok(out)
    }

    /// Argmax label; ties go to label 0.
    pub fn predict(&self, sentences: &[Sentence]) -> Result<Vec<AttributeLabel>> {
        Ok(self
            .probs(sentences)?
            .into_iter()
            .map(|p| if p[1] > p[0] { AttributeLabel::ONE } else { AttributeLabel::ZERO })
            .collect())
    }

    /// Percentage of `corpus` sentences whose own label is predicted.
    pub fn accuracy(&self, corpus: &Corpus) -> Result<f64> {
        let pairs: Vec<(Sentence, AttributeLabel)> =
            corpus.sentences.iter().map(|s| (s.clone(), s.label)).collect();
        sentiment_accuracy(&pairs, self)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        if let Some(a) = self.held_out_accuracy {
            meta.insert("held_out_accuracy".into(), a.to_string());
        }
        Checkpoint {
            kind: Kind::Oracle,
            model: self.config.clone(),
            params: self.store.clone(),
            adam: None,
            step: 0,
            best_val: None,
            bad_evals: 0,
            config_hash: String::new(),
            vocab: self.vocab.clone(),
            meta,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(&[Kind::Oracle])?;
        let mut o = OracleClassifier::new(ck.model.clone(), ck.vocab.clone(), 0);
        restore_params(&mut o.store, &ck.params)?;
        o.held_out_accuracy = ck.meta.get("held_out_accuracy").and_then(|s| s.parse().ok());
        Ok(o)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        OracleClassifier::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Supervised training on original labeled sentences only.
pub fn train_oracle(train: &Corpus, held_out: &Corpus, vocab: &Vocab, cfg: &FitConfig) -> Result<OracleClassifier> {
    if train.m() == 0 || train.n() == 0 {
        return Err(Error::Data("oracle training needs sentences of both labels".into()));
    }
    let mut o = OracleClassifier::new(cfg.model_config(vocab.len()), vocab.clone(), cfg.seed);
    let net = o.net.clone();
    fit(&mut o.store, train, cfg, |tape, b, batch| {
        let p = net.classify_hard(tape, b, batch)?;
        label_nll(tape, p, &batch.labels)
    })?;
    if !held_out.is_empty() {
        o.held_out_accuracy = Some(o.accuracy(held_out)?);
    }
    Ok(o)
}

/// Recurrent language model used only for perplexity.
#[derive(Debug, Clone)]
pub struct EvalLM {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: LanguageModel,
    pub vocab: Vocab,
    pub held_out_perplexity: Option<f64>,
}

impl EvalLM {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = LanguageModel::new(&mut store, &config, &mut rng);
        EvalLM {
            config,
            store,
            net,
            vocab,
            held_out_perplexity: None,
        }
    }

    pub fn vocab_hash(&self) -> String {
        self.vocab.hash()
    }

    /// Sets the output layer to zero so every step is uniform over the vocabulary.
    pub fn zero_output_layer(&mut self) {
        let (w, b) = self.net.output_layer();
        for id in [w, b] {
            self.store.get_mut(id).values_mut().fill(0.0);
        }
    }

    /// Per-sentence summed NLL and token counts (EOS included).
    pub fn sentence_nll(&self, sentences: &[Sentence]) -> Result<Vec<(f64, usize)>> {
        let mut out = Vec::with_capacity(sentences.len());
        for batch in chunks(sentences, 64) {
            let batch = batch?;
            let mut tape = Tape::new();
            let b = self.store.bind_frozen(&mut tape);
            let s = self.net.score(&mut tape, &b, &batch)?;
            out.extend(s.row_nll.into_iter().zip(s.row_tokens));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        if let Some(p) = self.held_out_perplexity {
            meta.insert("held_out_perplexity".into(), p.to_string());
        }
        Checkpoint {
            kind: Kind::Lm,
            model: self.config.clone(),
            params: self.store.clone(),
            adam: None,
            step: 0,
            best_val: None,
            bad_evals: 0,
            config_hash: String::new(),
            vocab: self.vocab.clone(),
            meta,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(&[Kind::Lm])?;
        let mut lm = EvalLM::new(ck.model.clone(), ck.vocab.clone(), 0);
        restore_params(&mut lm.store, &ck.params)?;
        lm.held_out_perplexity = ck.meta.get("held_out_perplexity").and_then(|s| s.parse().ok());
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        EvalLM::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Next-token training; the loss is the token-mean NLL of each batch.
pub fn train_lm(train: &Corpus, held_out: &Corpus, vocab: &Vocab, cfg: &FitConfig) -> Result<EvalLM> {
    if train.is_empty() {
        return Err(Error::Data("language model needs a nonempty corpus".into()));
    }
    let mut lm = EvalLM::new(cfg.model_config(vocab.len()), vocab.clone(), cfg.seed);
    let net = lm.net.clone();
    fit(&mut lm.store, train, cfg, |tape, b, batch| {
        let s = net.score(tape, b, batch)?;
        let tokens: usize = s.row_tokens.iter().sum();
        Ok(tape.scale(s.total, 1.0 / tokens as f64))
    })?;
    if !held_out.is_empty() {
        lm.held_out_perplexity = Some(perplexity(&held_out.sentences, &lm)?);
    }
    Ok(lm)
}

/// Percentage of `(sentence, target)` pairs the oracle labels as `target`.
pub fn sentiment_accuracy(pairs: &[(Sentence, AttributeLabel)], oracle: &OracleClassifier) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("sentiment accuracy of an empty list".into()));
    }
    let sentences: Vec<Sentence> = pairs.iter().map(|(s, _)| s.clone()).collect();
    let predicted = oracle.predict(&sentences)?;
    let hits = predicted.iter().zip(pairs).filter(|(p, (_, t))| *p == t).count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// Whether `transferred` keeps at least one lexicon noun of `original`.
/// Originals without nouns count as preserved.
pub fn preserves_content(original: &str, transferred: &str, lex: &NounLexicon) -> bool {
    let nouns: Vec<&str> = original.split_whitespace().filter(|w| lex.contains(w)).collect();
    nouns.is_empty() || transferred.split_whitespace().any(|w| nouns.contains(&w))
}

/// Percentage of `(original, transferred)` pairs that preserve content.
pub fn content_preservation<S: AsRef<str>>(pairs: &[(S, S)], lex: &NounLexicon) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("content preservation of an empty list".into()));
    }
    let kept = pairs
        .iter()
        .filter(|(o, t)| preserves_content(o.as_ref(), t.as_ref(), lex))
        .count();
    Ok(100.0 * kept as f64 / pairs.len() as f64)
}

/// `exp(total NLL / total tokens)`, counting one EOS per sentence.
pub fn perplexity(sentences: &[Sentence], lm: &EvalLM) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Data("perplexity of an empty list".into()));
    }
    let (nll, tokens) = lm
        .sentence_nll(sentences)?
        .into_iter()
        .fold((0.0, 0usize), |(a, n), (x, k)| (a + x, n + k));
    Ok((nll / tokens as f64).exp())
}

/// Anything that rewrites sentences toward target labels.
pub trait Transferer {
    fn vocab(&self) -> &Vocab;
    /// One token row per input row; rows are never empty.
    fn transfer(&self, batch: &Batch, to: &[AttributeLabel]) -> Result<Vec<Vec<usize>>>;
}

/// Trained model with greedy decoding bounded like the training decodes.
#[derive(Debug, Clone)]
pub struct NeuralTransfer {
    pub model: TransferModel,
    pub vocab: Vocab,
    pub max_len: usize,
    pub decode_slack: usize,
}

impl Transferer for NeuralTransfer {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn transfer(&self, batch: &Batch, to: &[AttributeLabel]) -> Result<Vec<Vec<usize>>> {
        let len = self.max_len.min(batch.width() + self.decode_slack);
        Ok(self.model.transfer_greedy(batch, to, len)?.tokens)
    }
}

/// Copies every input unchanged.
#[derive(Debug, Clone)]
pub struct IdentityTransfer {
    pub vocab: Vocab,
}

impl Transferer for IdentityTransfer {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn transfer(&self, batch: &Batch, _to: &[AttributeLabel]) -> Result<Vec<Vec<usize>>> {
        Ok((0..batch.rows()).map(|k| batch.row(k).to_vec()).collect())
    }
}

/// Checkpoint of the identity baseline over `vocab`.
pub fn identity_checkpoint(vocab: &Vocab) -> Checkpoint {
    Checkpoint {
        kind: Kind::Identity,
        model: ModelConfig::new(vocab.len()),
        params: ParamStore::new(),
        adam: None,
        step: 0,
        best_val: None,
        bad_evals: 0,
        config_hash: String::new(),
        vocab: vocab.clone(),
        meta: BTreeMap::new(),
    }
}

/// Rebuilds the transferer stored in `ck`.
pub fn load_transferer(ck: Checkpoint, max_len: usize, decode_slack: usize) -> Result<Box<dyn Transferer>> {
    match ck.kind {
        Kind::Identity => Ok(Box::new(IdentityTransfer { vocab: ck.vocab })),
        Kind::Transfer => {
            let mut model = TransferModel::new(ck.model.clone(), 0);
            restore_params(&mut model.store, &ck.params)?;
            Ok(Box::new(NeuralTransfer {
                model,
                vocab: ck.vocab,
                max_len,
                decode_slack,
            }))
        }
        other => Err(Error::Checkpoint(format!(
            "`{}` checkpoint cannot transfer text",
            other.name()
        ))),
    }
}

/// [`load_transferer`] with the decode bound recorded at training time.
pub fn transferer_from(ck: Checkpoint) -> Result<Box<dyn Transferer>> {
    let get = |key: &str, default: usize| -> Result<usize> {
        match ck.meta.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("meta `{key}` is not an integer: `{v}`"))),
        }
    };
    let max_len = get(META_MAX_LEN, DEFAULT_MAX_LEN)?;
    let slack = get(META_DECODE_SLACK, TrainConfig::default().decode_slack)?;
    load_transferer(ck, max_len, slack)
}

/// Transfers every sentence of `sentences` toward `to`, in input order.
pub fn transfer_all(
    t: &dyn Transferer,
    sentences: &[Sentence],
    to: &[AttributeLabel],
    batch_size: usize,
) -> Result<Vec<Sentence>> {
    if sentences.len() != to.len() {
        return Err(Error::Data("one target label per sentence is required".into()));
    }
    let mut out = Vec::with_capacity(sentences.len());
    for (chunk, labels) in sentences.chunks(batch_size.max(1)).zip(to.chunks(batch_size.max(1))) {
        let batch = Batch::from_sentences(chunk)?;
        for (tokens, &label) in t.transfer(&batch, labels)?.into_iter().zip(labels) {
            out.push(Sentence::new(tokens, label, t.vocab()));
        }
    }
    Ok(out)
}

/// One line of the pairs file.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub original: String,
    pub transferred: String,
    pub source: AttributeLabel,
    pub target: AttributeLabel,
}

impl PairRecord {
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.original, self.transferred, self.source, self.target)
    }
}

pub fn pairs_file(pairs: &[PairRecord]) -> String {
    pairs.iter().map(|p| p.line() + "\n").collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sentiment_accuracy: f64,
    pub content_preservation: f64,
    pub perplexity: f64,
    pub pairs: usize,
    pub to_label0: usize,
    pub to_label1: usize,
}

impl EvalReport {
    /// Three-metric table with one row per named system.
    pub fn table(rows: &[(&str, &EvalReport)]) -> String {
        let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$} | Sentiment | Content | Perplexity\n", "Model");
        let _ = writeln!(s, "{}-+-----------+---------+-----------", "-".repeat(w));
        for (name, r) in rows {
            let _ = writeln!(
                s,
                "{name:<w$} | {:>9.2} | {:>7.2} | {:>10.2}",
                r.sentiment_accuracy, r.content_preservation, r.perplexity
            );
        }
        s
    }

    pub fn to_kv(&self) -> String {
        format!(
            "sentiment_accuracy={}\ncontent_preservation={}\nperplexity={}\npairs={}\nto_label0={}\nto_label1={}\n",
            self.sentiment_accuracy, self.content_preservation, self.perplexity, self.pairs, self.to_label0, self.to_label1
        )
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad report line `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Data(format!("report lacks `{k}`")))
        };
        let f = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Data(format!("bad `{k}`"))) };
        let u = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Data(format!("bad `{k}`"))) };
        Ok(EvalReport {
            sentiment_accuracy: f("sentiment_accuracy")?,
            content_preservation: f("content_preservation")?,
            perplexity: f("perplexity")?,
            pairs: u("pairs")?,
            to_label0: u("to_label0")?,
            to_label1: u("to_label1")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub pairs: Vec<PairRecord>,
}

/// Transfers each test sentence to the flipped label and scores the outputs.
pub fn evaluate(
    model: &dyn Transferer,
    test: &Corpus,
    oracle: &OracleClassifier,
    lm: &EvalLM,
    lex: &NounLexicon,
) -> Result<Evaluation> {
    let expected = model.vocab().hash();
    for found in [oracle.vocab_hash(), lm.vocab_hash()] {
        if found != expected {
            return Err(Error::VocabMismatch { expected, found });
        }
    }
    if test.is_empty() {
        return Err(Error::Data("empty test corpus".into()));
    }
    let targets: Vec<AttributeLabel> = test.sentences.iter().map(|s| s.label.flip()).collect();
    let out = transfer_all(model, &test.sentences, &targets, 64)?;
    let labelled: Vec<(Sentence, AttributeLabel)> = out.iter().map(|s| (s.clone(), s.label)).collect();
    let texts: Vec<(&str, &str)> = test
        .sentences
        .iter()
        .zip(&out)
        .map(|(o, t)| (o.raw.as_str(), t.raw.as_str()))
        .collect();
    let report = EvalReport {
        sentiment_accuracy: sentiment_accuracy(&labelled, oracle)?,
        content_preservation: content_preservation(&texts, lex)?,
        perplexity: perplexity(&out, lm)?,
        pairs: out.len(),
        to_label0: targets.iter().filter(|l| **l == AttributeLabel::ZERO).count(),
        to_label1: targets.iter().filter(|l| **l == AttributeLabel::ONE).count(),
    };
    let pairs = test
        .sentences
        .iter()
        .zip(&out)
        .map(|(o, t)| PairRecord {
            original: o.raw.clone(),
            transferred: t.raw.clone(),
            source: o.label,
            target: t.label,
        })
        .collect();
    Ok(Evaluation { report, pairs })
}

/// Writes `<stem>.txt` (table), `<stem>.kv` and `<stem>.pairs.tsv` next to `report`.
pub fn write_outputs(ev: &Evaluation, report: &Path, name: &str) -> Result<()> {
    let table = EvalReport::table(&[(name, &ev.report)]);
    fsio::write_atomic(report, table.as_bytes())?;
    fsio::write_atomic(&report.with_extension("kv"), ev.report.to_kv().as_bytes())?;
    fsio::write_atomic(&report.with_extension("pairs.tsv"), pairs_file(&ev.pairs).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> NounLexicon {
        NounLexicon::new(["food", "burger", "facilities"])
    }

    #[test]
    fn content_judgments_on_table_rows() {
        let l = lex();
        assert!(preserves_content(
            "their food was definitely delicious",
            "their food was never disgusting",
            &l
        ));
        assert!(preserves_content("love the southwestern burger", "avoid the grease burger", &l));
        assert!(!preserves_content(
            "their food was definitely delicious",
            "there was so not spectacular",
            &l
        ));
        assert!(preserves_content("so good", "so bad", &l));
    }

    #[test]
    fn content_percentages() {
        let pairs = [
            ("their food was definitely delicious", "their food was never disgusting"),
            ("their food was definitely delicious", "there was so not spectacular"),
        ];
        assert_eq!(content_preservation(&pairs, &lex()).unwrap(), 50.0);
        let empty: [(&str, &str); 0] = [];
        assert!(content_preservation(&empty, &lex()).is_err());
    }

    #[test]
    fn report_round_trips_and_tabulates() {
        let r = EvalReport {
            sentiment_accuracy: 94.4,
            content_preservation: 77.1,
            perplexity: 80.1,
            pairs: 10,
            to_label0: 4,
            to_label1: 6,
        };
        assert_eq!(EvalReport::parse_kv(&r.to_kv()).unwrap(), r);
        let t = EvalReport::table(&[("ours", &r)]);
        assert!(t.lines().next().unwrap().contains("Sentiment | Content | Perplexity"));
        assert!(t.contains("94.40") && t.contains("77.10") && t.contains("80.10"));
    }

    #[test]
    fn pair_lines_are_tab_separated() {
        let p = PairRecord {
            original: "the facilities are amazing".into(),
            transferred: "the facilities are awful".into(),
            source: AttributeLabel::ONE,
            target: AttributeLabel::ZERO,
        };
        assert_eq!(p.line(), "the facilities are amazing\tthe facilities are awful\t1\t0");
    }
}
