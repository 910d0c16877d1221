//! Joint optimization of encoder, decoder and classifier.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use numcore::{Adam, AdamConfig, Tape};

use crate::checkpoint::{restore_params, Checkpoint, Kind};
use crate::config::TrainConfig;
use crate::data::{load_corpus, make_batches, AttributeLabel, Batch, Corpus, NounLexicon, Vocab};
use crate::error::{Error, Result};
use crate::fsio;
use crate::losses::{forward_losses, LossBreakdown, LossWeights};
use crate::net::TransferModel;

pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VALID_LOG: &str = "valid_log.csv";
/// Checkpoint meta keys carrying the decode bound used in training.
pub const META_MAX_LEN: &str = "max_len";
pub const META_DECODE_SLACK: &str = "decode_slack";
pub const VALID_HEADER: &str = "step,total";

/// Vocabulary, splits and noun ids for one training run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub vocab: Vocab,
    pub train: Corpus,
    pub valid: Corpus,
    pub nouns: BTreeSet<usize>,
}

/// Reads `<dir>/<split>.0.txt` and `<dir>/<split>.1.txt` as one corpus.
pub fn load_split(dir: &Path, split: &str, vocab: &Vocab, max_len: usize) -> Result<Corpus> {
    let mut sentences = Vec::new();
    for label in [AttributeLabel::ZERO, AttributeLabel::ONE] {
        let path = dir.join(format!("{split}.{label}.txt"));
        let (text, _) = load_corpus(&path, label, max_len)?;
        sentences.extend(vocab.index(&text).sentences);
    }
    Ok(Corpus { sentences })
}

impl TrainData {
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let vocab = Vocab::load(&config.data_dir.join("vocab.txt"))?;
        let train = load_split(&config.data_dir, "train", &vocab, config.max_len)?;
        let valid = load_split(&config.data_dir, "valid", &vocab, config.max_len)?;
        let lex = NounLexicon::load(&config.lexicon_path())?;
        Ok(TrainData {
            nouns: lex.ids(&vocab),
            vocab,
            train,
            valid,
        })
    }

    fn check(&self) -> Result<()> {
        if self.train.m() == 0 || self.train.n() == 0 {
            return Err(Error::Data("training corpus needs sentences of both labels".into()));
        }
        Ok(())
    }
}

/// Soft decodes run at most this many steps for `batch`.
pub fn decode_len(config: &TrainConfig, batch: &Batch) -> usize {
    config.max_len.min(batch.width() + config.decode_slack)
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Forward pass, one clipped joint Adam update, and the step's loss values.
pub fn train_step(
    model: &mut TransferModel,
    adam: &mut Adam,
    batch: &Batch,
    nouns: &BTreeSet<usize>,
    config: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let vars = forward_losses(&mut tape, &b, model, batch, nouns, decode_len(config, batch))?;
    let breakdown = vars.breakdown(&tape, &config.weights)?;
    if let Some((term, value)) = breakdown.non_finite() {
        return Err(Error::NonFinite {
            term,
            value,
            step,
            dump: format!("{breakdown}; batch tokens {:?}", batch.tokens),
        });
    }
    let total = vars.weighted_total(&mut tape, &config.weights)?;
    let grads = tape.backward(total)?;
    model.store.accumulate(&b, &grads)?;
    model.store.clip_grad_norm(config.clip_norm);
    adam.step(&mut model.store)?;
    Ok(breakdown)
}

/// Mean weighted total over `corpus` in file order, without updating
/// anything. `step` only labels a non-finite error.
pub fn validation_loss(
    model: &TransferModel,
    corpus: &Corpus,
    nouns: &BTreeSet<usize>,
    config: &TrainConfig,
    step: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut rows = 0usize;
    for chunk in corpus.sentences.chunks(config.batch_size) {
        let batch = Batch::from_sentences(chunk)?;
        let mut tape = Tape::new();
        let b = model.store.bind_frozen(&mut tape);
        let vars = forward_losses(&mut tape, &b, model, &batch, nouns, decode_len(config, &batch))?;
        let bd = vars.breakdown(&tape, &config.weights)?;
        if let Some((term, value)) = bd.non_finite() {
            return Err(Error::NonFinite {
                term,
                value,
                step,
                dump: format!("validation: {bd}"),
            });
        }
        sum += bd.total * batch.rows() as f64;
        rows += batch.rows();
    }
    if rows == 0 {
        return Err(Error::Data("empty validation corpus".into()));
    }
    Ok(sum / rows as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, losses)` with steps strictly increasing from 1.
    pub steps: Vec<(u64, LossBreakdown)>,
    pub validation: Vec<(u64, f64)>,
    pub stopped_early: bool,
    /// Wall-clock seconds spent in this process.
    pub seconds: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LossBreakdown::CSV_HEADER);
        s.push('\n');
        for (step, b) in &self.steps {
            s.push_str(&b.log_line(*step));
            s.push('\n');
        }
        s
    }

    pub fn validation_csv(&self) -> String {
        let mut s = format!("{VALID_HEADER}\n");
        for (step, v) in &self.validation {
            s.push_str(&format!("{step},{v}\n"));
        }
        s
    }

    /// Records up to and including `step` from previously written logs.
    fn resume_from(dir: &Path, step: u64) -> Result<Self> {
        let mut log = TrainLog::default();
        let train = dir.join(TRAIN_LOG);
        if train.exists() {
            for line in fsio::read_to_string(&train)?.lines().skip(1) {
                let (s, b) = LossBreakdown::parse_log_line(line)?;
                if s <= step {
                    log.steps.push((s, b));
                }
            }
        }
        let valid = dir.join(VALID_LOG);
        if valid.exists() {
            for line in fsio::read_to_string(&valid)?.lines().skip(1) {
                let bad = || Error::Data(format!("bad validation log line `{line}`"));
                let (s, v) = line.split_once(',').ok_or_else(bad)?;
                let s: u64 = s.parse().map_err(|_| bad())?;
                if s <= step {
                    log.validation.push((s, v.parse().map_err(|_| bad())?));
                }
            }
        }
        Ok(log)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fsio::write_atomic(&dir.join(TRAIN_LOG), self.to_csv().as_bytes())?;
        fsio::write_atomic(&dir.join(VALID_LOG), self.validation_csv().as_bytes())
    }
}

/// Mutable training state: model, optimizer and early-stopping counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: TransferModel,
    pub adam: Adam,
    pub step: u64,
    pub best_val: Option<f64>,
    pub bad_evals: usize,
    pub vocab: Vocab,
    pub nouns: BTreeSet<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocab, nouns: BTreeSet<usize>) -> Result<Self> {
        config.validate()?;
        let model = TransferModel::new(config.model_config(vocab.len()), config.seed);
        let adam = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        Ok(Trainer {
            config,
            model,
            adam,
            step: 0,
            best_val: None,
            bad_evals: 0,
            vocab,
            nouns,
        })
    }

    /// Continues a run saved by [`Trainer::checkpoint`]. The config must hash
    /// the same as the original apart from run-length and path keys.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint, nouns: BTreeSet<usize>) -> Result<Self> {
        ckpt.expect_kind(&[Kind::Transfer])?;
        if ckpt.config_hash != config.hash() {
            return Err(Error::ConfigMismatch {
                expected: config.hash(),
                found: ckpt.config_hash,
            });
        }
        let mut t = Trainer::new(config, ckpt.vocab.clone(), nouns)?;
        restore_params(&mut t.model.store, &ckpt.params)?;
        t.adam = ckpt
            .adam
            .ok_or_else(|| Error::Checkpoint("training checkpoint lacks optimizer state".into()))?;
        t.step = ckpt.step;
        t.best_val = ckpt.best_val;
        t.bad_evals = ckpt.bad_evals;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: Kind::Transfer,
            model: self.model.config.clone(),
            params: self.model.store.clone(),
            adam: Some(self.adam.clone()),
            step: self.step,
            best_val: self.best_val,
            bad_evals: self.bad_evals,
            config_hash: self.config.hash(),
            vocab: self.vocab.clone(),
            meta: [
                (META_MAX_LEN.to_string(), self.config.max_len.to_string()),
                (META_DECODE_SLACK.to_string(), self.config.decode_slack.to_string()),
            ]
            .into(),
        }
    }

    pub fn weights(&self) -> &LossWeights {
        &self.config.weights
    }

    /// One update on `batch`; increments the step counter.
    pub fn step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let b = train_step(
            &mut self.model,
            &mut self.adam,
            batch,
            &self.nouns,
            &self.config,
            self.step + 1,
        )?;
        self.step += 1;
        Ok(b)
    }

    /// Runs until `max_steps` or early stopping, writing checkpoints and
    /// logs under `out_dir`. `log` holds records from any earlier segment.
    /// Returns the best-validation checkpoint, or the last one when no
    /// validation ran.
    pub fn run(
        &mut self,
        data: &TrainData,
        mut log: TrainLog,
        on_step: &mut dyn FnMut(u64, &LossBreakdown),
    ) -> Result<(Checkpoint, TrainLog)> {
        data.check()?;
        if data.vocab.hash() != self.vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: self.vocab.hash(),
                found: data.vocab.hash(),
            });
        }
        let start = Instant::now();
        let out = self.config.out_dir.clone();
        let l = self.config.batch_size;
        let per_epoch = data.train.len().div_ceil(l).max(1) as u64;
        let mut cached: Option<(u64, Vec<Batch>)> = None;
        let mut best: Option<Checkpoint> = if self.best_val.is_some() && out.join(BEST_CKPT).exists() {
            Some(Checkpoint::load(&out.join(BEST_CKPT))?)
        } else {
            None
        };
        while self.step < self.config.max_steps {
            if self.config.patience > 0 && self.bad_evals >= self.config.patience {
                log.stopped_early = true;
                break;
            }
            let epoch = self.step / per_epoch;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let batches = make_batches(&data.train, l, epoch_seed(self.config.seed, epoch))?;
                cached = Some((epoch, batches));
            }
            let batch = &cached.as_ref().expect("filled above").1[(self.step % per_epoch) as usize];
            let bd = self.step(batch)?;
            on_step(self.step, &bd);
            log.steps.push((self.step, bd));

            let ev = self.config.eval_interval;
            if ev > 0 && self.step % ev == 0 && !data.valid.is_empty() {
                let v = validation_loss(&self.model, &data.valid, &self.nouns, &self.config, self.step)?;
                log.validation.push((self.step, v));
                if self.best_val.is_none_or(|b| v < b) {
                    self.best_val = Some(v);
                    self.bad_evals = 0;
                    let ck = self.checkpoint();
                    ck.save(&out.join(BEST_CKPT))?;
                    best = Some(ck);
                } else {
                    self.bad_evals += 1;
                }
            }
            let ci = self.config.checkpoint_interval;
            if ci > 0 && self.step % ci == 0 {
                self.checkpoint().save(&out.join(LAST_CKPT))?;
                log.write(&out)?;
            }
        }
        let last = self.checkpoint();
        last.save(&out.join(LAST_CKPT))?;
        log.write(&out)?;
        log.seconds += start.elapsed().as_secs_f64();
        Ok((best.unwrap_or(last), log))
    }
}

/// Trains from `config`, resuming from `<out_dir>/last.ckpt` when `resume` is set.
pub fn train(config: &TrainConfig, resume: bool) -> Result<(Checkpoint, TrainLog)> {
    train_with(config, resume, &mut |_, _| {})
}

pub fn train_with(
    config: &TrainConfig,
    resume: bool,
    on_step: &mut dyn FnMut(u64, &LossBreakdown),
) -> Result<(Checkpoint, TrainLog)> {
    let data = TrainData::load(config)?;
    let last: PathBuf = config.out_dir.join(LAST_CKPT);
    let (mut trainer, log) = if resume && last.exists() {
        let ck = Checkpoint::load(&last)?;
        ck.expect_vocab(&data.vocab.hash())?;
        let log = TrainLog::resume_from(&config.out_dir, ck.step)?;
        (Trainer::resume(config.clone(), ck, data.nouns.clone())?, log)
    } else {
        (
            Trainer::new(config.clone(), data.vocab.clone(), data.nouns.clone())?,
            TrainLog::default(),
        )
    };
    trainer.run(&data, log, on_step)
}
