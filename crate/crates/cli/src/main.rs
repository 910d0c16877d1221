//! `attrxfer`: data preparation, training, transfer and evaluation.
//!
//! Failures print one line to stderr, `error: code=<name> msg=<text>`, and
//! exit with the code listed in [`Failure::exit_code`].

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrxfer::checkpoint::Checkpoint;
use attrxfer::config::TrainConfig;
use attrxfer::data::{tokenize, AttributeLabel, NounLexicon, Sentence, Vocab, DEFAULT_MAX_LEN};
use attrxfer::eval::{
    self, perplexity, train_lm, train_oracle, transfer_all, transferer_from, EvalLM, FitConfig, OracleClassifier,
};
use attrxfer::prepare::{self, PrepareOptions, SplitFractions};
use attrxfer::trainer::{self, load_split};
use attrxfer::{fsio, gradcheck, Error};
use clap::{Parser, Subcommand};

/// Per-op tolerance for the finite-difference op suite.
const OP_TOL: f64 = 1e-4;
/// Tolerance for the end-to-end loss checks.
const LOSS_TOL: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "attrxfer", version, about = "Text attribute transfer with non-parallel corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split two corpora into train/valid/test and build the vocabulary.
    PrepareData {
        /// Label-1 (positive) sentences, one per line.
        #[arg(long)]
        pos: PathBuf,
        /// Label-0 (negative) sentences, one per line.
        #[arg(long)]
        neg: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Minimum training-split frequency for a vocabulary entry.
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        /// Train/valid/test fractions.
        #[arg(long, default_value = "0.8/0.1/0.1", value_parser = parse_split)]
        split: SplitFractions,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Longer lines are truncated.
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Noun lexicon copied to <out>/nouns.txt.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Train the transfer model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from <out_dir>/last.ckpt when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Rewrite each input line toward a target label.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input sentences, one per line; empty lines stay empty.
        #[arg(long = "in")]
        input: PathBuf,
        /// Target label, 0 or 1; inputs are taken to carry the other label.
        #[arg(long)]
        to_label: AttributeLabel,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a transfer checkpoint on a test split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding test.0.txt and test.1.txt.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// Table path; .kv and .pairs.tsv files are written beside it.
        #[arg(long)]
        report: PathBuf,
        /// Row name in the table.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Fit the attribute classifier used to measure transfer accuracy.
    TrainOracle {
        /// Prepared data directory (vocab, train and valid splits).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Fit the language model used to measure perplexity.
    TrainLm {
        /// Prepared data directory (vocab, train and valid splits).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Finite-difference checks of every op and every loss.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Random cases per op.
        #[arg(long, default_value_t = 3)]
        cases: usize,
    },
}

#[derive(clap::Args, Debug)]
struct FitArgs {
    #[arg(long, default_value_t = FitConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = FitConfig::default().steps)]
    steps: u64,
}

impl FitArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            seed: self.seed,
            steps: self.steps,
            ..FitConfig::default()
        }
    }
}

fn parse_split(s: &str) -> Result<SplitFractions, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn name_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Usage(_) => ("usage", 2),
            Failure::Gradcheck(_) => ("gradcheck", 8),
            Failure::Core(e) => match e {
                Error::Io { .. } => ("io", 3),
                Error::VocabMismatch { .. } | Error::ConfigMismatch { .. } => ("hash_mismatch", 4),
                Error::Config(_) => ("config", 5),
                Error::Data(_) | Error::Checkpoint(_) => ("data", 6),
                Error::NonFinite { .. } => ("non_finite", 7),
                Error::Num(_) => ("generic", 1),
            },
        }
    }

    fn exit_code(&self) -> u8 {
        self.name_and_code().1
    }

    fn message(&self) -> String {
        let m = match self {
            Failure::Usage(m) | Failure::Gradcheck(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        };
        m.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

type Outcome = Result<(), Failure>;

/// Fails with an I/O error before any work when an input is missing.
fn require(paths: &[&Path]) -> Outcome {
    for p in paths {
        if !p.exists() {
            let source = std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory");
            return Err(Error::Io {
                path: p.to_path_buf(),
                source,
            }
            .into());
        }
    }
    Ok(())
}

fn fit_data(dir: &Path) -> Result<(Vocab, attrxfer::data::Corpus, attrxfer::data::Corpus), Failure> {
    let vocab = Vocab::load(&dir.join(prepare::VOCAB_FILE))?;
    let train = load_split(dir, "train", &vocab, DEFAULT_MAX_LEN)?;
    let valid = load_split(dir, "valid", &vocab, DEFAULT_MAX_LEN)?;
    Ok((vocab, train, valid))
}

fn run(command: Command) -> Outcome {
    match command {
        Command::PrepareData {
            pos,
            neg,
            out,
            min_count,
            split,
            seed,
            max_len,
            lexicon,
        } => {
            let mut inputs = vec![pos.as_path(), neg.as_path()];
            inputs.extend(lexicon.as_deref());
            require(&inputs)?;
            let opts = PrepareOptions {
                neg,
                pos,
                out,
                min_count,
                split,
                seed,
                max_len,
                lexicon,
            };
            let report = prepare::prepare(&opts)?;
            let vocab = Vocab::load(&opts.out.join(prepare::VOCAB_FILE))?;
            eval::identity_checkpoint(&vocab).save(&opts.out.join(IDENTITY_CKPT))?;
            print!("{}", report.to_kv(&opts));
        }
        Command::Train { config, resume } => {
            require(&[&config])?;
            let cfg = TrainConfig::load(&config)?;
            let every = cfg.eval_interval.max(1);
            let (ck, log) = trainer::train_with(&cfg, resume, &mut |step, b| {
                if step % every == 0 {
                    println!("{}", b.log_line(step));
                }
            })?;
            println!(
                "done steps={} best_val={} stopped_early={} seconds={:.1} ckpt={}",
                log.steps.last().map_or(ck.step, |(s, _)| *s),
                ck.best_val.map_or("none".into(), |v| format!("{v:.6}")),
                log.stopped_early,
                log.seconds,
                cfg.out_dir.join(trainer::BEST_CKPT).display()
            );
        }
        Command::Transfer {
            ckpt,
            input,
            to_label,
            out,
        } => {
            require(&[&ckpt, &input])?;
            let model = transferer_from(Checkpoint::load(&ckpt)?)?;
            let text = fsio::read_to_string(&input)?;
            let vocab = model.vocab().clone();
            let lines: Vec<Vec<String>> = text.lines().map(tokenize).collect();
            let source = to_label.flip();
            let sentences: Vec<Sentence> = lines
                .iter()
                .filter(|w| !w.is_empty())
                .map(|w| {
                    let w = &w[..w.len().min(DEFAULT_MAX_LEN)];
                    Sentence::new(vocab.encode(w), source, &vocab)
                })
                .collect();
            let targets = vec![to_label; sentences.len()];
            let mut done = transfer_all(model.as_ref(), &sentences, &targets, 64)?.into_iter();
            let mut body = String::new();
            for w in &lines {
                if !w.is_empty() {
                    body.push_str(&done.next().expect("one output per sentence").raw);
                }
                body.push('\n');
            }
            fsio::write_atomic(&out, body.as_bytes())?;
        }
        Command::Evaluate {
            ckpt,
            test,
            oracle,
            lm,
            lexicon,
            report,
            name,
        } => {
            require(&[&ckpt, &test, &oracle, &lm, &lexicon])?;
            let model = transferer_from(Checkpoint::load(&ckpt)?)?;
            let oracle = OracleClassifier::load(&oracle)?;
            let lm = EvalLM::load(&lm)?;
            let lex = NounLexicon::load(&lexicon)?;
            let corpus = load_split(&test, "test", model.vocab(), DEFAULT_MAX_LEN)?;
            let ev = eval::evaluate(model.as_ref(), &corpus, &oracle, &lm, &lex)?;
            eval::write_outputs(&ev, &report, &name)?;
            print!("{}", eval::EvalReport::table(&[(name.as_str(), &ev.report)]));
        }
        Command::TrainOracle { corpus, out, fit } => {
            require(&[&corpus])?;
            let (vocab, train, valid) = fit_data(&corpus)?;
            let oracle = train_oracle(&train, &valid, &vocab, &fit.config())?;
            oracle.save(&out)?;
            println!("held_out_accuracy={:.4}", oracle.accuracy(&valid)?);
        }
        Command::TrainLm { corpus, out, fit } => {
            require(&[&corpus])?;
            let (vocab, train, valid) = fit_data(&corpus)?;
            let lm = train_lm(&train, &valid, &vocab, &fit.config())?;
            lm.save(&out)?;
            println!("held_out_perplexity={:.4}", perplexity(&valid.sentences, &lm)?);
        }
        Command::Gradcheck { seed, cases } => {
            let mut failed = Vec::new();
            for r in numcore::gradcheck::op_suite(seed, cases.max(1)).map_err(Error::from)? {
                let ok = r.max_rel_error < OP_TOL;
                println!("op={} cases={} max_rel_error={:.3e} {}", r.op, r.cases, r.max_rel_error, verdict(ok));
                if !ok {
                    failed.push(r.op);
                }
            }
            for r in gradcheck::loss_suite(seed)? {
                let ok = r.max_rel_error < LOSS_TOL;
                println!("loss={} value={:.6} max_rel_error={:.3e} {}", r.term, r.value, r.max_rel_error, verdict(ok));
                if !ok {
                    failed.push(r.term);
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Gradcheck(format!("failed: {}", failed.join(","))));
            }
        }
    }
    Ok(())
}

/// Written by `prepare-data` next to the vocabulary.
const IDENTITY_CKPT: &str = "identity.ckpt";

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let f = Failure::Usage(first.trim_start_matches("error:").trim().to_string());
            eprintln!("error: code=usage msg={}", f.message());
            return ExitCode::from(f.exit_code());
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: code={} msg={}", f.name_and_code().0, f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
