use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attrxfer::data::AttributeLabel;
use attrxfer::synth;
use tempfile::TempDir;

fn attrxfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrxfer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn assert_error(o: &Output, exit: i32, name: &str) {
    assert_eq!(code(o), exit, "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "one error line expected, got {err:?}");
    assert!(lines[0].starts_with(&format!("error: code={name} msg=")), "{err}");
}

/// Writes `neg.txt`, `pos.txt` and `nouns.txt` with `per_label` lines each.
fn raw_corpus(dir: &Path, per_label: usize) -> (PathBuf, PathBuf, PathBuf) {
    let text = synth::corpus(per_label, 5);
    let mut files = [String::new(), String::new()];
    for s in &text.sentences {
        let k = (s.label == AttributeLabel::ONE) as usize;
        files[k].push_str(&s.words.join(" "));
        files[k].push('\n');
    }
    let (neg, pos, lex) = (dir.join("neg.txt"), dir.join("pos.txt"), dir.join("nouns.txt"));
    fs::write(&neg, &files[0]).unwrap();
    fs::write(&pos, &files[1]).unwrap();
    fs::write(&lex, synth::NOUNS.join("\n") + "\n").unwrap();
    (neg, pos, lex)
}

fn prepare(dir: &Path, per_label: usize, out: &Path, seed: &str) -> Output {
    let (neg, pos, lex) = raw_corpus(dir, per_label);
    attrxfer(&[
        "prepare-data",
        "--pos",
        p(&pos),
        "--neg",
        p(&neg),
        "--out",
        p(out),
        "--split",
        "0.8/0.1/0.1",
        "--seed",
        seed,
        "--lexicon",
        p(&lex),
    ])
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn small_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let cfg = dir.join("train.cfg");
    let text = format!(
        "data_dir = {}\nout_dir = {}\nmax_steps = 3\nbatch_size = 8\nembed_dim = 8\nhidden_dim = 8\n\
         attr_dim = 2\nfeature_maps = 4\neval_interval = 2\ncheckpoint_interval = 2\n{extra}",
        data.display(),
        dir.join("run").display()
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn prepare_data_splits_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = prepare(tmp.path(), 100, &a, "3");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for label in 0..2 {
        assert_eq!(line_count(&a.join(format!("train.{label}.txt"))), 80);
        assert_eq!(line_count(&a.join(format!("valid.{label}.txt"))), 10);
        assert_eq!(line_count(&a.join(format!("test.{label}.txt"))), 10);
    }
    let meta = fs::read_to_string(a.join("meta.txt")).unwrap();
    assert!(meta.contains("train.0=80") && meta.contains("test.1=10"), "{meta}");
    assert!(a.join("vocab.txt").exists() && a.join("nouns.txt").exists());

    assert_eq!(code(&prepare(tmp.path(), 100, &b, "3")), 0);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = attrxfer(&["prepare-data", "--pos", "x", "--neg", "y", "--out", p(&out), "--split", "0.5/0.5/0.5"]);
    assert_error(&o, 2, "usage");
    assert!(!out.exists());
    assert_error(&attrxfer(&["gradcheck", "--bogus"]), 2, "usage");
    assert_error(&attrxfer(&["no-such-command"]), 2, "usage");
    assert_eq!(code(&attrxfer(&["--help"])), 0);
}

#[test]
fn help_documents_every_subcommand() {
    let help = stdout(&attrxfer(&["--help"]));
    for cmd in ["prepare-data", "train", "transfer", "evaluate", "train-oracle", "train-lm", "gradcheck"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
    let help = stdout(&attrxfer(&["transfer", "--help"]));
    for flag in ["--ckpt", "--in", "--to-label", "--out"] {
        assert!(help.contains(flag), "{flag} missing");
    }
}

#[test]
fn missing_input_exits_3_before_writing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let missing = tmp.path().join("missing.txt");
    let o = attrxfer(&["prepare-data", "--pos", p(&missing), "--neg", p(&missing), "--out", p(&out)]);
    assert_error(&o, 3, "io");
    assert!(!out.exists());
}

#[test]
fn malformed_config_exits_5() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "lambda1 = -1\n").unwrap();
    assert_error(&attrxfer(&["train", "--config", p(&cfg)]), 5, "config");
    fs::write(&cfg, "not a pair\n").unwrap();
    assert_error(&attrxfer(&["train", "--config", p(&cfg)]), 5, "config");
}

#[test]
fn gradcheck_passes_on_fixed_seed() {
    let o = attrxfer(&["gradcheck", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("op=")).count(), numcore::gradcheck::OPS.len());
    assert_eq!(lines.iter().filter(|l| l.starts_with("loss=")).count(), 7);
    assert!(lines.iter().all(|l| l.ends_with(" ok")), "{out}");
}

#[test]
fn train_transfer_evaluate_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&prepare(tmp.path(), 60, &data, "1")), 0);
    let cfg = small_config(tmp.path(), &data, "");

    let o = attrxfer(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = tmp.path().join("run");
    for f in ["best.ckpt", "last.ckpt", "train_log.csv", "valid_log.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(line_count(&run.join("train_log.csv")), 4);

    // Resuming under a different configuration is a hash mismatch.
    let changed = small_config(tmp.path(), &data, "lr = 0.01\n");
    assert_error(&attrxfer(&["train", "--config", p(&changed), "--resume"]), 4, "hash_mismatch");

    let input = tmp.path().join("in.txt");
    fs::write(&input, "the facilities are amazing\n\nmy food is bad\n").unwrap();
    let output = tmp.path().join("out.txt");
    let ckpt = run.join("best.ckpt");
    let o = attrxfer(&["transfer", "--ckpt", p(&ckpt), "--in", p(&input), "--to-label", "0", "--out", p(&output)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<String> = fs::read_to_string(&output).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert!(!lines[0].is_empty() && lines[1].is_empty() && !lines[2].is_empty());

    let (oracle, lm) = (tmp.path().join("oracle.ckpt"), tmp.path().join("lm.ckpt"));
    let o = attrxfer(&["train-oracle", "--corpus", p(&data), "--out", p(&oracle), "--steps", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("held_out_accuracy="));
    let o = attrxfer(&["train-lm", "--corpus", p(&data), "--out", p(&lm), "--steps", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("held_out_perplexity="));

    let report = tmp.path().join("report.txt");
    let lex = data.join("nouns.txt");
    let identity = data.join("identity.ckpt");
    let args = |ck: &Path| {
        vec![
            "evaluate".to_string(),
            "--ckpt".into(),
            p(ck).into(),
            "--test".into(),
            p(&data).into(),
            "--oracle".into(),
            p(&oracle).into(),
            "--lm".into(),
            p(&lm).into(),
            "--lexicon".into(),
            p(&lex).into(),
            "--report".into(),
            p(&report).into(),
        ]
    };
    let o = Command::new(env!("CARGO_BIN_EXE_attrxfer")).args(args(&identity)).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let kv = attrxfer::eval::EvalReport::parse_kv(&fs::read_to_string(report.with_extension("kv")).unwrap()).unwrap();
    assert_eq!(kv.content_preservation, 100.0);
    assert_eq!(kv.pairs, 12);
    assert_eq!(line_count(&report.with_extension("pairs.tsv")), 12);

    let o = Command::new(env!("CARGO_BIN_EXE_attrxfer")).args(args(&ckpt)).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // An oracle over another vocabulary is rejected.
    let other = tmp.path().join("other");
    fs::create_dir_all(&other).unwrap();
    let other_data = other.join("data");
    let (neg, pos, _) = raw_corpus(&other, 60);
    fs::write(&neg, fs::read_to_string(&neg).unwrap() + "zebra is calm\n").unwrap();
    let o = attrxfer(&["prepare-data", "--pos", p(&pos), "--neg", p(&neg), "--out", p(&other_data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let other_oracle = other.join("oracle.ckpt");
    let o = attrxfer(&["train-oracle", "--corpus", p(&other_data), "--out", p(&other_oracle), "--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut bad = args(&identity);
    bad[6] = p(&other_oracle).into();
    let o = Command::new(env!("CARGO_BIN_EXE_attrxfer")).args(bad).output().unwrap();
    assert_error(&o, 4, "hash_mismatch");
}

#[test]
fn divergent_training_exits_7() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&prepare(tmp.path(), 20, &data, "1")), 0);
    let cfg = small_config(tmp.path(), &data, "lr = 1e308\nclip_norm = 1e308\n");
    assert_error(&attrxfer(&["train", "--config", p(&cfg)]), 7, "non_finite");
}
