#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use attrxfer::config::TrainConfig;
use attrxfer::data::AttributeLabel;
use attrxfer::prepare::{self, PrepareOptions};
use attrxfer::synth;

/// Writes a templated corpus with `per_label` sentences per attribute and
/// prepares it into `<dir>/data` with an 80/10/10 split.
pub fn prepared_corpus(dir: &Path, per_label: usize, seed: u64) -> PathBuf {
    let text = synth::corpus(per_label, seed);
    let mut files = [String::new(), String::new()];
    for s in &text.sentences {
        let k = (s.label == AttributeLabel::ONE) as usize;
        files[k].push_str(&s.words.join(" "));
        files[k].push('\n');
    }
    let (neg, pos, lex) = (dir.join("neg.txt"), dir.join("pos.txt"), dir.join("lexicon.txt"));
    fs::write(&neg, &files[0]).unwrap();
    fs::write(&pos, &files[1]).unwrap();
    fs::write(&lex, synth::NOUNS.join("\n") + "\n").unwrap();
    let out = dir.join("data");
    prepare::prepare(&PrepareOptions {
        neg,
        pos,
        out: out.clone(),
        min_count: 1,
        split: "0.8/0.1/0.1".parse().unwrap(),
        seed,
        max_len: 20,
        lexicon: Some(lex),
    })
    .unwrap();
    out
}

/// A small, fast configuration over `data`, writing into `out`.
pub fn small_config(data: &Path, out: &Path, max_steps: u64) -> TrainConfig {
    TrainConfig {
        data_dir: data.to_path_buf(),
        out_dir: out.to_path_buf(),
        max_steps,
        batch_size: 8,
        embed_dim: 8,
        hidden_dim: 8,
        attr_dim: 2,
        feature_maps: 4,
        eval_interval: 4,
        checkpoint_interval: 4,
        ..TrainConfig::default()
    }
}
