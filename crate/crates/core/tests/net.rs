use attrxfer::data::{AttributeLabel, Batch, Sentence, Vocab, EOS};
use attrxfer::gradcheck::toy;
use attrxfer::net::{align, AttentionMap, SoftSequence, TransferModel};
use numcore::Tape;

fn probs(model: &TransferModel, batch: &Batch) -> Vec<f64> {
    let mut tape = Tape::new();
    let b = model.store.bind_frozen(&mut tape);
    let p = model.classifier.classify_hard(&mut tape, &b, batch).unwrap();
    tape.value(p).to_vec()
}

#[test]
fn encoder_states_have_batch_time_hidden_shape() {
    let t = toy(1).unwrap();
    let mut tape = Tape::new();
    let b = t.model.store.bind_frozen(&mut tape);
    let hs = t.model.encoder.encode(&mut tape, &b, &t.batch, &t.batch.labels).unwrap();
    assert_eq!(tape.shape(hs.states), &[2, 3, 3]);
    assert_eq!(tape.shape(hs.last), &[2, 3]);
    assert_eq!((hs.rows(), hs.steps()), (2, 3));
    assert_eq!(hs.row_states(&tape, 0).len(), 2);
}

#[test]
fn padded_positions_keep_the_last_real_state() {
    let t = toy(1).unwrap();
    let mut tape = Tape::new();
    let b = t.model.store.bind_frozen(&mut tape);
    let hs = t.model.encoder.encode(&mut tape, &b, &t.batch, &t.batch.labels).unwrap();
    let row0 = hs.row_states(&tape, 0);
    let last = tape.value(hs.last)[..3].to_vec();
    assert_eq!(row0[1], last);
}

#[test]
fn encoding_depends_on_the_attribute_label() {
    let t = toy(2).unwrap();
    let mut tape = Tape::new();
    let b = t.model.store.bind_frozen(&mut tape);
    let a = t.model.encoder.encode(&mut tape, &b, &t.batch, &t.batch.labels).unwrap();
    let flipped = t.batch.flipped_labels();
    let c = t.model.encoder.encode(&mut tape, &b, &t.batch, &flipped).unwrap();
    assert_ne!(tape.value(a.states), tape.value(c.states));
}

#[test]
fn one_hot_soft_paths_match_hard_paths() {
    let t = toy(3).unwrap();
    let mut tape = Tape::new();
    let b = t.model.store.bind_frozen(&mut tape);
    let soft = SoftSequence::one_hot(&mut tape, &t.batch, t.model.config.vocab_size).unwrap();
    let hard = t.model.encoder.encode(&mut tape, &b, &t.batch, &t.batch.labels).unwrap();
    let relaxed = t.model.encoder.encode_soft(&mut tape, &b, &soft, &t.batch.labels).unwrap();
    for (x, y) in tape.value(hard.states).iter().zip(tape.value(relaxed.states)) {
        assert!((x - y).abs() <= 1e-9);
    }
    let ph = t.model.classifier.classify_hard(&mut tape, &b, &t.batch).unwrap();
    let ps = t.model.classifier.classify_soft(&mut tape, &b, &soft).unwrap();
    for (x, y) in tape.value(ph).iter().zip(tape.value(ps)) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn classifier_rows_are_distributions_and_follow_row_order() {
    let t = toy(4).unwrap();
    let p = probs(&t.model, &t.batch);
    for row in p.chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12 && row.iter().all(|&x| x > 0.0));
    }
    let swapped = Batch {
        tokens: t.batch.tokens.iter().rev().cloned().collect(),
        mask: t.batch.mask.iter().rev().cloned().collect(),
        labels: t.batch.labels.iter().rev().copied().collect(),
        lengths: t.batch.lengths.iter().rev().copied().collect(),
    };
    let q = probs(&t.model, &swapped);
    assert_eq!(&p[..2], &q[2..]);
    assert_eq!(&p[2..], &q[..2]);
}

#[test]
fn zero_output_layer_scores_one_half() {
    let mut t = toy(5).unwrap();
    let (w, b) = t.model.classifier.output_layer();
    for id in [w, b] {
        t.model.store.get_mut(id).values_mut().fill(0.0);
    }
    assert!(probs(&t.model, &t.batch).iter().all(|&x| x == 0.5));
}

#[test]
fn single_token_source_attends_with_weight_one() {
    let t = toy(6).unwrap();
    let vocab = Vocab::from_words(["cat", "dog", "sat", "ran"]).unwrap();
    let s = Sentence::new(vec![vocab.id("dog")], AttributeLabel::ZERO, &vocab);
    let batch = Batch::from_sentences([&s]).unwrap();
    let g = t.model.transfer_greedy(&batch, &[AttributeLabel::ONE], 4).unwrap();
    for row in &g.attention[0].weights {
        assert_eq!(row, &vec![1.0]);
    }
}

#[test]
fn greedy_rows_are_nonempty_bounded_and_eos_free() {
    let t = toy(7).unwrap();
    let g = t.model.transfer_greedy(&t.batch, &t.batch.flipped_labels(), 4).unwrap();
    assert_eq!(g.tokens.len(), 2);
    for (row, att) in g.tokens.iter().zip(&g.attention) {
        assert!(!row.is_empty() && row.len() <= 4 && !row.contains(&EOS));
        assert_eq!(att.weights.len(), row.len());
    }
}

#[test]
fn soft_decode_emits_distributions_over_the_vocabulary() {
    let t = toy(8).unwrap();
    let mut tape = Tape::new();
    let b = t.model.store.bind_frozen(&mut tape);
    let hs = t.model.encoder.encode(&mut tape, &b, &t.batch, &t.batch.labels).unwrap();
    let d = t.model.decoder.decode_soft(&mut tape, &b, &hs, &t.batch.flipped_labels(), 4).unwrap();
    for k in 0..d.soft.rows() {
        assert!((1..=4).contains(&d.soft.lengths[k]));
        for dist in d.soft.row_distributions(&tape, k) {
            assert_eq!(dist.len(), t.model.config.vocab_size);
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert_eq!(d.attention.len(), d.soft.steps.len());
}

#[test]
fn alignment_picks_the_most_attended_source() {
    let map = AttentionMap {
        weights: vec![vec![0.1, 0.8, 0.1], vec![0.7, 0.2, 0.1], vec![0.2, 0.2, 0.6]],
    };
    assert_eq!(align(&map), vec![(1, 0), (0, 1), (2, 2)]);
    let uniform = AttentionMap {
        weights: vec![vec![0.25; 4]; 2],
    };
    assert_eq!(align(&uniform), vec![(0, 0), (0, 1)]);
}

#[test]
fn one_step_soft_and_greedy_decodes_agree() {
    let t = toy(9).unwrap();
    let labels = t.batch.flipped_labels();
    let mut tape = Tape::new();
    let b = t.model.store.bind_frozen(&mut tape);
    let hs = t.model.encoder.encode(&mut tape, &b, &t.batch, &t.batch.labels).unwrap();
    let d = t.model.decoder.decode_soft(&mut tape, &b, &hs, &labels, 1).unwrap();
    let g = t.model.transfer_greedy(&t.batch, &labels, 1).unwrap();
    for k in 0..2 {
        let dist = &d.soft.row_distributions(&tape, k)[0];
        // The first greedy step never emits EOS.
        let arg = (0..dist.len()).filter(|&i| i != EOS).fold(0, |m, i| if dist[i] > dist[m] { i } else { m });
        assert_eq!(g.tokens[k], vec![arg]);
    }
}

#[test]
fn teacher_forced_attention_is_normalized_and_repeatable() {
    let t = toy(10).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let b = t.model.store.bind_frozen(&mut tape);
        let hs = t.model.encoder.encode(&mut tape, &b, &t.batch, &t.batch.labels).unwrap();
        let tf = t.model.decoder.decode_teacher_forced(&mut tape, &b, &hs, &t.batch.labels, &t.batch).unwrap();
        assert_eq!(tf.logits.len(), t.batch.width() + 1);
        for &a in &tf.attention {
            let v = tape.value(a);
            for (r, row) in v.chunks(t.batch.width()).enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[t.batch.lengths[r]..].iter().all(|&x| x == 0.0));
            }
        }
        tf.logits.iter().flat_map(|&l| tape.value(l).to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
