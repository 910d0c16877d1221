use attrxfer::data::{AttributeLabel, Corpus, NounLexicon, Sentence, Vocab, EOS};
use attrxfer::eval::{
    content_preservation, evaluate, perplexity, preserves_content, sentiment_accuracy, train_lm, train_oracle,
    EvalLM, FitConfig, IdentityTransfer, OracleClassifier,
};
use attrxfer::net::ModelConfig;
use attrxfer::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FILLER: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

fn vocab() -> Vocab {
    Vocab::from_words(FILLER.iter().copied().chain(["marker"])).unwrap()
}

fn sentence(v: &Vocab, words: &[&str], label: u8) -> Sentence {
    Sentence::new(words.iter().map(|w| v.id(w)).collect(), AttributeLabel::new(label).unwrap(), v)
}

/// Label 1 exactly when `marker` occurs somewhere in the sentence.
fn marker_corpus(n: usize, seed: u64) -> Corpus {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = (0..n)
        .map(|i| {
            let len = rng.gen_range(3..7);
            let mut w: Vec<&str> = (0..len).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
            let label = (i % 2) as u8;
            if label == 1 {
                let at = rng.gen_range(0..len);
                w[at] = "marker";
            }
            sentence(&v, &w, label)
        })
        .collect();
    Corpus { sentences }
}

fn quick_fit() -> FitConfig {
    FitConfig {
        steps: 300,
        embed_dim: 16,
        hidden_dim: 16,
        feature_maps: 8,
        ..FitConfig::default()
    }
}

fn uniform_lm(v: &Vocab) -> EvalLM {
    let mut lm = EvalLM::new(ModelConfig::new(v.len()), v.clone(), 1);
    lm.zero_output_layer();
    lm
}

#[test]
fn oracle_separates_a_marker_corpus() {
    let (train, held) = (marker_corpus(400, 1), marker_corpus(200, 2));
    let oracle = train_oracle(&train, &held, &vocab(), &quick_fit()).unwrap();
    let acc = oracle.accuracy(&held).unwrap();
    assert!(acc >= 99.0, "held-out accuracy {acc}");
    assert_eq!(oracle.held_out_accuracy, Some(acc));

    let again = train_oracle(&train, &held, &vocab(), &quick_fit()).unwrap();
    assert_eq!(oracle.probs(&held.sentences).unwrap(), again.probs(&held.sentences).unwrap());
}

#[test]
fn oracle_needs_both_labels() {
    let one = marker_corpus(40, 3).with_label(AttributeLabel::ONE);
    assert!(train_oracle(&one, &one, &vocab(), &quick_fit()).is_err());
}

#[test]
fn sentiment_accuracy_counts() {
    let v = vocab();
    let mut oracle = OracleClassifier::new(ModelConfig::new(v.len()), v.clone(), 1);
    oracle.zero_output_layer();
    let s = sentence(&v, &["a", "b", "c"], 0);
    let pairs = |labels: &[u8]| -> Vec<(Sentence, AttributeLabel)> {
        labels.iter().map(|&l| (s.clone(), AttributeLabel::new(l).unwrap())).collect()
    };
    // A uniform oracle breaks ties toward label 0.
    assert_eq!(sentiment_accuracy(&pairs(&[0, 0, 0, 0]), &oracle).unwrap(), 100.0);
    assert_eq!(sentiment_accuracy(&pairs(&[0, 0, 0, 1]), &oracle).unwrap(), 75.0);
    assert_eq!(sentiment_accuracy(&pairs(&[1, 1]), &oracle).unwrap(), 0.0);
    assert!(sentiment_accuracy(&[], &oracle).is_err());
}

#[test]
fn uniform_lm_perplexity_is_vocab_size_in_any_order() {
    let v = vocab();
    let lm = uniform_lm(&v);
    let mut s: Vec<Sentence> = marker_corpus(12, 4).sentences;
    let p = perplexity(&s, &lm).unwrap();
    assert!((p - v.len() as f64).abs() < 1e-3, "{p}");
    s.reverse();
    assert_eq!(perplexity(&s, &lm).unwrap().to_bits(), p.to_bits());
    assert!(perplexity(&[], &lm).is_err());
}

#[test]
fn hand_computed_two_token_perplexity() {
    let v = vocab();
    let mut lm = uniform_lm(&v);
    // Every step scores softmax(bias): p(a) = 1/2, p(EOS) = 1/4, the rest share 1/4.
    let n = v.len();
    let mut bias = vec![(0.25 / (n - 2) as f64).ln(); n];
    bias[v.id("a")] = 0.5f64.ln();
    bias[EOS] = 0.25f64.ln();
    let (_, b) = lm.net.output_layer();
    lm.store.get_mut(b).values_mut().copy_from_slice(&bias);
    let s = sentence(&v, &["a"], 0);
    let p = perplexity(std::slice::from_ref(&s), &lm).unwrap();
    assert!((p - 8f64.sqrt()).abs() < 1e-9, "{p}");
    let (nll, tokens) = lm.sentence_nll(std::slice::from_ref(&s)).unwrap()[0];
    assert_eq!(tokens, 2);
    assert!((p - (nll / tokens as f64).exp()).abs() < 1e-12);
}

#[test]
fn lm_learns_a_repeated_sentence() {
    let v = vocab();
    let s = sentence(&v, &["a", "b", "c", "d"], 0);
    let corpus = Corpus { sentences: vec![s; 32] };
    let lm = train_lm(&corpus, &corpus, &v, &quick_fit()).unwrap();
    let p = perplexity(&corpus.sentences[..1], &lm).unwrap();
    assert!(p < 1.05, "{p}");
}

#[test]
fn content_judgments_and_monotonicity() {
    let lex = NounLexicon::new(["food", "burger", "facilities"]);
    assert!(preserves_content(
        "their food was definitely delicious",
        "their food was never disgusting",
        &lex
    ));
    assert!(preserves_content("love the southwestern burger", "avoid the grease burger", &lex));
    assert!(!preserves_content(
        "their food was definitely delicious",
        "there was so not spectacular",
        &lex
    ));
    assert!(preserves_content("restaurant is romantic", "restaurant is rude", &lex));
    assert!(preserves_content("the facilities are amazing", "facilities ridiculous", &lex));
    let pairs = [("the food is good", "the drinks are bad"), ("the burger is good", "the burger is bad")];
    let before = content_preservation(&pairs, &lex).unwrap();
    let more = [("the food is good", "the drinks are bad food"), ("the burger is good", "the burger is bad")];
    assert_eq!(before, 50.0);
    assert!(content_preservation(&more, &lex).unwrap() >= before);
}

#[test]
fn identity_model_preserves_content_and_keeps_the_source_label() {
    let (train, test) = (marker_corpus(400, 5), marker_corpus(60, 6));
    let v = vocab();
    let oracle = train_oracle(&train, &test, &v, &quick_fit()).unwrap();
    let lm = uniform_lm(&v);
    let lex = NounLexicon::new(["marker"]);
    let id = IdentityTransfer { vocab: v.clone() };
    let ev = evaluate(&id, &test, &oracle, &lm, &lex).unwrap();
    assert_eq!(ev.report.content_preservation, 100.0);
    let own = oracle.accuracy(&test).unwrap();
    assert!((ev.report.sentiment_accuracy - (100.0 - own)).abs() < 1e-9);
    assert_eq!(ev.report.pairs, 60);
    assert_eq!(ev.report.to_label0 + ev.report.to_label1, 60);
    assert!(ev.pairs.iter().all(|p| p.original == p.transferred && p.target == p.source.flip()));

    let again = evaluate(&id, &test, &oracle, &lm, &lex).unwrap();
    assert_eq!(again.report, ev.report);

    assert!(evaluate(&id, &Corpus { sentences: vec![] }, &oracle, &lm, &lex).is_err());
    let other = Vocab::from_words(["x", "y"]).unwrap();
    let foreign = uniform_lm(&other);
    assert!(matches!(evaluate(&id, &test, &oracle, &foreign, &lex), Err(Error::VocabMismatch { .. })));
}
