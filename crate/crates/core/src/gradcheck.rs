//! Finite-difference checks of the training losses on a toy model, run
//! end to end through encoder, decoders and classifier.

use std::collections::BTreeSet;

use numcore::gradcheck::{rel_error, FD_STEP};
use numcore::Tape;

use crate::data::{AttributeLabel, Batch, NounLexicon, Sentence, Vocab};
use crate::losses::{forward_losses, LossWeights};
use crate::net::{ModelConfig, TransferModel};
use crate::Result;

/// Weighted objectives checked by [`loss_suite`], in λ order, then the total.
pub const TERMS: [&str; 7] = ["rec", "cnt_rec", "back_rec", "class_od", "class_td", "class_btd", "total"];

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub term: &'static str,
    /// Value of the objective at the unperturbed parameters.
    pub value: f64,
    pub max_rel_error: f64,
}

/// A tiny model, batch and noun set whose losses are all nonzero.
pub struct Toy {
    pub model: TransferModel,
    pub batch: Batch,
    pub nouns: BTreeSet<usize>,
    pub decode_len: usize,
}

pub fn toy(seed: u64) -> Result<Toy> {
    let vocab = Vocab::from_words(["cat", "dog", "sat", "ran"])?;
    let lex = NounLexicon::new(["cat", "dog"]);
    let rows = [(&["cat", "sat"][..], 0), (&["dog", "ran", "cat"][..], 1)];
    let sentences: Vec<Sentence> = rows
        .iter()
        .map(|(w, l)| {
            let ids = w.iter().map(|x| vocab.id(x)).collect();
            Sentence::new(ids, AttributeLabel::new(*l).expect("binary"), &vocab)
        })
        .collect();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 3,
        hidden_dim: 3,
        attr_dim: 2,
        filter_widths: vec![2, 3],
        feature_maps: 2,
    };
    Ok(Toy {
        model: TransferModel::new(config, seed),
        batch: Batch::from_sentences(&sentences)?,
        nouns: lex.ids(&vocab),
        decode_len: 4,
    })
}

fn weights_for(term: usize) -> LossWeights {
    if term == 6 {
        return LossWeights::uniform(1.0);
    }
    let mut w = [0.0; 6];
    w[term] = 1.0;
    LossWeights::from_array(w)
}

fn objective(toy: &Toy, weights: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let b = toy.model.store.bind_frozen(&mut tape);
    let vars = forward_losses(&mut tape, &b, &toy.model, &toy.batch, &toy.nouns, toy.decode_len)?;
    let total = vars.weighted_total(&mut tape, weights)?;
    Ok(tape.item(total))
}

/// Backward gradients against central differences over every parameter
/// value, for each single term and for the unit-weight total.
pub fn loss_suite(seed: u64) -> Result<Vec<LossReport>> {
    let mut toy = toy(seed)?;
    let mut reports = Vec::with_capacity(TERMS.len());
    for (i, &term) in TERMS.iter().enumerate() {
        let weights = weights_for(i);
        let mut tape = Tape::new();
        let b = toy.model.store.bind(&mut tape);
        let vars = forward_losses(&mut tape, &b, &toy.model, &toy.batch, &toy.nouns, toy.decode_len)?;
        let total = vars.weighted_total(&mut tape, &weights)?;
        let value = tape.item(total);
        let grads = tape.backward(total)?;
        let ids: Vec<_> = toy.model.store.ids().collect();
        let mut worst: f64 = 0.0;
        for id in ids {
            let n = toy.model.store.get(id).numel();
            let analytic = grads.wrt(b[id]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            for (j, &a) in analytic.iter().enumerate() {
                let x0 = toy.model.store.get(id).values()[j];
                toy.model.store.get_mut(id).values_mut()[j] = x0 + FD_STEP;
                let up = objective(&toy, &weights)?;
                toy.model.store.get_mut(id).values_mut()[j] = x0 - FD_STEP;
                let down = objective(&toy, &weights)?;
                toy.model.store.get_mut(id).values_mut()[j] = x0;
                worst = worst.max(rel_error(a, (up - down) / (2.0 * FD_STEP)));
            }
        }
        reports.push(LossReport {
            term,
            value,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}
