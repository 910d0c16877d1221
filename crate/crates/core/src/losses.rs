//! The six training objectives and their weighted total.

use std::collections::BTreeSet;
use std::fmt;

use numcore::{Binding, Tape, Var};

use crate::data::{AttributeLabel, Batch};
use crate::error::{Error, Result};
use crate::net::{align, AttentionMap, SoftSequence, TeacherForced, TransferModel};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// `ln(PROB_FLOOR)`, the floor applied to log-probabilities.
pub const LOG_FLOOR: f64 = -27.631021115928547;

/// λ₁…λ₆, named after the term each one scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub cnt_rec: f64,
    pub back_rec: f64,
    pub class_od: f64,
    pub class_td: f64,
    pub class_btd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        LossWeights::from_array([w; 6])
    }

    /// `[λ₁, …, λ₆]` in the order rec, cnt_rec, back_rec, class_od, class_td, class_btd.
    pub fn from_array(l: [f64; 6]) -> Self {
        LossWeights {
            rec: l[0],
            cnt_rec: l[1],
            back_rec: l[2],
            class_od: l[3],
            class_td: l[4],
            class_btd: l[5],
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.rec, self.cnt_rec, self.back_rec, self.class_od, self.class_td, self.class_btd]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.to_array().iter().enumerate() {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!("lambda{} must be a nonnegative number, got {w}", i + 1)));
            }
        }
        Ok(())
    }
}

/// Scalar values of every term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cnt_rec: f64,
    pub class_td: f64,
    pub class_od: f64,
    pub back_rec: f64,
    pub class_btd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,rec,cnt_rec,class_td,class_od,back_rec,class_btd,total";

    /// Builds a breakdown and fills `total` from `weights`.
    pub fn with_weights(terms: [f64; 6], weights: &LossWeights) -> Result<Self> {
        let mut b = LossBreakdown {
            rec: terms[0],
            cnt_rec: terms[1],
            back_rec: terms[2],
            class_od: terms[3],
            class_td: terms[4],
            class_btd: terms[5],
            total: 0.0,
        };
        b.total = total_loss(&b, weights)?;
        Ok(b)
    }

    /// Term values in λ order: rec, cnt_rec, back_rec, class_od, class_td, class_btd.
    pub fn terms(&self) -> [f64; 6] {
        [self.rec, self.cnt_rec, self.back_rec, self.class_od, self.class_td, self.class_btd]
    }

    pub fn named_terms(&self) -> [(&'static str, f64); 6] {
        [
            ("rec", self.rec),
            ("cnt_rec", self.cnt_rec),
            ("class_td", self.class_td),
            ("class_od", self.class_od),
            ("back_rec", self.back_rec),
            ("class_btd", self.class_btd),
        ]
    }

    /// One CSV record; columns as in [`Self::CSV_HEADER`].
    pub fn log_line(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.rec, self.cnt_rec, self.class_td, self.class_od, self.back_rec, self.class_btd, self.total
        )
    }

    pub fn parse_log_line(line: &str) -> Result<(u64, Self)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Data(format!("log line has {} fields, expected 8", f.len())));
        }
        let bad = |s: &str| Error::Data(format!("bad log field `{s}`"));
        let step = f[0].parse().map_err(|_| bad(f[0]))?;
        let mut v = [0.0; 7];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse().map_err(|_| bad(s))?;
        }
        Ok((
            step,
            LossBreakdown {
                rec: v[0],
                cnt_rec: v[1],
                class_td: v[2],
                class_od: v[3],
                back_rec: v[4],
                class_btd: v[5],
                total: v[6],
            },
        ))
    }

    /// First term (or the total) that is not finite.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        self.named_terms()
            .into_iter()
            .chain([("total", self.total)])
            .find(|(_, v)| !v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .named_terms()
            .iter()
            .map(|(n, v)| format!("{n}={v:.4}"))
            .collect();
        write!(f, "{} total={:.4}", parts.join(" "), self.total)
    }
}

/// λ₁rec + λ₂cnt_rec + λ₃back_rec + λ₄class_od + λ₅class_td + λ₆class_btd.
pub fn total_loss(b: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(b
        .terms()
        .iter()
        .zip(w.to_array())
        .map(|(t, l)| t * l)
        .sum())
}

/// Per-sentence token NLL normalized by true length, averaged over rows.
pub fn sequence_nll(tape: &mut Tape, tf: &TeacherForced) -> Result<Var> {
    let rows = tf.lengths.len();
    let mut terms = Vec::with_capacity(tf.logits.len());
    for (t, &logits) in tf.logits.iter().enumerate() {
        let lp = tape.log_softmax(logits, 1)?;
        let lp = tape.clamp_min(lp, LOG_FLOOR);
        let target: Vec<usize> = tf.targets.iter().map(|r| r[t]).collect();
        let w: Vec<f64> = (0..rows)
            .map(|r| tf.mask[r][t] / (tf.lengths[r] as f64 * rows as f64))
            .collect();
        let picked = tape.pick(lp, &target)?;
        let weighted = tape.mul_const(picked, &w)?;
        terms.push(tape.sum(weighted));
    }
    let all = tape.concat(&terms, 0)?;
    let s = tape.sum(all);
    Ok(tape.scale(s, -1.0))
}

/// Mean of `−log p(label)` over the rows of a `[B, 2]` probability matrix.
pub fn label_nll(tape: &mut Tape, probs: Var, labels: &[AttributeLabel]) -> Result<Var> {
    let lp = tape.log_clamp(probs, PROB_FLOOR);
    let ids: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let picked = tape.pick(lp, &ids)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Aligned noun pairs `(row, source position, target step, source id)`.
pub fn noun_pairs(
    tape: &Tape,
    source: &Batch,
    soft: &SoftSequence,
    attention: &[Var],
    nouns: &BTreeSet<usize>,
) -> Vec<(usize, usize, usize, usize)> {
    let maps = AttentionMap::collect(tape, attention, &soft.lengths);
    let mut pairs = Vec::new();
    for (b, map) in maps.iter().enumerate() {
        for (r, rp) in align(map) {
            let id = source.tokens[b][r];
            if r < source.lengths[b] && nouns.contains(&id) {
                pairs.push((b, r, rp, id));
            }
        }
    }
    pairs
}

/// Mean of `−log soft[r′][id]` over aligned noun pairs; zero when there are none.
pub fn content_nll(
    tape: &mut Tape,
    source: &Batch,
    soft: &SoftSequence,
    attention: &[Var],
    nouns: &BTreeSet<usize>,
) -> Result<Var> {
    let pairs = noun_pairs(tape, source, soft, attention, nouns);
    if pairs.is_empty() {
        return Ok(tape.constant([1], vec![0.0])?);
    }
    let rows = soft.rows();
    let scale = 1.0 / pairs.len() as f64;
    let mut terms = Vec::new();
    for (t, &p) in soft.steps.iter().enumerate() {
        let mut idx = vec![0; rows];
        let mut w = vec![0.0; rows];
        for &(b, _, rp, id) in &pairs {
            if rp == t {
                idx[b] = id;
                w[b] = scale;
            }
        }
        if w.iter().all(|&x| x == 0.0) {
            continue;
        }
        let lp = tape.log_clamp(p, PROB_FLOOR);
        let picked = tape.pick(lp, &idx)?;
        let weighted = tape.mul_const(picked, &w)?;
        terms.push(tape.sum(weighted));
    }
    let all = tape.concat(&terms, 0)?;
    let s = tape.sum(all);
    Ok(tape.scale(s, -1.0))
}

/// Tape handles for every term of one forward pass.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub rec: Var,
    pub cnt_rec: Var,
    pub back_rec: Var,
    pub class_od: Var,
    pub class_td: Var,
    pub class_btd: Var,
    /// The forward-transferred soft batch toward the flipped labels.
    pub transferred: SoftSequence,
    /// The back-transferred soft batch toward the original labels.
    pub back: SoftSequence,
}

impl LossVars {
    /// Vars in λ order.
    pub fn terms(&self) -> [Var; 6] {
        [self.rec, self.cnt_rec, self.back_rec, self.class_od, self.class_td, self.class_btd]
    }

    pub fn breakdown(&self, tape: &Tape, weights: &LossWeights) -> Result<LossBreakdown> {
        LossBreakdown::with_weights(self.terms().map(|v| tape.item(v)), weights)
    }

    /// `Σ λᵢ termᵢ` on the tape; zero-weight terms are left out of the graph.
    pub fn weighted_total(&self, tape: &mut Tape, weights: &LossWeights) -> Result<Var> {
        weights.validate()?;
        let mut parts = Vec::new();
        for (v, w) in self.terms().into_iter().zip(weights.to_array()) {
            if w != 0.0 {
                parts.push(tape.scale(v, w));
            }
        }
        if parts.is_empty() {
            return Ok(tape.constant([1], vec![0.0])?);
        }
        let all = tape.concat(&parts, 0)?;
        Ok(tape.sum(all))
    }
}

/// Runs both transfer legs on `batch` and records all six terms.
///
/// `decode_len` bounds every soft decode; `nouns` holds lexicon token ids.
pub fn forward_losses(
    tape: &mut Tape,
    b: &Binding,
    model: &TransferModel,
    batch: &Batch,
    nouns: &BTreeSet<usize>,
    decode_len: usize,
) -> Result<LossVars> {
    let src = &batch.labels;
    let flipped = batch.flipped_labels();

    let hs = model.encoder.encode(tape, b, batch, src)?;
    let tf = model.decoder.decode_teacher_forced(tape, b, &hs, src, batch)?;
    let rec = sequence_nll(tape, &tf)?;

    let fwd = model.decoder.decode_soft(tape, b, &hs, &flipped, decode_len)?;
    let cnt_rec = content_nll(tape, batch, &fwd.soft, &fwd.attention, nouns)?;

    let p_td = model.classifier.classify_soft(tape, b, &fwd.soft)?;
    let class_td = label_nll(tape, p_td, &flipped)?;

    let p_od = model.classifier.classify_hard(tape, b, batch)?;
    let class_od = label_nll(tape, p_od, src)?;

    let hs_back = model.encoder.encode_soft(tape, b, &fwd.soft, &flipped)?;
    let tf_back = model.decoder.decode_teacher_forced(tape, b, &hs_back, src, batch)?;
    let back_rec = sequence_nll(tape, &tf_back)?;

    let bwd = model.decoder.decode_soft(tape, b, &hs_back, src, decode_len)?;
    let p_btd = model.classifier.classify_soft(tape, b, &bwd.soft)?;
    let class_btd = label_nll(tape, p_btd, src)?;

    Ok(LossVars {
        rec,
        cnt_rec,
        back_rec,
        class_od,
        class_td,
        class_btd,
        transferred: fwd.soft,
        back: bwd.soft,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_floor_matches_prob_floor() {
        assert!((PROB_FLOOR.ln() - LOG_FLOOR).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let zero = LossWeights::uniform(0.0);
        let b = LossBreakdown::with_weights([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &zero).unwrap();
        assert_eq!(b.total, 0.0);
        let b = LossBreakdown::with_weights([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &LossWeights::default()).unwrap();
        assert_eq!(b.total, 21.0);
        let w = LossWeights::from_array([2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b = LossBreakdown::with_weights([1.5, 9.0, 9.0, 9.0, 9.0, 9.0], &w).unwrap();
        assert_eq!(b.total, 3.0);
    }

    #[test]
    fn weights_map_to_the_printed_terms() {
        // λ₃ scales back_rec and λ₄ scales class_od.
        let b = LossBreakdown {
            back_rec: 1.0,
            ..Default::default()
        };
        let w = LossWeights::from_array([0.0, 0.0, 7.0, 0.0, 0.0, 0.0]);
        assert_eq!(total_loss(&b, &w).unwrap(), 7.0);
        let b = LossBreakdown {
            class_od: 1.0,
            ..Default::default()
        };
        let w = LossWeights::from_array([0.0, 0.0, 0.0, 5.0, 0.0, 0.0]);
        assert_eq!(total_loss(&b, &w).unwrap(), 5.0);
    }

    #[test]
    fn negative_weight_is_config_error() {
        let w = LossWeights::from_array([1.0, -0.1, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(total_loss(&LossBreakdown::default(), &w), Err(Error::Config(_))));
    }

    #[test]
    fn total_is_linear_in_each_weight() {
        let b = LossBreakdown::with_weights([0.3, 1.7, 2.2, 0.9, 0.4, 1.1], &LossWeights::default()).unwrap();
        for i in 0..6 {
            let mut l = [0.5; 6];
            let base = total_loss(&b, &LossWeights::from_array(l)).unwrap();
            l[i] += 2.0;
            let bumped = total_loss(&b, &LossWeights::from_array(l)).unwrap();
            assert!((bumped - base - 2.0 * b.terms()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn log_line_round_trips() {
        let b = LossBreakdown::with_weights([0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &LossWeights::default()).unwrap();
        let line = b.log_line(17);
        assert!(line.starts_with("17,0.1,0.2,0.5,0.4,0.3,0.6,"));
        assert_eq!(LossBreakdown::parse_log_line(&line).unwrap(), (17, b));
    }

    #[test]
    fn label_nll_examples() {
        let mut tape = Tape::new();
        let p = tape.constant([1, 2], vec![1.0, 0.0]).unwrap();
        let l = label_nll(&mut tape, p, &[AttributeLabel::ZERO]).unwrap();
        assert_eq!(tape.item(l), 0.0);
        let p = tape.constant([1, 2], vec![0.5, 0.5]).unwrap();
        let l = label_nll(&mut tape, p, &[AttributeLabel::ONE]).unwrap();
        assert!((tape.item(l) - 2f64.ln()).abs() < 1e-12);
        let p = tape.constant([2, 2], vec![0.5, 0.5, 0.75, 0.25]).unwrap();
        let l = label_nll(&mut tape, p, &[AttributeLabel::ZERO, AttributeLabel::ONE]).unwrap();
        assert!((tape.item(l) - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn label_nll_is_finite_at_zero_probability() {
        let mut tape = Tape::new();
        let p = tape.constant([1, 2], vec![1.0, 0.0]).unwrap();
        let l = label_nll(&mut tape, p, &[AttributeLabel::ONE]).unwrap();
        assert!((tape.item(l) + LOG_FLOOR).abs() < 1e-9);
    }
}
