//! The encoder, attention decoder and CNN classifier, plus the soft-sequence
//! pathway that lets transferred text stay differentiable.
//!
//! All forward passes are batched: a batch of `B` rows is processed one time
//! step at a time with `[B, ·]` matrices, and padded positions are handled
//! with explicit 0/1 masks.

use numcore::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AttributeLabel, Batch, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Probability above which an EOS step ends generation of its row.
pub const EOS_STOP_PROB: f64 = 0.5;
/// Allowed drift of a soft row's sum from 1 before it is rejected.
pub const SOFT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attr_dim: usize,
    pub filter_widths: Vec<usize>,
    pub feature_maps: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            attr_dim: 8,
            filter_widths: vec![3, 4, 5],
            feature_maps: 32,
        }
    }

    pub fn max_width(&self) -> usize {
        self.filter_widths.iter().copied().max().unwrap_or(1)
    }
}

fn init(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), bound, rng).expect("model dims are positive")
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec()).expect("model dims are positive")
}

fn label_ids(labels: &[AttributeLabel]) -> Vec<usize> {
    labels.iter().map(|l| l.index()).collect()
}

fn one_hot_rows(rows: usize, width: usize, hot: usize) -> Vec<f64> {
    let mut v = vec![0.0; rows * width];
    for r in 0..rows {
        v[r * width + hot] = 1.0;
    }
    v
}

/// Gated recurrent unit with fused gate weights (reset, update, candidate).
#[derive(Debug, Clone)]
pub struct Gru {
    wi: ParamId,
    wh: ParamId,
    bi: ParamId,
    bh: ParamId,
    hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        Gru {
            wi: store.add(format!("{prefix}.wi"), init(&[input, 3 * hidden], k, rng)),
            wh: store.add(format!("{prefix}.wh"), init(&[hidden, 3 * hidden], k, rng)),
            bi: store.add(format!("{prefix}.bi"), zeros(&[3 * hidden])),
            bh: store.add(format!("{prefix}.bh"), zeros(&[3 * hidden])),
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, b: &Binding, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let gi = tape.matmul(x, b[self.wi])?;
        let gi = tape.add_bias(gi, b[self.bi])?;
        let gh = tape.matmul(h, b[self.wh])?;
        let gh = tape.add_bias(gh, b[self.bh])?;
        let ir = tape.slice(gi, 1, 0, hd)?;
        let iz = tape.slice(gi, 1, hd, hd)?;
        let inn = tape.slice(gi, 1, 2 * hd, hd)?;
        let hr = tape.slice(gh, 1, 0, hd)?;
        let hz = tape.slice(gh, 1, hd, hd)?;
        let hn = tape.slice(gh, 1, 2 * hd, hd)?;
        let r = tape.add(ir, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(iz, hz)?;
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, hn)?;
        let n = tape.add(inn, rn)?;
        let n = tape.tanh(n);
        // h' = n + z ⊙ (h − n)
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        Ok(tape.add(n, zd)?)
    }
}

/// `mask ⊙ new + (1 − mask) ⊙ old`, row-wise; returns `new` when every row is live.
fn blend(tape: &mut Tape, new: Var, old: Var, mask: &[f64]) -> Result<Var> {
    if mask.iter().all(|&m| m == 1.0) {
        return Ok(new);
    }
    let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let a = tape.mul_col(new, mask)?;
    let c = tape.mul_col(old, &inv)?;
    Ok(tape.add(a, c)?)
}

/// Encoder output: one hidden state per source position.
#[derive(Debug, Clone)]
pub struct HiddenSeq {
    /// `[B, T, H]`
    pub states: Var,
    /// Flattened `[B, T]` source mask.
    pub mask: Vec<f64>,
    pub lengths: Vec<usize>,
    /// Hidden state after the last real token of each row, `[B, H]`.
    pub last: Var,
}

impl HiddenSeq {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.mask.len() / self.rows()
    }

    /// The `lengths[k] × H` states of row `k`.
    pub fn row_states(&self, tape: &Tape, k: usize) -> Vec<Vec<f64>> {
        let shape = tape.shape(self.states);
        let (t, h) = (shape[1], shape[2]);
        let v = tape.value(self.states);
        (0..self.lengths[k])
            .map(|s| v[(k * t + s) * h..(k * t + s + 1) * h].to_vec())
            .collect()
    }
}

/// Per-step distributions over the vocabulary for a batch of generated rows.
#[derive(Debug, Clone)]
pub struct SoftSequence {
    /// One `[B, V]` distribution per step.
    pub steps: Vec<Var>,
    /// `mask[b][t]` is 1 while row `b` is still emitting at step `t`.
    pub mask: Vec<Vec<f64>>,
    pub lengths: Vec<usize>,
}

impl SoftSequence {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    fn step_mask(&self, t: usize) -> Vec<f64> {
        self.mask.iter().map(|m| m[t]).collect()
    }

    /// Constant one-hot lift of a hard batch.
    pub fn one_hot(tape: &mut Tape, batch: &Batch, vocab_size: usize) -> Result<Self> {
        let rows = batch.rows();
        let steps = (0..batch.width())
            .map(|t| {
                let mut v = vec![0.0; rows * vocab_size];
                for r in 0..rows {
                    v[r * vocab_size + batch.tokens[r][t]] = 1.0;
                }
                tape.constant([rows, vocab_size], v)
            })
            .collect::<numcore::Result<Vec<_>>>()?;
        Ok(SoftSequence {
            steps,
            mask: batch.mask.clone(),
            lengths: batch.lengths.clone(),
        })
    }

    /// Rows of `b` restricted to its unmasked steps.
    pub fn row_distributions(&self, tape: &Tape, b: usize) -> Vec<Vec<f64>> {
        (0..self.lengths[b])
            .map(|t| {
                let v = tape.value(self.steps[t]);
                let width = v.len() / self.rows();
                v[b * width..(b + 1) * width].to_vec()
            })
            .collect()
    }

    fn check_normalized(&self, tape: &Tape) -> Result<()> {
        for (t, &s) in self.steps.iter().enumerate() {
            let v = tape.value(s);
            let width = v.len() / self.rows();
            for (b, row) in v.chunks(width).enumerate() {
                if self.mask[b][t] == 0.0 {
                    continue;
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > SOFT_NORM_TOL || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Data(format!(
                        "soft sequence row {b} step {t} is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Attention weights of one row: `weights[r'][r]` for target step `r'`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Vec<Vec<f64>>,
}

/// `(source position r, target step r')` pairs.
pub type AlignmentPairs = Vec<(usize, usize)>;

impl AttentionMap {
    /// Splits per-step `[B, T]` attention vars into per-row maps covering the
    /// first `lengths[b]` target steps.
    pub fn collect(tape: &Tape, steps: &[Var], lengths: &[usize]) -> Vec<AttentionMap> {
        lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| AttentionMap {
                weights: steps[..len]
                    .iter()
                    .map(|&a| {
                        let v = tape.value(a);
                        let t = v.len() / lengths.len();
                        v[b * t..(b + 1) * t].to_vec()
                    })
                    .collect(),
            })
            .collect()
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Pairs each target step with its most-attended source position.
pub fn align(att: &AttentionMap) -> AlignmentPairs {
    att.weights
        .iter()
        .enumerate()
        .map(|(rp, row)| (argmax_lowest(row), rp))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Encoder {
    embed: ParamId,
    attr: ParamId,
    gru: Gru,
    hidden: usize,
}

impl Encoder {
    fn run(
        &self,
        tape: &mut Tape,
        b: &Binding,
        inputs: &[Var],
        mask: &[Vec<f64>],
        lengths: &[usize],
        labels: &[AttributeLabel],
    ) -> Result<HiddenSeq> {
        let rows = lengths.len();
        if labels.len() != rows {
            return Err(Error::Data(format!("{} labels for {rows} rows", labels.len())));
        }
        let attr = tape.gather(b[self.attr], &label_ids(labels))?;
        let mut h = tape.constant([rows, self.hidden], vec![0.0; rows * self.hidden])?;
        let mut states = Vec::with_capacity(inputs.len());
        for (t, &x) in inputs.iter().enumerate() {
            let xin = tape.concat(&[x, attr], 1)?;
            let cand = self.gru.step(tape, b, xin, h)?;
            let m: Vec<f64> = mask.iter().map(|r| r[t]).collect();
            h = blend(tape, cand, h, &m)?;
            states.push(h);
        }
        Ok(HiddenSeq {
            states: tape.stack(&states)?,
            mask: mask.concat(),
            lengths: lengths.to_vec(),
            last: h,
        })
    }

    /// Encodes hard tokens conditioned on `labels`.
    pub fn encode(&self, tape: &mut Tape, b: &Binding, batch: &Batch, labels: &[AttributeLabel]) -> Result<HiddenSeq> {
        let inputs = (0..batch.width())
            .map(|t| {
                let ids: Vec<usize> = batch.tokens.iter().map(|r| r[t]).collect();
                tape.gather(b[self.embed], &ids)
            })
            .collect::<numcore::Result<Vec<_>>>()?;
        self.run(tape, b, &inputs, &batch.mask, &batch.lengths, labels)
    }

    /// Encodes a soft sequence; each input is the expected word embedding.
    pub fn encode_soft(
        &self,
        tape: &mut Tape,
        b: &Binding,
        soft: &SoftSequence,
        labels: &[AttributeLabel],
    ) -> Result<HiddenSeq> {
        soft.check_normalized(tape)?;
        if soft.lengths.iter().any(|&l| l == 0) {
            return Err(Error::Data("cannot encode an empty soft sequence".into()));
        }
        let width = soft.lengths.iter().copied().max().unwrap_or(0);
        let inputs = soft.steps[..width]
            .iter()
            .map(|&p| tape.matmul(p, b[self.embed]))
            .collect::<numcore::Result<Vec<_>>>()?;
        let mask: Vec<Vec<f64>> = soft.mask.iter().map(|m| m[..width].to_vec()).collect();
        self.run(tape, b, &inputs, &mask, &soft.lengths, labels)
    }
}

/// Output of teacher-forced decoding.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// One `[B, V]` logit matrix per target step (tokens then EOS).
    pub logits: Vec<Var>,
    /// One `[B, T]` attention matrix per target step.
    pub attention: Vec<Var>,
    /// Target id per row and step; PAD past each row's EOS.
    pub targets: Vec<Vec<usize>>,
    /// 1 for real target steps (including EOS), flattened per row.
    pub mask: Vec<Vec<f64>>,
    /// Number of real target steps per row (`length + 1`).
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SoftDecode {
    pub soft: SoftSequence,
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct GreedyDecode {
    pub tokens: Vec<Vec<usize>>,
    pub attention: Vec<AttentionMap>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    embed: ParamId,
    attr: ParamId,
    gru: Gru,
    wc: ParamId,
    bc: ParamId,
    wo: ParamId,
    bo: ParamId,
}

struct StepOut {
    h: Var,
    logits: Var,
    attention: Var,
}

impl Decoder {
    fn step(&self, tape: &mut Tape, b: &Binding, input: Var, attr: Var, h: Var, hs: &HiddenSeq) -> Result<StepOut> {
        let xin = tape.concat(&[input, attr], 1)?;
        let h = self.gru.step(tape, b, xin, h)?;
        let scores = tape.attn_scores(hs.states, h)?;
        let attention = tape.masked_softmax(scores, &hs.mask)?;
        let ctx = tape.attn_context(attention, hs.states)?;
        let ch = tape.concat(&[ctx, h], 1)?;
        let ht = tape.matmul(ch, b[self.wc])?;
        let ht = tape.add_bias(ht, b[self.bc])?;
        let ht = tape.tanh(ht);
        let logits = tape.matmul(ht, b[self.wo])?;
        let logits = tape.add_bias(logits, b[self.bo])?;
        Ok(StepOut { h, logits, attention })
    }

    fn bos(&self, tape: &mut Tape, b: &Binding, rows: usize) -> Result<Var> {
        Ok(tape.gather(b[self.embed], &vec![BOS; rows])?)
    }

    /// Step `t` consumes gold token `t − 1` (BOS at `t = 0`) and predicts
    /// token `t`, with EOS as the final target.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        b: &Binding,
        hs: &HiddenSeq,
        labels: &[AttributeLabel],
        target: &Batch,
    ) -> Result<TeacherForced> {
        let rows = target.rows();
        if hs.rows() != rows || labels.len() != rows {
            return Err(Error::Data("decoder rows disagree with encoder rows".into()));
        }
        let steps = target.width() + 1;
        let attr = tape.gather(b[self.attr], &label_ids(labels))?;
        let mut h = hs.last;
        let mut input = self.bos(tape, b, rows)?;
        let mut out = TeacherForced {
            logits: Vec::with_capacity(steps),
            attention: Vec::with_capacity(steps),
            targets: vec![Vec::with_capacity(steps); rows],
            mask: vec![Vec::with_capacity(steps); rows],
            lengths: target.lengths.iter().map(|l| l + 1).collect(),
        };
        for t in 0..steps {
            let s = self.step(tape, b, input, attr, h, hs)?;
            h = s.h;
            out.logits.push(s.logits);
            out.attention.push(s.attention);
            for r in 0..rows {
                let len = target.lengths[r];
                let (tok, m) = match t.cmp(&len) {
                    std::cmp::Ordering::Less => (target.tokens[r][t], 1.0),
                    std::cmp::Ordering::Equal => (EOS, 1.0),
                    std::cmp::Ordering::Greater => (PAD, 0.0),
                };
                out.targets[r].push(tok);
                out.mask[r].push(m);
            }
            if t + 1 < steps {
                let ids: Vec<usize> = target.tokens.iter().map(|row| row[t]).collect();
                input = tape.gather(b[self.embed], &ids)?;
            }
        }
        Ok(out)
    }

    /// Autoregressive decoding that feeds back the expected embedding of each
    /// step's distribution. A row stops once a step (after the first) puts
    /// more than [`EOS_STOP_PROB`] on EOS; that step is not part of the row.
    pub fn decode_soft(
        &self,
        tape: &mut Tape,
        b: &Binding,
        hs: &HiddenSeq,
        labels: &[AttributeLabel],
        max_len: usize,
    ) -> Result<SoftDecode> {
        let rows = hs.rows();
        if labels.len() != rows || max_len == 0 {
            return Err(Error::Data("decode_soft needs one label per row and max_len ≥ 1".into()));
        }
        let attr = tape.gather(b[self.attr], &label_ids(labels))?;
        let mut h = hs.last;
        let mut input = self.bos(tape, b, rows)?;
        let mut alive = vec![true; rows];
        let mut steps = Vec::new();
        let mut attention = Vec::new();
        let mut mask = vec![Vec::new(); rows];
        for t in 0..max_len {
            let s = self.step(tape, b, input, attr, h, hs)?;
            h = s.h;
            let p = tape.softmax(s.logits, 1)?;
            let v = tape.value(p);
            let width = v.len() / rows;
            for r in 0..rows {
                if alive[r] && t > 0 && v[r * width + EOS] > EOS_STOP_PROB {
                    alive[r] = false;
                }
                mask[r].push(if alive[r] { 1.0 } else { 0.0 });
            }
            steps.push(p);
            attention.push(s.attention);
            if !alive.iter().any(|&a| a) {
                break;
            }
            input = tape.matmul(p, b[self.embed])?;
        }
        let lengths = mask.iter().map(|m| m.iter().filter(|&&x| x == 1.0).count()).collect();
        Ok(SoftDecode {
            soft: SoftSequence { steps, mask, lengths },
            attention,
        })
    }

    /// Argmax decoding (ties to the lowest id). EOS ends a row and is not
    /// emitted; the first step never selects EOS, so rows are nonempty.
    pub fn decode_greedy(
        &self,
        tape: &mut Tape,
        b: &Binding,
        hs: &HiddenSeq,
        labels: &[AttributeLabel],
        max_len: usize,
    ) -> Result<GreedyDecode> {
        let rows = hs.rows();
        if labels.len() != rows || max_len == 0 {
            return Err(Error::Data("decode_greedy needs one label per row and max_len ≥ 1".into()));
        }
        let attr = tape.gather(b[self.attr], &label_ids(labels))?;
        let mut h = hs.last;
        let mut input = self.bos(tape, b, rows)?;
        let mut alive = vec![true; rows];
        let mut tokens = vec![Vec::new(); rows];
        let mut attention = Vec::new();
        for t in 0..max_len {
            let s = self.step(tape, b, input, attr, h, hs)?;
            h = s.h;
            let v = tape.value(s.logits);
            let width = v.len() / rows;
            let mut next = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &v[r * width..(r + 1) * width];
                let tok = if t == 0 {
                    let mut masked = row.to_vec();
                    masked[EOS] = f64::NEG_INFINITY;
                    argmax_lowest(&masked)
                } else {
                    argmax_lowest(row)
                };
                if alive[r] {
                    if tok == EOS {
                        alive[r] = false;
                    } else {
                        tokens[r].push(tok);
                    }
                }
                next.push(tok);
            }
            attention.push(s.attention);
            if !alive.iter().any(|&a| a) {
                break;
            }
            input = tape.gather(b[self.embed], &next)?;
        }
        let lengths: Vec<usize> = tokens.iter().map(Vec::len).collect();
        Ok(GreedyDecode {
            attention: AttentionMap::collect(tape, &attention, &lengths),
            tokens,
        })
    }
}

/// Text CNN over (expected) word embeddings with max-over-time pooling.
#[derive(Debug, Clone)]
pub struct Classifier {
    embed: ParamId,
    convs: Vec<(ParamId, ParamId, usize)>,
    wo: ParamId,
    bo: ParamId,
    vocab_size: usize,
    max_width: usize,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let e = config.embed_dim;
        let f = config.feature_maps;
        let embed = store.add(format!("{prefix}.embed"), init(&[config.vocab_size, e], 0.5, rng));
        let convs = config
            .filter_widths
            .iter()
            .map(|&w| {
                let k = 1.0 / ((w * e) as f64).sqrt();
                (
                    store.add(format!("{prefix}.conv{w}.w"), init(&[w * e, f], k, rng)),
                    store.add(format!("{prefix}.conv{w}.b"), zeros(&[f])),
                    w,
                )
            })
            .collect::<Vec<_>>();
        let pooled = f * convs.len();
        let k = 1.0 / (pooled as f64).sqrt();
        Classifier {
            embed,
            convs,
            wo: store.add(format!("{prefix}.out.w"), init(&[pooled, 2], k, rng)),
            bo: store.add(format!("{prefix}.out.b"), zeros(&[2])),
            vocab_size: config.vocab_size,
            max_width: config.max_width(),
        }
    }

    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.wo, self.bo)
    }

    /// `[B, T, E]` embeddings and per-row effective lengths → `[B, 2]` probabilities.
    fn head(&self, tape: &mut Tape, b: &Binding, x: Var, eff: &[usize]) -> Result<Var> {
        let t = tape.shape(x)[1];
        let mut pooled = Vec::with_capacity(self.convs.len());
        for &(w, bias, width) in &self.convs {
            let c = tape.conv1d(x, b[w], b[bias])?;
            let c = tape.tanh(c);
            let out_t = t - width + 1;
            let valid: Vec<f64> = eff
                .iter()
                .flat_map(|&len| (0..out_t).map(move |s| if s + width <= len { 1.0 } else { 0.0 }))
                .collect();
            pooled.push(tape.max_over_time(c, &valid)?);
        }
        let feats = tape.concat(&pooled, 1)?;
        let logits = tape.matmul(feats, b[self.wo])?;
        let logits = tape.add_bias(logits, b[self.bo])?;
        Ok(tape.softmax(logits, 1)?)
    }

    /// Effective lengths: short rows are PAD-extended to the widest filter.
    fn effective(&self, lengths: &[usize]) -> (Vec<usize>, usize) {
        let eff: Vec<usize> = lengths.iter().map(|&l| l.max(self.max_width)).collect();
        let t = eff.iter().copied().max().unwrap_or(self.max_width);
        (eff, t)
    }

    /// `p_C(· | x)` for hard token rows.
    pub fn classify_hard(&self, tape: &mut Tape, b: &Binding, batch: &Batch) -> Result<Var> {
        let rows = batch.rows();
        let (eff, t) = self.effective(&batch.lengths);
        let mut ids = Vec::with_capacity(rows * t);
        for r in 0..rows {
            ids.extend_from_slice(&batch.tokens[r]);
            ids.resize((r + 1) * t, PAD);
        }
        let e = tape.gather(b[self.embed], &ids)?;
        let dim = tape.shape(e)[1];
        let x = tape.reshape(e, [rows, t, dim])?;
        self.head(tape, b, x, &eff)
    }

    /// `p_C(· | x̂)` for soft rows via expected embeddings.
    pub fn classify_soft(&self, tape: &mut Tape, b: &Binding, soft: &SoftSequence) -> Result<Var> {
        let rows = soft.rows();
        if soft.lengths.iter().any(|&l| l == 0) {
            return Err(Error::Data("cannot classify an empty sequence".into()));
        }
        let (eff, t) = self.effective(&soft.lengths);
        let v = self.vocab_size;
        let pad = one_hot_rows(rows, v, PAD);
        let mut dists = Vec::with_capacity(t);
        for step in 0..t {
            let d = if step < soft.steps.len() {
                let m = soft.step_mask(step);
                if m.iter().all(|&x| x == 1.0) {
                    soft.steps[step]
                } else {
                    let live = tape.mul_col(soft.steps[step], &m)?;
                    let filler: Vec<f64> = pad
                        .chunks(v)
                        .zip(&m)
                        .flat_map(|(row, &mv)| row.iter().map(move |p| p * (1.0 - mv)))
                        .collect();
                    let filler = tape.constant([rows, v], filler)?;
                    tape.add(live, filler)?
                }
            } else {
                tape.constant([rows, v], pad.clone())?
            };
            dists.push(d);
        }
        let stacked = tape.stack(&dists)?;
        let flat = tape.reshape(stacked, [rows * t, v])?;
        let e = tape.matmul(flat, b[self.embed])?;
        let dim = tape.shape(e)[1];
        let x = tape.reshape(e, [rows, t, dim])?;
        self.head(tape, b, x, &eff)
    }
}

/// Encoder, decoder and collaborative classifier sharing one parameter store.
#[derive(Debug, Clone)]
pub struct TransferModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub classifier: Classifier,
}

impl TransferModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (v, e, h, a) = (config.vocab_size, config.embed_dim, config.hidden_dim, config.attr_dim);
        let embed = store.add("embed.word", init(&[v, e], 0.5, &mut rng));
        let encoder = Encoder {
            embed,
            attr: store.add("enc.attr", init(&[2, a], 0.5, &mut rng)),
            gru: Gru::new(&mut store, "enc.gru", e + a, h, &mut rng),
            hidden: h,
        };
        let kc = 1.0 / ((2 * h) as f64).sqrt();
        let ko = 1.0 / (h as f64).sqrt();
        let decoder = Decoder {
            embed,
            attr: store.add("dec.attr", init(&[2, a], 0.5, &mut rng)),
            gru: Gru::new(&mut store, "dec.gru", e + a, h, &mut rng),
            wc: store.add("dec.attn.wc", init(&[2 * h, h], kc, &mut rng)),
            bc: store.add("dec.attn.bc", zeros(&[h])),
            wo: store.add("dec.out.w", init(&[h, v], ko, &mut rng)),
            bo: store.add("dec.out.b", zeros(&[v])),
        };
        let classifier = Classifier::new(&mut store, "clf", &config, &mut rng);
        TransferModel {
            config,
            store,
            encoder,
            decoder,
            classifier,
        }
    }

    /// Which parameter group a stored tensor belongs to.
    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("clf.") {
            ParamGroup::Classifier
        } else if name.starts_with("dec.") {
            ParamGroup::Decoder
        } else {
            ParamGroup::Encoder
        }
    }

    /// Greedy transfer of every row toward `labels`, on frozen parameters.
    pub fn transfer_greedy(&self, batch: &Batch, labels: &[AttributeLabel], max_len: usize) -> Result<GreedyDecode> {
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let hs = self.encoder.encode(&mut tape, &b, batch, &batch.labels)?;
        self.decoder.decode_greedy(&mut tape, &b, &hs, labels, max_len)
    }
}

/// θ_E (shared word embedding and encoder), θ_G (decoder), θ_C (classifier).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Classifier,
}

/// Recurrent next-token language model used for perplexity.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    embed: ParamId,
    gru: Gru,
    wo: ParamId,
    bo: ParamId,
    hidden: usize,
}

/// Per-row summed token NLL and the number of predicted tokens (incl. EOS).
#[derive(Debug, Clone)]
pub struct LmScore {
    pub total: Var,
    pub row_nll: Vec<f64>,
    pub row_tokens: Vec<usize>,
}

impl LanguageModel {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        LanguageModel {
            embed: store.add("lm.embed", init(&[v, e], 0.5, rng)),
            gru: Gru::new(store, "lm.gru", e, h, rng),
            wo: store.add("lm.out.w", init(&[h, v], 1.0 / (h as f64).sqrt(), rng)),
            bo: store.add("lm.out.b", zeros(&[v])),
            hidden: h,
        }
    }

    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.wo, self.bo)
    }

    /// Summed NLL of `tokens + EOS` for every row, given BOS as first input.
    pub fn score(&self, tape: &mut Tape, b: &Binding, batch: &Batch) -> Result<LmScore> {
        let rows = batch.rows();
        let mut h = tape.constant([rows, self.hidden], vec![0.0; rows * self.hidden])?;
        let mut input = tape.gather(b[self.embed], &vec![BOS; rows])?;
        let mut terms = Vec::new();
        let mut row_nll = vec![0.0; rows];
        for t in 0..=batch.width() {
            h = self.gru.step(tape, b, input, h)?;
            let logits = tape.matmul(h, b[self.wo])?;
            let logits = tape.add_bias(logits, b[self.bo])?;
            let lp = tape.log_softmax(logits, 1)?;
            let lp = tape.clamp_min(lp, crate::losses::LOG_FLOOR);
            let mut target = Vec::with_capacity(rows);
            let mut mask = Vec::with_capacity(rows);
            for r in 0..rows {
                let len = batch.lengths[r];
                let (tok, m) = if t < len {
                    (batch.tokens[r][t], 1.0)
                } else if t == len {
                    (EOS, 1.0)
                } else {
                    (PAD, 0.0)
                };
                target.push(tok);
                mask.push(m);
            }
            let picked = tape.pick(lp, &target)?;
            for (r, (&v, &m)) in tape.value(picked).iter().zip(&mask).enumerate() {
                row_nll[r] -= v * m;
            }
            let masked = tape.mul_const(picked, &mask)?;
            terms.push(tape.sum(masked));
            if t < batch.width() {
                let ids: Vec<usize> = batch.tokens.iter().map(|row| row[t]).collect();
                input = tape.gather(b[self.embed], &ids)?;
            }
        }
        let stacked = tape.concat(&terms, 0)?;
        let s = tape.sum(stacked);
        Ok(LmScore {
            total: tape.scale(s, -1.0),
            row_nll,
            row_tokens: batch.lengths.iter().map(|l| l + 1).collect(),
        })
    }
}
