//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is checking.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for [`rel_error`]; below it the error is effectively absolute.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between backward gradients and central differences of
/// the scalar built by `build` over every element of every input.
pub fn check<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(&t.clone().requires_grad())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = grads.wrt(*v).unwrap_or(&zeros).to_vec();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].values()[j];
            probe[i].values_mut()[j] = x0 + FD_STEP;
            let (t, _, o) = eval(&probe)?;
            let up = t.item(o);
            probe[i].values_mut()[j] = x0 - FD_STEP;
            let (t, _, o) = eval(&probe)?;
            let down = t.item(o);
            probe[i].values_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng).expect("positive dims")
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// Contracts `y` against fixed random weights so every output element
/// contributes a distinct sensitivity.
fn project(tape: &mut Tape, y: Var, weights: &[f64]) -> Result<Var> {
    let n = tape.value(y).len();
    let p = tape.mul_const(y, &weights[..n])?;
    Ok(tape.sum(p))
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn build_case(op: &'static str, rng: &mut ChaCha8Rng) -> Case {
    let (m, n, k) = (dim(rng), dim(rng), dim(rng));
    let w: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
    macro_rules! case {
        ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
            let w = w.clone();
            let f: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>> = Box::new(move |$t: &mut Tape, $v: &[Var]| {
                let y = $body?;
                project($t, y, &w)
            });
            ($inputs, f)
        }};
    }
    match op {
        "add" => case!(vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])], |t, v| t.add(v[0], v[1])),
        "sub" => case!(vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])], |t, v| t.sub(v[0], v[1])),
        "mul" => case!(vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])], |t, v| t.mul(v[0], v[1])),
        "add_bias" => case!(vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])], |t, v| t.add_bias(v[0], v[1])),
        "affine" => {
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
            case!(vec![rand_tensor(rng, &[m, n])], |t, v| Ok::<_, crate::NumError>(t.affine(v[0], a, b)))
        }
        "mask" => {
            let mask: Vec<f64> = (0..m * n).map(|_| f64::from(rng.gen_bool(0.6) as u8)).collect();
            case!(vec![rand_tensor(rng, &[m, n])], |t, v| t.mask(v[0], &mask))
        }
        "mul_col" => {
            let col: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            case!(vec![rand_tensor(rng, &[m, n])], |t, v| t.mul_col(v[0], &col))
        }
        "matmul" => case!(vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])], |t, v| t.matmul(v[0], v[1])),
        "concat" => {
            let axis = rng.gen_range(0..2);
            let (s1, s2) = if axis == 0 { ([m, n], [k, n]) } else { ([m, n], [m, k]) };
            case!(vec![rand_tensor(rng, &s1), rand_tensor(rng, &s2)], |t, v| t.concat(&[v[0], v[1]], axis))
        }
        "slice" => {
            let axis = rng.gen_range(0..2);
            let full = m + 1;
            let start = rng.gen_range(0..full);
            let len = rng.gen_range(1..=full - start);
            let shape = if axis == 0 { [full, n] } else { [n, full] };
            case!(vec![rand_tensor(rng, &shape)], |t, v| t.slice(v[0], axis, start, len))
        }
        "gather" => {
            let ids: Vec<usize> = (0..k + 1).map(|_| rng.gen_range(0..m)).collect();
            case!(vec![rand_tensor(rng, &[m, n])], |t, v| t.gather(v[0], &ids))
        }
        "stack" => case!(
            vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
            |t, v| t.stack(&[v[0], v[1], v[2]])
        ),
        "reshape" => case!(vec![rand_tensor(rng, &[m, n])], |t, v| t.reshape(v[0], [n, m])),
        "tanh" => case!(vec![rand_tensor(rng, &[m, n])], |t, v| Ok::<_, crate::NumError>(t.tanh(v[0]))),
        "sigmoid" => case!(vec![rand_tensor(rng, &[m, n])], |t, v| Ok::<_, crate::NumError>(t.sigmoid(v[0]))),
        "softmax" => {
            let axis = rng.gen_range(0..2);
            case!(vec![rand_tensor(rng, &[m, n + 1])], |t, v| t.softmax(v[0], axis))
        }
        "log_softmax" => {
            let axis = rng.gen_range(0..2);
            case!(vec![rand_tensor(rng, &[m, n + 1])], |t, v| t.log_softmax(v[0], axis))
        }
        "masked_softmax" => {
            let cols = n + 1;
            let mut mask: Vec<f64> = (0..m * cols).map(|_| f64::from(rng.gen_bool(0.7) as u8)).collect();
            for r in 0..m {
                let c = rng.gen_range(0..cols);
                mask[r * cols + c] = 1.0;
            }
            case!(vec![rand_tensor(rng, &[m, cols])], |t, v| t.masked_softmax(v[0], &mask))
        }
        "sum" => case!(vec![rand_tensor(rng, &[m, n])], |t, v| Ok::<_, crate::NumError>(t.sum(v[0]))),
        "mean" => case!(vec![rand_tensor(rng, &[m, n])], |t, v| Ok::<_, crate::NumError>(t.mean(v[0]))),
        "masked_mean" => {
            let mut mask: Vec<f64> = (0..m * n).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect();
            mask[0] = 1.0;
            case!(vec![rand_tensor(rng, &[m, n])], |t, v| t.masked_mean(v[0], &mask))
        }
        "conv1d" => {
            let width = rng.gen_range(1..=3);
            let len = width + rng.gen_range(0..4);
            case!(
                vec![
                    rand_tensor(rng, &[m, len, k]),
                    rand_tensor(rng, &[width * k, n]),
                    rand_tensor(rng, &[n]),
                ],
                |t, v| t.conv1d(v[0], v[1], v[2])
            )
        }
        "max_over_time" => {
            let len = k + 1;
            // distinct, well-separated values so no perturbation flips an argmax
            let mut vals: Vec<f64> = (0..m * len * n).map(|i| i as f64 * 0.05).collect();
            vals.shuffle(rng);
            vals.iter_mut().for_each(|x| *x += rng.gen_range(0.0..0.01));
            let x = Tensor::new([m, len, n], vals).unwrap();
            let mut valid: Vec<f64> = (0..m * len).map(|_| f64::from(rng.gen_bool(0.7) as u8)).collect();
            for b in 0..m {
                valid[b * len] = 1.0;
            }
            case!(vec![x], |t, v| t.max_over_time(v[0], &valid))
        }
        "pick" => {
            let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
            case!(vec![rand_tensor(rng, &[m, n])], |t, v| t.pick(v[0], &idx))
        }
        "log_clamp" => {
            let vals = (0..m * n).map(|_| rng.gen_range(0.1..2.0)).collect();
            let x = Tensor::new([m, n], vals).unwrap();
            case!(vec![x], |t, v| Ok::<_, crate::NumError>(t.log_clamp(v[0], 1e-12)))
        }
        "clamp_min" => {
            let vals = (0..m * n)
                .map(|_| {
                    let x: f64 = rng.gen_range(0.01..1.0);
                    if rng.gen_bool(0.5) { x } else { -x }
                })
                .collect();
            let x = Tensor::new([m, n], vals).unwrap();
            case!(vec![x], |t, v| Ok::<_, crate::NumError>(t.clamp_min(v[0], 0.0)))
        }
        "attn_scores" => case!(vec![rand_tensor(rng, &[m, k, n]), rand_tensor(rng, &[m, n])], |t, v| t
            .attn_scores(v[0], v[1])),
        "attn_context" => case!(vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[m, k, n])], |t, v| t
            .attn_context(v[0], v[1])),
        "composite" => case!(
            vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n + 1])],
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let a = t.tanh(h);
                t.log_softmax(a, 1)
            }
        ),
        other => panic!("unknown op `{other}`"),
    }
}

/// Every op covered by [`op_suite`].
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "add_bias",
    "affine",
    "mask",
    "mul_col",
    "matmul",
    "concat",
    "slice",
    "gather",
    "stack",
    "reshape",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "masked_softmax",
    "sum",
    "mean",
    "masked_mean",
    "conv1d",
    "max_over_time",
    "pick",
    "log_clamp",
    "clamp_min",
    "attn_scores",
    "attn_context",
    "composite",
];

/// Runs `cases` seeded random finite-difference checks per op.
pub fn op_suite(seed: u64, cases: usize) -> Result<Vec<OpReport>> {
    OPS.iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut worst: f64 = 0.0;
            for c in 0..cases {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32) ^ c as u64);
                let (inputs, f) = build_case(op, &mut rng);
                worst = worst.max(check(&inputs, f)?);
            }
            Ok(OpReport {
                op,
                cases,
                max_rel_error: worst,
            })
        })
        .collect()
}
