//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends a node holding its output value. Nodes whose
//! inputs all lack `requires_grad` are recorded as constants with no parents,
//! so backward never walks into them.

use crate::error::{NumError, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    MulCol(Var, Vec<f64>),
    Matmul(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Stack(Vec<Var>),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Conv1d { x: Var, w: Var, b: Var, width: usize },
    MaxOverTime { x: Var, argmax: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    LogClamp { x: Var, floor: f64 },
    ClampMin { x: Var, floor: f64 },
    AttnScores { states: Var, q: Var },
    AttnContext { a: Var, states: Var },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` is not a
    /// differentiable leaf or the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Split of `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c (m×n) = alpha * op(a) * op(b) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every (row, col)
    // addressed by the given strides; `c` is a distinct, dense m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_mask(op: &'static str, mask: &[f64]) -> Result<()> {
    if mask.iter().all(|&m| m == 0.0 || m == 1.0) {
        Ok(())
    } else {
        Err(NumError::BadMask { op })
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies the value of `v` out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records `t` as a leaf; it is differentiable iff `t.is_requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.is_requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(&t))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumError::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rec, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let n = *sx.last().unwrap();
        if self.shape(bias) != [n] {
            return Err(NumError::shape("add_bias", sx, self.shape(bias)));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(&[x, bias]);
        Ok(self.push(sx.to_vec(), value, Op::AddBias(x, bias), ng))
    }

    /// `alpha * x + beta`.
    pub fn affine(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        let value = self.value(x).iter().map(|v| alpha * v + beta).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Affine(x, alpha), ng)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        self.affine(x, alpha, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(NumError::shape("mul_const", self.shape(x), &[c.len()]));
        }
        let value = self.value(x).iter().zip(c).map(|(a, b)| a * b).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulConst(x, c.to_vec()), ng))
    }

    /// Zeroes the entries of `x` where the 0/1 `mask` is 0.
    pub fn mask(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        check_mask("mask", mask)?;
        self.mul_const(x, mask)
    }

    /// Scales row `r` of `x` (first axis) by the constant `col[r]`.
    pub fn mul_col(&mut self, x: Var, col: &[f64]) -> Result<Var> {
        let sx = self.shape(x);
        if sx[0] != col.len() {
            return Err(NumError::shape("mul_col", sx, &[col.len()]));
        }
        let inner = numel(&sx[1..]);
        let value = self
            .value(x)
            .chunks(inner)
            .zip(col)
            .flat_map(|(row, &c)| row.iter().map(move |v| v * c))
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(sx.to_vec(), value, Op::MulCol(x, col.to_vec()), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), k as isize, 1, self.value(b), n as isize, 1, 0.0, &mut c);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], c, Op::Matmul(a, b), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(NumError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(NumError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                value.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(NumError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {sx:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&sx, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            value.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(shape, value, Op::Slice { x, axis, start }, ng))
    }

    /// Row lookup: `table[ids[i]]` for each `i`, giving `[ids.len(), dim]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(NumError::shape("gather", st, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(NumError::invalid("gather", "no ids"));
        }
        let (rows, dim) = (st[0], st[1]);
        let src = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(NumError::Index {
                    op: "gather",
                    index: id,
                    bound: rows,
                });
            }
            value.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            vec![ids.len(), dim],
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks equally shaped `[B, ...]` tensors into `[B, parts.len(), ...]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::invalid("stack", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        for &p in parts {
            if self.shape(p) != base.as_slice() {
                return Err(NumError::shape("stack", &base, self.shape(p)));
            }
        }
        let rows = base[0];
        let inner = numel(&base[1..]);
        let mut value = Vec::with_capacity(rows * parts.len() * inner);
        for r in 0..rows {
            for &p in parts {
                value.extend_from_slice(&self.value(p)[r * inner..(r + 1) * inner]);
            }
        }
        let mut shape = vec![rows, parts.len()];
        shape.extend_from_slice(&base[1..]);
        let ng = self.ng(parts);
        Ok(self.push(shape, value, Op::Stack(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(NumError::shape("reshape", self.shape(x), &shape));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, value, Op::Reshape(x), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.tanh()).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Sigmoid(x), ng)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(NumError::invalid("softmax", format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_split(&sx, axis);
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| src[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|t| (src[at(t)] - max).exp()).sum();
                let lz = max + z.ln();
                for t in 0..len {
                    value[at(t)] = if log {
                        src[at(t)] - lz
                    } else {
                        (src[at(t)] - max).exp() / z
                    };
                }
            }
        }
        let ng = self.ng(&[x]);
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        Ok(self.push(sx, value, op, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Softmax over the last axis restricted to positions where `mask` is 1.
    /// Masked positions receive exactly zero probability.
    pub fn masked_softmax(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if mask.len() != numel(&sx) {
            return Err(NumError::shape("masked_softmax", &sx, &[mask.len()]));
        }
        check_mask("masked_softmax", mask)?;
        let len = *sx.last().unwrap();
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        for (row, ((xs, ms), out)) in src
            .chunks(len)
            .zip(mask.chunks(len))
            .zip(value.chunks_mut(len))
            .enumerate()
        {
            if !ms.contains(&1.0) {
                return Err(NumError::AllMasked {
                    op: "masked_softmax",
                    row,
                });
            }
            let max = xs
                .iter()
                .zip(ms)
                .filter(|(_, &m)| m == 1.0)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ((o, &v), &m) in out.iter_mut().zip(xs).zip(ms) {
                if m == 1.0 {
                    *o = (v - max).exp();
                    z += *o;
                }
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(sx, value, Op::MaskedSoftmax(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    /// `sum(x * mask) / sum(mask)`.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        check_mask("masked_mean", mask)?;
        let count: f64 = mask.iter().sum();
        if count == 0.0 {
            return Err(NumError::AllMasked {
                op: "masked_mean",
                row: 0,
            });
        }
        let m = self.mul_const(x, mask)?;
        let s = self.sum(m);
        Ok(self.scale(s, 1.0 / count))
    }

    /// Valid-padding 1-D convolution.
    ///
    /// `x` is `[B, T, C]` (or `[T, C]`), `w` is `[width * C, F]` with rows
    /// ordered (offset, channel), `b` is `[F]`. Output is `[B, T - width + 1, F]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, t, c) = match sx.as_slice() {
            [t, c] => (1, *t, *c),
            [bt, t, c] => (*bt, *t, *c),
            _ => return Err(NumError::shape("conv1d", &sx, &sw)),
        };
        if sw.len() != 2 || sw[0] % c != 0 || sw[0] == 0 {
            return Err(NumError::shape("conv1d", &sx, &sw));
        }
        let width = sw[0] / c;
        let f = sw[1];
        if self.shape(b) != [f] {
            return Err(NumError::shape("conv1d", &sw, self.shape(b)));
        }
        if width > t {
            return Err(NumError::invalid(
                "conv1d",
                format!("filter width {width} exceeds length {t}"),
            ));
        }
        let out_t = t - width + 1;
        let xs = self.value(x);
        let ws = self.value(w);
        let bs = self.value(b);
        let mut value = Vec::with_capacity(batch * out_t * f);
        for _ in 0..batch * out_t {
            value.extend_from_slice(bs);
        }
        for bi in 0..batch {
            gemm(
                out_t,
                width * c,
                f,
                &xs[bi * t * c..],
                c as isize,
                1,
                ws,
                f as isize,
                1,
                1.0,
                &mut value[bi * out_t * f..(bi + 1) * out_t * f],
            );
        }
        let shape = if sx.len() == 2 {
            vec![out_t, f]
        } else {
            vec![batch, out_t, f]
        };
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(shape, value, Op::Conv1d { x, w, b, width }, ng))
    }

    /// Max over the time axis of `[B, T, F]` restricted to positions where
    /// `valid` (`[B, T]`, 0/1) is 1. Ties resolve to the earliest position.
    pub fn max_over_time(&mut self, x: Var, valid: &[f64]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || valid.len() != sx[0] * sx[1] {
            return Err(NumError::shape("max_over_time", &sx, &[valid.len()]));
        }
        check_mask("max_over_time", valid)?;
        let (batch, t, f) = (sx[0], sx[1], sx[2]);
        let xs = self.value(x);
        let mut value = vec![f64::NEG_INFINITY; batch * f];
        let mut argmax = vec![usize::MAX; batch * f];
        for b in 0..batch {
            if valid[b * t..(b + 1) * t].iter().all(|&m| m == 0.0) {
                return Err(NumError::AllMasked {
                    op: "max_over_time",
                    row: b,
                });
            }
            for s in 0..t {
                if valid[b * t + s] == 0.0 {
                    continue;
                }
                for j in 0..f {
                    let v = xs[(b * t + s) * f + j];
                    if v > value[b * f + j] || argmax[b * f + j] == usize::MAX {
                        value[b * f + j] = v;
                        argmax[b * f + j] = s;
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![batch, f], value, Op::MaxOverTime { x, argmax }, ng))
    }

    /// `out[r] = x[r, idx[r]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != idx.len() {
            return Err(NumError::shape("pick", sx, &[idx.len()]));
        }
        let n = sx[1];
        let xs = self.value(x);
        let mut value = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(NumError::Index {
                    op: "pick",
                    index: i,
                    bound: n,
                });
            }
            value.push(xs[r * n + i]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            vec![idx.len()],
            value,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamp(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).iter().map(|&v| floor_keep_nan(v, floor).ln()).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::LogClamp { x, floor }, ng)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).iter().map(|&v| floor_keep_nan(v, floor)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::ClampMin { x, floor }, ng)
    }

    /// Dot-product scores `s[b, t] = states[b, t, :] · q[b, :]`.
    pub fn attn_scores(&mut self, states: Var, q: Var) -> Result<Var> {
        let ss = self.shape(states).to_vec();
        let sq = self.shape(q);
        if ss.len() != 3 || sq != [ss[0], ss[2]] {
            return Err(NumError::shape("attn_scores", &ss, sq));
        }
        let (batch, t, h) = (ss[0], ss[1], ss[2]);
        let st = self.value(states);
        let qs = self.value(q);
        let mut value = Vec::with_capacity(batch * t);
        for b in 0..batch {
            let qb = &qs[b * h..(b + 1) * h];
            for s in 0..t {
                let row = &st[(b * t + s) * h..(b * t + s + 1) * h];
                value.push(row.iter().zip(qb).map(|(x, y)| x * y).sum());
            }
        }
        let ng = self.ng(&[states, q]);
        Ok(self.push(vec![batch, t], value, Op::AttnScores { states, q }, ng))
    }

    /// Weighted context `c[b, :] = Σ_t a[b, t] * states[b, t, :]`.
    pub fn attn_context(&mut self, a: Var, states: Var) -> Result<Var> {
        let ss = self.shape(states).to_vec();
        let sa = self.shape(a);
        if ss.len() != 3 || sa != [ss[0], ss[1]] {
            return Err(NumError::shape("attn_context", sa, &ss));
        }
        let (batch, t, h) = (ss[0], ss[1], ss[2]);
        let st = self.value(states);
        let av = self.value(a);
        let mut value = vec![0.0; batch * h];
        for b in 0..batch {
            let out = &mut value[b * h..(b + 1) * h];
            for s in 0..t {
                let w = av[b * t + s];
                let row = &st[(b * t + s) * h..(b * t + s + 1) * h];
                out.iter_mut().zip(row).for_each(|(o, r)| *o += w * r);
            }
        }
        let ng = self.ng(&[a, states]);
        Ok(self.push(vec![batch, h], value, Op::AttnContext { a, states }, ng))
    }

    /// Reverse pass from a scalar `loss`, visiting each node once in reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(NumError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `v` when `v` is differentiable.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64], &[f64])| {
            let n = &nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf, &n.value);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb, _| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga, _| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb, _| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga, _| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * z;
                    }
                });
                acc(*b, &mut |gb, _| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * z;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx, _| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                acc(*b, &mut |gb, _| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::Affine(x, alpha) => {
                acc(*x, &mut |gx, _| gx.iter_mut().zip(g).for_each(|(p, q)| *p += alpha * q));
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |gx, _| {
                    for ((p, q), m) in gx.iter_mut().zip(g).zip(c) {
                        *p += q * m;
                    }
                });
            }
            Op::MulCol(x, col) => {
                acc(*x, &mut |gx, _| {
                    let inner = gx.len() / col.len();
                    for ((grow, row), &cv) in gx.chunks_mut(inner).zip(g.chunks(inner)).zip(col) {
                        grow.iter_mut().zip(row).for_each(|(p, q)| *p += q * cv);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = G · Bᵀ
                acc(*a, &mut |ga, _| {
                    gemm(m, n, k, g, n as isize, 1, vb, 1, n as isize, 1.0, ga);
                });
                // dB = Aᵀ · G
                acc(*b, &mut |gb, _| {
                    gemm(k, m, n, va, 1, k as isize, g, n as isize, 1, 1.0, gb);
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].shape[*axis];
                    let total = node.shape[*axis];
                    acc(p, &mut |gp, _| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = &nodes[x.0].shape;
                let (outer, full, inner) = axis_split(sx, *axis);
                let len = node.shape[*axis];
                acc(*x, &mut |gx, _| {
                    for o in 0..outer {
                        let off = (o * full + start) * inner;
                        let dst = &mut gx[off..off + len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dim = nodes[table.0].shape[1];
                acc(*table, &mut |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        dst.iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Stack(parts) => {
                let rows = node.shape[0];
                let t = parts.len();
                let inner = node.value.len() / (rows * t);
                for (j, &p) in parts.iter().enumerate() {
                    acc(p, &mut |gp, _| {
                        for r in 0..rows {
                            let src = &g[(r * t + j) * inner..(r * t + j + 1) * inner];
                            let dst = &mut gp[r * inner..(r + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx, _| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |gx, _| {
                    for ((p, q), yv) in gx.iter_mut().zip(g).zip(y) {
                        *p += q * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |gx, _| {
                    for ((p, q), yv) in gx.iter_mut().zip(g).zip(y) {
                        *p += q * yv * (1.0 - yv);
                    }
                });
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |gx, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |t: usize| (o * len + t) * inner + i;
                            if log {
                                let gs: f64 = (0..len).map(|t| g[at(t)]).sum();
                                for t in 0..len {
                                    gx[at(t)] += g[at(t)] - y[at(t)].exp() * gs;
                                }
                            } else {
                                let dot: f64 = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                                for t in 0..len {
                                    gx[at(t)] += y[at(t)] * (g[at(t)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let len = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &mut |gx, _| {
                    for ((gxr, gr), yr) in gx.chunks_mut(len).zip(g.chunks(len)).zip(y.chunks(len)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((p, q), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                            *p += yv * (q - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx, _| gx.iter_mut().for_each(|p| *p += g[0]));
            }
            Op::Mean(x) => {
                acc(*x, &mut |gx, _| {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|p| *p += s);
                });
            }
            Op::Conv1d { x, w, b, width } => {
                let sx = &nodes[x.0].shape;
                let (batch, t, c) = match sx.as_slice() {
                    [t, c] => (1, *t, *c),
                    [bt, t, c] => (*bt, *t, *c),
                    _ => unreachable!(),
                };
                let f = nodes[w.0].shape[1];
                let out_t = t - width + 1;
                let k = width * c;
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                acc(*b, &mut |gb, _| {
                    for row in g.chunks(f) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
                // dW = Σ_b windowsᵀ · G_b
                acc(*w, &mut |gw, _| {
                    for bi in 0..batch {
                        gemm(
                            k,
                            out_t,
                            f,
                            &vx[bi * t * c..],
                            1,
                            c as isize,
                            &g[bi * out_t * f..],
                            f as isize,
                            1,
                            1.0,
                            gw,
                        );
                    }
                });
                acc(*x, &mut |gx, _| {
                    let mut win = vec![0.0; out_t * k];
                    for bi in 0..batch {
                        gemm(out_t, f, k, &g[bi * out_t * f..], f as isize, 1, vw, 1, f as isize, 0.0, &mut win);
                        for s in 0..out_t {
                            let dst = &mut gx[(bi * t + s) * c..(bi * t + s) * c + k];
                            dst.iter_mut()
                                .zip(&win[s * k..(s + 1) * k])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                });
            }
            Op::MaxOverTime { x, argmax } => {
                let sx = &nodes[x.0].shape;
                let (t, f) = (sx[1], sx[2]);
                acc(*x, &mut |gx, _| {
                    for (bf, (&s, q)) in argmax.iter().zip(g).enumerate() {
                        let (b, j) = (bf / f, bf % f);
                        gx[(b * t + s) * f + j] += q;
                    }
                });
            }
            Op::Pick { x, idx } => {
                let n = nodes[x.0].shape[1];
                acc(*x, &mut |gx, _| {
                    for (r, (&i, q)) in idx.iter().zip(g).enumerate() {
                        gx[r * n + i] += q;
                    }
                });
            }
            Op::LogClamp { x, floor } => {
                acc(*x, &mut |gx, xv| {
                    for ((p, q), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > *floor {
                            *p += q / v;
                        }
                    }
                });
            }
            Op::ClampMin { x, floor } => {
                acc(*x, &mut |gx, xv| {
                    for ((p, q), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > *floor {
                            *p += q;
                        }
                    }
                });
            }
            Op::AttnScores { states, q } => {
                let ss = &nodes[states.0].shape;
                let (batch, t, h) = (ss[0], ss[1], ss[2]);
                let (vs, vq) = (&nodes[states.0].value, &nodes[q.0].value);
                acc(*states, &mut |gs, _| {
                    for b in 0..batch {
                        for s in 0..t {
                            let w = g[b * t + s];
                            let dst = &mut gs[(b * t + s) * h..(b * t + s + 1) * h];
                            dst.iter_mut()
                                .zip(&vq[b * h..(b + 1) * h])
                                .for_each(|(d, v)| *d += w * v);
                        }
                    }
                });
                acc(*q, &mut |gq, _| {
                    for b in 0..batch {
                        let dst = &mut gq[b * h..(b + 1) * h];
                        for s in 0..t {
                            let w = g[b * t + s];
                            dst.iter_mut()
                                .zip(&vs[(b * t + s) * h..(b * t + s + 1) * h])
                                .for_each(|(d, v)| *d += w * v);
                        }
                    }
                });
            }
            Op::AttnContext { a, states } => {
                let ss = &nodes[states.0].shape;
                let (batch, t, h) = (ss[0], ss[1], ss[2]);
                let (vs, va) = (&nodes[states.0].value, &nodes[a.0].value);
                acc(*a, &mut |ga, _| {
                    for b in 0..batch {
                        let gb = &g[b * h..(b + 1) * h];
                        for s in 0..t {
                            let row = &vs[(b * t + s) * h..(b * t + s + 1) * h];
                            ga[b * t + s] += row.iter().zip(gb).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*states, &mut |gs, _| {
                    for b in 0..batch {
                        let gb = &g[b * h..(b + 1) * h];
                        for s in 0..t {
                            let w = va[b * t + s];
                            let dst = &mut gs[(b * t + s) * h..(b * t + s + 1) * h];
                            dst.iter_mut().zip(gb).for_each(|(d, v)| *d += w * v);
                        }
                    }
                });
            }
        }
    }
}

/// `max(v, floor)` that lets NaN through, so divergence stays visible.
fn floor_keep_nan(v: f64, floor: f64) -> f64 {
    if v.is_nan() {
        v
    } else {
        v.max(floor)
    }
}
