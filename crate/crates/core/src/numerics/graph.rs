//! Define-by-run reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves through [`Graph::param`]; after [`Graph::backward`] the resulting
//! [`Gradients`] are routed back into the parameter tensors by identity.
//!
//! Every value is a `rows × cols` matrix. Vectors are single rows and scalars
//! are `1 × 1`. The only implicit broadcast is a row vector added across the
//! rows of a matrix ([`Graph::add_row`]); everything else is explicit.

use std::cell::RefCell;
use std::collections::HashMap;

use super::tensor::{ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Exp(Var),
    Ln {
        x: Var,
        lo: f64,
        hi: f64,
    },
    LogSigmoid(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSumExp(Var, usize),
    CosineRows(Var, Var),
    RowScale(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    RepeatRows(Var, usize),
    MeanPool(Var, usize),
    Reshape(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Computation graph recorded during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

/// Result of [`Graph::backward`]: per-node adjoints and per-parameter sums.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn for_param(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(|g| g.as_slice())
    }

    /// Adds this pass's gradient into `t.grad` if `t` took part in the graph.
    pub fn accumulate_into(&self, t: &mut Tensor) -> bool {
        if !t.requires_grad() {
            return false;
        }
        match self.by_param.get(&t.id()) {
            Some(g) => {
                t.accumulate_grad(g);
                true
            }
            None => false,
        }
    }

    /// Accumulates into every trainable parameter of `model`.
    pub fn apply<M: Parameterized + ?Sized>(&self, model: &mut M) {
        for (_, t) in model.params_mut() {
            self.accumulate_into(t);
        }
    }
}

/// Anything owning named parameter tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn zero_grad(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.params_mut() {
            t.set_requires_grad(on);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Prefixes every name in a parameter list.
pub fn prefixed<T>(prefix: &str, list: Vec<(String, T)>) -> Vec<(String, T)> {
    list.into_iter().map(|(n, t)| (format!("{prefix}/{n}"), t)).collect()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Affine(..) => "affine",
        Op::Sigmoid(..) => "sigmoid",
        Op::Gelu(..) => "gelu",
        Op::Square(..) => "square",
        Op::Exp(..) => "exp",
        Op::Ln { .. } => "ln",
        Op::LogSigmoid(..) => "log_sigmoid",
        Op::SumAll(..) => "sum",
        Op::SumAxis(..) => "sum_axis",
        Op::Softmax(..) => "softmax",
        Op::LogSumExp(..) => "logsumexp",
        Op::CosineRows(..) => "cosine",
        Op::RowScale(..) => "row_scale",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::GatherCols(..) => "gather_cols",
        Op::RepeatRows(..) => "repeat_rows",
        Op::MeanPool(..) => "mean_pool",
        Op::Reshape(..) => "reshape",
        Op::Transpose(..) => "transpose",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "attention",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Lane layout of a reduction along `axis` of a `rows × cols` matrix:
/// (number of lanes, lane length, start offset of lane i, stride).
fn lanes(rows: usize, cols: usize, axis: usize) -> (usize, usize, impl Fn(usize) -> usize, usize) {
    if axis == 1 {
        (
            rows,
            cols,
            Box::new(move |i| i * cols) as Box<dyn Fn(usize) -> usize>,
            1,
        )
    } else {
        (cols, rows, Box::new(move |i| i) as Box<dyn Fn(usize) -> usize>, cols)
    }
}

fn check_axis(op: &'static str, axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::dim(op, format!("axis {axis} does not exist on a matrix")));
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name(&op)));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[v.0].rows, nodes[v.0].cols)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.dims(v)
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Registers a tensor as a leaf. Trainable tensors receive gradients;
    /// registering the same tensor twice returns the same node.
    pub fn param(&self, t: &Tensor) -> Result<Var> {
        if let Some(v) = self.params.borrow().get(&t.id()) {
            return Ok(*v);
        }
        let (r, c) = t.as_matrix_dims()?;
        let v = self.push(t.data().to_vec(), r, c, Op::Leaf, t.requires_grad())?;
        self.nodes.borrow_mut()[v.0].param = Some(t.id());
        self.params.borrow_mut().insert(t.id(), v);
        Ok(v)
    }

    pub fn constant(&self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::dim(
                "constant",
                format!("{rows}x{cols} does not hold {} values", data.len()),
            ));
        }
        self.push(data, rows, cols, Op::Leaf, false)
    }

    /// A leaf that receives gradients but is not tied to any parameter.
    pub fn variable(&self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        let v = self.constant(rows, cols, data)?;
        self.nodes.borrow_mut()[v.0].needs_grad = true;
        Ok(v)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            matmul_raw(&nodes[a.0].value, &nodes[b.0].value, m, k, n)
        };
        self.push(out, m, n, Op::MatMul(a, b), self.ng(a) || self.ng(b))
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::dim(name, format!("{da:?} vs {db:?}")));
        }
        let nodes = self.nodes.borrow();
        let out = nodes[a.0]
            .value
            .iter()
            .zip(&nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((out, da.0, da.1))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, r, c) = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(out, r, c, Op::Add(a, b), self.ng(a) || self.ng(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (out, r, c) = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push(out, r, c, Op::Sub(a, b), self.ng(a) || self.ng(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, r, c) = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(out, r, c, Op::Mul(a, b), self.ng(a) || self.ng(b))
    }

    /// `a + row`, with the `1 × cols` row added to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(Error::dim("add_row", format!("{r}x{c} plus {rr}x{rc}")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let bias = &nodes[row.0].value;
            let mut out = nodes[a.0].value.clone();
            for chunk in out.chunks_mut(c) {
                chunk.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
            out
        };
        self.push(out, r, c, Op::AddRow(a, row), self.ng(a) || self.ng(row))
    }

    /// `scale · a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.with_value(a, |x| x.iter().map(|v| scale * v + shift).collect());
        self.push(out, r, c, Op::Affine(a, scale), self.ng(a))
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 0.0)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.with_value(a, |x| x.iter().map(|v| f(*v)).collect());
        self.push(out, r, c, op, self.ng(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log after clamping into `[lo, hi]`; clamped entries pass no gradient.
    pub fn ln_clamped(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Contract(format!("ln clamp range [{lo}, {hi}] invalid")));
        }
        self.unary(a, move |x| x.clamp(lo, hi).ln(), Op::Ln { x: a, lo, hi })
    }

    pub fn log_sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.with_value(a, |x| x.iter().sum());
        self.push(vec![s], 1, 1, Op::SumAll(a), self.ng(a))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Sums along `axis` (0: down columns → `1 × cols`, 1: across rows → `rows × 1`).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        check_axis("sum_axis", axis)?;
        let (r, c) = self.dims(a);
        let (n, len, start, stride) = lanes(r, c, axis);
        let out: Vec<f64> = self.with_value(a, |x| {
            (0..n)
                .map(|i| (0..len).map(|j| x[start(i) + j * stride]).sum())
                .collect()
        });
        let (orow, ocol) = if axis == 1 { (r, 1) } else { (1, c) };
        self.push(out, orow, ocol, Op::SumAxis(a, axis), self.ng(a))
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", axis)?;
        let (r, c) = self.dims(a);
        let (n, len, start, stride) = lanes(r, c, axis);
        let mut out = vec![0.0; r * c];
        self.with_value(a, |x| {
            for i in 0..n {
                let idx = |j: usize| start(i) + j * stride;
                let m = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        });
        self.push(out, r, c, Op::Softmax(a, axis), self.ng(a))
    }

    /// `log Σ exp` along `axis`, stabilised by max subtraction.
    pub fn logsumexp(&self, a: Var, axis: usize) -> Result<Var> {
        check_axis("logsumexp", axis)?;
        let (r, c) = self.dims(a);
        let (n, len, start, stride) = lanes(r, c, axis);
        let out: Vec<f64> = self.with_value(a, |x| {
            (0..n)
                .map(|i| {
                    let lane: Vec<f64> = (0..len).map(|j| x[start(i) + j * stride]).collect();
                    super::scalar::logsumexp(&lane)
                })
                .collect()
        });
        let (orow, ocol) = if axis == 1 { (r, 1) } else { (1, c) };
        self.push(out, orow, ocol, Op::LogSumExp(a, axis), self.ng(a))
    }

    /// Row-wise cosine similarity of two `rows × cols` matrices → `rows × 1`.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::dim("cosine", format!("{da:?} vs {db:?}")));
        }
        let (r, c) = da;
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let mut out = Vec::with_capacity(r);
            for i in 0..r {
                let xa = &x[i * c..(i + 1) * c];
                let yb = &y[i * c..(i + 1) * c];
                let na = xa.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = yb.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
                }
                let dot: f64 = xa.iter().zip(yb).map(|(p, q)| p * q).sum();
                out.push((dot / (na * nb)).clamp(-1.0, 1.0));
            }
            out
        };
        self.push(out, r, 1, Op::CosineRows(a, b), self.ng(a) || self.ng(b))
    }

    /// Multiplies row `i` of `a` by the scalar `s[i]` (`s` is `rows × 1`).
    pub fn row_scale(&self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let ds = self.dims(s);
        if ds != (r, 1) {
            return Err(Error::dim("row_scale", format!("{r}x{c} scaled by {ds:?}")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[s.0].value;
            nodes[a.0]
                .value
                .chunks(c)
                .zip(sv)
                .flat_map(|(row, k)| row.iter().map(move |v| v * k))
                .collect()
        };
        self.push(out, r, c, Op::RowScale(a, s), self.ng(a) || self.ng(s))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let r = self.dims(*first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = self.dims(*p);
            if pr != r {
                return Err(Error::dim("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for (p, w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value[i * w..(i + 1) * w]);
                }
            }
            out
        };
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, r, c, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", format!("range {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let out = self.with_value(a, |x| {
            (0..r)
                .flat_map(|i| x[i * c + start..i * c + end].iter().copied())
                .collect()
        });
        debug_assert_eq!(w * r, r * (end - start));
        self.push(out, r, w, Op::SliceCols(a, start), self.ng(a))
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                size: r,
            });
        }
        let out = self.with_value(table, |x| {
            idx.iter()
                .flat_map(|&i| x[i * c..(i + 1) * c].iter().copied())
                .collect()
        });
        self.push(out, idx.len(), c, Op::GatherRows(table, idx.to_vec()), self.ng(table))
    }

    /// Columns of `a` selected by `idx`.
    pub fn gather_cols(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::dim("gather_cols", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Index {
                what: "gather_cols",
                index: bad,
                size: c,
            });
        }
        let out = self.with_value(a, |x| {
            (0..r).flat_map(|i| idx.iter().map(move |&j| x[i * c + j])).collect()
        });
        self.push(out, r, idx.len(), Op::GatherCols(a, idx.to_vec()), self.ng(a))
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if times == 0 {
            return Err(Error::dim("repeat_rows", "zero repetitions"));
        }
        let out = self.with_value(a, |x| {
            let mut out = Vec::with_capacity(r * c * times);
            for row in x.chunks(c) {
                for _ in 0..times {
                    out.extend_from_slice(row);
                }
            }
            out
        });
        self.push(out, r * times, c, Op::RepeatRows(a, times), self.ng(a))
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn mean_pool(&self, a: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if group == 0 || r % group != 0 {
            return Err(Error::dim("mean_pool", format!("{r} rows in blocks of {group}")));
        }
        let n = r / group;
        let out = self.with_value(a, |x| {
            let mut out = vec![0.0; n * c];
            for b in 0..n {
                let o = &mut out[b * c..(b + 1) * c];
                for t in 0..group {
                    let row = &x[(b * group + t) * c..(b * group + t + 1) * c];
                    o.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                o.iter_mut().for_each(|v| *v /= group as f64);
            }
            out
        });
        self.push(out, n, c, Op::MeanPool(a, group), self.ng(a))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(Error::dim("reshape", format!("{r}x{c} into {rows}x{cols}")));
        }
        let out = self.value(a);
        self.push(out, rows, cols, Op::Reshape(a), self.ng(a))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.with_value(a, |x| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
            out
        });
        self.push(out, c, r, Op::Transpose(a), self.ng(a))
    }

    /// Per-row layer normalisation with `1 × cols` gain and bias.
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(Error::dim("layer_norm", format!("gain/bias must be 1x{c}")));
        }
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let g = &nodes[gamma.0].value;
            let b = &nodes[beta.0].value;
            let mut out = vec![0.0; r * c];
            let mut xhat = vec![0.0; r * c];
            let mut rstd = vec![0.0; r];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[i] = s;
                for j in 0..c {
                    let h = (row[j] - mu) * s;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * g[j] + b[j];
                }
            }
            (out, xhat, rstd)
        };
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            r,
            c,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product self-attention over consecutive blocks of
    /// `seq` rows. `q`, `k`, `v` are `(batch·seq) × width`; heads split the
    /// width evenly. No masking.
    pub fn attention(&self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (r, w) = self.dims(q);
        if self.dims(k) != (r, w) || self.dims(v) != (r, w) {
            return Err(Error::dim("attention", "q, k, v shapes differ"));
        }
        if seq == 0 || r % seq != 0 || heads == 0 || w % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("{r} rows / seq {seq}, width {w} / heads {heads}"),
            ));
        }
        let batch = r / seq;
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let mut out = vec![0.0; r * w];
            let mut probs = vec![0.0; batch * heads * seq * seq];
            for b in 0..batch {
                for h in 0..heads {
                    let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                    for i in 0..seq {
                        let qi = &qv[(b * seq + i) * w + h * dh..(b * seq + i) * w + (h + 1) * dh];
                        let row = &mut p[i * seq..(i + 1) * seq];
                        for j in 0..seq {
                            let kj = &kv[(b * seq + j) * w + h * dh..(b * seq + j) * w + (h + 1) * dh];
                            row[j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                        }
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for s in row.iter_mut() {
                            *s = (*s - m).exp();
                            z += *s;
                        }
                        row.iter_mut().for_each(|s| *s /= z);
                        let oi = &mut out[(b * seq + i) * w + h * dh..(b * seq + i) * w + (h + 1) * dh];
                        for j in 0..seq {
                            let pij = row[j];
                            let vj = &vv[(b * seq + j) * w + h * dh..(b * seq + j) * w + (h + 1) * dh];
                            oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                        }
                    }
                }
            }
            (out, probs)
        };
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            r,
            w,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let ln = &nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.needs_grad {
                backprop_node(&nodes, node, &gout, &mut grads)?;
            }
            grads[i] = Some(gout);
        }

        let mut by_param: HashMap<ParamId, Vec<f64>> = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let (Some(id), true) = (node.param, node.needs_grad) {
                if let Some(g) = &grads[i] {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("backward"));
                    }
                    by_param.insert(id, g.clone());
                }
            }
        }
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols]))
}

fn backprop_node(nodes: &[Node], node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let y = &node.value;
    let (r, c) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = nodes[b.0].cols;
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                // dA = dC · Bᵀ
                for i in 0..m {
                    let gi = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let bp = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                // dB = Aᵀ · dC
                for i in 0..m {
                    let gi = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        gb[p * n..(p + 1) * n]
                            .iter_mut()
                            .zip(gi)
                            .for_each(|(g, d)| *g += aip * d);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(gout).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += gout[i] * bv[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..gb.len() {
                    gb[i] += gout[i] * av[i];
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
            }
            if let Some(gr) = acc(nodes, grads, *row) {
                for chunk in gout.chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Affine(a, s) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(gout).for_each(|(g, d)| *g += s * d);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += gout[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Gelu(a) => {
            let x = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += gout[i] * gelu_grad(x[i]);
                }
            }
        }
        Op::Square(a) => {
            let x = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += gout[i] * 2.0 * x[i];
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += gout[i] * y[i];
                }
            }
        }
        Op::Ln { x, lo, hi } => {
            let xv = &nodes[x.0].value;
            if let Some(ga) = acc(nodes, grads, *x) {
                for i in 0..ga.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        ga[i] += gout[i] / xv[i];
                    }
                }
            }
        }
        Op::LogSigmoid(a) => {
            let x = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += gout[i] * sigmoid(-x[i]);
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|g| *g += gout[0]);
            }
        }
        Op::SumAxis(a, axis) => {
            let (ar, ac) = (nodes[a.0].rows, nodes[a.0].cols);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..ar {
                    for j in 0..ac {
                        ga[i * ac + j] += if *axis == 1 { gout[i] } else { gout[j] };
                    }
                }
            }
        }
        Op::Softmax(a, axis) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let (n, len, start, stride) = lanes(r, c, *axis);
                for l in 0..n {
                    let idx = |j: usize| start(l) + j * stride;
                    let dot: f64 = (0..len).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        ga[idx(j)] += y[idx(j)] * (gout[idx(j)] - dot);
                    }
                }
            }
        }
        Op::LogSumExp(a, axis) => {
            let (ar, ac) = (nodes[a.0].rows, nodes[a.0].cols);
            let x = &nodes[a.0].value;
            if let Some(ga) = acc(nodes, grads, *a) {
                let (n, len, start, stride) = lanes(ar, ac, *axis);
                for l in 0..n {
                    for j in 0..len {
                        let k = start(l) + j * stride;
                        ga[k] += gout[l] * (x[k] - y[l]).exp();
                    }
                }
            }
        }
        Op::CosineRows(a, b) => {
            let cols = nodes[a.0].cols;
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            for i in 0..r {
                let xa = &av[i * cols..(i + 1) * cols];
                let xb = &bv[i * cols..(i + 1) * cols];
                let na2: f64 = xa.iter().map(|v| v * v).sum();
                let nb2: f64 = xb.iter().map(|v| v * v).sum();
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let cosv = xa.iter().zip(xb).map(|(p, q)| p * q).sum::<f64>() / (na * nb);
                let g = gout[i];
                for j in 0..cols {
                    da[i * cols + j] = g * (xb[j] / (na * nb) - cosv * xa[j] / na2);
                    db[i * cols + j] = g * (xa[j] / (na * nb) - cosv * xb[j] / nb2);
                }
            }
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(&da).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(&db).for_each(|(g, d)| *g += d);
            }
        }
        Op::RowScale(a, s) => {
            let (av, sv) = (&nodes[a.0].value, &nodes[s.0].value);
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += gout[i * c + j] * sv[i];
                    }
                }
            }
            if let Some(gs) = acc(nodes, grads, *s) {
                for i in 0..r {
                    gs[i] += (0..c).map(|j| gout[i * c + j] * av[i * c + j]).sum::<f64>();
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let w = nodes[p.0].cols;
                if let Some(gp) = acc(nodes, grads, *p) {
                    for i in 0..r {
                        gp[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(&gout[i * c + off..i * c + off + w])
                            .for_each(|(g, d)| *g += d);
                    }
                }
                off += w;
            }
        }
        Op::SliceCols(a, start) => {
            let ac = nodes[a.0].cols;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..r {
                    ga[i * ac + start..i * ac + start + c]
                        .iter_mut()
                        .zip(&gout[i * c..(i + 1) * c])
                        .for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::GatherRows(t, idx) => {
            if let Some(gt) = acc(nodes, grads, *t) {
                for (row, &i) in idx.iter().enumerate() {
                    gt[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&gout[row * c..(row + 1) * c])
                        .for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::GatherCols(a, idx) => {
            let ac = nodes[a.0].cols;
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for (k, &j) in idx.iter().enumerate() {
                        ga[i * ac + j] += gout[i * c + k];
                    }
                }
            }
        }
        Op::RepeatRows(a, times) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for (row, chunk) in gout.chunks(c).enumerate() {
                    let src = row / times;
                    ga[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(chunk)
                        .for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::MeanPool(a, group) => {
            let inv = 1.0 / *group as f64;
            if let Some(ga) = acc(nodes, grads, *a) {
                for (row, chunk) in ga.chunks_mut(c).enumerate() {
                    let dst = row / group;
                    chunk
                        .iter_mut()
                        .zip(&gout[dst * c..(dst + 1) * c])
                        .for_each(|(g, d)| *g += inv * d);
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(gout).for_each(|(g, d)| *g += d);
            }
        }
        Op::Transpose(a) => {
            // node is r×c, input is c×r
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += gout[i * c + j];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = nodes[gamma.0].value.clone();
            if let Some(gb) = acc(nodes, grads, *beta) {
                for chunk in gout.chunks(c) {
                    gb.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                }
            }
            if let Some(gg) = acc(nodes, grads, *gamma) {
                for i in 0..r {
                    for j in 0..c {
                        gg[j] += gout[i * c + j] * xhat[i * c + j];
                    }
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dxhat[j] = gout[i * c + j] * gv[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat
                        .iter()
                        .zip(&xhat[i * c..(i + 1) * c])
                        .map(|(d, h)| d * h)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            seq,
            heads,
            probs,
        } => {
            let (seq, heads) = (*seq, *heads);
            let w = c;
            let batch = r / seq;
            let dh = w / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let mut dq = vec![0.0; r * w];
            let mut dk = vec![0.0; r * w];
            let mut dv = vec![0.0; r * w];
            let mut dp = vec![0.0; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                    let cols = h * dh..(h + 1) * dh;
                    let row = |t: usize| (b * seq + t) * w;
                    for i in 0..seq {
                        let go = &gout[row(i) + cols.start..row(i) + cols.end];
                        for j in 0..seq {
                            let vj = &vv[row(j) + cols.start..row(j) + cols.end];
                            dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                            let pij = p[i * seq + j];
                            dv[row(j) + cols.start..row(j) + cols.end]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(d, g)| *d += pij * g);
                        }
                        let pi = &p[i * seq..(i + 1) * seq];
                        let dot: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for j in 0..seq {
                            let ds = pi[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for d in cols.clone() {
                                dq[row(i) + d] += ds * kv[row(j) + d];
                                dk[row(j) + d] += ds * qv[row(i) + d];
                            }
                        }
                    }
                }
            }
            for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(g) = acc(nodes, grads, var) {
                    g.iter_mut().zip(&d).for_each(|(g, x)| *g += x);
                }
            }
        }
    }
    Ok(())
}
