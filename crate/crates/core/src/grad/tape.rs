//! Define-by-run reverse-mode tape.
//!
//! Every primitive is evaluated as it is recorded, so the tape always holds
//! the forward values needed by `backward`. `replay` re-runs the recorded
//! primitives on new leaf values, which is what the finite-difference checker
//! uses.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{NamedParams, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Param(String),
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Clamp(Var, f64, f64),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Broadcast(Var, usize),
    SliceRows(Var, usize, usize),
    Reshape(Var, Vec<usize>),
    Detach(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::MatMul(..) => "matmul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Relu(_) => "relu",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Clamp(..) => "clamp",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather(..) => "gather",
            Op::Broadcast(..) => "broadcast",
            Op::SliceRows(..) => "slice_rows",
            Op::Reshape(..) => "reshape",
            Op::Detach(_) => "stop_gradient",
        }
    }

    fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Param(_) | Const => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Maximum(a, b) | Minimum(a, b) | MatMul(a, b) => {
                vec![*a, *b]
            }
            Sum(a) | Mean(a) | SumRows(a) | Exp(a) | Ln(a) | Sigmoid(a) | LogSigmoid(a) | Relu(a) | Neg(a)
            | Scale(a, _) | AddScalar(a, _) | Clamp(a, ..) | LogSoftmax(a) | Gather(a, _) | Broadcast(a, _)
            | SliceRows(a, ..) | Reshape(a, _) | Detach(a) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive evaluations.
#[derive(Clone, Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::State(format!("value #{} was never evaluated on this tape", v.idx)));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.idx].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        for v in op.operands() {
            self.check(v)?;
        }
        let value = eval(&op, &|v: Var| &self.nodes[v.idx].value)?;
        Ok(self.push(op, value))
    }

    /// Registers a named learnable leaf. Re-registering a name returns the existing leaf.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(idx) = self.nodes.iter().position(|n| matches!(&n.op, Op::Param(p) if p == name)) {
            return Var { tape: self.id, idx };
        }
        self.push(Op::Param(name.to_string()), value.clone())
    }

    /// Registers every tensor in `params` as a leaf, returned in name order.
    pub fn params(&mut self, params: &NamedParams) -> Vec<(String, Var)> {
        params.iter().map(|(k, t)| (k.clone(), self.param(k, t))).collect()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div(a, b))
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Maximum(a, b))
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Minimum(a, b))
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean(a))
    }
    /// `[n, k] -> [n]`, summing the trailing axis.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumRows(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Ln(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }
    /// `ln σ(x)` without forming σ(x).
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSigmoid(a))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Neg(a))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::AddScalar(a, c))
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::usage(format!("clamp bounds {lo} > {hi}")));
        }
        self.record(Op::Clamp(a, lo, hi))
    }
    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::LogSoftmax(a))
    }
    /// Picks one trailing-axis entry per row: `[n, k] -> [n]`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.record(Op::Gather(a, indices))
    }
    /// Leading-axis expansion `[k] -> [n, k]`.
    pub fn broadcast(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.record(Op::Broadcast(a, rows))
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceRows(a, start, len))
    }
    pub fn reshape(&mut self, a: Var, dims: Vec<usize>) -> Result<Var> {
        self.record(Op::Reshape(a, dims))
    }
    /// Identity on values; blocks gradient flow to everything upstream.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Detach(a))
    }

    /// Re-evaluates every recorded primitive with leaf values taken from
    /// `inputs` (leaves missing from `inputs` keep their recorded value).
    pub fn replay(&self, inputs: &NamedParams) -> Result<Tape> {
        let mut out = Tape { id: self.id, nodes: Vec::with_capacity(self.nodes.len()) };
        for node in &self.nodes {
            let value = match &node.op {
                Op::Param(name) => match inputs.get(name) {
                    Some(t) if t.dims() == node.value.dims() => t.clone(),
                    Some(t) => {
                        return Err(Error::shape(
                            "param",
                            format!("`{name}` recorded as {:?}, replayed with {:?}", node.value.dims(), t.dims()),
                        ))
                    }
                    None => node.value.clone(),
                },
                Op::Const => node.value.clone(),
                op => eval(op, &|v: Var| &out.nodes[v.idx].value)?,
            };
            out.nodes.push(Node { op: node.op.clone(), value });
        }
        Ok(out)
    }

    /// In-place variant of [`Tape::replay`].
    pub fn forward(&mut self, inputs: &NamedParams) -> Result<()> {
        *self = self.replay(inputs)?;
        Ok(())
    }

    /// Leaf parameters recorded on this tape, with their current values.
    pub fn leaf_params(&self) -> NamedParams {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some((name.clone(), n.value.clone())),
                _ => None,
            })
            .collect()
    }

    /// Reverse sweep from `output`, seeded with `seed` (dims must match).
    pub fn backward_seeded(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.check(output)?;
        let out_dims = self.nodes[output.idx].value.dims();
        if seed.dims() != out_dims {
            return Err(Error::shape("backward", format!("seed {:?} vs output {:?}", seed.dims(), out_dims)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.idx + 1];
        grads[output.idx] = Some(seed);
        for idx in (0..=output.idx).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param(_) | Op::Const | Op::Detach(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let operands = node.op.operands();
            let contributions = vjp(&node.op, &|v: Var| &self.nodes[v.idx].value, &node.value, &g);
            for (v, gv) in operands.into_iter().zip(contributions) {
                accumulate(&mut grads[v.idx], gv);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { tape: self.id, params: self.param_indices(), grads })
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        let dims = self.nodes[output.idx].value.dims().to_vec();
        if self.nodes[output.idx].value.len() != 1 {
            return Err(Error::usage(format!("backward needs a scalar output, got dims {dims:?}")));
        }
        self.backward_seeded(output, Tensor::filled(&dims, 1.0))
    }

    fn param_indices(&self) -> Vec<(String, usize, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), i, n.value.dims().to_vec())),
                _ => None,
            })
            .collect()
    }
}

/// Result of a reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    tape: u64,
    params: Vec<(String, usize, Vec<usize>)>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to any recorded value; zeros if it does not feed the output.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Tensor {
        assert_eq!(v.tape, self.tape, "var from another tape");
        self.grads
            .get(v.idx)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).dims()))
    }

    /// Gradients for every parameter leaf on the tape.
    pub fn params(&self) -> NamedParams {
        self.params
            .iter()
            .map(|(name, idx, dims)| {
                let g = self.grads.get(*idx).and_then(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(dims));
                (name.clone(), g)
            })
            .collect()
    }

    /// Gradients for every entry of `params`; names absent from the tape get zeros.
    pub fn for_params(&self, params: &NamedParams) -> NamedParams {
        let recorded = self.params();
        params
            .iter()
            .map(|(k, t)| (k.clone(), recorded.get(k).cloned().unwrap_or_else(|| Tensor::zeros(t.dims()))))
            .collect()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.values_mut().iter_mut().zip(g.values()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn shape_err(op: &Op, detail: String) -> Error {
    Error::shape(op.name(), detail)
}

fn domain_err(op: &Op, detail: String) -> Error {
    Error::Domain { op: op.name(), detail }
}

/// `b` must equal `a` in dims or match `a`'s trailing dims (leading-axis expansion).
fn check_binary(op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() == b.dims() || (a.rank() >= 1 && b.dims() == &a.dims()[1..]) {
        Ok(())
    } else {
        Err(shape_err(op, format!("operands {:?} and {:?}", a.dims(), b.dims())))
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let bv = b.values();
    let k = bv.len();
    let values = a.values().iter().enumerate().map(|(i, &x)| f(x, bv[i % k])).collect();
    Tensor::new(a.dims().to_vec(), values).expect("binary preserves dims")
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    a.map(f)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // ln σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn eval<'a>(op: &Op, get: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let out = match op {
        Op::Param(_) | Op::Const => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let (a, b) = (get(*a), get(*b));
            check_binary(op, a, b)?;
            match op {
                Op::Add(..) => binary(a, b, |x, y| x + y),
                Op::Sub(..) => binary(a, b, |x, y| x - y),
                Op::Mul(..) => binary(a, b, |x, y| x * y),
                Op::Div(..) => {
                    if b.values().iter().any(|&y| y == 0.0) {
                        return Err(domain_err(op, "division by zero".into()));
                    }
                    binary(a, b, |x, y| x / y)
                }
                Op::Maximum(..) => binary(a, b, f64::max),
                _ => binary(a, b, f64::min),
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
                return Err(shape_err(op, format!("cannot multiply {:?} by {:?}", a.dims(), b.dims())));
            }
            let (n, k, m) = (a.dims()[0], a.dims()[1], b.dims()[1]);
            Tensor::new(vec![n, m], matmul_raw(a.values(), b.values(), n, k, m))?
        }
        Op::Sum(a) => Tensor::scalar(get(*a).values().iter().sum()),
        Op::Mean(a) => {
            let a = get(*a);
            Tensor::scalar(a.values().iter().sum::<f64>() / a.len() as f64)
        }
        Op::SumRows(a) => {
            let a = get(*a);
            if a.rank() != 2 {
                return Err(shape_err(op, format!("expected rank 2, got {:?}", a.dims())));
            }
            let k = a.dims()[1];
            Tensor::vector(a.values().chunks(k).map(|r| r.iter().sum()).collect())
        }
        Op::Exp(a) => {
            let t = unary(get(*a), f64::exp);
            if !t.is_finite() {
                return Err(domain_err(op, "overflow".into()));
            }
            t
        }
        Op::Ln(a) => {
            let a = get(*a);
            if let Some(x) = a.values().iter().find(|&&x| !(x > 0.0)) {
                return Err(domain_err(op, format!("argument {x} ≤ 0")));
            }
            unary(a, f64::ln)
        }
        Op::Sigmoid(a) => unary(get(*a), sigmoid),
        Op::LogSigmoid(a) => unary(get(*a), log_sigmoid),
        Op::Relu(a) => unary(get(*a), |x| x.max(0.0)),
        Op::Neg(a) => unary(get(*a), |x| -x),
        Op::Scale(a, c) => unary(get(*a), |x| x * c),
        Op::AddScalar(a, c) => unary(get(*a), |x| x + c),
        Op::Clamp(a, lo, hi) => unary(get(*a), |x| x.clamp(*lo, *hi)),
        Op::LogSoftmax(a) => {
            let a = get(*a);
            if a.rank() == 0 {
                return Err(shape_err(op, "scalar input".into()));
            }
            let (_, k) = a.as_matrix();
            let mut values = Vec::with_capacity(a.len());
            for row in a.values().chunks(k) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                values.extend(row.iter().map(|x| x - lse));
            }
            Tensor::new(a.dims().to_vec(), values)?
        }
        Op::Gather(a, idx) => {
            let a = get(*a);
            let (n, k) = a.as_matrix();
            if a.rank() == 0 || idx.len() != n {
                return Err(shape_err(op, format!("{} indices for {:?}", idx.len(), a.dims())));
            }
            if let Some(bad) = idx.iter().find(|&&i| i >= k) {
                return Err(shape_err(op, format!("index {bad} out of range {k}")));
            }
            let values: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| a.values()[r * k + i]).collect();
            if a.rank() == 1 {
                Tensor::scalar(values[0])
            } else {
                Tensor::new(a.dims()[..a.rank() - 1].to_vec(), values)?
            }
        }
        Op::Broadcast(a, rows) => {
            let a = get(*a);
            if *rows == 0 {
                return Err(shape_err(op, "zero rows".into()));
            }
            let mut dims = vec![*rows];
            dims.extend_from_slice(a.dims());
            let values = a.values().iter().cloned().cycle().take(a.len() * rows).collect();
            Tensor::new(dims, values)?
        }
        Op::SliceRows(a, start, len) => {
            let a = get(*a);
            if a.rank() == 0 || *len == 0 || start + len > a.dims()[0] {
                return Err(shape_err(op, format!("rows {start}..{} of {:?}", start + len, a.dims())));
            }
            let row: usize = a.dims()[1..].iter().product();
            let mut dims = a.dims().to_vec();
            dims[0] = *len;
            Tensor::new(dims, a.values()[start * row..(start + len) * row].to_vec())?
        }
        Op::Reshape(a, dims) => {
            let a = get(*a);
            Tensor::new(dims.clone(), a.values().to_vec()).map_err(|_| {
                shape_err(op, format!("cannot reshape {:?} to {:?}", a.dims(), dims))
            })?
        }
        Op::Detach(a) => get(*a).clone(),
    };
    Ok(out)
}

/// Sums a full-size gradient down to `target` dims when `target` was expanded.
fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    if g.dims() == target.dims() {
        return g;
    }
    let k = target.len();
    let mut values = vec![0.0; k];
    for (i, v) in g.values().iter().enumerate() {
        values[i % k] += v;
    }
    Tensor::new(target.dims().to_vec(), values).expect("reduce preserves target dims")
}

fn vjp<'a>(op: &Op, get: &dyn Fn(Var) -> &'a Tensor, out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    let zip = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
        Tensor::new(t.dims().to_vec(), t.values().iter().zip(g.values()).map(|(&x, &gv)| f(x, gv)).collect())
            .expect("same dims")
    };
    match op {
        Op::Param(_) | Op::Const | Op::Detach(_) => vec![],
        Op::Add(_, b) => vec![g.clone(), reduce_to(g.clone(), get(*b))],
        Op::Sub(_, b) => vec![g.clone(), reduce_to(g.map(|v| -v), get(*b))],
        Op::Mul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let ga = binary(g, b, |gv, y| gv * y);
            let prod = Tensor::new(g.dims().to_vec(), g.values().iter().zip(a.values()).map(|(gv, x)| gv * x).collect())
                .expect("same dims");
            vec![ga, reduce_to(prod, b)]
        }
        Op::Div(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let ga = binary(g, b, |gv, y| gv / y);
            let bv = b.values();
            let k = bv.len();
            let gb: Vec<f64> = g
                .values()
                .iter()
                .zip(a.values())
                .enumerate()
                .map(|(i, (gv, x))| -gv * x / (bv[i % k] * bv[i % k]))
                .collect();
            vec![ga, reduce_to(Tensor::new(g.dims().to_vec(), gb).expect("same dims"), b)]
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let is_max = matches!(op, Op::Maximum(..));
            let bv = b.values();
            let k = bv.len();
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; a.len()];
            for (i, (&x, &gv)) in a.values().iter().zip(g.values()).enumerate() {
                let y = bv[i % k];
                let pick_a = if is_max { x >= y } else { x <= y };
                if pick_a {
                    ga[i] = gv;
                } else {
                    gb[i] = gv;
                }
            }
            vec![
                Tensor::new(a.dims().to_vec(), ga).expect("same dims"),
                reduce_to(Tensor::new(a.dims().to_vec(), gb).expect("same dims"), b),
            ]
        }
        Op::MatMul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (n, k, m) = (a.dims()[0], a.dims()[1], b.dims()[1]);
            let bt = transpose(b.values(), k, m);
            let ga = matmul_raw(g.values(), &bt, n, m, k);
            let at = transpose(a.values(), n, k);
            let gb = matmul_raw(&at, g.values(), k, n, m);
            vec![
                Tensor::new(vec![n, k], ga).expect("dims"),
                Tensor::new(vec![k, m], gb).expect("dims"),
            ]
        }
        Op::Sum(a) => vec![Tensor::filled(get(*a).dims(), g.item())],
        Op::Mean(a) => {
            let a = get(*a);
            vec![Tensor::filled(a.dims(), g.item() / a.len() as f64)]
        }
        Op::SumRows(a) => {
            let a = get(*a);
            let k = a.dims()[1];
            let values = (0..a.len()).map(|i| g.values()[i / k]).collect();
            vec![Tensor::new(a.dims().to_vec(), values).expect("dims")]
        }
        Op::Exp(_) => vec![zip(out, &|y, gv| gv * y)],
        Op::Ln(a) => vec![zip(get(*a), &|x, gv| gv / x)],
        Op::Sigmoid(_) => vec![zip(out, &|y, gv| gv * y * (1.0 - y))],
        Op::LogSigmoid(a) => vec![zip(get(*a), &|x, gv| gv * sigmoid(-x))],
        Op::Relu(a) => vec![zip(get(*a), &|x, gv| if x > 0.0 { gv } else { 0.0 })],
        Op::Neg(_) => vec![g.map(|v| -v)],
        Op::Scale(_, c) => vec![g.map(|v| v * c)],
        Op::AddScalar(..) => vec![g.clone()],
        Op::Clamp(a, lo, hi) => vec![zip(get(*a), &|x, gv| if x >= *lo && x <= *hi { gv } else { 0.0 })],
        Op::LogSoftmax(_) => {
            let (_, k) = out.as_matrix();
            let mut values = Vec::with_capacity(out.len());
            for (yrow, grow) in out.values().chunks(k).zip(g.values().chunks(k)) {
                let gsum: f64 = grow.iter().sum();
                values.extend(yrow.iter().zip(grow).map(|(y, gv)| gv - y.exp() * gsum));
            }
            vec![Tensor::new(out.dims().to_vec(), values).expect("dims")]
        }
        Op::Gather(a, idx) => {
            let a = get(*a);
            let (_, k) = a.as_matrix();
            let mut values = vec![0.0; a.len()];
            for (r, &i) in idx.iter().enumerate() {
                values[r * k + i] += g.values()[r];
            }
            vec![Tensor::new(a.dims().to_vec(), values).expect("dims")]
        }
        Op::Broadcast(a, _) => vec![reduce_to(g.clone(), get(*a))],
        Op::SliceRows(a, start, _) => {
            let a = get(*a);
            let row: usize = a.dims()[1..].iter().product();
            let mut values = vec![0.0; a.len()];
            values[start * row..start * row + g.len()].copy_from_slice(g.values());
            vec![Tensor::new(a.dims().to_vec(), values).expect("dims")]
        }
        Op::Reshape(a, _) => vec![Tensor::new(get(*a).dims().to_vec(), g.values().to_vec()).expect("dims")],
    }
}
