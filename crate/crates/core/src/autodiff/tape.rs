//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! nodes once in reverse insertion order (which is a topological order since
//! parents always precede children) and then clears the tape.

use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    generation: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

/// Elementwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Abs,
    Relu,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Abs,
    Relu,
    Sqrt,
    Square,
    Neg,
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
    StraightThrough,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
    RightRow,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Binary(Binary, usize, usize, Broadcast),
    Unary(Unary, usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    Reshape(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    RepeatRows(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the tape's [`Var`]s.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    generation: u64,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when no path reached it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Records operations and replays them in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
    checked: bool,
    poisoned: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape in checked mode: the first op producing NaN/Inf poisons it.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), generation: 0, checked: true, poisoned: None }
    }

    pub fn unchecked() -> Self {
        Tape { checked: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first op that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<&str> {
        self.poisoned.as_deref()
    }

    /// Drops every node without computing gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.poisoned = None;
        self.generation += 1;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Var {
        if self.checked && self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(name.to_string());
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var { idx: self.nodes.len() - 1, generation: self.generation }
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.generation, self.generation, "stale Var from a cleared tape");
        &self.nodes[v.idx]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    fn rg(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let mut value = t.clone();
        value.grad = None;
        value.requires_grad = requires_grad;
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(&Tensor::scalar(v), false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, q, q2, s) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if q != q2 {
            return Err(Error::dim("matmul", format!("{p}x{q} · {q2}x{s}")));
        }
        let out = matmul_raw(av.data(), bv.data(), p, q, s);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(out, vec![p, s]), Op::Matmul(a.idx, b.idx), rg, "matmul"))
    }

    fn broadcast_of(&self, a: Var, b: Var, op: &'static str) -> Result<Broadcast> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() || (av.len() == bv.len() && av.rows() == bv.rows()) {
            Ok(Broadcast::Same)
        } else if bv.len() == 1 {
            Ok(Broadcast::RightScalar)
        } else if av.len() == 1 {
            Ok(Broadcast::LeftScalar)
        } else {
            Err(Error::dim(op, format!("{:?} vs {:?}", av.shape(), bv.shape())))
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, bc: Broadcast, name: &'static str) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (data, shape) = match bc {
            Broadcast::Same => (av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(), av.shape().to_vec()),
            Broadcast::RightScalar => {
                let y = bv.item();
                (av.data().iter().map(|&x| f(x, y)).collect(), av.shape().to_vec())
            }
            Broadcast::LeftScalar => {
                let x = av.item();
                (bv.data().iter().map(|&y| f(x, y)).collect(), bv.shape().to_vec())
            }
            Broadcast::RightRow => {
                let c = av.cols();
                (av.data().iter().enumerate().map(|(i, &x)| f(x, bv.data()[i % c])).collect(), av.shape().to_vec())
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(data, shape), Op::Binary(kind, a.idx, b.idx, bc), rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_of(a, b, "add")?;
        Ok(self.binary(Binary::Add, a, b, bc, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_of(a, b, "sub")?;
        Ok(self.binary(Binary::Sub, a, b, bc, "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_of(a, b, "mul")?;
        Ok(self.binary(Binary::Mul, a, b, bc, "mul"))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_of(a, b, "div")?;
        Ok(self.binary(Binary::Div, a, b, bc, "div"))
    }

    /// `a[p×s] + row[1×s]` broadcast over rows (bias addition).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(Error::dim("add_row", format!("{:?} + row {:?}", av.shape(), rv.shape())));
        }
        Ok(self.binary(Binary::Add, a, row, Broadcast::RightRow, "add_row"))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let av = self.value(a);
        let f = |x: f64| -> f64 {
            match kind {
                Unary::Tanh => x.tanh(),
                Unary::Sigmoid => sigmoid(x),
                Unary::Softplus => softplus(x),
                Unary::Exp => x.exp(),
                Unary::Ln => x.ln(),
                Unary::Abs => x.abs(),
                Unary::Relu => x.max(0.0),
                Unary::Sqrt => x.sqrt(),
                Unary::Square => x * x,
                Unary::Neg => -x,
                Unary::Scale(c) => c * x,
                Unary::Offset(c) => x + c,
                Unary::Clamp(lo, hi) => x.clamp(lo, hi),
                Unary::StraightThrough => {
                    if x > 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        };
        let value = av.map(f);
        let rg = self.rg(a);
        let name = match kind {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Abs => "abs",
            Unary::Relu => "relu",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::Offset(_) => "offset",
            Unary::Clamp(..) => "clamp",
            Unary::StraightThrough => "straight_through",
        };
        self.push(value, Op::Unary(kind, a.idx), rg, name)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Offset(c), a)
    }
    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }
    /// Forward `1{x > 0.5}`, backward identity.
    pub fn straight_through(&mut self, a: Var) -> Var {
        self.unary(Unary::StraightThrough, a)
    }

    /// Dispatches one of the supported elementwise operations.
    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Contract(format!("{op:?} takes {arity} argument(s), got {}", args.len())));
        }
        Ok(match op {
            Elementwise::Add => self.add(args[0], args[1])?,
            Elementwise::Sub => self.sub(args[0], args[1])?,
            Elementwise::Mul => self.mul(args[0], args[1])?,
            Elementwise::Div => self.div(args[0], args[1])?,
            Elementwise::Tanh => self.tanh(args[0]),
            Elementwise::Sigmoid => self.sigmoid(args[0]),
            Elementwise::Softplus => self.softplus(args[0]),
            Elementwise::Exp => self.exp(args[0]),
            Elementwise::Ln => self.ln(args[0]),
            Elementwise::Abs => self.abs(args[0]),
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Sqrt => self.sqrt(args[0]),
            Elementwise::Square => self.square(args[0]),
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.idx), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a.idx), rg, "mean")
    }

    /// Column sums: `p×s → 1×s`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(out, vec![1, c]), Op::SumRows(a.idx), rg, "sum_rows")
    }

    /// Row sums: `p×s → p×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let r = av.rows();
        let out: Vec<f64> = (0..r).map(|i| av.row(i).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(out, vec![r, 1]), Op::SumCols(a.idx), rg, "sum_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a.idx), rg, "reshape"))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, &[1, n]).expect("flatten preserves length")
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a.idx), rg, "transpose")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.value(p).rows()).ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(out, vec![r, total]),
            Op::ConcatCols(parts.iter().map(|p| p.idx).collect()),
            rg,
            "concat_cols",
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.value(p).cols()).ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c.max(1);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(out, vec![r, c]),
            Op::ConcatRows(parts.iter().map(|p| p.idx).collect()),
            rg,
            "concat_rows",
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out, vec![r, len]), Op::SliceCols(a.idx, start), rg, "slice_cols"))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("{start}+{len} > {r}")));
        }
        let out = av.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out, vec![len, c]), Op::SliceRows(a.idx, start), rg, "slice_rows"))
    }

    /// Stacks a `1×s` row `n` times into `n×s`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(Error::dim("repeat_rows", format!("expected a row, got {:?}", av.shape())));
        }
        let c = av.cols();
        let out = av.data().repeat(n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out, vec![n, c]), Op::RepeatRows(a.idx), rg, "repeat_rows"))
    }

    /// Reverse sweep from a scalar `loss`. Clears the tape afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.generation != self.generation || loss.idx >= self.nodes.len() {
            return Err(Error::Contract("loss was not produced on the current tape".into()));
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        if let Some(op) = self.poisoned.take() {
            self.clear();
            return Err(Error::NonFinite { op });
        }
        let n = loss.idx + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let generation = self.generation;
        self.clear();
        if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(Error::NonFinite { op: format!("gradient of node {i}") });
        }
        Ok(Gradients { grads, generation })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |j: usize| self.nodes[j].requires_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], j: usize, len: usize, f: &dyn Fn(&mut [f64])| {
            let slot = grads[j].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (p, q, s) = (av.rows(), av.cols(), bv.cols());
                if rg(*a) {
                    // dA = dC · Bᵀ
                    acc(grads, *a, p * q, &|ga| {
                        for r in 0..p {
                            for k in 0..q {
                                let mut sum = 0.0;
                                for c in 0..s {
                                    sum += g[r * s + c] * bv.data()[k * s + c];
                                }
                                ga[r * q + k] += sum;
                            }
                        }
                    });
                }
                if rg(*b) {
                    // dB = Aᵀ · dC
                    acc(grads, *b, q * s, &|gb| {
                        for r in 0..p {
                            for k in 0..q {
                                let a_rk = av.data()[r * q + k];
                                if a_rk == 0.0 {
                                    continue;
                                }
                                for c in 0..s {
                                    gb[k * s + c] += a_rk * g[r * s + c];
                                }
                            }
                        }
                    });
                }
            }
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let out_len = g.len();
                let cols = av.cols();
                let ai = |k: usize| match bc {
                    Broadcast::LeftScalar => 0,
                    _ => k,
                };
                let bi = |k: usize| match bc {
                    Broadcast::RightScalar => 0,
                    Broadcast::RightRow => k % cols,
                    _ => k,
                };
                if rg(*a) {
                    acc(grads, *a, av.len(), &|ga| {
                        for k in 0..out_len {
                            let y = bv.data()[bi(k)];
                            let d = match kind {
                                Binary::Add | Binary::Sub => 1.0,
                                Binary::Mul => y,
                                Binary::Div => 1.0 / y,
                            };
                            ga[ai(k)] += g[k] * d;
                        }
                    });
                }
                if rg(*b) {
                    acc(grads, *b, bv.len(), &|gb| {
                        for k in 0..out_len {
                            let (x, y) = (av.data()[ai(k)], bv.data()[bi(k)]);
                            let d = match kind {
                                Binary::Add => 1.0,
                                Binary::Sub => -1.0,
                                Binary::Mul => x,
                                Binary::Div => -x / (y * y),
                            };
                            gb[bi(k)] += g[k] * d;
                        }
                    });
                }
            }
            Op::Unary(kind, a) => {
                if rg(*a) {
                    let xv = &self.nodes[*a].value;
                    let yv = &node.value;
                    acc(grads, *a, xv.len(), &|ga| {
                        for (k, gk) in g.iter().enumerate() {
                            let (x, y) = (xv.data()[k], yv.data()[k]);
                            let d = match kind {
                                Unary::Tanh => 1.0 - y * y,
                                Unary::Sigmoid => y * (1.0 - y),
                                Unary::Softplus => sigmoid(x),
                                Unary::Exp => y,
                                Unary::Ln => 1.0 / x,
                                Unary::Abs => {
                                    if x > 0.0 {
                                        1.0
                                    } else if x < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Relu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sqrt => 0.5 / y,
                                Unary::Square => 2.0 * x,
                                Unary::Neg => -1.0,
                                Unary::Scale(c) => *c,
                                Unary::Offset(_) => 1.0,
                                Unary::Clamp(lo, hi) => {
                                    if x >= *lo && x <= *hi {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::StraightThrough => 1.0,
                            };
                            ga[k] += gk * d;
                        }
                    });
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if rg(*a) {
                    let len = self.nodes[*a].value.len();
                    let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / len as f64 } else { 1.0 };
                    acc(grads, *a, len, &|ga| {
                        for v in ga.iter_mut() {
                            *v += g[0] * scale;
                        }
                    });
                }
            }
            Op::SumRows(a) => {
                if rg(*a) {
                    let len = self.nodes[*a].value.len();
                    let c = g.len();
                    acc(grads, *a, len, &|ga| {
                        for (k, v) in ga.iter_mut().enumerate() {
                            *v += g[k % c];
                        }
                    });
                }
            }
            Op::SumCols(a) => {
                if rg(*a) {
                    let av = &self.nodes[*a].value;
                    let c = av.cols();
                    acc(grads, *a, av.len(), &|ga| {
                        for (k, v) in ga.iter_mut().enumerate() {
                            *v += g[k / c];
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if rg(*a) {
                    acc(grads, *a, g.len(), &|ga| {
                        for (v, gk) in ga.iter_mut().zip(g) {
                            *v += gk;
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    let av = &self.nodes[*a].value;
                    let (r, c) = (av.rows(), av.cols());
                    acc(grads, *a, r * c, &|ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.cols();
                    if rg(p) {
                        acc(grads, p, rows * pc, &|gp| {
                            for i in 0..rows {
                                for j in 0..pc {
                                    gp[i * pc + j] += g[i * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if rg(p) {
                        acc(grads, p, len, &|gp| {
                            for (v, gk) in gp.iter_mut().zip(&g[offset..offset + len]) {
                                *v += gk;
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                if rg(*a) {
                    let av = &self.nodes[*a].value;
                    let (r, c) = (av.rows(), av.cols());
                    let w = node.value.cols();
                    acc(grads, *a, r * c, &|ga| {
                        for i in 0..r {
                            for j in 0..w {
                                ga[i * c + start + j] += g[i * w + j];
                            }
                        }
                    });
                }
            }
            Op::SliceRows(a, start) => {
                if rg(*a) {
                    let av = &self.nodes[*a].value;
                    let c = av.cols();
                    acc(grads, *a, av.len(), &|ga| {
                        for (k, gk) in g.iter().enumerate() {
                            ga[start * c + k] += gk;
                        }
                    });
                }
            }
            Op::RepeatRows(a) => {
                if rg(*a) {
                    let c = self.nodes[*a].value.cols();
                    acc(grads, *a, c, &|ga| {
                        for (k, gk) in g.iter().enumerate() {
                            ga[k % c] += gk;
                        }
                    });
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln(1 + eˣ) = max(x, 0) + ln(1 + e^{−|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
