use super::gemm::{gemm, MatRef};
use super::{split_axis, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Tanh,
    Relu,
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
    Abs,
    Square,
    Sqrt,
    Sin,
    Cos,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 11] = [
        UnaryOp::Neg,
        UnaryOp::Exp,
        UnaryOp::Ln,
        UnaryOp::Tanh,
        UnaryOp::Relu,
        UnaryOp::Gelu,
        UnaryOp::Abs,
        UnaryOp::Square,
        UnaryOp::Sqrt,
        UnaryOp::Sin,
        UnaryOp::Cos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Relu => "relu",
            UnaryOp::Gelu => "gelu",
            UnaryOp::Abs => "abs",
            UnaryOp::Square => "square",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Square => x * x,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Ln => 1.0 / x,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Sin => x.cos(),
            UnaryOp::Cos => -x.sin(),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    /// (d/da, d/db) at (a, b).
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        }
    }
}

/// Right-hand side of an elementwise binary op.
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand {
    fn from(c: f64) -> Self {
        Operand::Scalar(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// The left operand has one element and is spread over the right.
    Left,
    /// The right operand has one element and is spread over the left.
    Right,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        op: UnaryOp,
        x: Var,
    },
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Constant {
        op: BinaryOp,
        x: Var,
        c: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Reduce {
        op: ReduceOp,
        x: Var,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Tile {
        x: Var,
        reps: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary { op, .. } => op.name(),
            Op::Binary { op, .. } | Op::Constant { op, .. } => op.name(),
            Op::MatMul { .. } => "matmul",
            Op::Reduce { op, .. } => op.name(),
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Tile { .. } => "tile",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape of tensor operations.
///
/// Inputs always precede the nodes that consume them, so a single reverse
/// sweep visits every node after all of its consumers. A graph is meant for
/// one forward/backward pass; build a fresh one per step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose backward rule for `op_name` is deliberately wrong. Used to
    /// prove the gradient checker notices a broken rule.
    #[doc(hidden)]
    pub fn with_fault(op_name: impl Into<String>) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(op_name.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` if the node
    /// does not require grad or received no gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if matches!(op, UnaryOp::Ln | UnaryOp::Sqrt) {
            if let Some((index, &value)) = xv.data().iter().enumerate().find(|(_, v)| !(**v > 0.0))
            {
                return Err(TensorError::Domain {
                    op: op.name(),
                    index,
                    value,
                });
            }
        }
        let data = xv.data().iter().map(|&v| op.apply(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Unary { op, x }, rg))
    }

    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: impl Into<Operand>) -> Result<Var> {
        match b.into() {
            Operand::Scalar(c) => self.with_constant(op, a, c),
            Operand::Var(b) => self.binary(op, a, b),
        }
    }

    fn with_constant(&mut self, op: BinaryOp, x: Var, c: f64) -> Result<Var> {
        if op == BinaryOp::Div && c == 0.0 {
            return Err(TensorError::Domain {
                op: op.name(),
                index: 0,
                value: c,
            });
        }
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| op.apply(v, c)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Constant { op, x, c }, rg))
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bcast = if av.shape() == bv.shape() {
            Broadcast::None
        } else if bv.len() == 1 {
            Broadcast::Right
        } else if av.len() == 1 {
            Broadcast::Left
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        };
        let out_shape = if bcast == Broadcast::Left {
            bv.shape().to_vec()
        } else {
            av.shape().to_vec()
        };
        let n = av.len().max(bv.len());
        let (ad, bd) = (av.data(), bv.data());
        let at = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
        let bt = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
        if op == BinaryOp::Div {
            if let Some(index) = (0..n).find(|&i| bt(i) == 0.0) {
                return Err(TensorError::Domain {
                    op: op.name(),
                    index,
                    value: 0.0,
                });
            }
        }
        let data = (0..n).map(|i| op.apply(at(i), bt(i))).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary { op, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(BinaryOp::Div, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Ln, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Cos, x)
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]`.
    ///
    /// Leading batch extents must match, or one side must be a plain matrix
    /// that is reused for every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asz, bsz) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: asz.clone(),
            right: bsz.clone(),
        };
        if asz.len() < 2 || bsz.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (asz[asz.len() - 2], asz[asz.len() - 1]);
        let (k2, n) = (bsz[bsz.len() - 2], bsz[bsz.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (a_lead, b_lead) = (&asz[..asz.len() - 2], &bsz[..bsz.len() - 2]);
        let lead = if a_lead == b_lead || b_lead.is_empty() {
            a_lead.to_vec()
        } else if a_lead.is_empty() {
            b_lead.to_vec()
        } else {
            return Err(mismatch());
        };
        let batch: usize = lead.iter().product();
        let (a_batched, b_batched) = (!a_lead.is_empty(), !b_lead.is_empty());
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    MatRef::row_major(&ad[ao..ao + m * k], k),
                    MatRef::row_major(&bd[bo..bo + k * n], n),
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    // ---- reductions --------------------------------------------------

    /// Reduces over `axis` (dropping it) or over everything when `axis` is `None`.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (outer, extent, inner, out_shape) = match axis {
            None => (1, xv.len(), 1, Vec::new()),
            Some(ax) => {
                if ax >= xv.rank() {
                    return Err(TensorError::InvalidAxis {
                        op: op.name(),
                        axis: ax,
                        rank: xv.rank(),
                    });
                }
                let (o, e, i) = split_axis(xv.shape(), ax);
                let mut s = xv.shape().to_vec();
                s.remove(ax);
                (o, e, i, s)
            }
        };
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| d[(o * extent + e) * inner + i];
                let slot = o * inner + i;
                out[slot] = match op {
                    ReduceOp::Sum => (0..extent).map(at).sum(),
                    ReduceOp::Mean => (0..extent).map(at).sum::<f64>() / extent as f64,
                    ReduceOp::Max => {
                        let mut best = 0;
                        for e in 1..extent {
                            if at(e) > at(best) {
                                best = e;
                            }
                        }
                        argmax[slot] = best;
                        at(best)
                    }
                };
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::Reduce {
                op,
                x,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, None)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, Some(axis))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, Some(axis))
    }

    // ---- shape ops ---------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        if r < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let (rows, cols) = (xv.shape()[r - 2], xv.shape()[r - 1]);
        let data = transpose_blocks(xv.data(), rows, cols);
        let mut shape = xv.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Transpose { x }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: "no inputs".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(v));
            lifted.push(self.reshape(v, s)?);
        }
        self.concat(&lifted, 0)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                rank: xv.rank(),
            });
        }
        let (outer, extent, inner) = split_axis(xv.shape(), axis);
        if start >= end || end > extent {
            return Err(TensorError::SliceOutOfRange { start, end, extent });
        }
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            out.extend_from_slice(&xv.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    /// Repeats `x` along a new leading axis of extent `reps`.
    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        if reps == 0 {
            return Err(TensorError::Invalid {
                op: "tile",
                reason: "zero repetitions".into(),
            });
        }
        let xv = self.value(x);
        let mut shape = vec![reps];
        shape.extend_from_slice(xv.shape());
        let value = Tensor::new(shape, xv.data().repeat(reps))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Tile { x, reps }, rg))
    }

    // ---- normalization -----------------------------------------------

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: xv.rank(),
            });
        }
        if let Some(index) = xv.data().iter().position(|v| v.is_nan()) {
            return Err(TensorError::NaN {
                op: "softmax",
                index,
            });
        }
        let (outer, extent, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let max = (0..extent)
                    .map(|e| d[idx(e)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for e in 0..extent {
                    let v = (d[idx(e)] - max).exp();
                    out[idx(e)] = v;
                    total += v;
                }
                for e in 0..extent {
                    out[idx(e)] /= total;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each slice along the last axis, then applies `gain` and
    /// `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let xv = self.value(x);
        let dim = *xv.shape().last().ok_or(TensorError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / dim;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..dim {
                let h = (row[j] - mean) * is;
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires grad.
    /// Gradients accumulate additively across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = if self.fault.as_deref() == Some(self.nodes[i].op.name()) {
                let scaled: Vec<f64> = g.iter().map(|v| v * 1.5).collect();
                self.local_grads(i, &scaled)
            } else {
                self.local_grads(i, &g)
            };
            self.nodes[i].grad = Some(g);
            self.accumulate(contribs);
        }
        Ok(())
    }

    fn accumulate(&mut self, contribs: Vec<(Var, Vec<f64>)>) {
        for (v, d) in contribs {
            let node = &mut self.nodes[v.0];
            match &mut node.grad {
                Some(buf) => buf.iter_mut().zip(&d).for_each(|(b, x)| *b += x),
                slot @ None => *slot = Some(d),
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions from node `i` to its inputs, given upstream `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Unary { op, x } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let yd = node.value.data();
                    let d = (0..g.len())
                        .map(|j| g[j] * op.derivative(xd[j], yd[j]))
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::Constant { op, x, c } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let d = (0..g.len())
                        .map(|j| g[j] * op.partials(xd[j], *c).0)
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::Binary { op, a, b, bcast } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let at = |j: usize| {
                    if *bcast == Broadcast::Left {
                        ad[0]
                    } else {
                        ad[j]
                    }
                };
                let bt = |j: usize| {
                    if *bcast == Broadcast::Right {
                        bd[0]
                    } else {
                        bd[j]
                    }
                };
                for (which, v) in [(0, *a), (1, *b)] {
                    if !self.needs(v) {
                        continue;
                    }
                    let part = |j: usize| {
                        let (da, db) = op.partials(at(j), bt(j));
                        g[j] * if which == 0 { da } else { db }
                    };
                    let spread = (which == 0 && *bcast == Broadcast::Left)
                        || (which == 1 && *bcast == Broadcast::Right);
                    let d = if spread {
                        vec![(0..g.len()).map(part).sum()]
                    } else {
                        (0..g.len()).map(part).collect()
                    };
                    out.push((v, d));
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![0.0; ad.len()];
                    for bi in 0..*batch {
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        let ao = if *a_batched { bi * m * k } else { 0 };
                        // dA += dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                            MatRef::transposed(&bd[bo..bo + k * n], n),
                            1.0,
                            &mut da[ao..ao + m * k],
                        );
                    }
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bd.len()];
                    for bi in 0..*batch {
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        let ao = if *a_batched { bi * m * k } else { 0 };
                        // dB += Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            MatRef::transposed(&ad[ao..ao + m * k], k),
                            MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], n),
                            1.0,
                            &mut db[bo..bo + k * n],
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::Reduce {
                op,
                x,
                axis,
                argmax,
            } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let (outer, extent, inner) = match axis {
                        None => (1, self.value(*x).len(), 1),
                        Some(ax) => split_axis(xs, *ax),
                    };
                    let mut d = vec![0.0; outer * extent * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            match op {
                                ReduceOp::Sum | ReduceOp::Mean => {
                                    let scale = if *op == ReduceOp::Mean {
                                        1.0 / extent as f64
                                    } else {
                                        1.0
                                    };
                                    for e in 0..extent {
                                        d[(o * extent + e) * inner + i] = g[slot] * scale;
                                    }
                                }
                                ReduceOp::Max => {
                                    d[(o * extent + argmax[slot]) * inner + i] = g[slot];
                                }
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Transpose { x } => {
                if self.needs(*x) {
                    let s = node.value.shape();
                    let r = s.len();
                    out.push((*x, transpose_blocks(g, s[r - 2], s[r - 1])));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        out.push((v, d));
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let (outer, extent, inner) = split_axis(self.shape(*x), *axis);
                    let width = node.value.shape()[*axis];
                    let mut d = vec![0.0; outer * extent * inner];
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * width * inner;
                        d[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                    }
                    out.push((*x, d));
                }
            }
            Op::Tile { x, reps } => {
                if self.needs(*x) {
                    let n = self.value(*x).len();
                    let mut d = vec![0.0; n];
                    for r in 0..*reps {
                        d.iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(a, b)| *a += b);
                    }
                    out.push((*x, d));
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let (outer, extent, inner) = split_axis(node.value.shape(), *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |e: usize| (o * extent + e) * inner + i;
                            let dot: f64 = (0..extent).map(|e| g[idx(e)] * y[idx(e)]).sum();
                            for e in 0..extent {
                                d[idx(e)] = y[idx(e)] * (g[idx(e)] - dot);
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gd = self.value(*gain).data();
                let dim = gd.len();
                let rows = xhat.len() / dim;
                if self.needs(*x) {
                    let mut d = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let span = r * dim..(r + 1) * dim;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let dh: Vec<f64> = (0..dim).map(|j| gr[j] * gd[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / dim as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for j in 0..dim {
                            d[r * dim + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    out.push((*x, d));
                }
                if self.needs(*gain) {
                    let mut d = vec![0.0; dim];
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                    out.push((*gain, d));
                }
                if self.needs(*bias) {
                    let mut d = vec![0.0; dim];
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g[r * dim + j];
                        }
                    }
                    out.push((*bias, d));
                }
            }
        }
        out
    }
}

/// Transposes every trailing `rows × cols` block of `data`.
fn transpose_blocks(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}
