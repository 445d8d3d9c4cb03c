//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] during the forward pass and replayed
//! in reverse to accumulate gradients via the chain rule. The primitive set is
//! deliberately small: just enough to differentiate the losses and the MLP in
//! this crate. Broadcasting is restricted to scalar-vs-tensor and
//! row-vector-vs-matrix so that shape rules stay auditable.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("operand does not belong to this tape")]
    NotOnTape,
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("index {index} out of bounds for tensor of {len} elements")]
    IndexOutOfBounds { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense n-dimensional value: row-major `f64` data with an optional gradient
/// slot of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Build a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor_new",
                detail: format!(
                    "shape {:?} does not describe {} elements",
                    shape,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    /// Mark the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Row-major element access for 2-D tensors.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// Recorded primitive. Operand fields are node indices into the owning tape.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    L2DistanceRowPairs(usize, usize),
    Concat(Vec<usize>),
    IndexSelect(usize, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L2DistanceRowPairs(..) => "l2_distance_rowpairs",
            Op::Concat(..) => "concat",
            Op::IndexSelect(..) => "index_select",
        }
    }

    fn operands(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::L2DistanceRowPairs(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::IndexSelect(a, _) => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Handle to a value recorded on a [`Tape`]. Cheap to copy; only valid for
/// the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    idx: usize,
}

/// Gradient map returned by [`Tape::backward`]: node index of each
/// `requires_grad` leaf to its gradient array. Iteration order is by index.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<usize, Vec<f64>>,
}

impl GradientMap {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v.idx).map(|g| g.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Single-threaded recording context. One tape per training thread; the pair
/// structure of the losses changes per batch, so the graph is rebuilt each
/// step (define-by-run).
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// Elementwise broadcast classification for binary ops.
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    RowRhs, // rhs is [c] or [1, c] against lhs [n, c]
}

fn classify_broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    an: usize,
    bn: usize,
) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if an == 1 {
        return Ok(Broadcast::ScalarLhs);
    }
    if bn == 1 {
        return Ok(Broadcast::ScalarRhs);
    }
    if a.len() == 2 && bn == a[1] && (b.len() == 1 || (b.len() == 2 && b[0] == 1)) {
        return Ok(Broadcast::RowRhs);
    }
    Err(AutodiffError::ShapeMismatch {
        op,
        detail: format!("lhs {:?} vs rhs {:?}", a, b),
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Record a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
        });
        Var {
            tape_id: self.id,
            idx,
        }
    }

    /// Record a tensor as a non-differentiable constant.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    /// Gradient of a node after [`Tape::backward`], if one was accumulated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.idx].value.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Text listing of the tape, one node per line: index, kind, operand
    /// indices, output shape.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            out.push_str(&format!(
                "{:4}  {:<22} {:?} -> {:?}\n",
                i,
                n.op.name(),
                n.op.operands(),
                n.value.shape
            ));
        }
        out
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape_id != self.id || v.idx >= self.nodes.len() {
            return Err(AutodiffError::NotOnTape);
        }
        Ok(v.idx)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let requires_grad = op
            .operands()
            .iter()
            .any(|&i| self.nodes[i].value.requires_grad);
        debug_assert!(
            data.iter().all(|x| !x.is_nan()),
            "{} produced NaN",
            op.name()
        );
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op,
            value: Tensor {
                shape,
                data,
                grad: None,
                requires_grad,
            },
        });
        Var {
            tape_id: self.id,
            idx,
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let bc = classify_broadcast(op_name, &av.shape, &bv.shape, av.numel(), bv.numel())?;
        let (shape, data) = match bc {
            Broadcast::Same => (
                av.shape.clone(),
                av.data
                    .iter()
                    .zip(&bv.data)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            Broadcast::ScalarLhs => {
                let x = av.data[0];
                (bv.shape.clone(), bv.data.iter().map(|&y| f(x, y)).collect())
            }
            Broadcast::ScalarRhs => {
                let y = bv.data[0];
                (av.shape.clone(), av.data.iter().map(|&x| f(x, y)).collect())
            }
            Broadcast::RowRhs => {
                let c = av.shape[1];
                let data = av
                    .data
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| f(x, bv.data[k % c]))
                    .collect();
                (av.shape.clone(), data)
            }
        };
        Ok(self.push(make(ai, bi), shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, make: impl Fn(usize) -> Op) -> Result<Var> {
        let ai = self.check(a)?;
        let v = &self.nodes[ai].value;
        let data = v.data.iter().map(|&x| f(x)).collect();
        let shape = v.shape.clone();
        Ok(self.push(make(ai), shape, data))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// Natural logarithm. The operand must be strictly positive; callers in
    /// loss code clamp to >= 1e-12 first.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        if self.nodes[ai].value.data.iter().any(|&x| x <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: "operand has entries <= 0".into(),
            });
        }
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        if self.nodes[ai].value.data.iter().any(|&x| x < 0.0) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                detail: "operand has entries < 0".into(),
            });
        }
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    /// Matrix product `[n,k]x[k,m] -> [n,m]`, or matrix-vector `[n,k]x[k] -> [n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        match (av.shape.as_slice(), bv.shape.as_slice()) {
            (&[n, k], &[k2, m]) if k == k2 => {
                let data = matmul_raw(&av.data, &bv.data, n, k, m);
                Ok(self.push(Op::MatMul(ai, bi), vec![n, m], data))
            }
            (&[n, k], &[k2]) if k == k2 => {
                let data = matmul_raw(&av.data, &bv.data, n, k, 1);
                Ok(self.push(Op::MatMul(ai, bi), vec![n], data))
            }
            (a_s, b_s) => Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("lhs {:?} vs rhs {:?}", a_s, b_s),
            }),
        }
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.data.iter().sum();
        Ok(self.push(Op::Sum(ai), vec![1], vec![s]))
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = &self.nodes[ai].value;
        let m = v.data.iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Op::Mean(ai), vec![1], vec![m]))
    }

    /// Euclidean distances between every row of `a` `[n,d]` and every row of
    /// `b` `[m,d]`, as `[n,m]`.
    pub fn l2_distance_rowpairs(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        match (av.shape.as_slice(), bv.shape.as_slice()) {
            (&[n, d], &[m, d2]) if d == d2 => {
                let mut data = vec![0.0; n * m];
                for i in 0..n {
                    let ra = &av.data[i * d..(i + 1) * d];
                    for j in 0..m {
                        let rb = &bv.data[j * d..(j + 1) * d];
                        let mut s = 0.0;
                        for c in 0..d {
                            let diff = ra[c] - rb[c];
                            s += diff * diff;
                        }
                        data[i * m + j] = s.sqrt();
                    }
                }
                Ok(self.push(Op::L2DistanceRowPairs(ai, bi), vec![n, m], data))
            }
            (a_s, b_s) => Err(AutodiffError::ShapeMismatch {
                op: "l2_distance_rowpairs",
                detail: format!("lhs {:?} vs rhs {:?}", a_s, b_s),
            }),
        }
    }

    /// Concatenate 1-D tensors into one 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                detail: "no operands".into(),
            });
        }
        let mut idxs = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let pi = self.check(p)?;
            let v = &self.nodes[pi].value;
            if v.shape.len() != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    detail: format!("operand shape {:?} is not 1-D", v.shape),
                });
            }
            data.extend_from_slice(&v.data);
            idxs.push(pi);
        }
        let len = data.len();
        Ok(self.push(Op::Concat(idxs), vec![len], data))
    }

    /// Select elements from the row-major flattening of `a`, as a 1-D tensor.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let v = &self.nodes[ai].value;
        let len = v.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(AutodiffError::IndexOutOfBounds { index: bad, len });
        }
        let data: Vec<f64> = indices.iter().map(|&i| v.data[i]).collect();
        let k = data.len();
        Ok(self.push(Op::IndexSelect(ai, indices.to_vec()), vec![k], data))
    }

    /// Differentiable `max(x, lo)` built from relu: gradient passes where
    /// `x > lo` and is cut where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        let shifted = self.add_scalar(a, -lo)?;
        let r = self.relu(shifted)?;
        self.add_scalar(r, lo)
    }

    pub fn add_scalar(&mut self, a: Var, v: f64) -> Result<Var> {
        let c = self.scalar_const(v);
        self.add(a, c)
    }

    pub fn mul_scalar(&mut self, a: Var, v: f64) -> Result<Var> {
        let c = self.scalar_const(v);
        self.mul(a, c)
    }

    /// Reverse sweep from a scalar root. Fills the `grad` slot of every
    /// `requires_grad` node reached and returns the leaf gradients. Gradients
    /// accumulate additively across multiple uses of a node.
    pub fn backward(&mut self, root: Var) -> Result<GradientMap> {
        let ri = self.check(root)?;
        if self.nodes[ri].value.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: self.nodes[ri].value.shape.clone(),
            });
        }
        if !self.nodes[ri].value.requires_grad {
            return Ok(GradientMap::default());
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[ri] = Some(vec![1.0]);

        for i in (0..=ri).rev() {
            let g = match adjoint[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.distribute(i, &g, &mut adjoint);
            let node = &mut self.nodes[i];
            match &mut node.value.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.value.grad = Some(g),
            }
        }

        let mut grads = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.value.requires_grad {
                if let Some(g) = &n.value.grad {
                    grads.insert(i, g.clone());
                }
            }
        }
        Ok(GradientMap { grads })
    }

    /// Push the adjoint `g` of node `i` into its operands' adjoint buffers.
    fn distribute(&self, i: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(adjoint, a, g, 1.0, None);
                self.accumulate_broadcast(adjoint, b, g, 1.0, None);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(adjoint, a, g, 1.0, None);
                self.accumulate_broadcast(adjoint, b, g, -1.0, None);
            }
            Op::Mul(a, b) => {
                let bv = self.broadcast_values(b, a, g.len());
                self.accumulate_broadcast(adjoint, a, g, 1.0, Some(&bv));
                let av = self.broadcast_values(a, b, g.len());
                self.accumulate_broadcast(adjoint, b, g, 1.0, Some(&av));
            }
            Op::Div(a, b) => {
                // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                let bv = self.broadcast_values(b, a, g.len());
                let inv_b: Vec<f64> = bv.iter().map(|&y| 1.0 / y).collect();
                self.accumulate_broadcast(adjoint, a, g, 1.0, Some(&inv_b));
                let av = self.broadcast_values(a, b, g.len());
                let da: Vec<f64> = av.iter().zip(&bv).map(|(&x, &y)| -x / (y * y)).collect();
                self.accumulate_broadcast(adjoint, b, g, 1.0, Some(&da));
            }
            Op::Neg(a) => self.acc_elem(adjoint, a, g.iter().map(|&x| -x)),
            Op::Exp(a) => {
                let out = &self.nodes[i].value.data;
                self.acc_elem(adjoint, a, g.iter().zip(out).map(|(&gi, &oi)| gi * oi));
            }
            Op::Log(a) => {
                let x = &self.nodes[a].value.data;
                self.acc_elem(adjoint, a, g.iter().zip(x).map(|(&gi, &xi)| gi / xi));
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[i].value.data;
                self.acc_elem(
                    adjoint,
                    a,
                    g.iter()
                        .zip(out)
                        .map(|(&gi, &oi)| gi / (2.0 * oi.max(1e-300))),
                );
            }
            Op::Relu(a) => {
                let x = &self.nodes[a].value.data;
                self.acc_elem(
                    adjoint,
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }),
                );
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let (n, k) = (av.shape[0], av.shape[1]);
                let m = if bv.shape.len() == 2 { bv.shape[1] } else { 1 };
                if self.nodes[a].value.requires_grad {
                    // dA = g . B^T
                    let bt = transpose_raw(&bv.data, k, m);
                    let da = matmul_raw(g, &bt, n, m, k);
                    self.acc_slice(adjoint, a, &da);
                }
                if self.nodes[b].value.requires_grad {
                    // dB = A^T . g
                    let at = transpose_raw(&av.data, n, k);
                    let db = matmul_raw(&at, g, k, n, m);
                    self.acc_slice(adjoint, b, &db);
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                let n = self.nodes[a].value.numel();
                self.acc_elem(adjoint, a, std::iter::repeat_n(s, n));
            }
            Op::Mean(a) => {
                let n = self.nodes[a].value.numel();
                let s = g[0] / n as f64;
                self.acc_elem(adjoint, a, std::iter::repeat_n(s, n));
            }
            Op::L2DistanceRowPairs(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let out = &self.nodes[i].value.data;
                let (n, d) = (av.shape[0], av.shape[1]);
                let m = bv.shape[0];
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for r in 0..n {
                    for c in 0..m {
                        let gi = g[r * m + c];
                        if gi == 0.0 {
                            continue;
                        }
                        let dist = out[r * m + c];
                        if dist < 1e-300 {
                            continue; // distance ~0: subgradient 0
                        }
                        let scale = gi / dist;
                        for q in 0..d {
                            let diff = av.data[r * d + q] - bv.data[c * d + q];
                            da[r * d + q] += scale * diff;
                            db[c * d + q] -= scale * diff;
                        }
                    }
                }
                if av.requires_grad {
                    self.acc_slice(adjoint, a, &da);
                }
                if bv.requires_grad {
                    self.acc_slice(adjoint, b, &db);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p].value.numel();
                    if self.nodes[p].value.requires_grad {
                        self.acc_slice(adjoint, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::IndexSelect(a, indices) => {
                if self.nodes[a].value.requires_grad {
                    let buf =
                        adjoint[a].get_or_insert_with(|| vec![0.0; self.nodes[a].value.numel()]);
                    for (pos, &src) in indices.iter().enumerate() {
                        buf[src] += g[pos];
                    }
                }
            }
        }
    }

    // Operand values expanded to the output length, honoring the broadcast
    // used in the forward pass (scalar or row-vector).
    fn broadcast_values(&self, operand: usize, other: usize, out_len: usize) -> Vec<f64> {
        let v = &self.nodes[operand].value;
        if v.numel() == out_len {
            return v.data.clone();
        }
        if v.numel() == 1 {
            return vec![v.data[0]; out_len];
        }
        // row vector against the other operand's [n, c]
        let c = self.nodes[other].value.shape[1];
        (0..out_len).map(|k| v.data[k % c]).collect()
    }

    // Accumulate `sign * g * factor` into an operand, reducing over broadcast
    // dimensions when the operand is smaller than the output.
    fn accumulate_broadcast(
        &self,
        adjoint: &mut [Option<Vec<f64>>],
        operand: usize,
        g: &[f64],
        sign: f64,
        factor: Option<&[f64]>,
    ) {
        let v = &self.nodes[operand].value;
        if !v.requires_grad {
            return;
        }
        let n = v.numel();
        let buf = adjoint[operand].get_or_insert_with(|| vec![0.0; n]);
        let term = |k: usize| sign * g[k] * factor.map_or(1.0, |f| f[k]);
        if n == g.len() {
            for (k, b) in buf.iter_mut().enumerate() {
                *b += term(k);
            }
        } else if n == 1 {
            let mut s = 0.0;
            for k in 0..g.len() {
                s += term(k);
            }
            buf[0] += s;
        } else {
            // row vector: sum over rows
            for k in 0..g.len() {
                buf[k % n] += term(k);
            }
        }
    }

    fn acc_elem(
        &self,
        adjoint: &mut [Option<Vec<f64>>],
        operand: usize,
        values: impl Iterator<Item = f64>,
    ) {
        if !self.nodes[operand].value.requires_grad {
            return;
        }
        let n = self.nodes[operand].value.numel();
        let buf = adjoint[operand].get_or_insert_with(|| vec![0.0; n]);
        for (b, v) in buf.iter_mut().zip(values) {
            *b += v;
        }
    }

    fn acc_slice(&self, adjoint: &mut [Option<Vec<f64>>], operand: usize, values: &[f64]) {
        if !self.nodes[operand].value.requires_grad {
            return;
        }
        let buf = adjoint[operand].get_or_insert_with(|| vec![0.0; values.len()]);
        for (b, &v) in buf.iter_mut().zip(values) {
            *b += v;
        }
    }
}

/// Row-major `[n,k] x [k,m]` product into a fresh buffer.
pub fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub pass: bool,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max_rel_err={:.3e} at component {} (analytic {:.6e}, numeric {:.6e})",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.worst_index,
            self.analytic_at_worst,
            self.numeric_at_worst,
        )
    }
}

/// Compare tape gradients of a scalar-valued function against central finite
/// differences, componentwise. Passes iff the max relative error (absolute
/// floor 1e-8 in the denominator) is within `tol`.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(step > 0.0 && step <= 1e-2, "step must be in (0, 1e-2]");

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad());
    let root = f(&mut tape, leaf)?;
    if tape.value(root).numel() != 1 {
        return Err(AutodiffError::NonScalarRoot {
            shape: tape.value(root).shape.clone(),
        });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<f64> = match grads.get(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(x.shape.clone(), data)?);
        let r = f(&mut t, v)?;
        Ok(t.value(r).data[0])
    };

    let mut report = GradCheckReport {
        pass: true,
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for i in 0..x.numel() {
        let mut plus = x.data.clone();
        plus[i] += step;
        let mut minus = x.data.clone();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
