//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Tape`] records every operation as a node holding its inputs'
//! ids and its forward value. Nodes are created in topological order,
//! so [`Tape::backward`] is a single reverse sweep that pushes each
//! node's accumulated adjoint into its parents. Gradients are returned
//! as a separate [`Gradients`] map; the tape itself is never mutated by
//! backward, so repeated backward calls from the same loss node are
//! bit-for-bit identical.
//!
//! Every forward op checks its output for non-finite values and fails
//! with `CoreError::Numerical` instead of letting NaN propagate into a
//! training run.

use crate::error::{CoreError, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Index of a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Softplus,
    Square,
    Negate,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    AddBias { a: NodeId, bias: NodeId, rows: usize, cols: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Unary { kind: UnaryKind, a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Sum { a: NodeId },
    Mean { a: NodeId },
    SumRows { a: NodeId, rows: usize, cols: usize },
    MulConst { a: NodeId, c: f64 },
    // The shift is baked into the stored output; kept for Debug dumps.
    AddConst { a: NodeId, #[allow(dead_code)] c: f64 },
    ConcatCols { a: NodeId, b: NodeId, rows: usize, ca: usize, cb: usize },
    NarrowCols { a: NodeId, rows: usize, cols: usize, start: usize, len: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one loss node with respect to tape nodes.
///
/// Nodes the loss does not depend on report a zero tensor of their
/// value's shape, so optimizer code never needs a missing-gradient path.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`, zero-filled if the loss never
    /// touched that node.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    /// Borrowing accessor; `None` means the node was unreached (zero).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(CoreError::Numerical(format!(
                "non-finite value produced by {context}"
            )));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Record an input tensor. Leaves are where gradients terminate.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    /// C = A * B for rank-2 operands with matching inner dimension.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::dimension("matmul", format!("{sa:?}"), format!("{sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = linalg::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push(Op::MatMul { a, b, m, k, n }, value, "matmul")
    }

    /// Row-broadcast bias add: `[rows, cols] + [cols]`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(CoreError::dimension("add_bias", format!("{sa:?}"), format!("{sb:?}")));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = self.value(a).data();
        let bv = self.value(bias).data();
        let mut out = av.to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bv[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push(Op::AddBias { a, bias, rows, cols }, value, "add_bias")
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(CoreError::dimension(name, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Add { a, b }, value, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Sub { a, b }, value, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Mul { a, b }, value, "mul")
    }

    fn unary(&mut self, kind: UnaryKind, a: NodeId) -> Result<NodeId> {
        if kind == UnaryKind::Log {
            if let Some(bad) = self.value(a).data().iter().find(|v| **v <= 0.0) {
                return Err(CoreError::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Softplus => softplus(x),
                UnaryKind::Square => x * x,
                UnaryKind::Negate => -x,
                UnaryKind::Relu => x.max(0.0),
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Unary { kind, a }, value, unary_name(kind))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn negate(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Negate, a)
    }

    /// max(x, 0); subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Relu, a)
    }

    /// Elementwise clamp to [lo, hi]; gradient is zero at and beyond
    /// the boundaries.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(CoreError::Contract(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Clamp { a, lo, hi }, value, "clamp")
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(s), "sum")
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n;
        self.push(Op::Mean { a }, Tensor::scalar(s), "mean")
    }

    /// Row sums of a rank-2 tensor: `[rows, cols] -> [rows]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(CoreError::dimension("sum_rows", format!("{sa:?}"), "[rows, cols]"));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = self.value(a).data();
        let data: Vec<f64> = (0..rows).map(|r| av[r * cols..(r + 1) * cols].iter().sum()).collect();
        self.push(Op::SumRows { a, rows, cols }, Tensor::vector(data), "sum_rows")
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::MulConst { a, c }, value, "mul_const")
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x + c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::AddConst { a, c }, value, "add_const")
    }

    /// Horizontal concatenation of two rank-2 tensors with equal rows.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(CoreError::dimension("concat_cols", format!("{sa:?}"), format!("{sb:?}")));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![rows, ca + cb], data)?;
        self.push(Op::ConcatCols { a, b, rows, ca, cb }, value, "concat_cols")
    }

    /// Column slice `[rows, cols] -> [rows, len]` starting at `start`.
    pub fn narrow_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] || len == 0 {
            return Err(CoreError::dimension(
                "narrow_cols",
                format!("{sa:?}"),
                format!("cols [{start}, {})", start + len),
            ));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        self.push(Op::NarrowCols { a, rows, cols, start, len }, value, "narrow_cols")
    }

    /// Reverse sweep from a scalar loss node. The tape is unchanged;
    /// calling backward twice yields identical gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let da = linalg::matmul_a_bt(&g, self.value(*b).data(), m, n, k);
                    let db = linalg::matmul_at_b(self.value(*a).data(), &g, m, k, n);
                    accumulate(&mut grads, a.0, &da, m * k);
                    accumulate(&mut grads, b.0, &db, k * n);
                }
                Op::AddBias { a, bias, rows, cols } => {
                    accumulate(&mut grads, a.0, &g, rows * cols);
                    let mut db = vec![0.0; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                    accumulate(&mut grads, bias.0, &db, *cols);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, &g, g.len());
                    accumulate(&mut grads, b.0, &g, g.len());
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, a.0, &g, g.len());
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, b.0, &neg, g.len());
                }
                Op::Mul { a, b } => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da: Vec<f64> = g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                    accumulate(&mut grads, a.0, &da, g.len());
                    accumulate(&mut grads, b.0, &db, g.len());
                }
                Op::Unary { kind, a } => {
                    let av = self.value(*a).data();
                    let out = self.nodes[idx].value.data();
                    let da: Vec<f64> = match kind {
                        UnaryKind::Exp => g.iter().zip(out).map(|(gi, oi)| gi * oi).collect(),
                        UnaryKind::Log => g.iter().zip(av).map(|(gi, ai)| gi / ai).collect(),
                        UnaryKind::Tanh => {
                            g.iter().zip(out).map(|(gi, oi)| gi * (1.0 - oi * oi)).collect()
                        }
                        UnaryKind::Softplus => {
                            g.iter().zip(av).map(|(gi, ai)| gi * sigmoid(*ai)).collect()
                        }
                        UnaryKind::Square => {
                            g.iter().zip(av).map(|(gi, ai)| gi * 2.0 * ai).collect()
                        }
                        UnaryKind::Negate => g.iter().map(|gi| -gi).collect(),
                        UnaryKind::Relu => g
                            .iter()
                            .zip(av)
                            .map(|(gi, ai)| if *ai > 0.0 { *gi } else { 0.0 })
                            .collect(),
                    };
                    accumulate(&mut grads, a.0, &da, g.len());
                }
                Op::Clamp { a, lo, hi } => {
                    let av = self.value(*a).data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(av)
                        .map(|(gi, ai)| if *ai > *lo && *ai < *hi { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a.0, &da, g.len());
                }
                Op::Sum { a } => {
                    let n = self.value(*a).numel();
                    let da = vec![g[0]; n];
                    accumulate(&mut grads, a.0, &da, n);
                }
                Op::Mean { a } => {
                    let n = self.value(*a).numel();
                    let da = vec![g[0] / n as f64; n];
                    accumulate(&mut grads, a.0, &da, n);
                }
                Op::SumRows { a, rows, cols } => {
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            da[r * cols + c] = g[r];
                        }
                    }
                    accumulate(&mut grads, a.0, &da, rows * cols);
                }
                Op::MulConst { a, c } => {
                    let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    accumulate(&mut grads, a.0, &da, g.len());
                }
                Op::AddConst { a, .. } => {
                    accumulate(&mut grads, a.0, &g, g.len());
                }
                Op::ConcatCols { a, b, rows, ca, cb } => {
                    let mut da = vec![0.0; rows * ca];
                    let mut db = vec![0.0; rows * cb];
                    let w = ca + cb;
                    for r in 0..*rows {
                        da[r * ca..(r + 1) * ca].copy_from_slice(&g[r * w..r * w + ca]);
                        db[r * cb..(r + 1) * cb].copy_from_slice(&g[r * w + ca..(r + 1) * w]);
                    }
                    accumulate(&mut grads, a.0, &da, rows * ca);
                    accumulate(&mut grads, b.0, &db, rows * cb);
                }
                Op::NarrowCols { a, rows, cols, start, len } => {
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        da[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, a.0, &da, rows * cols);
                }
            }
        }

        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::new(shapes[i].clone(), data).expect("adjoint shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64], numel: usize) {
    debug_assert_eq!(contribution.len(), numel);
    match &mut grads[idx] {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
        None => grads[idx] = Some(contribution.to_vec()),
    }
}

/// Overflow-safe softplus: max(x, 0) + log1p(exp(-|x|)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Exp => "exp",
        UnaryKind::Log => "log",
        UnaryKind::Tanh => "tanh",
        UnaryKind::Softplus => "softplus",
        UnaryKind::Square => "square",
        UnaryKind::Negate => "negate",
        UnaryKind::Relu => "relu",
    }
}
