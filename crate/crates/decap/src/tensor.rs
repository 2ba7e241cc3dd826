//! Reverse-mode differentiable tensor engine.
//!
//! A [`Tape`] records every primitive applied during a forward pass; calling
//! [`Tape::backward`] from a scalar loss walks the record in reverse
//! construction order and accumulates gradients into every node that
//! requires them. Tensors are rank 0, 1 or 2 and hold `f64` data in
//! row-major order. The op set is intentionally small: exactly what a
//! transformer encoder/decoder stack needs.
//!
//! Shape violations are programming errors and panic with the offending
//! shapes named; fallible APIs live at module boundaries, not here.

use std::cell::RefCell;
use std::rc::Rc;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { a: usize },
    Gelu { a: usize },
    Relu { a: usize },
    GatherRows { a: usize, ids: Vec<usize> },
    CatRows { parts: Vec<usize> },
    CatCols { parts: Vec<usize> },
    Reshape { a: usize },
    Transpose { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    MeanRows { a: usize },
    TakePerRow { a: usize, cols: Vec<usize> },
    MulMask { a: usize, mask: Rc<Vec<f64>> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// Set on leaves created from a parameter store; used to route
    /// gradients back to persistent parameter buffers.
    param: Option<usize>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Ordered record of applied primitives. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major (rows, cols) view of a rank-1/2 shape. Rank-1 counts as one row.
fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("rank > 2 unsupported: {:?}", shape),
    }
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out(m,k) += g(m,n) * b(k,n)^T
fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            orow[p] += s;
        }
    }
}

/// out(k,n) += a(m,k)^T * g(m,n)
fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// rhs is a scalar
    Scalar,
    /// rhs shape is a suffix of lhs shape (e.g. a bias row added to a matrix)
    SuffixRow { rep: usize, len: usize },
}

fn broadcast_of(lhs: &[usize], rhs: &[usize], opname: &str) -> Broadcast {
    if lhs == rhs {
        return Broadcast::Same;
    }
    if numel(rhs) == 1 {
        return Broadcast::Scalar;
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        let len = numel(rhs);
        return Broadcast::SuffixRow {
            rep: numel(lhs) / len,
            len,
        };
    }
    panic!("{opname}: shapes do not align: lhs {lhs:?}, rhs {rhs:?}");
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            shape: shape.clone(),
            data,
            requires_grad,
            grad: None,
            param: None,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// New leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            numel(shape),
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(Op::Leaf, shape.to_vec(), data, requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        self.leaf(data, shape, false)
    }

    pub(crate) fn leaf_for_param(
        &self,
        data: Vec<f64>,
        shape: &[usize],
        requires_grad: bool,
        param: usize,
    ) -> Tensor {
        let t = self.leaf(data, shape, requires_grad);
        self.inner.borrow_mut().nodes[t.id].param = Some(param);
        t
    }

    /// Run reverse-mode accumulation from a scalar `loss`. Repeated calls
    /// without clearing accumulate into existing gradients.
    pub fn backward(&self, loss: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.inner, &loss.tape.inner),
            "backward: loss lives on another tape"
        );
        assert_eq!(
            numel(&loss.shape),
            1,
            "backward: loss must be scalar, got shape {:?}",
            loss.shape
        );
        let mut inner = self.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        work[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if work[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            backprop_node(nodes, &mut work, id);
        }
        for (id, w) in work.into_iter().enumerate() {
            if let Some(w) = w {
                match &mut nodes[id].grad {
                    Some(g) => g.iter_mut().zip(&w).for_each(|(g, v)| *g += v),
                    g @ None => *g = Some(w),
                }
            }
        }
    }

    /// (param index, accumulated gradient) for every parameter-backed leaf
    /// that received gradient.
    pub(crate) fn param_grads(&self) -> Vec<(usize, Vec<f64>)> {
        let inner = self.inner.borrow();
        inner
            .nodes
            .iter()
            .filter_map(|n| match (n.param, &n.grad) {
                (Some(p), Some(g)) => Some((p, g.clone())),
                _ => None,
            })
            .collect()
    }

    fn data_of(&self, id: usize) -> Vec<f64> {
        self.inner.borrow().nodes[id].data.clone()
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.inner.borrow().nodes[id])
    }
}

fn ensure_work(nodes: &[Node], work: &mut [Option<Vec<f64>>], id: usize) {
    if work[id].is_none() {
        work[id] = Some(vec![0.0; nodes[id].data.len()]);
    }
}

/// Add `g` into the working gradient of `target`, contracting broadcast axes.
fn accumulate(
    nodes: &[Node],
    work: &mut [Option<Vec<f64>>],
    target: usize,
    g: &[f64],
    bc: Broadcast,
    sign: f64,
) {
    if !nodes[target].requires_grad {
        return;
    }
    ensure_work(nodes, work, target);
    let tg = work[target].as_mut().unwrap();
    match bc {
        Broadcast::Same => {
            for (t, &v) in tg.iter_mut().zip(g) {
                *t += sign * v;
            }
        }
        Broadcast::Scalar => {
            tg[0] += sign * g.iter().sum::<f64>();
        }
        Broadcast::SuffixRow { rep, len } => {
            for r in 0..rep {
                for j in 0..len {
                    tg[j] += sign * g[r * len + j];
                }
            }
        }
    }
}

fn expand(data: &[f64], bc: Broadcast, total: usize) -> Vec<f64> {
    match bc {
        Broadcast::Same => data.to_vec(),
        Broadcast::Scalar => vec![data[0]; total],
        Broadcast::SuffixRow { rep, len } => {
            let mut out = Vec::with_capacity(total);
            for _ in 0..rep {
                out.extend_from_slice(&data[..len]);
            }
            out
        }
    }
}

fn backprop_node(nodes: &[Node], work: &mut [Option<Vec<f64>>], id: usize) {
    let g = work[id].clone().unwrap();
    let op = nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = as_2d(&nodes[a].shape);
            let n = as_2d(&nodes[b].shape).1;
            if nodes[a].requires_grad {
                ensure_work(nodes, work, a);
                let ag = work[a].as_mut().unwrap();
                matmul_nt_acc(&g, &nodes[b].data, m, n, k, ag);
            }
            if nodes[b].requires_grad {
                ensure_work(nodes, work, b);
                let bg = work[b].as_mut().unwrap();
                matmul_tn_acc(&nodes[a].data, &g, m, k, n, bg);
            }
        }
        Op::Add { a, b } => {
            let bc = broadcast_of(&nodes[a].shape, &nodes[b].shape, "add");
            accumulate(nodes, work, a, &g, Broadcast::Same, 1.0);
            accumulate(nodes, work, b, &g, bc, 1.0);
        }
        Op::Sub { a, b } => {
            let bc = broadcast_of(&nodes[a].shape, &nodes[b].shape, "sub");
            accumulate(nodes, work, a, &g, Broadcast::Same, 1.0);
            accumulate(nodes, work, b, &g, bc, -1.0);
        }
        Op::Mul { a, b } => {
            let bc = broadcast_of(&nodes[a].shape, &nodes[b].shape, "mul");
            let total = nodes[a].data.len();
            if nodes[a].requires_grad {
                let bexp = expand(&nodes[b].data, bc, total);
                let ga: Vec<f64> = g.iter().zip(&bexp).map(|(x, y)| x * y).collect();
                accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
            }
            if nodes[b].requires_grad {
                let gb: Vec<f64> = g.iter().zip(&nodes[a].data).map(|(x, y)| x * y).collect();
                accumulate(nodes, work, b, &gb, bc, 1.0);
            }
        }
        Op::Scale { a, c } => {
            let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::Softmax { a } => {
            let (rows, cols) = as_2d(&nodes[id].shape);
            let y = nodes[id].data.clone();
            let mut ga = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(x, y)| x * y).sum();
                for j in 0..cols {
                    ga[r * cols + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::LogSoftmax { a } => {
            let (rows, cols) = as_2d(&nodes[id].shape);
            let y = nodes[id].data.clone();
            let mut ga = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let gsum: f64 = gr.iter().sum();
                for j in 0..cols {
                    ga[r * cols + j] = gr[j] - yr[j].exp() * gsum;
                }
            }
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::LayerNorm { a } => {
            let (rows, cols) = as_2d(&nodes[a].shape);
            let x = nodes[a].data.clone();
            let d = cols as f64;
            let mut ga = vec![0.0; x.len()];
            for r in 0..rows {
                let xr = &x[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let mu = xr.iter().sum::<f64>() / d;
                let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                let s = (var + LAYER_NORM_EPS).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) / s).collect();
                let gmean = gr.iter().sum::<f64>() / d;
                let gxmean = gr.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                for j in 0..cols {
                    ga[r * cols + j] = (gr[j] - gmean - xhat[j] * gxmean) / s;
                }
            }
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::Gelu { a } => {
            let x = nodes[a].data.clone();
            let ga: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(&v, &gv)| {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })
                .collect();
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::Relu { a } => {
            let x = nodes[a].data.clone();
            let ga: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::GatherRows { a, ids } => {
            if !nodes[a].requires_grad {
                return;
            }
            ensure_work(nodes, work, a);
            let cols = as_2d(&nodes[a].shape).1;
            let ag = work[a].as_mut().unwrap();
            for (out_r, &src_r) in ids.iter().enumerate() {
                for j in 0..cols {
                    ag[src_r * cols + j] += g[out_r * cols + j];
                }
            }
        }
        Op::CatRows { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p].data.len();
                let slice = g[offset..offset + len].to_vec();
                accumulate(nodes, work, p, &slice, Broadcast::Same, 1.0);
                offset += len;
            }
        }
        Op::CatCols { parts } => {
            let rows = as_2d(&nodes[id].shape).0;
            let total_cols = as_2d(&nodes[id].shape).1;
            let widths: Vec<usize> = parts.iter().map(|&p| as_2d(&nodes[p].shape).1).collect();
            let mut col0 = 0;
            for (pi, p) in parts.iter().enumerate() {
                let w = widths[pi];
                let mut gp = vec![0.0; rows * w];
                for r in 0..rows {
                    for j in 0..w {
                        gp[r * w + j] = g[r * total_cols + col0 + j];
                    }
                }
                accumulate(nodes, work, *p, &gp, Broadcast::Same, 1.0);
                col0 += w;
            }
        }
        Op::Reshape { a } => {
            accumulate(nodes, work, a, &g, Broadcast::Same, 1.0);
        }
        Op::Transpose { a } => {
            let (m, n) = as_2d(&nodes[a].shape);
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::Sum { a } => {
            let n = nodes[a].data.len();
            let ga = vec![g[0]; n];
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::Mean { a } => {
            let n = nodes[a].data.len();
            let ga = vec![g[0] / n as f64; n];
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::MeanRows { a } => {
            let (m, n) = as_2d(&nodes[a].shape);
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[j] / m as f64;
                }
            }
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
        Op::TakePerRow { a, cols } => {
            if !nodes[a].requires_grad {
                return;
            }
            ensure_work(nodes, work, a);
            let width = as_2d(&nodes[a].shape).1;
            let ag = work[a].as_mut().unwrap();
            for (r, &c) in cols.iter().enumerate() {
                ag[r * width + c] += g[r];
            }
        }
        Op::MulMask { a, mask } => {
            let ga: Vec<f64> = g.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
            accumulate(nodes, work, a, &ga, Broadcast::Same, 1.0);
        }
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.data_of(self.id)
    }

    /// Scalar value; panics if not scalar.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.shape);
        self.tape.data_of(self.id)[0]
    }

    /// Accumulated gradient, if backward reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.with_node(self.id, |n| n.grad.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_node(self.id, |n| n.requires_grad)
    }

    fn same_tape(&self, other: &Tensor, opname: &str) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "{opname}: operands live on different tapes"
        );
    }

    fn rg(&self, other: Option<&Tensor>) -> bool {
        self.requires_grad() || other.map(|o| o.requires_grad()).unwrap_or(false)
    }

    /// Matrix product. 1-D operands are treated as a single row.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        self.same_tape(rhs, "matmul");
        let (m, k) = as_2d(&self.shape);
        let (k2, n) = as_2d(&rhs.shape);
        assert_eq!(
            k, k2,
            "matmul: inner dimensions differ: lhs {:?}, rhs {:?}",
            self.shape, rhs.shape
        );
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0; m * n];
        matmul_nn(&a, &b, m, k, n, &mut out);
        let shape = if self.shape.len() == 1 { vec![n] } else { vec![m, n] };
        self.tape.push(
            Op::MatMul { a: self.id, b: rhs.id },
            shape,
            out,
            self.rg(Some(rhs)),
        )
    }

    fn elementwise(&self, rhs: &Tensor, opname: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Tensor {
        self.same_tape(rhs, opname);
        let bc = broadcast_of(&self.shape, &rhs.shape, opname);
        let a = self.data();
        let b = expand(&rhs.data(), bc, a.len());
        let out: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push(op, self.shape.clone(), out, self.rg(Some(rhs)))
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.elementwise(rhs, "add", |a, b| a + b, Op::Add { a: self.id, b: rhs.id })
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.elementwise(rhs, "sub", |a, b| a - b, Op::Sub { a: self.id, b: rhs.id })
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.elementwise(rhs, "mul", |a, b| a * b, Op::Mul { a: self.id, b: rhs.id })
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        self.tape
            .push(Op::Scale { a: self.id, c }, self.shape.clone(), out, self.rg(None))
    }

    /// Softmax over the last axis; rows are shifted by their max first.
    pub fn softmax(&self) -> Tensor {
        let (rows, cols) = as_2d(&self.shape);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (xr[j] - mx).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        self.tape
            .push(Op::Softmax { a: self.id }, self.shape.clone(), out, self.rg(None))
    }

    pub fn log_softmax(&self) -> Tensor {
        let (rows, cols) = as_2d(&self.shape);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = xr.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..cols {
                out[r * cols + j] = xr[j] - lse;
            }
        }
        self.tape
            .push(Op::LogSoftmax { a: self.id }, self.shape.clone(), out, self.rg(None))
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self) -> Tensor {
        let (rows, cols) = as_2d(&self.shape);
        let x = self.data();
        let d = cols as f64;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mu = xr.iter().sum::<f64>() / d;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let s = (var + LAYER_NORM_EPS).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (xr[j] - mu) / s;
            }
        }
        self.tape
            .push(Op::LayerNorm { a: self.id }, self.shape.clone(), out, self.rg(None))
    }

    pub fn gelu(&self) -> Tensor {
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.tape
            .push(Op::Gelu { a: self.id }, self.shape.clone(), out, self.rg(None))
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        self.tape
            .push(Op::Relu { a: self.id }, self.shape.clone(), out, self.rg(None))
    }

    /// Select rows by index (also the embedding lookup). Duplicate indices
    /// are fine; their gradients accumulate.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let (m, n) = as_2d(&self.shape);
        for &i in ids {
            assert!(i < m, "gather_rows: row {} out of range for shape {:?}", i, self.shape);
        }
        let x = self.data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        self.tape.push(
            Op::GatherRows { a: self.id, ids: ids.to_vec() },
            vec![ids.len(), n],
            out,
            self.rg(None),
        )
    }

    /// Stack matrices vertically. All parts must share a column count.
    pub fn cat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "cat_rows: no parts");
        let tape = parts[0].tape.clone();
        let n = as_2d(&parts[0].shape).1;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            p.same_tape(parts[0], "cat_rows");
            let (m, nc) = as_2d(&p.shape);
            assert_eq!(
                nc, n,
                "cat_rows: column mismatch: {:?} versus first part with {} cols",
                p.shape, n
            );
            rows += m;
            data.extend_from_slice(&p.data());
            rg |= p.requires_grad();
        }
        tape.push(
            Op::CatRows { parts: parts.iter().map(|p| p.id).collect() },
            vec![rows, n],
            data,
            rg,
        )
    }

    /// Concatenate along the last axis. Parts must share a row count.
    pub fn cat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "cat_cols: no parts");
        let tape = parts[0].tape.clone();
        let rows = as_2d(&parts[0].shape).0;
        let rank1 = parts[0].shape.len() == 1;
        let mut total = 0;
        let mut rg = false;
        for p in parts {
            p.same_tape(parts[0], "cat_cols");
            let (m, nc) = as_2d(&p.shape);
            assert_eq!(
                m, rows,
                "cat_cols: row mismatch: {:?} versus first part with {} rows",
                p.shape, rows
            );
            total += nc;
            rg |= p.requires_grad();
        }
        let datas: Vec<Vec<f64>> = parts.iter().map(|p| p.data()).collect();
        let widths: Vec<usize> = parts.iter().map(|p| as_2d(&p.shape).1).collect();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (pi, d) in datas.iter().enumerate() {
                let w = widths[pi];
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank1 { vec![total] } else { vec![rows, total] };
        tape.push(
            Op::CatCols { parts: parts.iter().map(|p| p.id).collect() },
            shape,
            out,
            rg,
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.numel(),
            numel(shape),
            "reshape: cannot view {:?} as {:?}",
            self.shape,
            shape
        );
        self.tape
            .push(Op::Reshape { a: self.id }, shape.to_vec(), self.data(), self.rg(None))
    }

    /// Transpose of a matrix (last two axes of a rank-2 tensor).
    pub fn transpose(&self) -> Tensor {
        let (m, n) = as_2d(&self.shape);
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        self.tape
            .push(Op::Transpose { a: self.id }, vec![n, m], out, self.rg(None))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        self.tape.push(Op::Sum { a: self.id }, vec![], vec![s], self.rg(None))
    }

    pub fn mean(&self) -> Tensor {
        let d = self.data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.tape.push(Op::Mean { a: self.id }, vec![], vec![m], self.rg(None))
    }

    /// Column means of a matrix: (m, n) -> (n,).
    pub fn mean_rows(&self) -> Tensor {
        let (m, n) = as_2d(&self.shape);
        let x = self.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += x[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        self.tape
            .push(Op::MeanRows { a: self.id }, vec![n], out, self.rg(None))
    }

    /// Per-row element pick: out[r] = self[r, cols[r]]. Backbone of the
    /// cross-entropy gather.
    pub fn take_per_row(&self, cols: &[usize]) -> Tensor {
        let (m, n) = as_2d(&self.shape);
        assert_eq!(
            cols.len(),
            m,
            "take_per_row: need one column per row, got {} for shape {:?}",
            cols.len(),
            self.shape
        );
        for &c in cols {
            assert!(c < n, "take_per_row: column {} out of range for shape {:?}", c, self.shape);
        }
        let x = self.data();
        let out: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| x[r * n + c]).collect();
        self.tape.push(
            Op::TakePerRow { a: self.id, cols: cols.to_vec() },
            vec![m],
            out,
            self.rg(None),
        )
    }

    /// Elementwise product with a constant mask (dropout, padding masks).
    pub fn mul_mask(&self, mask: &[f64]) -> Tensor {
        assert_eq!(
            mask.len(),
            self.numel(),
            "mul_mask: mask length {} does not match shape {:?}",
            mask.len(),
            self.shape
        );
        let out: Vec<f64> = self.data().iter().zip(mask).map(|(x, m)| x * m).collect();
        self.tape.push(
            Op::MulMask { a: self.id, mask: Rc::new(mask.to_vec()) },
            self.shape.clone(),
            out,
            self.rg(None),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(vec![0.0; 5], &[5]);
        let y = x.softmax();
        for v in y.data() {
            assert!((v - 0.2).abs() < 1e-12, "expected 0.2, got {v}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(vec![1.0, -3.0, 0.5, 2.0, 100.0, -100.0], &[2, 3]);
        let y = x.softmax().data();
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(y[r * 3..(r + 1) * 3].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn matmul_shapes_follow_contraction() {
        let tape = Tape::new();
        let a = tape.constant(vec![1.0; 6], &[2, 3]);
        let b = tape.constant(vec![1.0; 12], &[3, 4]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    #[should_panic(expected = "matmul: inner dimensions differ: lhs [2, 3], rhs [4, 5]")]
    fn matmul_rejects_mismatched_shapes() {
        let tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], &[2, 3]);
        let b = tape.constant(vec![0.0; 20], &[4, 5]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(vec![3.5; 8], &[8]);
        let y = x.layer_norm();
        for v in y.data() {
            assert!(v.abs() < 1e-9, "constant row should normalize to ~0, got {v}");
        }
    }

    #[test]
    fn backward_through_quadratic() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0], &[3], true);
        let loss = x.mul(&x).sum();
        tape.backward(&loss);
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_softmax_pick_matches_closed_form() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.0, 0.0], &[2], true);
        let loss = x.softmax().take_per_row(&[0]).sum();
        tape.backward(&loss);
        let g = x.grad().unwrap();
        assert!((g[0] - 0.25).abs() < 1e-9, "g[0] = {}", g[0]);
        assert!((g[1] + 0.25).abs() < 1e-9, "g[1] = {}", g[1]);
    }

    #[test]
    fn disconnected_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true);
        let unused = tape.leaf(vec![5.0], &[1], true);
        let loss = x.sum();
        tape.backward(&loss);
        assert!(unused.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "backward: loss must be scalar")]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true);
        let y = x.scale(2.0);
        tape.backward(&y);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true);
        let loss = x.mul(&x).sum();
        tape.backward(&loss);
        tape.backward(&loss);
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn add_broadcasts_bias_row() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true);
        let b = tape.leaf(vec![10.0, 20.0], &[2], true);
        let y = x.add(&b);
        assert_eq!(y.data(), vec![11.0, 22.0, 13.0, 24.0]);
        let loss = y.sum();
        tape.backward(&loss);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let tape = Tape::new();
        let table = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true);
        let picked = table.gather_rows(&[0, 0, 1]);
        assert_eq!(picked.shape(), &[3, 2]);
        let loss = picked.sum();
        tape.backward(&loss);
        assert_eq!(table.grad().unwrap(), vec![2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let t = x.transpose();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.transpose().data(), x.data());
    }

    #[test]
    fn cat_rows_then_split_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], &[1, 2], true);
        let b = tape.leaf(vec![3.0, 4.0], &[1, 2], true);
        let c = Tensor::cat_rows(&[&a, &b]);
        assert_eq!(c.shape(), &[2, 2]);
        let loss = c.take_per_row(&[1, 0]).sum();
        tape.backward(&loss);
        assert_eq!(a.grad().unwrap(), vec![0.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn mean_rows_produces_column_means() {
        let tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, 5.0], &[2, 2]);
        assert_eq!(x.mean_rows().data(), vec![2.0, 3.5]);
    }
}
