//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`CompGraph`] is an append-only tape of nodes built per batch
//! (define-by-run). Each node stores its operation, shape, a value buffer
//! and a gradient buffer of identical shape. Inputs have smaller ids than
//! the nodes consuming them, so forward runs in id order and backward in
//! reverse id order.
//!
//! The op set is exactly what next-token-prediction training and the
//! unlearning updates need: no broadcasting beyond row-wise vectors, no
//! higher-order derivatives.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_at_b_acc, Tensor};

/// Probabilities are clamped here before any log.
pub const PROB_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Index of a node in its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Operation of a node, holding the ids of its inputs and any op constants.
#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    /// Rows of `table` selected by `ids`.
    EmbedGather {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// The activation slot: tanh-form GELU (smooth, so finite differences
    /// behave everywhere, unlike ReLU's kink).
    Gelu(NodeId),
    /// Row-wise (x - mean) / sqrt(var + eps), no affine part.
    LayerNorm(NodeId),
    /// Row-wise softmax with max subtraction.
    Softmax(NodeId),
    Log(NodeId),
    Negate(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale {
        input: NodeId,
        factor: f64,
    },
    /// Scalar `-sum_rows sum_j targets[r][j] * ln(max(p[r][j], floor))`.
    /// Targets are arbitrary per-row distributions; all-zero rows are
    /// masked out of the loss.
    CrossEntropy {
        probs: NodeId,
        targets: Tensor,
    },
}

/// Fieldless tag for an [`Op`], used by coverage checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Add,
    Mul,
    MatMul,
    EmbedGather,
    Gelu,
    LayerNorm,
    Softmax,
    Log,
    Negate,
    Sum,
    Mean,
    Scale,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Input,
        OpKind::Add,
        OpKind::Mul,
        OpKind::MatMul,
        OpKind::EmbedGather,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Log,
        OpKind::Negate,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Scale,
        OpKind::CrossEntropy,
    ];
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::EmbedGather { .. } => OpKind::EmbedGather,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm(..) => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Log(..) => OpKind::Log,
            Op::Negate(..) => OpKind::Negate,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Scale { .. } => OpKind::Scale,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::EmbedGather { table, .. } => vec![table],
            Op::Gelu(x)
            | Op::LayerNorm(x)
            | Op::Softmax(x)
            | Op::Log(x)
            | Op::Negate(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Scale { input: x, .. } => vec![x],
            Op::CrossEntropy { probs, .. } => vec![probs],
        }
    }
}

/// One tape entry: operation, value buffer and gradient buffer.
#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Node {
    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }
}

/// Append-only computation graph. Values are populated by [`forward`],
/// gradients by [`backward`].
///
/// [`forward`]: CompGraph::forward
/// [`backward`]: CompGraph::backward
#[derive(Clone, Debug, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
}

/// How two shapes combine under an element-wise op.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    None,
    /// Right operand is a vector broadcast across the left operand's rows.
    RowsRight,
    /// Left operand is the broadcast vector.
    RowsLeft,
}

impl CompGraph {
    pub fn new() -> Self {
        CompGraph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    /// Scalar value of a rank-0/1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert!(self.nodes[id.0].value.is_scalar());
        self.nodes[id.0].value.data[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            grad: Tensor::zeros(shape.clone()),
            value: Tensor::zeros(shape),
        });
        id
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// Bind an input node. Its value is fixed until the graph is rebuilt.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input,
            grad: Tensor::zeros(value.shape.clone()),
            value,
        });
        id
    }

    fn broadcast_of(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(Broadcast, Vec<usize>)> {
        let sa = self.nodes[a.0].shape();
        let sb = self.nodes[b.0].shape();
        if sa == sb {
            return Ok((Broadcast::None, sa.to_vec()));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            return Ok((Broadcast::RowsRight, sa.to_vec()));
        }
        if sb.len() == 2 && sa.len() == 1 && sb[1] == sa[0] {
            return Ok((Broadcast::RowsLeft, sb.to_vec()));
        }
        Err(self.shape_err(op, format!("cannot combine {:?} with {:?}", sa, sb)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, shape) = self.broadcast_of("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, shape) = self.broadcast_of("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let sa = self.nodes[a.0].shape().to_vec();
        let sb = self.nodes[b.0].shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.shape_err("matmul", format!("need rank-2 operands, got {:?} and {:?}", sa, sb)));
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, inner) = if transpose_b { (sb[0], sb[1]) } else { (sb[1], sb[0]) };
        if inner != k {
            return Err(self.shape_err(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?} (transpose_b={})", sa, sb, transpose_b),
            ));
        }
        Ok(self.push(Op::MatMul { a, b, transpose_b }, vec![m, n]))
    }

    pub fn embed_gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let st = self.nodes[table.0].shape().to_vec();
        if st.len() != 2 {
            return Err(self.shape_err("embed_gather", format!("table must be rank-2, got {:?}", st)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::OutOfVocab {
                token: bad,
                vocab: st[0],
            });
        }
        let shape = vec![ids.len(), st[1]];
        Ok(self.push(Op::EmbedGather { table, ids }, shape))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape().to_vec();
        self.push(Op::Gelu(x), shape)
    }

    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape().to_vec();
        if shape.is_empty() {
            return Err(self.shape_err("layer_norm", "cannot normalize a scalar".into()));
        }
        Ok(self.push(Op::LayerNorm(x), shape))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape().to_vec();
        if shape.is_empty() {
            return Err(self.shape_err("softmax", "cannot normalize a scalar".into()));
        }
        Ok(self.push(Op::Softmax(x), shape))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape().to_vec();
        self.push(Op::Log(x), shape)
    }

    pub fn negate(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape().to_vec();
        self.push(Op::Negate(x), shape)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), vec![])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.nodes[x.0].shape().to_vec();
        self.push(Op::Scale { input: x, factor }, shape)
    }

    pub fn cross_entropy(&mut self, probs: NodeId, targets: Tensor) -> Result<NodeId> {
        let sp = self.nodes[probs.0].shape().to_vec();
        if sp != targets.shape {
            return Err(self.shape_err(
                "cross_entropy",
                format!("probs shape {:?} vs targets shape {:?}", sp, targets.shape),
            ));
        }
        Ok(self.push(Op::CrossEntropy { probs, targets }, vec![]))
    }

    /// Populate every value buffer in id order. Deterministic for fixed
    /// inputs: the same graph evaluated twice yields bit-identical buffers.
    pub fn forward(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input) {
                continue;
            }
            // Split the tape so the node being computed can read its inputs.
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let out = &mut node.value;
            match &node.op {
                Op::Input => unreachable!(),
                Op::Add(a, b) => {
                    let (ta, tb) = (&done[a.0].value, &done[b.0].value);
                    eltwise_broadcast(out, ta, tb, |x, y| x + y);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&done[a.0].value, &done[b.0].value);
                    eltwise_broadcast(out, ta, tb, |x, y| x * y);
                }
                Op::MatMul { a, b, transpose_b } => {
                    let (ta, tb) = (&done[a.0].value, &done[b.0].value);
                    let (m, k) = (ta.shape[0], ta.shape[1]);
                    let n = out.shape[1];
                    out.data.fill(0.0);
                    matmul_acc(&mut out.data, &ta.data, &tb.data, m, k, n, *transpose_b);
                }
                Op::EmbedGather { table, ids } => {
                    let tt = &done[table.0].value;
                    let d = tt.shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        out.data[r * d..(r + 1) * d].copy_from_slice(&tt.data[id * d..(id + 1) * d]);
                    }
                }
                Op::Gelu(x) => {
                    let tx = &done[x.0].value;
                    for (o, &v) in out.data.iter_mut().zip(&tx.data) {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        *o = 0.5 * v * (1.0 + u.tanh());
                    }
                }
                Op::LayerNorm(x) => {
                    let tx = &done[x.0].value;
                    let (rows, cols) = tx.rows_cols();
                    for r in 0..rows {
                        let xr = &tx.data[r * cols..(r + 1) * cols];
                        let or = &mut out.data[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / cols as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        for (o, &v) in or.iter_mut().zip(xr) {
                            *o = (v - mean) * inv;
                        }
                    }
                }
                Op::Softmax(x) => {
                    let tx = &done[x.0].value;
                    let (rows, cols) = tx.rows_cols();
                    for r in 0..rows {
                        let xr = &tx.data[r * cols..(r + 1) * cols];
                        let or = &mut out.data[r * cols..(r + 1) * cols];
                        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for (o, &v) in or.iter_mut().zip(xr) {
                            *o = (v - max).exp();
                            total += *o;
                        }
                        for o in or.iter_mut() {
                            *o /= total;
                        }
                    }
                }
                Op::Log(x) => {
                    let tx = &done[x.0].value;
                    for (o, &v) in out.data.iter_mut().zip(&tx.data) {
                        *o = v.ln();
                    }
                }
                Op::Negate(x) => {
                    let tx = &done[x.0].value;
                    for (o, &v) in out.data.iter_mut().zip(&tx.data) {
                        *o = -v;
                    }
                }
                Op::Sum(x) => {
                    out.data[0] = done[x.0].value.data.iter().sum();
                }
                Op::Mean(x) => {
                    let tx = &done[x.0].value;
                    out.data[0] = tx.data.iter().sum::<f64>() / tx.numel() as f64;
                }
                Op::Scale { input, factor } => {
                    let tx = &done[input.0].value;
                    for (o, &v) in out.data.iter_mut().zip(&tx.data) {
                        *o = v * factor;
                    }
                }
                Op::CrossEntropy { probs, targets } => {
                    let tp = &done[probs.0].value;
                    let mut total = 0.0;
                    for (&t, &p) in targets.data.iter().zip(&tp.data) {
                        if t != 0.0 {
                            total -= t * p.max(PROB_FLOOR).ln();
                        }
                    }
                    out.data[0] = total;
                }
            }
        }
    }

    /// Accumulate d(root)/d(node) into every ancestor's gradient buffer.
    /// Non-ancestors are left at exactly zero. Requires a scalar root and
    /// a prior [`forward`](CompGraph::forward).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarRoot {
                node: root.0,
                shape: self.nodes[root.0].shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad.data.fill(0.0);
        }

        // Restrict propagation to ancestors of the root.
        let mut on_path = vec![false; self.nodes.len()];
        on_path[root.0] = true;
        for i in (0..=root.0).rev() {
            if !on_path[i] {
                continue;
            }
            for inp in self.nodes[i].op.inputs() {
                on_path[inp.0] = true;
            }
        }

        self.nodes[root.0].grad.data[0] = 1.0;
        for i in (0..=root.0).rev() {
            if !on_path[i] || matches!(self.nodes[i].op, Op::Input) {
                continue;
            }
            let (done, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = &node.grad;
            match &node.op {
                Op::Input => unreachable!(),
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    backprop_add(done, g, a, b);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    backprop_mul(done, g, a, b);
                }
                Op::MatMul { a, b, transpose_b } => {
                    let (a, b, tb) = (*a, *b, *transpose_b);
                    let (m, k) = (done[a.0].value.shape[0], done[a.0].value.shape[1]);
                    let n = node.value.shape[1];
                    let gd = g.data.clone();
                    if tb {
                        // out = a @ b^T: da += g @ b ; db += g^T @ a
                        let bd = done[b.0].value.data.clone();
                        matmul_acc(&mut done[a.0].grad.data, &gd, &bd, m, n, k, false);
                        let ad = done[a.0].value.data.clone();
                        matmul_at_b_acc(&mut done[b.0].grad.data, &gd, &ad, m, n, k);
                    } else {
                        // out = a @ b: da += g @ b^T ; db += a^T @ g
                        let bd = done[b.0].value.data.clone();
                        matmul_acc(&mut done[a.0].grad.data, &gd, &bd, m, n, k, true);
                        let ad = done[a.0].value.data.clone();
                        matmul_at_b_acc(&mut done[b.0].grad.data, &ad, &gd, m, k, n);
                    }
                }
                Op::EmbedGather { table, ids } => {
                    let d = done[table.0].value.shape[1];
                    let tg = &mut done[table.0].grad.data;
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            tg[id * d + c] += g.data[r * d + c];
                        }
                    }
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let xd = &done[x.0].value.data;
                    let xg = &mut done[x.0].grad.data;
                    for ((xg, &v), &gv) in xg.iter_mut().zip(xd).zip(&g.data) {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *xg += gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
                Op::LayerNorm(x) => {
                    let x = *x;
                    let (rows, cols) = done[x.0].value.rows_cols();
                    for r in 0..rows {
                        let xr = &done[x.0].value.data[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let yr = &node.value.data[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / cols as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / cols as f64;
                        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        let xg = &mut done[x.0].grad.data[r * cols..(r + 1) * cols];
                        for ((xg, &gv), &yv) in xg.iter_mut().zip(gr).zip(yr) {
                            *xg += inv * (gv - g_mean - yv * gy_mean);
                        }
                    }
                }
                Op::Softmax(x) => {
                    let x = *x;
                    let (rows, cols) = done[x.0].value.rows_cols();
                    for r in 0..rows {
                        let pr = &node.value.data[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let dot = pr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                        let xg = &mut done[x.0].grad.data[r * cols..(r + 1) * cols];
                        for ((xg, &pv), &gv) in xg.iter_mut().zip(pr).zip(gr) {
                            *xg += pv * (gv - dot);
                        }
                    }
                }
                Op::Log(x) => {
                    let x = *x;
                    let xd = &done[x.0].value.data;
                    let xg = &mut done[x.0].grad.data;
                    for ((xg, &v), &gv) in xg.iter_mut().zip(xd).zip(&g.data) {
                        *xg += gv / v;
                    }
                }
                Op::Negate(x) => {
                    let x = *x;
                    let xg = &mut done[x.0].grad.data;
                    for (xg, &gv) in xg.iter_mut().zip(&g.data) {
                        *xg -= gv;
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    let gv = g.data[0];
                    for xg in done[x.0].grad.data.iter_mut() {
                        *xg += gv;
                    }
                }
                Op::Mean(x) => {
                    let x = *x;
                    let gv = g.data[0] / done[x.0].value.numel() as f64;
                    for xg in done[x.0].grad.data.iter_mut() {
                        *xg += gv;
                    }
                }
                Op::Scale { input, factor } => {
                    let (x, f) = (*input, *factor);
                    let xg = &mut done[x.0].grad.data;
                    for (xg, &gv) in xg.iter_mut().zip(&g.data) {
                        *xg += gv * f;
                    }
                }
                Op::CrossEntropy { probs, targets } => {
                    let p = *probs;
                    let gv = g.data[0];
                    let pd = &done[p.0].value.data;
                    let pg = &mut done[p.0].grad.data;
                    for ((pg, &pv), &tv) in pg.iter_mut().zip(pd).zip(&targets.data) {
                        // Where the floor clamps, the loss is locally flat.
                        if tv != 0.0 && pv > PROB_FLOOR {
                            *pg -= gv * tv / pv;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn eltwise_broadcast(out: &mut Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) {
    if a.shape == b.shape {
        for ((o, &x), &y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
            *o = f(x, y);
        }
    } else if b.shape.len() == 1 {
        let cols = b.shape[0];
        for (r, chunk) in out.data.chunks_mut(cols).enumerate() {
            let ar = &a.data[r * cols..(r + 1) * cols];
            for ((o, &x), &y) in chunk.iter_mut().zip(ar).zip(&b.data) {
                *o = f(x, y);
            }
        }
    } else {
        let cols = a.shape[0];
        for (r, chunk) in out.data.chunks_mut(cols).enumerate() {
            let br = &b.data[r * cols..(r + 1) * cols];
            for ((o, &x), &y) in chunk.iter_mut().zip(&a.data).zip(br) {
                *o = f(x, y);
            }
        }
    }
}

fn backprop_add(done: &mut [Node], g: &Tensor, a: NodeId, b: NodeId) {
    for side in [a, b] {
        let sg = &mut done[side.0].grad;
        if sg.shape == g.shape {
            for (x, &gv) in sg.data.iter_mut().zip(&g.data) {
                *x += gv;
            }
        } else {
            // Broadcast vector: sum the upstream gradient over rows.
            let cols = sg.shape[0];
            for chunk in g.data.chunks(cols) {
                for (x, &gv) in sg.data.iter_mut().zip(chunk) {
                    *x += gv;
                }
            }
        }
    }
}

fn backprop_mul(done: &mut [Node], g: &Tensor, a: NodeId, b: NodeId) {
    let av = done[a.0].value.clone();
    let bv = done[b.0].value.clone();
    for (side, other) in [(a, &bv), (b, &av)] {
        let sg = &mut done[side.0].grad;
        if sg.shape == g.shape {
            if other.shape == g.shape {
                for ((x, &gv), &ov) in sg.data.iter_mut().zip(&g.data).zip(&other.data) {
                    *x += gv * ov;
                }
            } else {
                let cols = other.shape[0];
                for (r, chunk) in g.data.chunks(cols).enumerate() {
                    let xg = &mut sg.data[r * cols..(r + 1) * cols];
                    for ((x, &gv), &ov) in xg.iter_mut().zip(chunk).zip(&other.data) {
                        *x += gv * ov;
                    }
                }
            }
        } else {
            // This side is the broadcast vector.
            let cols = sg.shape[0];
            for (r, chunk) in g.data.chunks(cols).enumerate() {
                let or = &other.data[r * cols..(r + 1) * cols];
                for ((x, &gv), &ov) in sg.data.iter_mut().zip(chunk).zip(or) {
                    *x += gv * ov;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn product_forward_and_backward() {
        let mut g = CompGraph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.input(Tensor::scalar(4.0));
        let z = g.mul(x, y).unwrap();
        g.forward();
        assert_eq!(g.scalar_value(z), 12.0);
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).data[0], 4.0);
        assert_eq!(g.grad(y).data[0], 3.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = CompGraph::new();
        let v = 7usize;
        let x = g.input(Tensor::vector(vec![0.3; v]));
        let s = g.softmax(x).unwrap();
        g.forward();
        for &p in &g.value(s).data {
            assert!((p - 1.0 / v as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = CompGraph::new();
            let x = g.input(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
            let w = g.input(Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.11).cos()).collect()));
            let h = g.matmul(x, w, false).unwrap();
            let a = g.gelu(h);
            let n = g.layer_norm(a).unwrap();
            let out = g.sum(n);
            g.forward();
            (g, out)
        };
        let (g1, o1) = build();
        let (g2, o2) = build();
        assert_eq!(g1.value(o1).data, g2.value(o2).data);
        for (n1, n2) in (0..g1.len()).map(|i| (g1.node(NodeId(i)), g2.node(NodeId(i)))) {
            assert_eq!(n1.value.data, n2.value.data);
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_closed_form() {
        // d/dz of CE(softmax(z), t) must equal softmax(z) - t.
        let z_vals = vec![0.5, -1.2, 2.0, 0.1];
        let mut g = CompGraph::new();
        let z = g.input(Tensor::vector(z_vals.clone()));
        let p = g.softmax(z).unwrap();
        let mut one_hot = vec![0.0; 4];
        one_hot[2] = 1.0;
        let ce = g.cross_entropy(p, Tensor::vector(one_hot.clone())).unwrap();
        g.forward();
        g.backward(ce).unwrap();
        let probs = g.value(p).data.clone();
        for i in 0..4 {
            let expect = probs[i] - one_hot[i];
            assert!((g.grad(z).data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn three_layer_graph_matches_finite_differences() {
        let eval = |inputs: &[Tensor]| {
            let mut g = CompGraph::new();
            let x = g.input(inputs[0].clone());
            let w1 = g.input(inputs[1].clone());
            let w2 = g.input(inputs[2].clone());
            let h1 = g.matmul(x, w1, false).unwrap();
            let a1 = g.gelu(h1);
            let n1 = g.layer_norm(a1).unwrap();
            let h2 = g.matmul(n1, w2, true).unwrap();
            let s = g.softmax(h2).unwrap();
            let t = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 1.0, 0.0, 0.0]);
            let ce = g.cross_entropy(s, t).unwrap();
            g.forward();
            (g, ce)
        };
        let inputs = vec![
            Tensor::matrix(2, 3, vec![0.3, -0.7, 1.1, 0.9, 0.2, -0.4]),
            Tensor::matrix(3, 4, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect()),
            Tensor::matrix(3, 4, (0..12).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.2).collect()),
        ];
        let max_err = gradcheck::max_rel_error(&inputs, |ins| {
            let (mut g, root) = eval(ins);
            g.backward(root).unwrap();
            (g, root)
        });
        assert!(max_err < 1e-4, "max relative error {max_err}");
    }

    #[test]
    fn gradient_is_linear_in_the_objective() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g), node-wise to 1e-12.
        let x_val = Tensor::vector(vec![0.4, -0.3, 0.9]);
        let (ca, cb) = (1.7, -0.6);

        let run = |mode: u8| -> Vec<f64> {
            let mut g = CompGraph::new();
            let x = g.input(x_val.clone());
            let f = {
                let s = g.softmax(x).unwrap();
                let l = g.log(s);
                g.sum(l)
            };
            let h = {
                let m = g.mul(x, x).unwrap();
                g.mean(m)
            };
            let root = match mode {
                0 => {
                    let sf = g.scale(f, ca);
                    let sh = g.scale(h, cb);
                    g.add(sf, sh).unwrap()
                }
                1 => f,
                _ => h,
            };
            g.forward();
            g.backward(root).unwrap();
            g.grad(x).data.clone()
        };

        let combined = run(0);
        let gf = run(1);
        let gh = run(2);
        for i in 0..3 {
            assert!((combined[i] - (ca * gf[i] + cb * gh[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn nodes_off_the_root_path_get_exactly_zero_gradient() {
        let mut g = CompGraph::new();
        let x = g.input(Tensor::scalar(2.0));
        let y = g.input(Tensor::scalar(5.0));
        let used = g.mul(x, x).unwrap();
        let unused = g.mul(y, y).unwrap();
        g.forward();
        g.backward(used).unwrap();
        assert_eq!(g.grad(y).data[0], 0.0);
        assert_eq!(g.grad(unused).data[0], 0.0);
        assert_eq!(g.grad(x).data[0], 4.0);
    }

    #[test]
    fn shape_mismatch_error_names_the_node() {
        let mut g = CompGraph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0]));
        let b = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { node, .. } => assert_eq!(node, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = CompGraph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0]));
        let b = g.negate(a);
        g.forward();
        assert!(matches!(g.backward(b), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut g = CompGraph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.forward();
        g.backward(y).unwrap();
        let first = g.grad(x).data[0];
        g.backward(y).unwrap();
        assert_eq!(first, g.grad(x).data[0]);
        assert_eq!(first, 6.0);
    }
}
