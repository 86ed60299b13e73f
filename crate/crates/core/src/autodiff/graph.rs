//! Define-by-run computation graph with reverse-mode adjoints.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass. Values
//! are computed eagerly when a node is created; [`Graph::forward`] re-binds
//! leaves and re-evaluates the whole list.
//!
//! Shape errors while building a graph are programming errors and panic with
//! the offending op. Binding and differentiation errors are returned.

use std::rc::Rc;

use super::{fastmath, kernels};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows that share one row of a grouped weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub group: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf {
        bound: bool,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Tanh(NodeId),
    /// `1 − x²`, the tanh derivative expressed through its output.
    TanhDeriv(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ColumnSum(NodeId),
    RowNorm(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// Per-row-group affine map whose weights are rows of `theta`.
    GroupedAffine {
        x: NodeId,
        theta: NodeId,
        segments: Rc<Vec<Segment>>,
        offset: usize,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    },
    Gather {
        src: NodeId,
        rows: usize,
        cols: usize,
        index: Rc<Vec<usize>>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            AddRow { x, row } => vec![*x, *row],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Scale(a, _)
            | Shift(a, _)
            | Tanh(a)
            | TanhDeriv(a)
            | Exp(a)
            | Square(a)
            | Sum(a)
            | Mean(a)
            | ColumnSum(a)
            | RowNorm(a) => vec![*a],
            ConcatCols(parts) => parts.clone(),
            SliceCols { x, .. } => vec![*x],
            GroupedAffine { x, theta, .. } => vec![*x, *theta],
            Gather { src, .. } => vec![*src],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf { .. } => "leaf",
            MatMul { .. } => "matmul",
            AddRow { .. } => "add_row",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Scale(..) => "scale",
            Shift(..) => "shift",
            Tanh(..) => "tanh",
            TanhDeriv(..) => "tanh_deriv",
            Exp(..) => "exp",
            Square(..) => "square",
            Sum(..) => "sum",
            Mean(..) => "mean",
            ColumnSum(..) => "column_sum",
            RowNorm(..) => "row_norm",
            ConcatCols(..) => "concat",
            SliceCols { .. } => "slice",
            GroupedAffine { .. } => "grouped_affine",
            Gather { .. } => "gather",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints from one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `id`; exact zeros when the node is not on any path to the output.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.adjoints[id.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.adjoints[id.0].take() {
            Some(t) => t,
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut adj[id.0] {
        Some(t) => t.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::row(&out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, differentiable: bool, bound: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf { bound },
            value,
            requires_grad: differentiable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (network weight or input of interest).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false, true)
    }

    /// Differentiable leaf that must be bound before [`Graph::forward`].
    pub fn placeholder(&mut self, rows: usize, cols: usize) -> NodeId {
        self.leaf(Tensor::zeros(rows, cols), true, false)
    }

    fn push(&mut self, op: Op) -> NodeId {
        let value = self.compute(&op);
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa == sb,
            "{}",
            Error::Shape {
                op,
                lhs: sa,
                rhs: sb
            }
        );
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.1 == sb.0, "matmul shapes {sa:?} x {sb:?}");
        self.push(Op::MatMul {
            a,
            b,
            trans_b: false,
        })
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.1 == sb.1, "matmul_t shapes {sa:?} x {sb:?}ᵀ");
        self.push(Op::MatMul {
            a,
            b,
            trans_b: true,
        })
    }

    /// Adds a `1 × m` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (sx, sr) = (self.shape(x), self.shape(row));
        assert!(sr.0 == 1 && sr.1 == sx.1, "add_row shapes {sx:?} + {sr:?}");
        self.push(Op::AddRow { x, row })
    }

    /// `x · w + b` with `w: in × out`, `b: 1 × out`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape("add", a, b);
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape("sub", a, b);
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape("mul", a, b);
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape("div", a, b);
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Shift(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn tanh_deriv(&mut self, tanh_out: NodeId) -> NodeId {
        self.push(Op::TanhDeriv(tanh_out))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn column_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ColumnSum(a))
    }

    pub fn column_mean(&mut self, a: NodeId) -> NodeId {
        let n = self.shape(a).0 as f64;
        let s = self.column_sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of every row, as an `n × 1` column.
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowNorm(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        for p in parts {
            assert_eq!(self.shape(*p).0, rows, "concat row mismatch");
        }
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        assert!(start + len <= self.shape(x).1, "slice out of range");
        self.push(Op::SliceCols { x, start, len })
    }

    /// Rows of `x` in segment `s` are mapped through the `fan_in × fan_out`
    /// matrix stored row-major at `theta[s.group, offset..]`, followed (when
    /// `bias`) by the `fan_out` bias entries stored right after it.
    #[allow(clippy::too_many_arguments)]
    pub fn grouped_affine(
        &mut self,
        x: NodeId,
        theta: NodeId,
        segments: Rc<Vec<Segment>>,
        offset: usize,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> NodeId {
        let (sx, st) = (self.shape(x), self.shape(theta));
        assert_eq!(sx.1, fan_in, "grouped_affine fan_in");
        let need = offset + fan_in * fan_out + if bias { fan_out } else { 0 };
        assert!(need <= st.1, "grouped_affine theta too narrow");
        let mut next = 0;
        for s in segments.iter() {
            assert_eq!(s.start, next, "grouped_affine segments must tile rows");
            assert!(s.group < st.0, "grouped_affine group out of range");
            next += s.len;
        }
        assert_eq!(next, sx.0, "grouped_affine segments must cover all rows");
        self.push(Op::GroupedAffine {
            x,
            theta,
            segments,
            offset,
            fan_in,
            fan_out,
            bias,
        })
    }

    /// `out[k] = src[index[k]]` over flat row-major storage, shaped `rows × cols`.
    pub fn gather(
        &mut self,
        src: NodeId,
        rows: usize,
        cols: usize,
        index: Rc<Vec<usize>>,
    ) -> NodeId {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let n = self.value(src).len();
        assert!(index.iter().all(|&i| i < n), "gather index out of range");
        self.push(Op::Gather {
            src,
            rows,
            cols,
            index,
        })
    }

    fn compute(&self, op: &Op) -> Tensor {
        use Op::*;
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Leaf { .. } => unreachable!("leaves carry their own value"),
            MatMul { a, b, trans_b } => {
                let (a, b) = (v(a), v(b));
                let n = if *trans_b { b.rows() } else { b.cols() };
                let mut out = Tensor::zeros(a.rows(), n);
                gemm(
                    1.0,
                    a.data(),
                    a.rows(),
                    a.cols(),
                    false,
                    b.data(),
                    b.rows(),
                    b.cols(),
                    *trans_b,
                    0.0,
                    out.data_mut(),
                );
                out
            }
            AddRow { x, row } => {
                let (x, row) = (v(x), v(row));
                let mut out = x.clone();
                let cols = x.cols();
                for chunk in out.data_mut().chunks_mut(cols) {
                    for (o, r) in chunk.iter_mut().zip(row.data()) {
                        *o += r;
                    }
                }
                out
            }
            Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
            Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y),
            Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
            Div(a, b) => v(a).zip_map(v(b), |x, y| x / y),
            Scale(a, c) => v(a).map(|x| x * c),
            Shift(a, c) => v(a).map(|x| x + c),
            Tanh(a) => v(a).map(fastmath::tanh),
            TanhDeriv(a) => v(a).map(|x| 1.0 - x * x),
            Exp(a) => v(a).map(fastmath::exp),
            Square(a) => v(a).map(|x| x * x),
            Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Mean(a) => {
                let t = v(a);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            ColumnSum(a) => column_sums(v(a)),
            RowNorm(a) => {
                let t = v(a);
                let norms: Vec<f64> = (0..t.rows())
                    .map(|r| t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect();
                Tensor::column(&norms)
            }
            ConcatCols(parts) => {
                let rows = v(&parts[0]).rows();
                let cols: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(v(p).row_slice(r));
                    }
                }
                Tensor::from_vec(rows, cols, data).expect("concat size")
            }
            SliceCols { x, start, len } => {
                let t = v(x);
                let mut data = Vec::with_capacity(t.rows() * len);
                for r in 0..t.rows() {
                    data.extend_from_slice(&t.row_slice(r)[*start..start + len]);
                }
                Tensor::from_vec(t.rows(), *len, data).expect("slice size")
            }
            GroupedAffine {
                x,
                theta,
                segments,
                offset,
                fan_in,
                fan_out,
                bias,
            } => {
                let (x, theta) = (v(x), v(theta));
                let mut out = Tensor::zeros(x.rows(), *fan_out);
                let wlen = fan_in * fan_out;
                let narrow = (*fan_in).min(*fan_out) <= kernels::NARROW;
                for s in segments.iter() {
                    let trow = theta.row_slice(s.group);
                    let w = &trow[*offset..offset + wlen];
                    let xs = &x.data()[s.start * fan_in..(s.start + s.len) * fan_in];
                    let ys = &mut out.data_mut()[s.start * fan_out..(s.start + s.len) * fan_out];
                    if narrow {
                        kernels::forward(xs, s.len, *fan_in, w, *fan_out, ys);
                    } else {
                        gemm(
                            1.0, xs, s.len, *fan_in, false, w, *fan_in, *fan_out, false, 0.0, ys,
                        );
                    }
                    if *bias {
                        let b = &trow[offset + wlen..offset + wlen + fan_out];
                        for chunk in ys.chunks_mut(*fan_out) {
                            for (o, bv) in chunk.iter_mut().zip(b) {
                                *o += bv;
                            }
                        }
                    }
                }
                out
            }
            Gather {
                src,
                rows,
                cols,
                index,
            } => {
                let s = v(src).data();
                let data = index.iter().map(|&i| s[i]).collect();
                Tensor::from_vec(*rows, *cols, data).expect("gather size")
            }
        }
    }

    /// Re-binds the given leaves and re-evaluates every node in order.
    ///
    /// Fails if a placeholder was never bound or a binding has the wrong shape.
    pub fn forward(&mut self, bindings: &[(NodeId, Tensor)]) -> Result<()> {
        for (id, value) in bindings {
            let node = self
                .nodes
                .get_mut(id.0)
                .ok_or_else(|| Error::Graph(format!("binding for unknown node {}", id.0)))?;
            let Op::Leaf { bound, .. } = &mut node.op else {
                return Err(Error::Graph(format!(
                    "node {} is a `{}` op, not a leaf",
                    id.0,
                    node.op.name()
                )));
            };
            if node.value.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "bind",
                    lhs: node.value.shape(),
                    rhs: value.shape(),
                });
            }
            node.value = value.clone();
            *bound = true;
        }
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Leaf { bound: false, .. } => {
                    return Err(Error::Graph(format!("input node {i} is unbound")));
                }
                Op::Leaf { .. } => {}
                op => {
                    let op = op.clone();
                    self.nodes[i].value = self.compute(&op);
                }
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar node.
    pub fn grad(&self, output: NodeId) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != (1, 1) {
            return Err(Error::Graph(format!(
                "gradient requires a scalar output, got {}x{}",
                out_shape.0, out_shape.1
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        adj[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    fn backprop(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        use Op::*;
        let node = &self.nodes[i];
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let rg = |id: &NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Leaf { .. } => {}
            MatMul { a, b, trans_b } => {
                let (av, bv) = (v(a), v(b));
                if rg(a) {
                    // dA = G · Bᵀ  (or G · B when B entered transposed)
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(
                        1.0,
                        g.data(),
                        g.rows(),
                        g.cols(),
                        false,
                        bv.data(),
                        bv.rows(),
                        bv.cols(),
                        !trans_b,
                        0.0,
                        da.data_mut(),
                    );
                    accumulate(adj, *a, da);
                }
                if rg(b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    if *trans_b {
                        // dB = Gᵀ · A
                        gemm(
                            1.0,
                            g.data(),
                            g.rows(),
                            g.cols(),
                            true,
                            av.data(),
                            av.rows(),
                            av.cols(),
                            false,
                            0.0,
                            db.data_mut(),
                        );
                    } else {
                        // dB = Aᵀ · G
                        gemm(
                            1.0,
                            av.data(),
                            av.rows(),
                            av.cols(),
                            true,
                            g.data(),
                            g.rows(),
                            g.cols(),
                            false,
                            0.0,
                            db.data_mut(),
                        );
                    }
                    accumulate(adj, *b, db);
                }
            }
            AddRow { x, row } => {
                if rg(x) {
                    accumulate(adj, *x, g.clone());
                }
                if rg(row) {
                    accumulate(adj, *row, column_sums(g));
                }
            }
            Add(a, b) => {
                if rg(a) {
                    accumulate(adj, *a, g.clone());
                }
                if rg(b) {
                    accumulate(adj, *b, g.clone());
                }
            }
            Sub(a, b) => {
                if rg(a) {
                    accumulate(adj, *a, g.clone());
                }
                if rg(b) {
                    accumulate(adj, *b, g.map(|x| -x));
                }
            }
            Mul(a, b) => {
                if rg(a) {
                    accumulate(adj, *a, g.zip_map(v(b), |x, y| x * y));
                }
                if rg(b) {
                    accumulate(adj, *b, g.zip_map(v(a), |x, y| x * y));
                }
            }
            Div(a, b) => {
                let bv = v(b);
                if rg(a) {
                    accumulate(adj, *a, g.zip_map(bv, |x, y| x / y));
                }
                if rg(b) {
                    // d(a/b)/db = −(a/b)/b
                    let q = node.value.zip_map(bv, |q, y| q / y);
                    accumulate(adj, *b, g.zip_map(&q, |x, y| -x * y));
                }
            }
            Scale(a, c) => {
                if rg(a) {
                    accumulate(adj, *a, g.map(|x| x * c));
                }
            }
            Shift(a, _) => {
                if rg(a) {
                    accumulate(adj, *a, g.clone());
                }
            }
            Tanh(a) => {
                if rg(a) {
                    accumulate(adj, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)));
                }
            }
            TanhDeriv(a) => {
                if rg(a) {
                    accumulate(adj, *a, g.zip_map(v(a), |x, y| -2.0 * x * y));
                }
            }
            Exp(a) => {
                if rg(a) {
                    accumulate(adj, *a, g.zip_map(&node.value, |x, y| x * y));
                }
            }
            Square(a) => {
                if rg(a) {
                    accumulate(adj, *a, g.zip_map(v(a), |x, y| 2.0 * x * y));
                }
            }
            Sum(a) => {
                if rg(a) {
                    let (r, c) = v(a).shape();
                    accumulate(adj, *a, Tensor::filled(r, c, g.item()));
                }
            }
            Mean(a) => {
                if rg(a) {
                    let (r, c) = v(a).shape();
                    accumulate(adj, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
                }
            }
            ColumnSum(a) => {
                if rg(a) {
                    let (r, c) = v(a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for chunk in d.data_mut().chunks_mut(c) {
                        chunk.copy_from_slice(g.data());
                    }
                    accumulate(adj, *a, d);
                }
            }
            RowNorm(a) => {
                if rg(a) {
                    let av = v(a);
                    let c = av.cols();
                    let mut d = Tensor::zeros(av.rows(), c);
                    for r in 0..av.rows() {
                        let norm = node.value.get(r, 0);
                        if norm > 0.0 {
                            let s = g.get(r, 0) / norm;
                            for (o, x) in d.data_mut()[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(av.row_slice(r))
                            {
                                *o = s * x;
                            }
                        }
                    }
                    accumulate(adj, *a, d);
                }
            }
            ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let pc = v(p).cols();
                    if rg(p) {
                        let mut d = Vec::with_capacity(g.rows() * pc);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row_slice(r)[col..col + pc]);
                        }
                        accumulate(adj, *p, Tensor::from_vec(g.rows(), pc, d).expect("size"));
                    }
                    col += pc;
                }
            }
            SliceCols { x, start, len } => {
                if rg(x) {
                    let (r, c) = v(x).shape();
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        d.data_mut()[row * c + start..row * c + start + len]
                            .copy_from_slice(g.row_slice(row));
                    }
                    accumulate(adj, *x, d);
                }
            }
            GroupedAffine {
                x,
                theta,
                segments,
                offset,
                fan_in,
                fan_out,
                bias,
            } => {
                let (xv, tv) = (v(x), v(theta));
                let wlen = fan_in * fan_out;
                let narrow = (*fan_in).min(*fan_out) <= kernels::NARROW;
                let mut dx = rg(x).then(|| Tensor::zeros(xv.rows(), *fan_in));
                for s in segments.iter() {
                    let gs = &g.data()[s.start * fan_out..(s.start + s.len) * fan_out];
                    if let Some(dx) = dx.as_mut() {
                        let w = &tv.row_slice(s.group)[*offset..offset + wlen];
                        let out = &mut dx.data_mut()[s.start * fan_in..(s.start + s.len) * fan_in];
                        if narrow {
                            kernels::input_grad(gs, s.len, *fan_out, w, *fan_in, out);
                        } else {
                            gemm(
                                1.0, gs, s.len, *fan_out, false, w, *fan_in, *fan_out, true, 0.0,
                                out,
                            );
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(adj, *x, dx);
                }
                if rg(theta) {
                    // Accumulate in place: each layer touches only its own
                    // column block of the (large) weight matrix.
                    let dt = adj[theta.0].get_or_insert_with(|| Tensor::zeros(tv.rows(), tv.cols()));
                    let cols = dt.cols();
                    for s in segments.iter() {
                        let gs = &g.data()[s.start * fan_out..(s.start + s.len) * fan_out];
                        let row = &mut dt.data_mut()[s.group * cols..(s.group + 1) * cols];
                        let xs = &xv.data()[s.start * fan_in..(s.start + s.len) * fan_in];
                        let dw = &mut row[*offset..offset + wlen];
                        if narrow {
                            kernels::weight_grad(xs, s.len, *fan_in, gs, *fan_out, dw);
                        } else {
                            gemm(
                                1.0, xs, s.len, *fan_in, true, gs, s.len, *fan_out, false, 1.0, dw,
                            );
                        }
                        if *bias {
                            let db = &mut row[offset + wlen..offset + wlen + fan_out];
                            for chunk in gs.chunks(*fan_out) {
                                for (o, gv) in db.iter_mut().zip(chunk) {
                                    *o += gv;
                                }
                            }
                        }
                    }
                }
            }
            Gather { src, index, .. } => {
                if rg(src) {
                    let (r, c) = v(src).shape();
                    let mut d = Tensor::zeros(r, c);
                    let dd = d.data_mut();
                    for (k, &i) in index.iter().enumerate() {
                        dd[i] += g.data()[k];
                    }
                    accumulate(adj, *src, d);
                }
            }
        }
    }
}
