use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::meter::MemMeter;
use super::tensor::{numel, NodeRef, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LAYERNORM_EPS: f64 = 1e-5;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Ops touching a trainable leaf append a node and save what their
    /// vector-Jacobian product needs.
    Recording,
    /// Plain evaluation: nothing is appended, nothing is saved.
    Inference,
}

type Buf<S> = Arc<Vec<S>>;

struct Saved<S> {
    buf: Buf<S>,
    counted: bool,
}

fn keep<S: Scalar>(t: &Tensor<S>) -> Option<Saved<S>> {
    Some(Saved {
        buf: Arc::clone(&t.data),
        counted: !t.persistent,
    })
}

fn keep_buf<S>(buf: &Buf<S>) -> Option<Saved<S>> {
    Some(Saved {
        buf: Arc::clone(buf),
        counted: true,
    })
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Gelu,
    Softplus,
    Scale(f64),
}

/// Extent of a tensor viewed as `[outer, dim, inner]` around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisView {
    outer: usize,
    dim: usize,
    inner: usize,
}

impl AxisView {
    fn new(shape: &[usize], axis: usize) -> Self {
        AxisView {
            outer: shape[..axis].iter().product(),
            dim: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        rows: usize,
        cols: usize,
    },
    Binary {
        kind: BinKind,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
        out_shape: Vec<usize>,
    },
    BroadcastTo {
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
    },
    Unary(UnaryKind),
    Reshape,
    Concat {
        axis_sizes: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        start: usize,
        view: AxisView,
        len: usize,
    },
    GatherRows {
        indices: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    Softmax {
        cols: usize,
    },
    LogSoftmax {
        cols: usize,
    },
    LayerNorm {
        cols: usize,
    },
    SumAll {
        len: usize,
    },
    MeanAll {
        len: usize,
    },
    SumAxis {
        view: AxisView,
        mean: bool,
    },
    MaxAxis {
        view: AxisView,
        argmax: Vec<usize>,
    },
}

struct Node<S> {
    op: Op,
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
    saved: Vec<Option<Saved<S>>>,
}

/// Gradients of every trainable leaf of one graph.
///
/// Leaves unreachable from the differentiated output get zero tensors.
pub struct Gradients<S: Scalar = f64> {
    graph: u64,
    by_node: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a leaf created by [`Graph::leaf`] on the same graph.
    pub fn get(&self, leaf: &Tensor<S>) -> Option<&Tensor<S>> {
        let node = leaf.node?;
        if node.graph != self.graph {
            return None;
        }
        self.by_node.get(node.index)?.as_ref()
    }

    pub fn wrt(&self, leaf: &Tensor<S>) -> Result<Tensor<S>> {
        self.get(leaf).cloned().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "tensor of shape {:?} is not a leaf of this graph",
                leaf.shape()
            ))
        })
    }

    pub fn num_leaves(&self) -> usize {
        self.by_node.iter().filter(|g| g.is_some()).count()
    }
}

/// Reverse-mode tape.
///
/// Nodes are appended in creation order, which is a topological order, so the
/// backward sweep walks indices downwards and visits each node once. A node is
/// recorded only when the graph is in [`Mode::Recording`] and at least one
/// input depends on a trainable leaf.
pub struct Graph<S: Scalar = f64> {
    id: u64,
    mode: Mode,
    nodes: RefCell<Vec<Node<S>>>,
    // buffer address -> (elements, references held by nodes)
    saved_refs: RefCell<HashMap<usize, (usize, usize)>>,
    live_saved: Cell<usize>,
    meter: Option<Arc<MemMeter>>,
    consumed: Cell<bool>,
}

impl<S: Scalar> Graph<S> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            mode,
            nodes: RefCell::new(Vec::new()),
            saved_refs: RefCell::new(HashMap::new()),
            live_saved: Cell::new(0),
            meter: None,
            consumed: Cell::new(false),
        }
    }

    pub fn recording() -> Self {
        Self::new(Mode::Recording)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference)
    }

    pub fn with_meter(mut self, meter: Arc<MemMeter>) -> Self {
        self.meter = Some(meter);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Elements currently saved for backward by this graph.
    pub fn saved_elems(&self) -> usize {
        self.live_saved.get()
    }

    /// Registers `t` as a trainable leaf. In inference mode this is a no-op
    /// that returns a detached copy.
    pub fn leaf(&self, t: &Tensor<S>) -> Tensor<S> {
        let mut out = t.detach();
        if self.mode == Mode::Recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                op: Op::Leaf,
                inputs: Vec::new(),
                shape: t.shape.clone(),
                saved: Vec::new(),
            });
            out.node = Some(NodeRef {
                graph: self.id,
                index: nodes.len() - 1,
            });
        }
        out
    }

    /// Frozen value: participates in ops but never receives a gradient.
    pub fn constant(&self, t: &Tensor<S>) -> Tensor<S> {
        t.detach()
    }

    fn node_of(&self, t: &Tensor<S>) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(n) if n.graph == self.id => Ok(Some(n.index)),
            Some(_) => Err(Error::ForeignTensor),
        }
    }

    fn charge(&self, s: &Saved<S>) {
        if !s.counted {
            return;
        }
        let key = Arc::as_ptr(&s.buf) as usize;
        let mut refs = self.saved_refs.borrow_mut();
        let entry = refs.entry(key).or_insert((s.buf.len(), 0));
        if entry.1 == 0 {
            self.live_saved.set(self.live_saved.get() + entry.0);
            if let Some(m) = &self.meter {
                m.alloc(entry.0);
            }
        }
        entry.1 += 1;
    }

    fn release(&self, s: Saved<S>) {
        if !s.counted {
            return;
        }
        let key = Arc::as_ptr(&s.buf) as usize;
        let mut refs = self.saved_refs.borrow_mut();
        if let Some(entry) = refs.get_mut(&key) {
            entry.1 -= 1;
            if entry.1 == 0 {
                let elems = entry.0;
                refs.remove(&key);
                self.live_saved.set(self.live_saved.get() - elems);
                if let Some(m) = &self.meter {
                    m.free(elems);
                }
            }
        }
    }

    fn push<F>(&self, op: Op, inputs: &[&Tensor<S>], shape: Vec<usize>, data: Vec<S>, save: F) -> Result<Tensor<S>>
    where
        F: FnOnce(&[bool], &Buf<S>) -> Vec<Option<Saved<S>>>,
    {
        debug_assert!(inputs.iter().all(|t| t.all_finite()), "non-finite input to {op:?}");
        let ids = inputs.iter().map(|t| self.node_of(t)).collect::<Result<Vec<_>>>()?;
        if self.mode == Mode::Inference || ids.iter().all(Option::is_none) {
            return Ok(Tensor::raw(shape, data));
        }
        let needs: Vec<bool> = ids.iter().map(Option::is_some).collect();
        let out = Arc::new(data);
        let saved = save(&needs, &out);
        for s in saved.iter().flatten() {
            self.charge(s);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: ids,
            shape: shape.clone(),
            saved,
        });
        Ok(Tensor {
            shape,
            data: out,
            node: Some(NodeRef {
                graph: self.id,
                index: nodes.len() - 1,
            }),
            persistent: false,
        })
    }

    // ---------------------------------------------------------------- linear

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
        };
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        self.push(Op::MatMul { m, k, n }, &[a, b], vec![m, n], out, |needs, _| {
            vec![
                if needs[1] { keep(a) } else { None },
                if needs[0] { keep(b) } else { None },
            ]
        })
    }

    pub fn transpose(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let [rows, cols] = *a.shape() else {
            return Err(Error::shape("transpose", a.shape(), &[0, 0]));
        };
        let out = transpose_raw(a.data(), rows, cols);
        self.push(Op::Transpose { rows, cols }, &[a], vec![cols, rows], out, |_, _| vec![])
    }

    // ----------------------------------------------------------- elementwise

    fn binary(&self, kind: BinKind, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let out_shape =
            broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
        let n = numel(&out_shape);
        let ma = broadcast_offsets(a.shape(), &out_shape);
        let mb = broadcast_offsets(b.shape(), &out_shape);
        let (ad, bd) = (a.data(), b.data());
        let f = |x: S, y: S| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out: Vec<S> = match (&ma, &mb) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(ad[off(&ma, i)], bd[off(&mb, i)])).collect(),
        };
        let op = Op::Binary {
            kind,
            a_shape: a.shape.clone(),
            b_shape: b.shape.clone(),
            out_shape: out_shape.clone(),
        };
        self.push(op, &[a, b], out_shape, out, |needs, _| match kind {
            BinKind::Mul => vec![
                if needs[1] { keep(a) } else { None },
                if needs[0] { keep(b) } else { None },
            ],
            _ => vec![],
        })
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn broadcast_to(&self, a: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
        match broadcast_shape(a.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", a.shape(), shape)),
        }
        let map = broadcast_offsets(a.shape(), shape);
        let out = (0..numel(shape)).map(|i| a.data()[off(&map, i)]).collect();
        let op = Op::BroadcastTo {
            in_shape: a.shape.clone(),
            out_shape: shape.to_vec(),
        };
        self.push(op, &[a], shape.to_vec(), out, |_, _| vec![])
    }

    fn unary(&self, kind: UnaryKind, a: &Tensor<S>) -> Result<Tensor<S>> {
        let out: Vec<S> = a.data().iter().map(|&x| unary_fwd(kind, x)).collect();
        self.push(Op::Unary(kind), &[a], a.shape.clone(), out, |_, out| match kind {
            UnaryKind::Exp | UnaryKind::Tanh | UnaryKind::Sigmoid => vec![keep_buf(out)],
            UnaryKind::Log | UnaryKind::Gelu | UnaryKind::Softplus => vec![keep(a)],
            UnaryKind::Scale(_) => vec![],
        })
    }

    pub fn exp(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn tanh(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(UnaryKind::Gelu, a)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn scale(&self, a: &Tensor<S>, c: f64) -> Result<Tensor<S>> {
        self.unary(UnaryKind::Scale(c), a)
    }

    // ------------------------------------------------------------ structural

    pub fn reshape(&self, a: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
        if numel(shape) != a.numel() {
            return Err(Error::shape("reshape", a.shape(), shape));
        }
        self.push(Op::Reshape, &[a], shape.to_vec(), a.to_vec(), |_, _| vec![])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        for p in parts {
            let ok = p.shape().len() == rank && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = axis_sizes.iter().sum();
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&axis_sizes) {
                out.extend_from_slice(&p.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        self.push(
            Op::Concat {
                axis_sizes,
                outer,
                inner,
            },
            parts,
            shape,
            out,
            |_, _| vec![],
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, a: &Tensor<S>, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        if axis >= a.shape().len() || start + len > a.shape()[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                a.shape()
            )));
        }
        let view = AxisView::new(a.shape(), axis);
        let mut out = Vec::with_capacity(view.outer * len * view.inner);
        for o in 0..view.outer {
            let base = o * view.dim * view.inner + start * view.inner;
            out.extend_from_slice(&a.data()[base..base + len * view.inner]);
        }
        let mut shape = a.shape.clone();
        shape[axis] = len;
        self.push(Op::Slice { start, view, len }, &[a], shape, out, |_, _| vec![])
    }

    /// Rows of a 2-D tensor picked by index (repeats allowed).
    pub fn gather_rows(&self, a: &Tensor<S>, indices: &[usize]) -> Result<Tensor<S>> {
        let [rows, cols] = *a.shape() else {
            return Err(Error::shape("gather_rows", a.shape(), &[0, 0]));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&a.data()[i * cols..(i + 1) * cols]);
        }
        let op = Op::GatherRows {
            indices: indices.to_vec(),
            rows,
            cols,
        };
        self.push(op, &[a], vec![indices.len(), cols], out, |_, _| vec![])
    }

    // -------------------------------------------------------- normalizations

    /// Softmax over the last axis.
    pub fn softmax(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let cols = last_dim(a)?;
        let mut out = a.to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(Op::Softmax { cols }, &[a], a.shape.clone(), out, |_, out| {
            vec![keep_buf(out)]
        })
    }

    /// Log-softmax over the last axis (log-sum-exp with max shift).
    pub fn log_softmax(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let cols = last_dim(a)?;
        let mut out = a.to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        self.push(Op::LogSoftmax { cols }, &[a], a.shape.clone(), out, |_, out| {
            vec![keep_buf(out)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&self, x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<Tensor<S>> {
        let cols = last_dim(x)?;
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(Error::shape("layernorm", x.shape(), gamma.shape()));
        }
        let rows = x.numel() / cols;
        let eps = S::lit(LAYERNORM_EPS);
        let inv_n = S::lit(1.0 / cols as f64);
        let mut xhat = vec![S::zero(); x.numel()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); x.numel()];
        let (g, b) = (gamma.data(), beta.data());
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Op::LayerNorm { cols },
            &[x, gamma, beta],
            x.shape.clone(),
            out,
            |needs, _| {
                let xhat = Arc::new(xhat);
                vec![
                    if needs[0] || needs[1] { keep_buf(&xhat) } else { None },
                    if needs[0] { keep_buf(&Arc::new(rstd)) } else { None },
                    if needs[0] { keep(gamma) } else { None },
                ]
            },
        )
    }

    // ------------------------------------------------------------ reductions

    /// Sum of all elements; result has shape `[]`.
    pub fn sum_all(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let s = a.data().iter().copied().sum::<S>();
        self.push(Op::SumAll { len: a.numel() }, &[a], vec![], vec![s], |_, _| vec![])
    }

    pub fn mean_all(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        if a.numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let s = a.data().iter().copied().sum::<S>() / S::lit(a.numel() as f64);
        self.push(Op::MeanAll { len: a.numel() }, &[a], vec![], vec![s], |_, _| vec![])
    }

    fn reduce_axis(&self, a: &Tensor<S>, axis: usize, mean: bool) -> Result<Tensor<S>> {
        check_axis(a, axis)?;
        let view = AxisView::new(a.shape(), axis);
        if mean && view.dim == 0 {
            return Err(Error::InvalidArgument("mean over empty axis".into()));
        }
        let mut out = vec![S::zero(); view.outer * view.inner];
        for o in 0..view.outer {
            for d in 0..view.dim {
                let src = &a.data()[(o * view.dim + d) * view.inner..][..view.inner];
                let dst = &mut out[o * view.inner..(o + 1) * view.inner];
                for (y, &x) in dst.iter_mut().zip(src) {
                    *y = *y + x;
                }
            }
        }
        if mean {
            let inv = S::lit(1.0 / view.dim as f64);
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut shape = a.shape.clone();
        shape[axis] = 1;
        self.push(Op::SumAxis { view, mean }, &[a], shape, out, |_, _| vec![])
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, a: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, a: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(a, axis, true)
    }

    /// Max along `axis` (kept with extent 1) and the arg-max of every output
    /// position. Ties resolve to the lowest index; the gradient flows only to
    /// the selected entry.
    pub fn max_axis(&self, a: &Tensor<S>, axis: usize) -> Result<(Tensor<S>, Vec<usize>)> {
        check_axis(a, axis)?;
        let view = AxisView::new(a.shape(), axis);
        if view.dim == 0 {
            return Err(Error::InvalidArgument("max over empty axis".into()));
        }
        let mut out = vec![S::zero(); view.outer * view.inner];
        let mut argmax = vec![0usize; view.outer * view.inner];
        for o in 0..view.outer {
            for i in 0..view.inner {
                let at = |d: usize| a.data()[(o * view.dim + d) * view.inner + i];
                let mut best = 0;
                for d in 1..view.dim {
                    if at(d) > at(best) {
                        best = d;
                    }
                }
                out[o * view.inner + i] = at(best);
                argmax[o * view.inner + i] = best;
            }
        }
        let mut shape = a.shape.clone();
        shape[axis] = 1;
        let t = self.push(
            Op::MaxAxis {
                view,
                argmax: argmax.clone(),
            },
            &[a],
            shape,
            out,
            |_, _| vec![],
        )?;
        Ok((t, argmax))
    }

    // -------------------------------------------------------------- backward

    /// Gradients of a scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<Gradients<S>> {
        if loss.numel() != 1 {
            return Err(Error::NotScalar(loss.shape.clone()));
        }
        self.backward_with_seed(loss, &Tensor::ones(loss.shape()))
    }

    /// Vector-Jacobian product seeded with an external cotangent: returns the
    /// gradients of `sum(output * seed)` with `seed` held constant.
    ///
    /// Saved activations are released node by node as the sweep proceeds;
    /// the graph cannot be differentiated twice.
    pub fn backward_with_seed(&self, output: &Tensor<S>, seed: &Tensor<S>) -> Result<Gradients<S>> {
        if self.mode == Mode::Inference {
            return Err(Error::InferenceMode);
        }
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        if seed.shape() != output.shape() {
            return Err(Error::shape("backward_with_seed", output.shape(), seed.shape()));
        }
        let root = self.node_of(output)?;
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        if let Some(root) = root {
            grads[root] = Some(seed.to_vec());
            for i in (0..=root).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &mut nodes[i];
                if matches!(node.op, Op::Leaf) {
                    leaf_grads[i] = Some(g);
                    continue;
                }
                let saved = std::mem::take(&mut node.saved);
                let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                let input_grads = vjp(&node.op, &needs, &saved, &g);
                for s in saved.into_iter().flatten() {
                    self.release(s);
                }
                for (slot, ig) in node.inputs.iter().zip(input_grads) {
                    if let (Some(id), Some(ig)) = (slot, ig) {
                        match &mut grads[*id] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                            empty => *empty = Some(ig),
                        }
                    }
                }
            }
        }
        for node in nodes.iter_mut() {
            for s in std::mem::take(&mut node.saved).into_iter().flatten() {
                self.release(s);
            }
        }
        self.consumed.set(true);
        let by_node = nodes
            .iter()
            .zip(leaf_grads)
            .map(|(node, g)| match node.op {
                Op::Leaf => Some(match g {
                    Some(g) => Tensor::raw(node.shape.clone(), g),
                    None => Tensor::zeros(&node.shape),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            by_node,
        })
    }
}

impl<S: Scalar> Drop for Graph<S> {
    fn drop(&mut self) {
        let nodes = std::mem::take(self.nodes.get_mut());
        for node in nodes {
            for s in node.saved.into_iter().flatten() {
                self.release(s);
            }
        }
    }
}

// ------------------------------------------------------------------ kernels

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn unary_fwd<S: Scalar>(kind: UnaryKind, x: S) -> S {
    match kind {
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Gelu => {
            let inner = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
            S::lit(0.5) * x * (S::one() + inner.tanh())
        }
        UnaryKind::Softplus => x.max(S::zero()) + (-x.abs()).exp().ln_1p(),
        UnaryKind::Scale(c) => x * S::lit(c),
    }
}

fn last_dim<S: Scalar>(a: &Tensor<S>) -> Result<usize> {
    match a.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(Error::InvalidArgument(format!(
            "expected a non-empty last axis, got shape {:?}",
            a.shape()
        ))),
    }
}

fn check_axis<S: Scalar>(a: &Tensor<S>, axis: usize) -> Result<()> {
    if axis >= a.shape().len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {:?}",
            a.shape()
        )));
    }
    Ok(())
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast to it. `None` when no broadcasting is involved.
fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape == out_shape {
        return None;
    }
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn off(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

fn reduce_broadcast<S: Scalar>(g: &[S], in_shape: &[usize], out_shape: &[usize]) -> Vec<S> {
    match broadcast_offsets(in_shape, out_shape) {
        None => g.to_vec(),
        Some(map) => {
            let mut acc = vec![S::zero(); numel(in_shape)];
            for (i, &gv) in g.iter().enumerate() {
                acc[map[i]] = acc[map[i]] + gv;
            }
            acc
        }
    }
}

fn saved_buf<S>(saved: &[Option<Saved<S>>], i: usize) -> &[S] {
    saved[i]
        .as_ref()
        .map(|s| s.buf.as_slice())
        .expect("vjp input was not saved")
}

fn vjp<S: Scalar>(op: &Op, needs: &[bool], saved: &[Option<Saved<S>>], g: &[S]) -> Vec<Option<Vec<S>>> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let da = needs[0].then(|| {
                let b = saved_buf(saved, 1);
                let mut da = vec![S::zero(); m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        da[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                da
            });
            let db = needs[1].then(|| {
                let a = saved_buf(saved, 0);
                let mut db = vec![S::zero(); k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        let dst = &mut db[p * n..(p + 1) * n];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d = *d + av * gv;
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        Op::Transpose { rows, cols } => vec![Some(transpose_raw(g, *cols, *rows))],
        Op::Binary {
            kind,
            a_shape,
            b_shape,
            out_shape,
        } => match kind {
            BinKind::Add => vec![
                needs[0].then(|| reduce_broadcast(g, a_shape, out_shape)),
                needs[1].then(|| reduce_broadcast(g, b_shape, out_shape)),
            ],
            BinKind::Sub => vec![
                needs[0].then(|| reduce_broadcast(g, a_shape, out_shape)),
                needs[1].then(|| {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    reduce_broadcast(&neg, b_shape, out_shape)
                }),
            ],
            BinKind::Mul => {
                let ma = broadcast_offsets(a_shape, out_shape);
                let mb = broadcast_offsets(b_shape, out_shape);
                let da = needs[0].then(|| {
                    let b = saved_buf(saved, 1);
                    let prod: Vec<S> = g.iter().enumerate().map(|(i, &gv)| gv * b[off(&mb, i)]).collect();
                    reduce_broadcast(&prod, a_shape, out_shape)
                });
                let db = needs[1].then(|| {
                    let a = saved_buf(saved, 0);
                    let prod: Vec<S> = g.iter().enumerate().map(|(i, &gv)| gv * a[off(&ma, i)]).collect();
                    reduce_broadcast(&prod, b_shape, out_shape)
                });
                vec![da, db]
            }
        },
        Op::BroadcastTo { in_shape, out_shape } => {
            vec![Some(reduce_broadcast(g, in_shape, out_shape))]
        }
        Op::Unary(kind) => {
            let gi: Vec<S> = match kind {
                UnaryKind::Scale(c) => g.iter().map(|&v| v * S::lit(*c)).collect(),
                UnaryKind::Exp => {
                    let y = saved_buf(saved, 0);
                    g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect()
                }
                UnaryKind::Log => {
                    let x = saved_buf(saved, 0);
                    g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect()
                }
                UnaryKind::Tanh => {
                    let y = saved_buf(saved, 0);
                    g.iter().zip(y).map(|(&gv, &yv)| gv * (S::one() - yv * yv)).collect()
                }
                UnaryKind::Sigmoid => {
                    let y = saved_buf(saved, 0);
                    g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (S::one() - yv)).collect()
                }
                UnaryKind::Softplus => {
                    let x = saved_buf(saved, 0);
                    g.iter().zip(x).map(|(&gv, &xv)| gv * sigmoid(xv)).collect()
                }
                UnaryKind::Gelu => {
                    let x = saved_buf(saved, 0);
                    let (c, a) = (S::lit(GELU_C), S::lit(GELU_A));
                    let half = S::lit(0.5);
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| {
                            let t = (c * (xv + a * xv * xv * xv)).tanh();
                            let dinner = c * (S::one() + S::lit(3.0) * a * xv * xv);
                            gv * (half * (S::one() + t) + half * xv * (S::one() - t * t) * dinner)
                        })
                        .collect()
                }
            };
            vec![Some(gi)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Concat {
            axis_sizes,
            outer,
            inner,
        } => {
            let total: usize = axis_sizes.iter().sum();
            let mut start = 0;
            axis_sizes
                .iter()
                .zip(needs)
                .map(|(&sz, &need)| {
                    let piece = need.then(|| {
                        let mut gp = Vec::with_capacity(outer * sz * inner);
                        for o in 0..*outer {
                            let base = (o * total + start) * inner;
                            gp.extend_from_slice(&g[base..base + sz * inner]);
                        }
                        gp
                    });
                    start += sz;
                    piece
                })
                .collect()
        }
        Op::Slice { start, view, len } => {
            let mut gi = vec![S::zero(); view.outer * view.dim * view.inner];
            for o in 0..view.outer {
                let base = o * view.dim * view.inner + start * view.inner;
                let src = &g[o * len * view.inner..(o + 1) * len * view.inner];
                gi[base..base + len * view.inner].copy_from_slice(src);
            }
            vec![Some(gi)]
        }
        Op::GatherRows { indices, rows, cols } => {
            let mut gi = vec![S::zero(); rows * cols];
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..*cols {
                    gi[i * cols + c] = gi[i * cols + c] + g[r * cols + c];
                }
            }
            vec![Some(gi)]
        }
        Op::Softmax { cols } => {
            let y = saved_buf(saved, 0);
            let mut gi = vec![S::zero(); g.len()];
            for ((gr, yr), out) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gi.chunks_mut(*cols)) {
                let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for j in 0..*cols {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gi)]
        }
        Op::LogSoftmax { cols } => {
            let y = saved_buf(saved, 0);
            let mut gi = vec![S::zero(); g.len()];
            for ((gr, yr), out) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gi.chunks_mut(*cols)) {
                let total: S = gr.iter().copied().sum();
                for j in 0..*cols {
                    out[j] = gr[j] - yr[j].exp() * total;
                }
            }
            vec![Some(gi)]
        }
        Op::LayerNorm { cols } => {
            let cols = *cols;
            let rows = g.len() / cols;
            let inv_n = S::lit(1.0 / cols as f64);
            let dx = needs[0].then(|| {
                let xhat = saved_buf(saved, 0);
                let rstd = saved_buf(saved, 1);
                let gamma = saved_buf(saved, 2);
                let mut dx = vec![S::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for j in 0..cols {
                        let d = gr[j] * gamma[j];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xr[j];
                    }
                    mean_d = mean_d * inv_n;
                    mean_dx = mean_dx * inv_n;
                    for j in 0..cols {
                        let d = gr[j] * gamma[j];
                        dx[r * cols + j] = rstd[r] * (d - mean_d - xr[j] * mean_dx);
                    }
                }
                dx
            });
            let dgamma = needs[1].then(|| {
                let xhat = saved_buf(saved, 0);
                let mut dg = vec![S::zero(); cols];
                for r in 0..rows {
                    for j in 0..cols {
                        dg[j] = dg[j] + g[r * cols + j] * xhat[r * cols + j];
                    }
                }
                dg
            });
            let dbeta = needs[2].then(|| {
                let mut db = vec![S::zero(); cols];
                for r in 0..rows {
                    for j in 0..cols {
                        db[j] = db[j] + g[r * cols + j];
                    }
                }
                db
            });
            vec![dx, dgamma, dbeta]
        }
        Op::SumAll { len } => vec![Some(vec![g[0]; *len])],
        Op::MeanAll { len } => vec![Some(vec![g[0] / S::lit(*len as f64); *len])],
        Op::SumAxis { view, mean } => {
            let scale = if *mean { S::lit(1.0 / view.dim as f64) } else { S::one() };
            let mut gi = vec![S::zero(); view.outer * view.dim * view.inner];
            for o in 0..view.outer {
                for d in 0..view.dim {
                    for i in 0..view.inner {
                        gi[(o * view.dim + d) * view.inner + i] = g[o * view.inner + i] * scale;
                    }
                }
            }
            vec![Some(gi)]
        }
        Op::MaxAxis { view, argmax } => {
            let mut gi = vec![S::zero(); view.outer * view.dim * view.inner];
            for o in 0..view.outer {
                for i in 0..view.inner {
                    let d = argmax[o * view.inner + i];
                    gi[(o * view.dim + d) * view.inner + i] = g[o * view.inner + i];
                }
            }
            vec![Some(gi)]
        }
    }
}
