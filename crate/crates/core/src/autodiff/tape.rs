use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{NodeRef, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind<T> {
    Exp,
    Log,
    Neg,
    Scale(T),
    Offset(T),
    Relu,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` is `[m, 1]`, one value per row of `a`.
    PerRow,
    /// `b` is `[1, n]`, one value per column of `a`.
    PerCol,
}

/// Axis a reduction collapses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// One result per row, shape `[m, 1]`.
    PerRow,
    /// One result per column, shape `[1, n]`.
    PerCol,
    /// Whole tensor, rank 0.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    Min,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Const,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Unary(usize, UnaryKind<T>),
    Binary(usize, usize, BinaryKind, Broadcast),
    Reduce {
        src: usize,
        axis: Axis,
        kind: ReduceKind,
        /// Source flat index selected per output entry (max/min only).
        picks: Vec<usize>,
    },
    L2NormalizeRows {
        src: usize,
        guard: T,
        norms: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Arc<[T]>,
}

/// Linear record of forward operations.
///
/// Nodes are appended in execution order, which is a topological order, so
/// [`Tape::backward`] is one reverse sweep. A tape is single-threaded.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, values: &[T]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(op, format!("non-finite result at flat index {i}"))),
        None => Ok(()),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("{what} expects a matrix, got shape {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, shape: Vec<usize>, value: Vec<T>) -> Tensor<T> {
        let value: Arc<[T]> = value.into();
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { op, shape: shape.clone(), value: Arc::clone(&value) });
        Tensor::from_parts(shape, value, Some(NodeRef { tape: self.id, index }))
    }

    /// Node index for `t`, lifting unrecorded tensors to constants.
    fn index_of(&self, t: &Tensor<T>) -> Result<usize> {
        match t.node() {
            Some(r) if r.tape == self.id => Ok(r.index),
            Some(_) => Err(Error::NotOnTape),
            None => {
                let c = self.constant(t);
                Ok(c.node().map(|r| r.index).unwrap_or_default())
            }
        }
    }

    /// Records `t` as a differentiable input.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        let value = t.shared_values();
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { op: Op::Leaf, shape: t.shape().to_vec(), value: Arc::clone(&value) });
        Tensor::from_parts(t.shape().to_vec(), value, Some(NodeRef { tape: self.id, index }))
    }

    /// Records `t` as a constant (receives no gradient).
    pub fn constant(&self, t: &Tensor<T>) -> Tensor<T> {
        let value = t.shared_values();
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { op: Op::Const, shape: t.shape().to_vec(), value: Arc::clone(&value) });
        Tensor::from_parts(t.shape().to_vec(), value, Some(NodeRef { tape: self.id, index }))
    }

    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = dims2(a.shape(), "matmul")?;
        let (k2, n) = dims2(b.shape(), "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out = matmul_raw(a.values(), b.values(), m, k, n);
        check_finite("matmul", &out)?;
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        Ok(self.push(Op::MatMul(ia, ib), vec![m, n], out))
    }

    pub fn transpose(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = dims2(a.shape(), "transpose")?;
        let out = transpose_raw(a.values(), m, n);
        let ia = self.index_of(a)?;
        Ok(self.push(Op::Transpose(ia), vec![n, m], out))
    }

    pub fn reshape(&self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.len() > 2 || shape.iter().product::<usize>() != a.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", a.shape())));
        }
        let ia = self.index_of(a)?;
        Ok(self.push(Op::Reshape(ia), shape.to_vec(), a.to_vec()))
    }

    pub fn unary(&self, a: &Tensor<T>, kind: UnaryKind<T>) -> Result<Tensor<T>> {
        let x = a.values();
        let out: Vec<T> = match kind {
            UnaryKind::Exp => x.iter().map(|v| v.exp()).collect(),
            UnaryKind::Log => {
                if let Some(i) = x.iter().position(|v| *v <= T::zero()) {
                    return Err(Error::numeric("log", format!("entry {i} = {} is not positive", x[i])));
                }
                x.iter().map(|v| v.ln()).collect()
            }
            UnaryKind::Neg => x.iter().map(|v| -*v).collect(),
            UnaryKind::Scale(c) => x.iter().map(|v| *v * c).collect(),
            UnaryKind::Offset(c) => x.iter().map(|v| *v + c).collect(),
            UnaryKind::Relu => x.iter().map(|v| if *v > T::zero() { *v } else { T::zero() }).collect(),
            UnaryKind::Sqrt => {
                if let Some(i) = x.iter().position(|v| *v < T::zero()) {
                    return Err(Error::numeric("sqrt", format!("entry {i} = {} is negative", x[i])));
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
        };
        check_finite("unary", &out)?;
        let ia = self.index_of(a)?;
        Ok(self.push(Op::Unary(ia, kind), a.shape().to_vec(), out))
    }

    pub fn exp(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn neg(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(a, UnaryKind::Neg)
    }

    pub fn scale(&self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        self.unary(a, UnaryKind::Scale(c))
    }

    pub fn offset(&self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        self.unary(a, UnaryKind::Offset(c))
    }

    pub fn relu(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn sqrt(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(a, UnaryKind::Sqrt)
    }

    /// Elementwise `a ∘ b`. `b` may match `a` exactly, or be a `[m, 1]` /
    /// `[1, n]` vector broadcast across the rows / columns of matrix `a`.
    pub fn binary(&self, a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
        let bc = if a.shape() == b.shape() {
            Broadcast::Same
        } else {
            match (a.shape(), b.shape()) {
                ([m, _], [m2, 1]) if m == m2 => Broadcast::PerRow,
                ([_, n], [1, n2]) if n == n2 => Broadcast::PerCol,
                _ => {
                    return Err(Error::shape(format!(
                        "incompatible operands {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    )))
                }
            }
        };
        if kind == BinaryKind::Div {
            if let Some(i) = b.values().iter().position(|v| *v == T::zero()) {
                return Err(Error::numeric("div", format!("divisor entry {i} is zero")));
            }
        }
        let cols = a.cols();
        let (x, y) = (a.values(), b.values());
        let f = |l: T, r: T| match kind {
            BinaryKind::Add => l + r,
            BinaryKind::Sub => l - r,
            BinaryKind::Mul => l * r,
            BinaryKind::Div => l / r,
        };
        let out: Vec<T> = x
            .iter()
            .enumerate()
            .map(|(idx, &l)| f(l, y[bcast_index(bc, idx, cols)]))
            .collect();
        check_finite("binary", &out)?;
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        Ok(self.push(Op::Binary(ia, ib, kind, bc), a.shape().to_vec(), out))
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(a, b, BinaryKind::Div)
    }

    /// Reduction along `axis`. Max/min route the backward gradient to the
    /// first attaining index.
    pub fn reduce(&self, a: &Tensor<T>, axis: Axis, kind: ReduceKind) -> Result<Tensor<T>> {
        let x = a.values();
        let (groups, out_shape): (Vec<Vec<usize>>, Vec<usize>) = match axis {
            Axis::All => {
                if x.is_empty() {
                    return Err(Error::shape("reduction over an empty tensor"));
                }
                (vec![(0..x.len()).collect()], vec![])
            }
            Axis::PerRow => {
                let (m, n) = dims2(a.shape(), "row reduction")?;
                if n == 0 {
                    return Err(Error::shape("row reduction over zero columns"));
                }
                ((0..m).map(|i| (i * n..(i + 1) * n).collect()).collect(), vec![m, 1])
            }
            Axis::PerCol => {
                let (m, n) = dims2(a.shape(), "column reduction")?;
                if m == 0 {
                    return Err(Error::shape("column reduction over zero rows"));
                }
                ((0..n).map(|j| (0..m).map(|i| i * n + j).collect()).collect(), vec![1, n])
            }
        };
        let mut out = Vec::with_capacity(groups.len());
        let mut picks = Vec::new();
        for g in &groups {
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let mut acc = T::zero();
                    for &i in g {
                        acc = acc + x[i];
                    }
                    if kind == ReduceKind::Mean {
                        acc = acc / T::lit(g.len() as f64);
                    }
                    out.push(acc);
                }
                ReduceKind::Max | ReduceKind::Min => {
                    let mut best = g[0];
                    for &i in &g[1..] {
                        let better = if kind == ReduceKind::Max { x[i] > x[best] } else { x[i] < x[best] };
                        if better {
                            best = i;
                        }
                    }
                    picks.push(best);
                    out.push(x[best]);
                }
            }
        }
        check_finite("reduce", &out)?;
        let ia = self.index_of(a)?;
        Ok(self.push(Op::Reduce { src: ia, axis, kind, picks }, out_shape, out))
    }

    pub fn sum(&self, a: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
        self.reduce(a, axis, ReduceKind::Sum)
    }

    pub fn mean(&self, a: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
        self.reduce(a, axis, ReduceKind::Mean)
    }

    pub fn max(&self, a: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
        self.reduce(a, axis, ReduceKind::Max)
    }

    pub fn min(&self, a: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
        self.reduce(a, axis, ReduceKind::Min)
    }

    /// Divides each row by `‖row‖ + guard`.
    pub fn l2_normalize_rows(&self, a: &Tensor<T>, guard: T) -> Result<Tensor<T>> {
        if !(guard > T::zero()) {
            return Err(Error::invalid("normalization guard must be positive"));
        }
        let (m, n) = dims2(a.shape(), "l2_normalize_rows")?;
        let x = a.values();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mut sq = T::zero();
            for v in row {
                sq = sq + *v * *v;
            }
            let norm = sq.sqrt();
            let s = norm + guard;
            out.extend(row.iter().map(|v| *v / s));
            norms.push(norm);
        }
        check_finite("l2_normalize_rows", &out)?;
        let ia = self.index_of(a)?;
        Ok(self.push(Op::L2NormalizeRows { src: ia, guard, norms }, vec![m, n], out))
    }

    /// Reverse sweep from a rank-0 `loss`.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.rank() != 0 {
            return Err(Error::shape(format!("backward needs a scalar, got shape {:?}", loss.shape())));
        }
        let root = match loss.node() {
            Some(r) if r.tape == self.id => r.index,
            _ => return Err(Error::NotOnTape),
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(ia, ib) => {
                    let (m, k) = (nodes[*ia].shape[0], nodes[*ia].shape[1]);
                    let n = nodes[*ib].shape[1];
                    let bt = transpose_raw(&nodes[*ib].value, k, n);
                    let da = matmul_raw(&g, &bt, m, n, k);
                    let at = transpose_raw(&nodes[*ia].value, m, k);
                    let db = matmul_raw(&at, &g, k, m, n);
                    accumulate(&mut grads, *ia, &da);
                    accumulate(&mut grads, *ib, &db);
                }
                Op::Transpose(ia) => {
                    let (m, n) = (nodes[*ia].shape[0], nodes[*ia].shape[1]);
                    accumulate(&mut grads, *ia, &transpose_raw(&g, n, m));
                }
                Op::Reshape(ia) => accumulate(&mut grads, *ia, &g),
                Op::Unary(ia, kind) => {
                    let x = &nodes[*ia].value;
                    let y = &node.value;
                    let d: Vec<T> = match kind {
                        UnaryKind::Exp => g.iter().zip(y.iter()).map(|(g, y)| *g * *y).collect(),
                        UnaryKind::Log => g.iter().zip(x.iter()).map(|(g, x)| *g / *x).collect(),
                        UnaryKind::Neg => g.iter().map(|g| -*g).collect(),
                        UnaryKind::Scale(c) => g.iter().map(|g| *g * *c).collect(),
                        UnaryKind::Offset(_) => g.clone(),
                        UnaryKind::Relu => g
                            .iter()
                            .zip(x.iter())
                            .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                            .collect(),
                        UnaryKind::Sqrt => {
                            let two = T::lit(2.0);
                            g.iter().zip(y.iter()).map(|(g, y)| *g / (two * *y)).collect()
                        }
                    };
                    accumulate(&mut grads, *ia, &d);
                }
                Op::Binary(ia, ib, kind, bc) => {
                    let a = &nodes[*ia].value;
                    let b = &nodes[*ib].value;
                    let cols = if node.shape.len() == 2 { node.shape[1] } else { 1 };
                    let mut da = Vec::with_capacity(g.len());
                    let mut db = vec![T::zero(); b.len()];
                    for (idx, gi) in g.iter().enumerate() {
                        let bi = bcast_index(*bc, idx, cols);
                        let (l, r) = (a[idx], b[bi]);
                        let (gl, gr) = match kind {
                            BinaryKind::Add => (*gi, *gi),
                            BinaryKind::Sub => (*gi, -*gi),
                            BinaryKind::Mul => (*gi * r, *gi * l),
                            BinaryKind::Div => (*gi / r, -*gi * l / (r * r)),
                        };
                        da.push(gl);
                        db[bi] = db[bi] + gr;
                    }
                    accumulate(&mut grads, *ia, &da);
                    accumulate(&mut grads, *ib, &db);
                }
                Op::Reduce { src, axis, kind, picks } => {
                    let src_shape = &nodes[*src].shape;
                    let len = nodes[*src].value.len();
                    let mut d = vec![T::zero(); len];
                    match kind {
                        ReduceKind::Max | ReduceKind::Min => {
                            for (o, &p) in picks.iter().enumerate() {
                                d[p] = d[p] + g[o];
                            }
                        }
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let cols = if src_shape.len() == 2 { src_shape[1] } else { len.max(1) };
                            let rows = if src_shape.len() == 2 { src_shape[0] } else { 1 };
                            let count = match axis {
                                Axis::All => len,
                                Axis::PerRow => cols,
                                Axis::PerCol => rows,
                            };
                            let scale =
                                if *kind == ReduceKind::Mean { T::one() / T::lit(count as f64) } else { T::one() };
                            for (flat, slot) in d.iter_mut().enumerate() {
                                let o = match axis {
                                    Axis::All => 0,
                                    Axis::PerRow => flat / cols,
                                    Axis::PerCol => flat % cols,
                                };
                                *slot = g[o] * scale;
                            }
                        }
                    }
                    accumulate(&mut grads, *src, &d);
                }
                Op::L2NormalizeRows { src, guard, norms } => {
                    let x = &nodes[*src].value;
                    let n = node.shape[1];
                    let mut d = Vec::with_capacity(x.len());
                    for (i, &norm) in norms.iter().enumerate() {
                        let row = &x[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = norm + *guard;
                        let mut gx = T::zero();
                        for (a, b) in gr.iter().zip(row) {
                            gx = gx + *a * *b;
                        }
                        let coef = if norm > T::zero() { gx / (s * s * norm) } else { T::zero() };
                        d.extend(gr.iter().zip(row).map(|(g, x)| *g / s - coef * *x));
                    }
                    accumulate(&mut grads, *src, &d);
                }
            }
            grads[idx] = Some(g);
        }

        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn bcast_index(bc: Broadcast, idx: usize, cols: usize) -> usize {
    match bc {
        Broadcast::Same => idx,
        Broadcast::PerRow => idx / cols.max(1),
        Broadcast::PerCol => idx % cols.max(1),
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, d: &[T]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// `[m,k] x [k,n]`; each output entry sums over `k` in ascending order.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded tensor, if the loss depends on it.
    /// Leaves always have an entry (zeros when unused).
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        let r = t.node()?;
        if r.tape != self.tape {
            return None;
        }
        self.grads.get(r.index)?.as_deref()
    }

    pub fn wrt(&self, t: &Tensor<T>) -> Result<&[T]> {
        self.get(t).ok_or(Error::NotOnTape)
    }

    /// Node-indexed view for callers that track raw handles.
    pub fn by_node(&self, node: NodeRef) -> Option<&[T]> {
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.index)?.as_deref()
    }
}
