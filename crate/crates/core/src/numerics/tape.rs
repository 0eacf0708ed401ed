//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! Nodes only reference earlier nodes, so the tape is always in topological
//! order and [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        cols: Vec<T>,
    },
    LayerNorm {
        x: NodeId,
        rstd: Vec<T>,
    },
    Softmax(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Gelu(NodeId),
    Log {
        x: NodeId,
        floor: T,
    },
    Exp(NodeId),
    Pow(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Gelu(..) => "gelu",
            Op::Log { .. } => "log",
            Op::Exp(..) => "exp",
            Op::Pow(..) => "pow",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Embedding { .. } => "embedding",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations. Confined to one thread; independent tapes
/// may run concurrently.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Clone)]
pub struct Grads<T> {
    leaves: HashMap<NodeId, Tensor<T>>,
    shapes: HashMap<NodeId, Vec<usize>>,
}

impl<T: Real> Grads<T> {
    /// Gradient for `v`; zeros when `v` is not reachable from the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.wrt_id(v.id)
    }

    pub fn wrt_id(&self, id: NodeId) -> Tensor<T> {
        match self.leaves.get(&id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes.get(&id).map(Vec::as_slice).unwrap_or(&[])),
        }
    }

    pub fn is_reached(&self, v: Var<'_, T>) -> bool {
        self.leaves.contains_key(&v.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Matmul geometry: (batch, m, k, n) and whether operands are batched.
fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(usize, usize, usize, usize, bool)> {
    let (batch, m, k, b_batched) = match a.len() {
        2 => (1, a[0], a[1], false),
        3 => (a[0], a[1], a[2], b.len() == 3),
        _ => contract!("matmul lhs must be rank 2 or 3, got {:?}", a),
    };
    let (bk, n) = match (b.len(), b_batched) {
        (2, false) => (b[0], b[1]),
        (3, true) => {
            if b[0] != batch {
                contract!("matmul batch mismatch {:?} vs {:?}", a, b);
            }
            (b[1], b[2])
        }
        _ => contract!("matmul rhs rank mismatch {:?} vs {:?}", a, b),
    };
    let (bk, n) = if trans_b { (n, bk) } else { (bk, n) };
    if bk != k {
        contract!(
            "matmul inner dims differ: {:?} x {:?}{}",
            a,
            b,
            if trans_b { "^T" } else { "" }
        );
    }
    Ok((batch, m, k, n, b_batched))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn val(&self, id: NodeId) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: &Tensor<T>) -> Var<'_, T> {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// A leaf without gradient; also serves as `detach`.
    pub fn constant(&self, value: &Tensor<T>) -> Var<'_, T> {
        self.push(value.clone(), Op::Leaf, false)
    }

    pub fn leaf(&self, value: &Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value.clone(), Op::Leaf, requires_grad)
    }

    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(&Tensor::scalar(T::from_f64_lossy(v)))
    }

    /// Rows of `table` (shape `[vocab, dim]`) selected by `ids`.
    pub fn embedding<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let tv = table.value();
        if tv.rank() != 2 {
            contract!("embedding table must be rank 2, got {:?}", tv.shape());
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            contract!("embedding lookup with no ids");
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            if i >= vocab {
                contract!("token id {} outside vocabulary of {}", i, vocab);
            }
            out.extend_from_slice(&tv.data()[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::from_parts(vec![ids.len(), dim], out);
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            self.rg(table.id),
        ))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            contract!("concat of zero tensors");
        }
        let first = parts[0].value();
        let rank = first.rank();
        if axis >= rank {
            contract!("concat axis {} out of range for rank {}", axis, rank);
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != rank
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first.shape()[i])
            {
                contract!("concat shape mismatch {:?} vs {:?}", first.shape(), s);
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.id));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Name of the first operation whose output holds a non-finite value.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            contract!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            );
        }
        let mut shapes = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                shapes.insert(i, n.value.shape().to_vec());
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        let mut leaves = HashMap::new();
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let needs = |i: NodeId| nodes[i].requires_grad;
            let mut produced_non_finite = false;
            let mut acc = |i: NodeId, contrib: Vec<T>| {
                debug_assert_eq!(contrib.len(), nodes[i].value.numel());
                produced_non_finite |= contrib.iter().any(|x| !x.is_finite());
                match &mut grads[i] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e = *e + c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    if needs(*b) {
                        let bn = nodes[*b].value.numel();
                        let mut gb = vec![T::zero(); bn];
                        for (i, &x) in g.iter().enumerate() {
                            gb[i % bn] = gb[i % bn] + x;
                        }
                        if neg {
                            gb.iter_mut().for_each(|x| *x = -*x);
                        }
                        acc(*b, gb);
                    }
                    if needs(*a) {
                        acc(*a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let bn = bv.len();
                    if needs(*b) {
                        let mut gb = vec![T::zero(); bn];
                        for (i, &x) in g.iter().enumerate() {
                            gb[i % bn] = gb[i % bn] + x * av[i];
                        }
                        acc(*b, gb);
                    }
                    if needs(*a) {
                        let ga = g.iter().enumerate().map(|(i, &x)| x * bv[i % bn]).collect();
                        acc(*a, ga);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.into_iter().map(|x| x * c).collect());
                }
                Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g),
                Op::MatMul { a, b, trans_b } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (batch, m, k, n, b_batched) =
                        matmul_dims(av.shape(), bv.shape(), *trans_b)?;
                    // op(B) has logical shape [k, n]; element (r, c) lives at
                    // r*sr + c*sc inside one batch slice of B.
                    let (sr, sc) = if *trans_b {
                        (1isize, k as isize)
                    } else {
                        (n as isize, 1isize)
                    };
                    if needs(*a) {
                        // dA[m,k] = dC[m,n] * op(B)^T
                        let mut ga = vec![T::zero(); batch * m * k];
                        for bi in 0..batch {
                            let bs = if b_batched { bi * k * n } else { 0 };
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n as isize, 1),
                                &bv.data()[bs..bs + k * n],
                                (sc, sr),
                                T::zero(),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                        acc(*a, ga);
                    }
                    if needs(*b) {
                        let mut gb = vec![T::zero(); bv.numel()];
                        for bi in 0..batch {
                            let bs = if b_batched { bi * k * n } else { 0 };
                            let beta = if b_batched || bi == 0 { T::zero() } else { T::one() };
                            let a_slice = &av.data()[bi * m * k..(bi + 1) * m * k];
                            let g_slice = &g[bi * m * n..(bi + 1) * m * n];
                            if *trans_b {
                                // dB[n,k] = dC^T[n,m] * A[m,k]
                                T::gemm(
                                    n,
                                    m,
                                    k,
                                    g_slice,
                                    (1, n as isize),
                                    a_slice,
                                    (k as isize, 1),
                                    beta,
                                    &mut gb[bs..bs + k * n],
                                );
                            } else {
                                // dB[k,n] = A^T[k,m] * dC[m,n]
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    a_slice,
                                    (1, k as isize),
                                    g_slice,
                                    (n as isize, 1),
                                    beta,
                                    &mut gb[bs..bs + k * n],
                                );
                            }
                        }
                        acc(*b, gb);
                    }
                }
                Op::Conv2d { x, w, bias, cols } => {
                    let xs = nodes[*x].value.shape();
                    let ws = nodes[*w].value.shape();
                    let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
                    let (c_out, ks) = (ws[0], ws[2]);
                    let hw = h * wd;
                    let ckk = c_in * ks * ks;
                    if needs(*bias) {
                        let gb = (0..c_out)
                            .map(|o| g[o * hw..(o + 1) * hw].iter().copied().sum())
                            .collect();
                        acc(*bias, gb);
                    }
                    if needs(*w) {
                        // dW[o, ckk] = dOut[o, hw] * cols^T
                        let mut gw = vec![T::zero(); c_out * ckk];
                        T::gemm(
                            c_out,
                            hw,
                            ckk,
                            &g,
                            (hw as isize, 1),
                            cols,
                            (1, hw as isize),
                            T::zero(),
                            &mut gw,
                        );
                        acc(*w, gw);
                    }
                    if needs(*x) {
                        let wv = nodes[*w].value.data();
                        let mut gcols = vec![T::zero(); ckk * hw];
                        T::gemm(
                            ckk,
                            c_out,
                            hw,
                            wv,
                            (1, ckk as isize),
                            &g,
                            (hw as isize, 1),
                            T::zero(),
                            &mut gcols,
                        );
                        acc(*x, col2im(&gcols, c_in, h, wd, ks));
                    }
                }
                Op::LayerNorm { x, rstd } => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let dn = T::from_usize(d).unwrap();
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gy, yh) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let mg = gy.iter().copied().sum::<T>() / dn;
                        let mgy = gy.iter().zip(yh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            gx[r * d + j] = rs * (gy[j] - mg - yh[j] * mgy);
                        }
                    }
                    acc(*x, gx);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..g.len() / d {
                        let (gy, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let dot: T = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = yr[j] * (gy[j] - dot);
                        }
                    }
                    acc(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc(
                        *x,
                        g.iter()
                            .zip(y)
                            .map(|(&gi, &s)| gi * s * (T::one() - s))
                            .collect(),
                    );
                }
                Op::Silu(x) => {
                    let xv = nodes[*x].value.data();
                    acc(
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| {
                                let s = sigmoid(xi);
                                gi * (s + xi * s * (T::one() - s))
                            })
                            .collect(),
                    );
                }
                Op::Gelu(x) => {
                    let xv = nodes[*x].value.data();
                    acc(
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| gi * T::from_f64_lossy(gelu_parts(xi.as_f64()).1))
                            .collect(),
                    );
                }
                Op::Log { x, floor } => {
                    let xv = nodes[*x].value.data();
                    acc(
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| if xi > *floor { gi / xi } else { T::zero() })
                            .collect(),
                    );
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    acc(*x, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
                }
                Op::Pow(x, p) => {
                    let xv = nodes[*x].value.data();
                    let p = *p;
                    acc(
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| gi * p * xi.powf(p - T::one()))
                            .collect(),
                    );
                }
                Op::Sum(x) => acc(*x, vec![g[0]; nodes[*x].value.numel()]),
                Op::Mean(x) => {
                    let n = nodes[*x].value.numel();
                    acc(*x, vec![g[0] / T::from_usize(n).unwrap(); n]);
                }
                Op::Mse(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let scale = g[0] * T::from_f64_lossy(2.0 / av.len() as f64);
                    if needs(*a) {
                        acc(*a, av.iter().zip(bv).map(|(&x, &y)| scale * (x - y)).collect());
                    }
                    if needs(*b) {
                        acc(*b, av.iter().zip(bv).map(|(&x, &y)| scale * (y - x)).collect());
                    }
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, gx) = permute_data(&g, node.value.shape(), &inv);
                    acc(*x, gx);
                }
                Op::Embedding { table, ids } => {
                    let ts = nodes[*table].value.shape();
                    let d = ts[1];
                    let mut gt = vec![T::zero(); ts[0] * d];
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] = gt[i * d + j] + g[row * d + j];
                        }
                    }
                    acc(*table, gt);
                }
                Op::Narrow { x, axis, start } => {
                    let xs = nodes[*x].value.shape();
                    let len = node.value.shape()[*axis];
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let mut gx = vec![T::zero(); nodes[*x].value.numel()];
                    for o in 0..outer {
                        let dst = o * xs[*axis] * inner + start * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    acc(*x, gx);
                }
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let row = shape[*axis] * inner;
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = nodes[inp].value.shape()[*axis] * inner;
                        if needs(inp) {
                            let mut gi = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                gi.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                            }
                            acc(inp, gi);
                        }
                        offset += len;
                    }
                }
            }
            if produced_non_finite {
                return Err(Error::NonFinite {
                    op: node.op.name().to_string(),
                    detail: format!("backward of node {id}"),
                });
            }
        }
        Ok(Grads { leaves, shapes })
    }
}

fn im2col<T: Real>(x: &[T], c_in: usize, h: usize, w: usize, ks: usize) -> Vec<T> {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c_in * ks * ks * hw];
    for c in 0..c_in {
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (c * ks + ky) * ks + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[row * hw + y * w + xx] = x[c * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c_in: usize, h: usize, w: usize, ks: usize) -> Vec<T> {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c_in * hw];
    for c in 0..c_in {
        for ky in 0..ks {
            for kx in 0..ks {
                let row = (c * ks + ky) * ks + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = c * hw + sy as usize * w + sx as usize;
                        x[dst] = x[dst] + cols[row * hw + y * w + xx];
                    }
                }
            }
        }
    }
    x
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(&self.value())
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn check_same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn broadcast_binary(
        &self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        what: &str,
    ) -> Result<Tensor<T>> {
        self.check_same_tape(&other);
        let a = self.value();
        let b = other.value();
        if !suffix_broadcast(a.shape(), b.shape()) {
            contract!(
                "{} operands not broadcastable: {:?} and {:?}",
                what,
                a.shape(),
                b.shape()
            );
        }
        let bn = b.numel();
        let (ad, bd) = (a.data(), b.data());
        let out = ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % bn])).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), out))
    }

    /// Elementwise sum; `other` may broadcast over leading axes.
    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.broadcast_binary(other, |a, b| a + b, "add")?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.broadcast_binary(other, |a, b| a - b, "sub")?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.broadcast_binary(other, |a, b| a * b, "mul")?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), rg))
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(c);
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(c);
        self.unary(self.value().map(|x| x + c), Op::AddScalar(self.id))
    }

    fn matmul_impl(&self, other: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.check_same_tape(&other);
        let a = self.value();
        let b = other.value();
        let (batch, m, k, n, b_batched) = matmul_dims(a.shape(), b.shape(), trans_b)?;
        let (sr, sc) = if trans_b {
            (1isize, k as isize)
        } else {
            (n as isize, 1isize)
        };
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let bs = if b_batched { bi * k * n } else { 0 };
            T::gemm(
                m,
                k,
                n,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                (k as isize, 1),
                &b.data()[bs..bs + k * n],
                (sr, sc),
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if a.rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        ))
    }

    /// `[m,k] x [k,n]`, or batched `[b,m,k] x [b,k,n]` / `[b,m,k] x [k,n]`.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// Like [`Var::matmul`] with the right operand transposed in its last two axes.
    pub fn matmul_t(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true)
    }

    /// Same-padded, stride-1 convolution of a `[c_in, h, w]` input with an
    /// odd `[c_out, c_in, k, k]` kernel plus per-channel bias.
    pub fn conv2d(&self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_tape(&weight);
        self.check_same_tape(&bias);
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        if x.rank() != 3 || w.rank() != 4 {
            contract!("conv2d expects [c,h,w] input and [o,c,k,k] weight");
        }
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, wc, ks, ks2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c_in || ks != ks2 || ks % 2 == 0 {
            contract!(
                "conv2d kernel {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            );
        }
        if b.shape() != [c_out] {
            contract!("conv2d bias must be [{}], got {:?}", c_out, b.shape());
        }
        let hw = h * wd;
        let ckk = c_in * ks * ks;
        let cols = im2col(x.data(), c_in, h, wd, ks);
        let mut out = vec![T::zero(); c_out * hw];
        for o in 0..c_out {
            out[o * hw..(o + 1) * hw].fill(b.data()[o]);
        }
        T::gemm(
            c_out,
            ckk,
            hw,
            w.data(),
            (ckk as isize, 1),
            &cols,
            (hw as isize, 1),
            T::one(),
            &mut out,
        );
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![c_out, h, wd], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                bias: bias.id,
                cols,
            },
            rg,
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let d = *x.shape().last().expect("layer_norm on scalar");
        let dn = T::from_usize(d).unwrap();
        let eps = T::from_f64_lossy(eps);
        let rows = x.numel() / d;
        let mut out = vec![T::zero(); x.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs;
            }
            rstd.push(rs);
        }
        self.unary(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm { x: self.id, rstd },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t, T> {
        let x = self.value();
        let d = *x.shape().last().expect("softmax on scalar");
        let mut out = x.to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.unary(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax(self.id),
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(self.value().map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn silu(&self) -> Var<'t, T> {
        self.unary(self.value().map(|x| x * sigmoid(x)), Op::Silu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(
            self.value()
                .map(|x| T::from_f64_lossy(gelu_parts(x.as_f64()).0)),
            Op::Gelu(self.id),
        )
    }

    /// Natural log of `max(x, floor)`.
    pub fn log_clamped(&self, floor: f64) -> Var<'t, T> {
        let floor = T::from_f64_lossy(floor);
        self.unary(
            self.value().map(|x| x.max(floor).ln()),
            Op::Log { x: self.id, floor },
        )
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(self.value().map(|x| x.exp()), Op::Exp(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'t, T> {
        let p = T::from_f64_lossy(p);
        self.unary(self.value().map(|x| x.powf(p)), Op::Pow(self.id, p))
    }

    pub fn square(&self) -> Var<'t, T> {
        self.powf(2.0)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let s: T = v.data().iter().copied().sum();
        self.unary(
            Tensor::scalar(s / T::from_usize(v.numel()).unwrap()),
            Op::Mean(self.id),
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_tape(&other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            contract!("mse shape mismatch {:?} vs {:?}", a.shape(), b.shape());
        }
        let s: T = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = Tensor::scalar(s / T::from_usize(a.numel()).unwrap());
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, Op::Mse(self.id, other.id), rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            contract!("invalid permutation {:?} for rank {}", perm, x.rank());
        }
        let (shape, data) = permute_data(x.data(), x.shape(), perm);
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let r = self.value().rank();
        if r < 2 {
            contract!("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
            contract!(
                "narrow({}, {}, {}) out of range for {:?}",
                axis,
                start,
                len,
                x.shape()
            );
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * x.shape()[axis] * inner + start * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }
}
