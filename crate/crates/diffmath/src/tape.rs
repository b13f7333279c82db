use std::borrow::Cow;
use std::rc::Rc;

use crate::error::{contract, DiffError, Result};
use crate::remap::{memo, reflect_index, IndexMap};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Abs,
    Relu,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
}

/// Right-hand side of a binary op: another recorded value (same shape or a
/// single element) or a plain constant.
#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl Conv2dSpec {
    pub fn same(mode: PadMode) -> impl Fn(usize) -> Conv2dSpec {
        move |k| Conv2dSpec {
            stride: 1,
            pad: k / 2,
            mode,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    BinaryScalar {
        kind: BinaryOp,
        a: Var,
        s: f64,
    },
    Unary {
        kind: UnaryOp,
        a: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Reduce {
        kind: ReduceOp,
        x: Var,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Remap {
        x: Var,
        map: Rc<IndexMap>,
    },
    Reshape {
        x: Var,
    },
    AddBroadcast {
        x: Var,
        b: Var,
        axis: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { .. } | Op::BinaryScalar { .. } => "binary",
            Op::Unary { .. } => "unary",
            Op::Matmul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Reduce { .. } => "reduce",
            Op::Concat { .. } => "concat",
            Op::Remap { .. } => "remap",
            Op::Reshape { .. } => "reshape",
            Op::AddBroadcast { .. } => "add_broadcast",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of executed operations. Node order is creation order,
/// which is a topological order of the computation graph.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op.name(), value.data())?;
        let requires_grad = self
            .inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } | Op::Bmm { a, b } => vec![*a, *b],
            Op::BinaryScalar { a, .. } | Op::Unary { a, .. } => vec![*a],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Reduce { x, .. }
            | Op::Remap { x, .. }
            | Op::Reshape { x } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::AddBroadcast { x, b, .. } => vec![*x, *b],
        }
    }

    // ----- elementwise -------------------------------------------------

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: impl Into<Operand>) -> Result<Var> {
        match b.into() {
            Operand::Scalar(s) => {
                if kind == BinaryOp::Div && s == 0.0 {
                    return Err(DiffError::Domain {
                        op: "div",
                        msg: "division by zero".into(),
                    });
                }
                let data = self
                    .value(a)
                    .data()
                    .iter()
                    .map(|&x| apply_binary(kind, x, s))
                    .collect();
                let value = Tensor::new(self.shape(a).to_vec(), data)?;
                self.push(value, Op::BinaryScalar { kind, a, s })
            }
            Operand::Var(b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if va.shape() != vb.shape() && vb.numel() != 1 {
                    return Err(DiffError::ShapeMismatch {
                        op: "binary",
                        lhs: va.shape().to_vec(),
                        rhs: vb.shape().to_vec(),
                    });
                }
                if kind == BinaryOp::Div && vb.data().contains(&0.0) {
                    return Err(DiffError::Domain {
                        op: "div",
                        msg: "division by zero".into(),
                    });
                }
                let data = if vb.numel() == 1 {
                    let s = vb.item();
                    va.data()
                        .iter()
                        .map(|&x| apply_binary(kind, x, s))
                        .collect()
                } else {
                    va.data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| apply_binary(kind, x, y))
                        .collect()
                };
                let value = Tensor::new(va.shape().to_vec(), data)?;
                self.push(value, Op::Binary { kind, a, b })
            }
        }
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let va = self.value(a);
        if kind == UnaryOp::Log {
            if let Some(bad) = va.data().iter().find(|&&x| x <= 0.0) {
                return Err(DiffError::Domain {
                    op: "log",
                    msg: format!("non-positive argument {bad}"),
                });
            }
        }
        if let UnaryOp::Clamp { lo, hi } = kind {
            if lo > hi {
                return Err(contract("clamp", format!("lo {lo} > hi {hi}")));
            }
        }
        let data = va.data().iter().map(|&x| apply_unary(kind, x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Unary { kind, a })
    }

    pub fn add(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryOp::Clamp { lo, hi }, a)
    }

    /// `x + b` with the vector `b` broadcast along `axis` of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if axis >= vx.rank() || vb.numel() != vx.shape()[axis] {
            return Err(DiffError::ShapeMismatch {
                op: "add_broadcast",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (outer, len, inner) = outer_inner(vx.shape(), axis);
        let mut data = vx.data().to_vec();
        let bd = vb.data();
        for o in 0..outer {
            for (j, &bj) in bd.iter().enumerate().take(len) {
                let base = (o * len + j) * inner;
                for v in &mut data[base..base + inner] {
                    *v += bj;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::AddBroadcast { x, b, axis })
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        gemm_nn(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::Matmul { a, b })
    }

    /// Batched product of `[B, M, K]` and `[B, K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (bs, m, k, n) = match (va.shape(), vb.shape()) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            _ => {
                return Err(DiffError::ShapeMismatch {
                    op: "bmm",
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        self.push(value, Op::Bmm { a, b })
    }

    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, k, k]`.
    ///
    /// Output size is `floor((H + 2 pad - k) / stride) + 1` per axis.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let geo = ConvGeometry::new(vx.shape(), vw.shape(), spec)?;
        if let Some(b) = bias {
            if self.value(b).numel() != geo.co {
                return Err(DiffError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vw.shape().to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let xp = geo.pad_input(vx.data());
        let mut out = vec![0.0; geo.co * geo.ho * geo.wo];
        geo.forward(&xp, vw.data(), &mut out);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            let plane = geo.ho * geo.wo;
            for (co, &bv) in bd.iter().enumerate() {
                for v in &mut out[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(vec![geo.co, geo.ho, geo.wo], out)?;
        self.push(value, Op::Conv2d { x, w, bias, spec })
    }

    // ----- normalisation -----------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(contract(
                "softmax",
                format!("axis {axis} on rank {}", vx.rank()),
            ));
        }
        let (outer, len, inner) = outer_inner(vx.shape(), axis);
        let mut out = vec![0.0; vx.numel()];
        let d = vx.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(contract(
                "log_softmax",
                format!("axis {axis} on rank {}", vx.rank()),
            ));
        }
        let (outer, len, inner) = outer_inner(vx.shape(), axis);
        let mut out = vec![0.0; vx.numel()];
        let d = vx.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|j| (d[at(j)] - mx).exp()).sum();
                let lse = mx + s.ln();
                for j in 0..len {
                    out[at(j)] = d[at(j)] - lse;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(value, Op::LogSoftmax { x, axis })
    }

    // ----- reductions --------------------------------------------------

    /// Reduce along `axis` (removing it; a rank-1 input reduces to `[1]`),
    /// or over every element when `axis` is `None`.
    pub fn reduce(&mut self, kind: ReduceOp, x: Var, axis: Option<usize>) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, vx.numel(), 1, vec![1]),
            Some(a) if a < shape.len() => {
                let (o, l, i) = outer_inner(shape, a);
                let mut s = shape.to_vec();
                s.remove(a);
                if s.is_empty() {
                    s.push(1);
                }
                (o, l, i, s)
            }
            Some(a) => {
                return Err(contract(
                    "reduce",
                    format!("axis {a} on rank {}", shape.len()),
                ))
            }
        };
        if len == 0 {
            return Err(contract("reduce", "empty reduction set"));
        }
        let d = vx.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let r = o * inner + i;
                match kind {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut s = 0.0;
                        for j in 0..len {
                            s += d[at(j)];
                        }
                        out[r] = if kind == ReduceOp::Mean {
                            s / len as f64
                        } else {
                            s
                        };
                    }
                    ReduceOp::Max => {
                        let mut best = at(0);
                        for j in 1..len {
                            if d[at(j)] > d[best] {
                                best = at(j);
                            }
                        }
                        out[r] = d[best];
                        argmax[r] = best;
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            value,
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, None)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, None)
    }

    // ----- data movement -----------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(contract(
                "concat",
                format!("axis {axis} on rank {}", base.len()),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn remap(&mut self, x: Var, map: Rc<IndexMap>) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != map.in_numel() {
            return Err(contract(
                "remap",
                format!(
                    "map expects {} inputs, got {:?}",
                    map.in_numel(),
                    vx.shape()
                ),
            ));
        }
        let value = Tensor::new(map.out_shape().to_vec(), map.apply(vx.data()))?;
        self.push(value, Op::Remap { x, map })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let map = memo(format!("permute {shape:?} {perm:?}"), || {
            IndexMap::permute(shape, perm)
        })?;
        self.remap(x, map)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        let map = memo(format!("narrow {shape:?} {axis} {start} {len}"), || {
            IndexMap::narrow(shape, axis, start, len)
        })?;
        self.remap(x, map)
    }

    /// Bilinear resize of a `[C, H, W]` value.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x);
        let map = memo(format!("bilinear {shape:?} {out_h} {out_w}"), || {
            IndexMap::bilinear(shape, out_h, out_w)
        })?;
        self.remap(x, map)
    }

    // ----- reverse pass ------------------------------------------------

    /// Accumulate d`root`/d`leaf` into every leaf that requires a gradient.
    /// Repeated calls add to the existing leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(contract(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = nodes[i].value.data();
        let val = |v: &Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (da, db) = (val(a), val(b));
                let bcast = db.len() == 1 && da.len() != 1;
                let bat = |j: usize| if bcast { db[0] } else { db[j] };
                if let Some(ga) = slot(nodes, adj, *a) {
                    for j in 0..g.len() {
                        ga[j] += match kind {
                            BinaryOp::Add | BinaryOp::Sub => g[j],
                            BinaryOp::Mul => g[j] * bat(j),
                            BinaryOp::Div => g[j] / bat(j),
                        };
                    }
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    for j in 0..g.len() {
                        let v = match kind {
                            BinaryOp::Add => g[j],
                            BinaryOp::Sub => -g[j],
                            BinaryOp::Mul => g[j] * da[j],
                            BinaryOp::Div => -g[j] * da[j] / (bat(j) * bat(j)),
                        };
                        gb[if bcast { 0 } else { j }] += v;
                    }
                }
            }
            Op::BinaryScalar { kind, a, s } => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    for j in 0..g.len() {
                        ga[j] += match kind {
                            BinaryOp::Add | BinaryOp::Sub => g[j],
                            BinaryOp::Mul => g[j] * s,
                            BinaryOp::Div => g[j] / s,
                        };
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = val(a);
                if let Some(ga) = slot(nodes, adj, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j]
                            * match *kind {
                                UnaryOp::Exp => y[j],
                                UnaryOp::Log => 1.0 / x[j],
                                UnaryOp::Abs => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else if x[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Relu => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Sigmoid => y[j] * (1.0 - y[j]),
                                UnaryOp::Clamp { lo, hi } => {
                                    if x[j] >= lo && x[j] <= hi {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                }
            }
            Op::AddBroadcast { x, b, axis } => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    for (a, v) in gx.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                let (outer, len, inner) = outer_inner(nodes[x.0].value.shape(), *axis);
                if let Some(gb) = slot(nodes, adj, *b) {
                    for o in 0..outer {
                        for (j, acc) in gb.iter_mut().enumerate().take(len) {
                            let base = (o * len + j) * inner;
                            *acc += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = slot(nodes, adj, *a) {
                    gemm_nt(g, val(b), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    gemm_tn(val(a), g, gb, m, k, n);
                }
            }
            Op::Bmm { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if let Some(ga) = slot(nodes, adj, *a) {
                    for t in 0..bs {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &val(b)[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    for t in 0..bs {
                        gemm_tn(
                            &val(a)[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Conv2d { x, w, bias, spec } => {
                let geo =
                    ConvGeometry::new(nodes[x.0].value.shape(), nodes[w.0].value.shape(), *spec)
                        .expect("validated on forward");
                let xp = geo.pad_input(val(x));
                let need_x = nodes[x.0].requires_grad;
                let mut gxp = if need_x {
                    vec![0.0; xp.len()]
                } else {
                    Vec::new()
                };
                let mut gw = vec![0.0; nodes[w.0].value.numel()];
                geo.backward(&xp, val(w), g, &mut gw, need_x.then_some(&mut gxp[..]));
                if let Some(acc) = slot(nodes, adj, *w) {
                    for (a, v) in acc.iter_mut().zip(&gw) {
                        *a += v;
                    }
                }
                if let Some(gx) = slot(nodes, adj, *x) {
                    geo.fold_padded_grad(&gxp, gx);
                }
                if let Some(b) = bias {
                    if let Some(gb) = slot(nodes, adj, *b) {
                        let plane = geo.ho * geo.wo;
                        for (co, acc) in gb.iter_mut().enumerate() {
                            *acc += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = outer_inner(nodes[x.0].value.shape(), *axis);
                if let Some(gx) = slot(nodes, adj, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = outer_inner(nodes[x.0].value.shape(), *axis);
                if let Some(gx) = slot(nodes, adj, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => {
                let shape = nodes[x.0].value.shape();
                let (outer, len, inner) = match axis {
                    None => (1, nodes[x.0].value.numel(), 1),
                    Some(a) => outer_inner(shape, *a),
                };
                if let Some(gx) = slot(nodes, adj, *x) {
                    match kind {
                        ReduceOp::Max => {
                            for (r, &src) in argmax.iter().enumerate() {
                                gx[src] += g[r];
                            }
                        }
                        ReduceOp::Sum | ReduceOp::Mean => {
                            let scale = if *kind == ReduceOp::Mean {
                                1.0 / len as f64
                            } else {
                                1.0
                            };
                            for o in 0..outer {
                                for j in 0..len {
                                    for ii in 0..inner {
                                        gx[(o * len + j) * inner + ii] += g[o * inner + ii] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let base = nodes[i].value.shape();
                let (outer, total, inner) = outer_inner(base, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = slot(nodes, adj, *p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gp[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Remap { x, map } => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    map.apply_transpose(g, gx);
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot(nodes, adj, *x) {
                    for (a, v) in gx.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn apply_binary(kind: BinaryOp, x: f64, y: f64) -> f64 {
    match kind {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
    }
}

fn apply_unary(kind: UnaryOp, x: f64) -> f64 {
    match kind {
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Abs => x.abs(),
        UnaryOp::Relu => x.max(0.0),
        UnaryOp::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        UnaryOp::Clamp { lo, hi } => x.clamp(lo, hi),
    }
}

// c[m,n] += a[m,k] b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let k4 = k - k % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for p in (0..k4).step_by(4) {
            axpy4(
                crow,
                [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]],
                b,
                p * n,
                n,
            );
        }
        for p in k4..k {
            axpy(crow, arow[p], &b[p * n..(p + 1) * n]);
        }
    }
}

fn axpy(c: &mut [f64], a: f64, x: &[f64]) {
    if a == 0.0 {
        return;
    }
    for (cv, &xv) in c.iter_mut().zip(x) {
        *cv += a * xv;
    }
}

// c += a0*x[r] + a1*x[r+n] + a2*x[r+2n] + a3*x[r+3n]; one pass over c.
fn axpy4(c: &mut [f64], a: [f64; 4], x: &[f64], r: usize, n: usize) {
    if a == [0.0; 4] {
        return;
    }
    let (x0, x1, x2, x3) = (
        &x[r..r + n],
        &x[r + n..r + 2 * n],
        &x[r + 2 * n..r + 3 * n],
        &x[r + 3 * n..r + 4 * n],
    );
    for j in 0..n {
        c[j] += (a[0] * x0[j] + a[1] * x1[j]) + (a[2] * x2[j] + a[3] * x3[j]);
    }
}

// c[m,k] += g[m,n] b[k,n]^T
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

// Four partial sums so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// c[k,n] += a[m,k]^T g[m,n]
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let m4 = m - m % 4;
    for p in 0..k {
        let crow = &mut c[p * n..(p + 1) * n];
        for i in (0..m4).step_by(4) {
            axpy4(
                crow,
                [
                    a[i * k + p],
                    a[(i + 1) * k + p],
                    a[(i + 2) * k + p],
                    a[(i + 3) * k + p],
                ],
                g,
                i * n,
                n,
            );
        }
        for i in m4..m {
            axpy(crow, a[i * k + p], &g[i * n..(i + 1) * n]);
        }
    }
}

struct ConvGeometry {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    spec: Conv2dSpec,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (ci, h, w) = match xs {
            &[c, h, w] => (c, h, w),
            _ => {
                return Err(contract(
                    "conv2d",
                    format!("input must be [C, H, W], got {xs:?}"),
                ))
            }
        };
        let (co, ci2, k) = match ws {
            &[co, ci2, k1, k2] if k1 == k2 => (co, ci2, k1),
            _ => {
                return Err(contract(
                    "conv2d",
                    format!("weight must be [Co, Ci, k, k], got {ws:?}"),
                ))
            }
        };
        if ci != ci2 {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if k % 2 == 0 {
            return Err(contract("conv2d", format!("kernel size {k} must be odd")));
        }
        if spec.stride == 0 {
            return Err(contract("conv2d", "stride must be positive"));
        }
        let (hp, wp) = (h + 2 * spec.pad, w + 2 * spec.pad);
        if hp < k || wp < k {
            return Err(contract(
                "conv2d",
                format!("padded input {hp}x{wp} smaller than kernel {k}"),
            ));
        }
        Ok(Self {
            ci,
            h,
            w,
            co,
            k,
            spec,
            hp,
            wp,
            ho: (hp - k) / spec.stride + 1,
            wo: (wp - k) / spec.stride + 1,
        })
    }

    fn source(&self, yp: usize, xp: usize) -> Option<(usize, usize)> {
        let p = self.spec.pad as isize;
        let (y, x) = (yp as isize - p, xp as isize - p);
        match self.spec.mode {
            PadMode::Zero => (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
                .then(|| (y as usize, x as usize)),
            PadMode::Reflect => Some((reflect_index(y, self.h), reflect_index(x, self.w))),
        }
    }

    fn pad_input(&self, x: &[f64]) -> Vec<f64> {
        if self.spec.pad == 0 {
            return x.to_vec();
        }
        let mut out = vec![0.0; self.ci * self.hp * self.wp];
        for c in 0..self.ci {
            for yp in 0..self.hp {
                for xp in 0..self.wp {
                    if let Some((y, xx)) = self.source(yp, xp) {
                        out[(c * self.hp + yp) * self.wp + xp] = x[(c * self.h + y) * self.w + xx];
                    }
                }
            }
        }
        out
    }

    fn fold_padded_grad(&self, gxp: &[f64], gx: &mut [f64]) {
        if self.spec.pad == 0 {
            for (a, v) in gx.iter_mut().zip(gxp) {
                *a += v;
            }
            return;
        }
        for c in 0..self.ci {
            for yp in 0..self.hp {
                for xp in 0..self.wp {
                    if let Some((y, xx)) = self.source(yp, xp) {
                        gx[(c * self.h + y) * self.w + xx] +=
                            gxp[(c * self.hp + yp) * self.wp + xp];
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    // [Ci*k*k, Ho*Wo] patch matrix of the padded input.
    fn im2col<'a>(&self, xp: &'a [f64]) -> Cow<'a, [f64]> {
        if self.is_pointwise() {
            return Cow::Borrowed(xp);
        }
        let (k, s) = (self.k, self.spec.stride);
        let p = self.ho * self.wo;
        let mut cols = vec![0.0; self.ci * k * k * p];
        for ci in 0..self.ci {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let dst = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let row = (ci * self.hp + oy * s + ky) * self.wp + kx;
                        let d = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if s == 1 {
                            d.copy_from_slice(&xp[row..row + self.wo]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = xp[row + ox * s];
                            }
                        }
                    }
                }
            }
        }
        Cow::Owned(cols)
    }

    fn col2im(&self, gcols: &[f64], gxp: &mut [f64]) {
        let (k, s) = (self.k, self.spec.stride);
        let p = self.ho * self.wo;
        for ci in 0..self.ci {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let src = &gcols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let row = (ci * self.hp + oy * s + ky) * self.wp + kx;
                        let g = &src[oy * self.wo..(oy + 1) * self.wo];
                        if s == 1 {
                            for (a, v) in gxp[row..row + self.wo].iter_mut().zip(g) {
                                *a += v;
                            }
                        } else {
                            for (ox, v) in g.iter().enumerate() {
                                gxp[row + ox * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    // Below this many output pixels the GEMMs run on the transposed patch
    // matrix so their inner loops span Ci*k*k instead of Ho*Wo.
    const SMALL_PLANE: usize = 64;

    fn forward(&self, xp: &[f64], w: &[f64], out: &mut [f64]) {
        let cols = self.im2col(xp);
        let (kk, p) = (self.ci * self.k * self.k, self.ho * self.wo);
        if p < Self::SMALL_PLANE {
            let cols_t = transposed(&cols, kk, p);
            gemm_nt(w, &cols_t, out, self.co, kk, p);
        } else {
            gemm_nn(w, &cols, out, self.co, kk, p);
        }
    }

    fn backward(&self, xp: &[f64], w: &[f64], g: &[f64], gw: &mut [f64], gxp: Option<&mut [f64]>) {
        let cols = self.im2col(xp);
        let (kk, p) = (self.ci * self.k * self.k, self.ho * self.wo);
        if p < Self::SMALL_PLANE {
            let cols_t = transposed(&cols, kk, p);
            gemm_nn(g, &cols_t, gw, self.co, p, kk);
            if let Some(gxp) = gxp {
                let mut gcols_t = vec![0.0; p * kk];
                gemm_tn(g, w, &mut gcols_t, self.co, p, kk);
                let gcols = transposed(&gcols_t, p, kk);
                if self.is_pointwise() {
                    for (a, v) in gxp.iter_mut().zip(&gcols) {
                        *a += v;
                    }
                } else {
                    self.col2im(&gcols, gxp);
                }
            }
            return;
        }
        gemm_nt(g, &cols, gw, self.co, p, kk);
        if let Some(gxp) = gxp {
            if self.is_pointwise() {
                gemm_tn(w, g, gxp, self.co, kk, p);
            } else {
                let mut gcols = vec![0.0; kk * p];
                gemm_tn(w, g, &mut gcols, self.co, kk, p);
                self.col2im(&gcols, gxp);
            }
        }
    }
}

fn transposed(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}
