use std::collections::{BTreeMap, HashMap};

use super::param::Parameter;
use super::value::{axis_split, broadcast_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operator kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Negate,
    Sqrt,
    Abs,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Relu => "relu",
            Self::Exp => "exp",
            Self::Negate => "negate",
            Self::Sqrt => "sqrt",
            Self::Abs => "abs",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Elementwise, Var),
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    Sum(Var, usize),
    Max(Var, Vec<usize>),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Norm(Var),
    QuatMul(Var, Var),
    QuatToRot(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in execution order, so parents always precede their
/// children. A tape has a single writer; run independent forward passes on
/// independent tapes and sum their parameter gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when unreached.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient for a named parameter that was recorded on the tape.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| self.get(v))
    }

    /// All parameter gradients by name, zero for parameters the root does
    /// not depend on.
    pub fn param_map(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, v)| (n.clone(), self.get(*v)))
            .collect()
    }
}

enum IndexMode {
    Same,
    Mod(usize),
    Map(Vec<usize>),
}

impl IndexMode {
    fn new(out_shape: &[usize], src: &[usize]) -> Self {
        let src_len: usize = src.iter().product();
        if src == out_shape {
            IndexMode::Same
        } else if src.len() <= out_shape.len() && out_shape[out_shape.len() - src.len()..] == *src {
            IndexMode::Mod(src_len)
        } else {
            IndexMode::Map(broadcast_map(out_shape, src))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            IndexMode::Same => i,
            IndexMode::Mod(n) => i % n,
            IndexMode::Map(m) => m[i],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a parameter. Recording the same name twice returns the same
    /// handle, so shared weights accumulate a single gradient.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.param_lookup.get(&p.name) {
            return v;
        }
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.push((p.name.clone(), v));
        self.param_lookup.insert(p.name.clone(), v);
        v
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => Ok(self.unary(kind, a)),
            (true, None) => Err(Error::Invalid(format!("{} needs two operands", kind.name()))),
            (false, Some(_)) => Err(Error::Invalid(format!("{} takes one operand", kind.name()))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Negate, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Sqrt, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Abs, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, kind: Elementwise, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Elementwise::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Elementwise::Exp => f64::exp,
            Elementwise::Negate => |x| -x,
            Elementwise::Sqrt => f64::sqrt,
            Elementwise::Abs => f64::abs,
            _ => unreachable!("binary kind in unary"),
        };
        let value = self.nodes[a.0].value.map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Unary(kind, a), rg)
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(kind.name(), ta.shape(), tb.shape()))?;
        let f: fn(f64, f64) -> f64 = match kind {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            Elementwise::Div => |x, y| x / y,
            _ => unreachable!("unary kind in binary"),
        };
        let numel: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = IndexMode::new(&out_shape, ta.shape());
            let ib = IndexMode::new(&out_shape, tb.shape());
            let mut out = Vec::with_capacity(numel);
            zip_index(&ia, &ib, numel, |_, p, q| out.push(f(da[p], db[q])));
            out
        };
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    /// Matrix product of `[m,k]·[k,n]`, `[B,m,k]·[B,k,n]` or `[B,m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (batch, m, k, n, b_batched) = matmul_dims(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = &ta.data()[bi * m * k..(bi + 1) * m * k];
            let bo = if b_batched {
                &tb.data()[bi * k * n..(bi + 1) * k * n]
            } else {
                tb.data()
            };
            mm_nn(ao, bo, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let shape = if ta.rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(Error::Invalid(format!(
                "transpose expects rank 2, got {:?}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.nodes[a.0].value.rank();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let ta = &self.nodes[a.0].value;
        let (outer, n, inner) = axis_split(ta.shape(), axis);
        let x = ta.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(x[at(j)]);
                }
                let mut s = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - mx).exp();
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    y[at(j)] /= s;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        let value = Tensor::new(ta.shape().to_vec(), y)?;
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    /// Sum or max over `axis`; the axis is removed from the result shape.
    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: usize) -> Result<Var> {
        let name = match kind {
            Reduce::Sum => "reduce_sum",
            Reduce::Max => "reduce_max",
        };
        self.check_axis(name, a, axis)?;
        let ta = &self.nodes[a.0].value;
        let (outer, n, inner) = axis_split(ta.shape(), axis);
        if n == 0 {
            return Err(Error::EmptyAxis { op: name });
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let x = ta.data();
        let rg = self.any_grad(&[a]);
        match kind {
            Reduce::Sum => {
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &x[o * n * inner + j * inner..][..inner];
                        for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *dst += v;
                        }
                    }
                }
                Ok(self.push(Tensor::new(shape, out)?, Op::Sum(a, axis), rg))
            }
            Reduce::Max => {
                let mut out = vec![f64::NEG_INFINITY; outer * inner];
                let mut arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let dst = o * inner + i;
                        let mut best = o * n * inner + i;
                        for j in 1..n {
                            let src = o * n * inner + j * inner + i;
                            // strict comparison keeps the lowest index on ties
                            if x[src] > x[best] {
                                best = src;
                            }
                        }
                        out[dst] = x[best];
                        arg[dst] = best;
                    }
                }
                Ok(self.push(Tensor::new(shape, out)?, Op::Max(a, arg), rg))
            }
        }
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Sum, a, axis)
    }

    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Max, a, axis)
    }

    /// Mean over `axis`.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", a, axis)?;
        let n = self.shape(a)[axis];
        let s = self.sum(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let w = t.shape()[axis] * inner;
            for o in 0..outer {
                out[o * total * inner + offset..][..w].copy_from_slice(&t.data()[o * w..][..w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let ta = &self.nodes[a.0].value;
        let (outer, n, inner) = axis_split(ta.shape(), axis);
        if start + len > n {
            return Err(Error::Index {
                op: "slice",
                index: start + len,
                bound: n,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&ta.data()[o * n * inner + start * inner..][..len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice(a, axis, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Selects rows (first-axis slices) by index; duplicates allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 {
            return Err(Error::Invalid("gather_rows on a scalar".into()));
        }
        let rows = ta.shape()[0];
        let width: usize = ta.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&ta.data()[i * width..(i + 1) * width]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather(a, indices.to_vec()), rg))
    }

    /// Euclidean norm over the last axis, kept as a width-1 axis. The
    /// gradient at a zero vector is zero.
    pub fn norm_last(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 {
            return Err(Error::Invalid("norm_last on a scalar".into()));
        }
        let w = ta.shape()[ta.rank() - 1];
        if w == 0 {
            return Err(Error::EmptyAxis { op: "norm_last" });
        }
        let out: Vec<f64> = ta
            .data()
            .chunks_exact(w)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Norm(a), rg))
    }

    /// Hamilton product of two `[4]` quaternions (scalar first).
    pub fn quat_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != [4] || tb.shape() != [4] {
            return Err(Error::shape("quat_mul", ta.shape(), tb.shape()));
        }
        let out = mat4_vec(&right_mat(tb.data()), ta.data());
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(out.to_vec()), Op::QuatMul(a, b), rg))
    }

    /// Rotation matrix `[3,3]` of a unit `[4]` quaternion.
    pub fn quat_to_rotation(&mut self, q: Var) -> Result<Var> {
        let tq = &self.nodes[q.0].value;
        if tq.shape() != [4] {
            return Err(Error::shape("quat_to_rotation", tq.shape(), &[4]));
        }
        let r = rot_from_quat(tq.data());
        let rg = self.any_grad(&[q]);
        Ok(self.push(Tensor::new(vec![3, 3], r.to_vec())?, Op::QuatToRot(q), rg))
    }

    /// Runs reverse accumulation from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        // Accumulates a contribution into parent `p` if it wants gradients.
        let mut acc = |p: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[p.0].requires_grad {
                return;
            }
            let slot = grads[p.0].get_or_insert_with(|| vec![0.0; self.nodes[p.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = self.nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += match kind {
                            Elementwise::Relu => {
                                if x[j] > 0.0 {
                                    g[j]
                                } else {
                                    0.0
                                }
                            }
                            Elementwise::Exp => g[j] * y[j],
                            Elementwise::Negate => -g[j],
                            Elementwise::Sqrt => g[j] * 0.5 / y[j],
                            Elementwise::Abs => {
                                if x[j] > 0.0 {
                                    g[j]
                                } else if x[j] < 0.0 {
                                    -g[j]
                                } else {
                                    0.0
                                }
                            }
                            _ => unreachable!(),
                        };
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let out_shape = node.value.shape();
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let ia = IndexMode::new(out_shape, ta.shape());
                let ib = IndexMode::new(out_shape, tb.shape());
                let (xa, xb) = (ta.data(), tb.data());
                let n = g.len();
                acc(*a, &mut |ga| match kind {
                    Elementwise::Add | Elementwise::Sub => zip_index(&ia, &ib, n, |j, p, _| ga[p] += g[j]),
                    Elementwise::Mul => zip_index(&ia, &ib, n, |j, p, q| ga[p] += g[j] * xb[q]),
                    Elementwise::Div => zip_index(&ia, &ib, n, |j, p, q| ga[p] += g[j] / xb[q]),
                    _ => unreachable!(),
                });
                acc(*b, &mut |gb| match kind {
                    Elementwise::Add => zip_index(&ia, &ib, n, |j, _, q| gb[q] += g[j]),
                    Elementwise::Sub => zip_index(&ia, &ib, n, |j, _, q| gb[q] -= g[j]),
                    Elementwise::Mul => zip_index(&ia, &ib, n, |j, p, q| gb[q] += g[j] * xa[p]),
                    Elementwise::Div => zip_index(&ia, &ib, n, |j, p, q| gb[q] -= g[j] * xa[p] / (xb[q] * xb[q])),
                    _ => unreachable!(),
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (d, &gj) in ga.iter_mut().zip(g) {
                    *d += gj * s;
                }
            }),
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (batch, m, k, n, b_batched) =
                    matmul_dims(ta.shape(), tb.shape()).expect("validated in forward");
                acc(*a, &mut |ga| {
                    for bi in 0..batch {
                        let bo = if b_batched {
                            &tb.data()[bi * k * n..][..k * n]
                        } else {
                            tb.data()
                        };
                        mm_nt(&g[bi * m * n..][..m * n], bo, &mut ga[bi * m * k..][..m * k], m, n, k);
                    }
                });
                acc(*b, &mut |gb| {
                    for bi in 0..batch {
                        let dst = if b_batched {
                            &mut gb[bi * k * n..][..k * n]
                        } else {
                            &mut gb[..]
                        };
                        mm_tn(&ta.data()[bi * m * k..][..m * k], &g[bi * m * n..][..m * n], dst, m, k, n);
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + ii;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(a, axis) => {
                let (outer, n, inner) = axis_split(self.nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for j in 0..n {
                            for ii in 0..inner {
                                ga[o * n * inner + j * inner + ii] += g[o * inner + ii];
                            }
                        }
                    }
                });
            }
            Op::Max(a, arg) => acc(*a, &mut |ga| {
                for (&src, &gj) in arg.iter().zip(g) {
                    ga[src] += gj;
                }
            }),
            Op::Norm(a) => {
                let x = self.nodes[a.0].value.data();
                let w = x.len() / y.len().max(1);
                acc(*a, &mut |ga| {
                    for (r, (&yr, &gr)) in y.iter().zip(g).enumerate() {
                        if yr > 0.0 {
                            for j in r * w..(r + 1) * w {
                                ga[j] += gr * x[j] / yr;
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            for (d, &s) in gp[o * w..][..w]
                                .iter_mut()
                                .zip(&g[o * total * inner + offset..][..w])
                            {
                                *d += s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, n, inner) = axis_split(self.nodes[a.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for (d, &s) in ga[o * n * inner + start * inner..][..len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..][..len * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| {
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d += s;
                }
            }),
            Op::Gather(a, indices) => {
                let width: usize = self.nodes[a.0].value.shape()[1..].iter().product();
                acc(*a, &mut |ga| {
                    for (r, &src) in indices.iter().enumerate() {
                        for (d, &s) in ga[src * width..][..width]
                            .iter_mut()
                            .zip(&g[r * width..][..width])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::QuatMul(a, b) => {
                let xa = self.nodes[a.0].value.data();
                let xb = self.nodes[b.0].value.data();
                let rb = right_mat(xb);
                let la = left_mat(xa);
                acc(*a, &mut |ga| {
                    for r in 0..4 {
                        for c in 0..4 {
                            ga[c] += rb[r][c] * g[r];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..4 {
                        for c in 0..4 {
                            gb[c] += la[r][c] * g[r];
                        }
                    }
                });
            }
            Op::QuatToRot(q) => {
                let x = self.nodes[q.0].value.data();
                let jac = rot_jacobian(x);
                acc(*q, &mut |gq| {
                    for (e, row) in jac.iter().enumerate() {
                        for c in 0..4 {
                            gq[c] += row[c] * g[e];
                        }
                    }
                });
            }
        }
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((1, a[0], a[1], b[1], false)),
        (3, 2) if a[2] == b[0] => Ok((a[0], a[1], a[2], b[1], false)),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok((a[0], a[1], a[2], b[2], true)),
        _ => Err(Error::shape("matmul", a, b)),
    }
}

/// `c += a·b` with `a: m×k`, `b: k×n`.
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c += g·bᵀ` with `g: m×n`, `b: k×n`, `c: m×k`.
fn mm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    gemm(m, n, k, g, (n, 1), b, (1, n), c);
}

/// `c += aᵀ·g` with `a: m×k`, `g: m×n`, `c: k×n`.
fn mm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k), g, (n, 1), c);
}

/// `c += x·y` for an `m×k` by `k×n` product given row and column strides;
/// `c` is dense row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, x: &[f64], xs: (usize, usize), y: &[f64], ys: (usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(x.len() >= (m - 1) * xs.0 + (k - 1) * xs.1 + 1);
    assert!(y.len() >= (k - 1) * ys.0 + (n - 1) * ys.1 + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            x.as_ptr(),
            xs.0 as isize,
            xs.1 as isize,
            y.as_ptr(),
            ys.0 as isize,
            ys.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Calls `f(j, ia(j), ib(j))` for `j < len` without per-element division
/// in the common suffix-broadcast cases.
#[inline]
fn zip_index(ia: &IndexMode, ib: &IndexMode, len: usize, mut f: impl FnMut(usize, usize, usize)) {
    match (ia, ib) {
        (IndexMode::Same, IndexMode::Same) => (0..len).for_each(|j| f(j, j, j)),
        (IndexMode::Mod(0), _) | (_, IndexMode::Mod(0)) => {}
        (IndexMode::Same, IndexMode::Mod(n)) => {
            for j0 in (0..len).step_by(*n) {
                for q in 0..*n {
                    f(j0 + q, j0 + q, q);
                }
            }
        }
        (IndexMode::Mod(n), IndexMode::Same) => {
            for j0 in (0..len).step_by(*n) {
                for p in 0..*n {
                    f(j0 + p, p, j0 + p);
                }
            }
        }
        _ => (0..len).for_each(|j| f(j, ia.at(j), ib.at(j))),
    }
}

/// Matrix `L(a)` with `a ⊗ b = L(a)·b`.
fn left_mat(a: &[f64]) -> [[f64; 4]; 4] {
    let (w, x, y, z) = (a[0], a[1], a[2], a[3]);
    [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
}

/// Matrix `R(b)` with `a ⊗ b = R(b)·a`.
fn right_mat(b: &[f64]) -> [[f64; 4]; 4] {
    let (w, x, y, z) = (b[0], b[1], b[2], b[3]);
    [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
}

fn mat4_vec(m: &[[f64; 4]; 4], v: &[f64]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for r in 0..4 {
        out[r] = (0..4).map(|c| m[r][c] * v[c]).sum();
    }
    out
}

fn rot_from_quat(q: &[f64]) -> [f64; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// Partial derivatives of each rotation entry (row-major) wrt `(w,x,y,z)`.
fn rot_jacobian(q: &[f64]) -> [[f64; 4]; 9] {
    let (w, x, y, z) = (2.0 * q[0], 2.0 * q[1], 2.0 * q[2], 2.0 * q[3]);
    [
        [0.0, 0.0, -2.0 * y, -2.0 * z],
        [-z, y, x, -w],
        [y, z, w, x],
        [z, y, x, w],
        [0.0, -2.0 * x, 0.0, -2.0 * z],
        [-x, -w, z, y],
        [-y, z, -w, x],
        [x, w, z, y],
        [0.0, -2.0 * x, -2.0 * y, 0.0],
    ]
}
