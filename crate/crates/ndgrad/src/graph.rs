use std::collections::BTreeMap;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::ops::{self, ConvGeom};
use crate::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Up,
    Down,
}

/// Pointwise operations exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
    Silu,
    Square,
}

/// Second operand of [`Graph::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand<T> {
    Var(Var),
    Scalar(T),
    None,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ChannelBias(Var, Var),
    AddPerChannel(Var, Var),
    Linear(Var, Var),
    RowBias(Var, Var),
    Resample(Var, Resample),
    ConcatChannels(Var, Var),
    Reshape(Var),
    SliceOuter(Var, usize),
    StackOuter(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

/// Gradients of the loss with respect to each reachable parameter leaf.
pub type GradMap<T> = BTreeMap<Var, Tensor<T>>;

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order.
/// A graph is built fresh for each forward pass and dropped afterwards.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            is_param: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copy of `v`'s value as a new constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.abs());
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    /// Dispatch form of the pointwise ops. Binary ops take a `Var` of
    /// identical shape or a scalar; unary ops ignore `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Operand<T>) -> Result<Var> {
        use ElementwiseOp::*;
        match (op, b) {
            (Silu, _) => Ok(self.silu(a)),
            (Square, _) => Ok(self.square(a)),
            (Scale, Operand::Scalar(c)) | (Mul, Operand::Scalar(c)) => Ok(self.scale(a, c)),
            (Add, Operand::Scalar(c)) => Ok(self.add_scalar(a, c)),
            (Sub, Operand::Scalar(c)) => Ok(self.add_scalar(a, -c)),
            (Add, Operand::Var(b)) => self.add(a, b),
            (Sub, Operand::Var(b)) => self.sub(a, b),
            (Mul, Operand::Var(b)) => self.mul(a, b),
            (op, b) => Err(invalid(
                "elementwise",
                format!("{op:?} cannot take operand {b:?}"),
            )),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let out = ops::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        Ok(self.push(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Adds `b[c]` to every element of channel `c` of an NCHW tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 || self.shape(b) != [xs[1]] {
            return Err(mismatch("channel_bias", xs, self.shape(b)));
        }
        let (n, c, h, w) = self.value(x).dims4();
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bc = bias[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bc);
        }
        debug_assert_eq!(out.len(), n * c * h * w);
        Ok(self.push(out, Op::ChannelBias(x, b), &[x, b]))
    }

    /// Adds an `N×C` matrix to an NCHW tensor, broadcasting over H and W.
    pub fn add_per_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 || self.shape(e) != [xs[0], xs[1]] {
            return Err(mismatch("add_per_channel", xs, self.shape(e)));
        }
        let (_, _, h, w) = self.value(x).dims4();
        let mut out = self.value(x).clone();
        let add = self.value(e).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let a = add[i];
            chunk.iter_mut().for_each(|v| *v = *v + a);
        }
        Ok(self.push(out, Op::AddPerChannel(x, e), &[x, e]))
    }

    /// `x (N×D) · w (D×O)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::matmul(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::Linear(x, w), &[x, w]))
    }

    /// Adds `b[o]` to every row of an `N×O` matrix.
    pub fn row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.shape(b) != [xs[1]] {
            return Err(mismatch("row_bias", xs, self.shape(b)));
        }
        let o = xs[1];
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(o) {
            row.iter_mut().zip(&bias).for_each(|(v, &bb)| *v = *v + bb);
        }
        Ok(self.push(out, Op::RowBias(x, b), &[x, b]))
    }

    pub fn resample2x(&mut self, x: Var, direction: Resample) -> Result<Var> {
        let out = ops::resample2x(self.value(x), direction)?;
        Ok(self.push(out, Op::Resample(x, direction), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat_channels", sa, sb));
        }
        let (n, ca, h, w) = self.value(a).dims4();
        let cb = sb[1];
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], out)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Rows `[start, start+count)` along the leading axis.
    pub fn slice_outer(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let out = self.value(a).slice_outer(start, count)?;
        Ok(self.push(out, Op::SliceOuter(a, start), &[a]))
    }

    /// Concatenation along the leading axis.
    pub fn stack_outer(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::stack_outer(&values)?;
        Ok(self.push(out, Op::StackOuter(parts.to_vec()), parts))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Returns a gradient for every parameter leaf the loss depends on.
    /// The graph itself is not modified.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        let mut out = GradMap::new();
        if !root.needs_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.is_param {
                out.insert(Var(i), g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op<T>, value: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(T::one(), &t).expect("grad shape"),
                slot => *slot = Some(t),
            }
        };
        match *op {
            Op::Leaf => {}
            Op::StackOuter(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    if self.wants(p) {
                        acc(p, g.slice_outer(offset, rows).expect("stack grad"));
                    }
                    offset += rows;
                }
            }
            Op::SliceOuter(a, start) => {
                let full = self.shape(a);
                let inner: usize = full[1..].iter().product();
                let mut d = Tensor::zeros(full);
                d.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                acc(a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .zip_map(self.value(a), "relu", |gv, x| if x > T::zero() { gv } else { T::zero() })
                    .expect("shape");
                acc(a, d);
            }
            Op::Add(a, b) => {
                if self.wants(b) {
                    acc(b, g.clone());
                }
                acc(a, g);
            }
            Op::Sub(a, b) => {
                if self.wants(b) {
                    acc(b, g.scale(-T::one()));
                }
                acc(a, g);
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    acc(a, g.mul(self.value(b)).expect("shape"));
                }
                if self.wants(b) {
                    acc(b, g.mul(self.value(a)).expect("shape"));
                }
            }
            Op::Scale(a, c) => acc(a, g.scale(c)),
            Op::AddScalar(a) => acc(a, g),
            Op::Silu(a) => {
                let d = g
                    .zip_map(self.value(a), "silu", |gv, x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        gv * s * (T::one() + x * (T::one() - s))
                    })
                    .expect("shape");
                acc(a, d);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                acc(a, g.zip_map(self.value(a), "square", |gv, x| two * x * gv).expect("shape"));
            }
            Op::Abs(a) => {
                let d = g
                    .zip_map(self.value(a), "abs", |gv, x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .expect("shape");
                acc(a, d);
            }
            Op::Sum(a) => acc(a, Tensor::full(self.shape(a), g.item())),
            Op::Mean(a) => {
                let n = T::lit(self.value(a).len() as f64);
                acc(a, Tensor::full(self.shape(a), g.item() / n));
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = ops::conv2d_backward(
                    &geom,
                    self.value(x).data(),
                    self.value(w).data(),
                    g.data(),
                    self.wants(x),
                    self.wants(w),
                );
                if let Some(dx) = dx {
                    acc(x, Tensor::new(self.shape(x), dx).expect("dx"));
                }
                if let Some(dw) = dw {
                    acc(w, Tensor::new(self.shape(w), dw).expect("dw"));
                }
            }
            Op::ChannelBias(x, b) => {
                if self.wants(b) {
                    let (_, c, h, w) = g.dims4();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(h * w).enumerate() {
                        db[i % c] = db[i % c] + chunk.iter().copied().sum();
                    }
                    acc(b, Tensor::new(&[c], db).expect("db"));
                }
                acc(x, g);
            }
            Op::AddPerChannel(x, e) => {
                if self.wants(e) {
                    let (n, c, h, w) = g.dims4();
                    let de: Vec<T> = g.data().chunks(h * w).map(|ch| ch.iter().copied().sum()).collect();
                    acc(e, Tensor::new(&[n, c], de).expect("de"));
                }
                acc(x, g);
            }
            Op::Linear(x, w) => {
                let (dx, dw) = ops::matmul_backward(self.value(x), self.value(w), &g);
                acc(x, dx);
                acc(w, dw);
            }
            Op::RowBias(x, b) => {
                if self.wants(b) {
                    let o = g.shape()[1];
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d = *d + r);
                    }
                    acc(b, Tensor::new(&[o], db).expect("db"));
                }
                acc(x, g);
            }
            Op::Resample(x, dir) => acc(x, ops::resample2x_backward(&g, self.shape(x), dir)),
            Op::ConcatChannels(a, b) => {
                let (n, c, h, w) = value.dims4();
                let ca = self.shape(a)[1];
                let cb = c - ca;
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let s = &g.data()[i * c * hw..(i + 1) * c * hw];
                    ga.extend_from_slice(&s[..ca * hw]);
                    gb.extend_from_slice(&s[ca * hw..]);
                }
                acc(a, Tensor::new(self.shape(a), ga).expect("ga"));
                acc(b, Tensor::new(self.shape(b), gb).expect("gb"));
            }
            Op::Reshape(a) => acc(a, g.reshape(self.shape(a)).expect("reshape grad")),
        }
    }
}
