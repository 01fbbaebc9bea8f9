//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op pushes one node
//! holding its output value and the handles of its inputs; [`Tape::backward`]
//! walks the nodes in reverse push order and accumulates adjoints.
//!
//! Parameters are borrowed, not copied, so binding a model to a tape is free.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scalar kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Shift(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    StackRows(Vec<Var>),
    RepeatRows(Var),
    ConcatCols(Var, Var),
    StraightThrough(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<usize>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over a slice.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of parameters registered so far.
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a learnable tensor. Parameters are numbered in call order.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Param,
        });
        self.params.push(self.nodes.len() - 1);
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients still flow to it but it is not a parameter.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, n) = av.rows_cols();
        let (n2, p) = if bv.rank() == 1 {
            (bv.len(), 1)
        } else {
            bv.rows_cols()
        };
        if av.rank() > 2 || bv.rank() > 2 || av.rank() == 0 || bv.rank() == 0 || n != n2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * p];
        tensor::gemm_nn(av.data(), bv.data(), &mut out, m, n, p);
        let shape = match (av.rank(), bv.rank()) {
            (2, 2) => vec![m, p],
            (2, 1) => vec![m],
            (1, 2) => vec![p],
            _ => vec![],
        };
        let t = Tensor::new(shape, out)?;
        self.push("matmul", t, Op::MatMul(a, b))
    }

    /// `x·Wᵀ + b` with `W: [out×in]`, `b: [out]`, and `x` either `[in]` or
    /// `[T×in]` (bias broadcast over rows).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (rows, fan_in) = xv.rows_cols();
        let (out_w, in_w) = wv.rows_cols();
        if wv.rank() != 2 || xv.rank() == 0 || xv.rank() > 2 || fan_in != in_w {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        if bv.rank() != 1 || bv.len() != out_w {
            return Err(Error::shape("linear(bias)", wv.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(rows * out_w);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        tensor::gemm_nt(xv.data(), wv.data(), &mut out, rows, fan_in, out_w);
        let shape = if xv.rank() == 1 {
            vec![out_w]
        } else {
            vec![rows, out_w]
        };
        let t = Tensor::new(shape, out)?;
        self.push("linear", t, Op::Linear(x, w, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (name, t) = match kind {
            Unary::Tanh => ("tanh", av.map(f64::tanh)),
            Unary::Sigmoid => ("sigmoid", av.map(sigmoid)),
            Unary::Exp => ("exp", av.map(f64::exp)),
            Unary::Log => {
                if let Some(bad) = av.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        msg: format!("non-positive input {bad}"),
                    });
                }
                ("log", av.map(f64::ln))
            }
        };
        self.push(name, t, Op::Unary(kind, a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// Dispatches on `kind`; binary kinds require `b`.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| Error::Contract(format!("{kind:?} needs a second operand")))
        };
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Tanh => self.tanh(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Exp => self.exp(a),
            Elementwise::Log => self.log(a),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * c);
        self.push("scale", t, Op::Scale(a, c))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v + c);
        self.push("shift", t, Op::Shift(a))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(floor));
        self.push("clamp_min", t, Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 1 {
            return Err(Error::shape("softmax", av.shape(), &[av.len()]));
        }
        if !av.is_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let t = Tensor::vector(softmax_slice(av.data()));
        self.push("softmax", t, Op::Softmax(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::shape("concat", v.shape(), &[v.len()]));
            }
            data.extend_from_slice(v.data());
        }
        if data.is_empty() {
            return Err(Error::Contract("concat of nothing".into()));
        }
        self.push("concat", Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 1 || start + len > av.len() || len == 0 {
            return Err(Error::shape("slice", av.shape(), &[start, len]));
        }
        let t = Tensor::vector(av.data()[start..start + len].to_vec());
        self.push("slice", t, Op::Slice(a, start))
    }

    /// Stacks equal-length vectors into a `[T×H]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Contract("stack_rows of nothing".into()))?;
        let width = self.value(*first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.len() != width {
                return Err(Error::shape("stack_rows", &[width], v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let t = Tensor::matrix(rows.len(), width, data)?;
        self.push("stack_rows", t, Op::StackRows(rows.to_vec()))
    }

    /// Repeats a vector as every row of a `[times×k]` matrix.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 1 || times == 0 {
            return Err(Error::shape("repeat_rows", av.shape(), &[times]));
        }
        let data = av.data().repeat(times);
        let t = Tensor::matrix(times, av.len(), data)?;
        self.push("repeat_rows", t, Op::RepeatRows(a))
    }

    /// Joins `[T×p]` and `[T×q]` side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("concat_cols", av.shape(), bv.shape()));
        }
        let (rows, p) = av.rows_cols();
        let q = bv.shape()[1];
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let t = Tensor::matrix(rows, p + q, data)?;
        self.push("concat_cols", t, Op::ConcatCols(a, b))
    }

    /// Forward value is the one-hot of the argmax; the backward pass treats
    /// the op as the identity.
    pub fn straight_through(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 1 {
            return Err(Error::shape("straight_through", av.shape(), &[av.len()]));
        }
        let t = Tensor::one_hot(av.len(), av.argmax());
        self.push("straight_through", t, Op::StraightThrough(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &*node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = av.rows_cols();
                let p = if bv.rank() == 1 { 1 } else { bv.shape()[1] };
                tensor::gemm_nt(g.data(), bv.data(), grad_slot(grads, *a, av.shape()), m, p, n);
                tensor::gemm_tn(av.data(), g.data(), grad_slot(grads, *b, bv.shape()), m, n, p);
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, fan_in) = xv.rows_cols();
                let fan_out = wv.shape()[0];
                tensor::gemm_nn(g.data(), wv.data(), grad_slot(grads, *x, xv.shape()), rows, fan_out, fan_in);
                tensor::gemm_tn(g.data(), xv.data(), grad_slot(grads, *w, wv.shape()), rows, fan_out, fan_in);
                let gb = grad_slot(grads, *b, &[fan_out]);
                for r in 0..rows {
                    tensor::axpy(1.0, &g.data()[r * fan_out..(r + 1) * fan_out], gb);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, zip_map(g, bv, |gi, bi| gi * bi));
                accumulate(grads, *b, zip_map(g, av, |gi, ai| gi * ai));
            }
            Op::Unary(kind, a) => {
                let d = match kind {
                    Unary::Tanh => zip_map(g, out, |gi, y| gi * (1.0 - y * y)),
                    Unary::Sigmoid => zip_map(g, out, |gi, y| gi * y * (1.0 - y)),
                    Unary::Exp => zip_map(g, out, |gi, y| gi * y),
                    Unary::Log => zip_map(g, self.value(*a), |gi, x| gi / x),
                };
                accumulate(grads, *a, d);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::Shift(a) => accumulate(grads, *a, g.clone()),
            Op::ClampMin(a, floor) => {
                let d = zip_map(g, self.value(*a), |gi, x| if x > *floor { gi } else { 0.0 });
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, Tensor::filled(av.shape(), g.item()));
            }
            Op::Softmax(a) => {
                let inner = tensor::dot(g.data(), out.data());
                accumulate(grads, *a, zip_map(g, out, |gi, y| y * (gi - inner)));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let d = Tensor::vector(g.data()[offset..offset + n].to_vec());
                    accumulate(grads, p, d);
                    offset += n;
                }
            }
            Op::Slice(a, start) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.shape());
                d.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, d);
            }
            Op::StackRows(rows) => {
                for (r, &v) in rows.iter().enumerate() {
                    accumulate(grads, v, Tensor::vector(g.row(r).to_vec()));
                }
            }
            Op::RepeatRows(a) => {
                let k = self.value(*a).len();
                let mut d = vec![0.0; k];
                for r in 0..g.rows_cols().0 {
                    tensor::axpy(1.0, g.row(r), &mut d);
                }
                accumulate(grads, *a, Tensor::vector(d));
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (rows, p) = av.rows_cols();
                let q = bv.shape()[1];
                let mut ga = Vec::with_capacity(rows * p);
                let mut gb = Vec::with_capacity(rows * q);
                for r in 0..rows {
                    let gr = g.row(r);
                    ga.extend_from_slice(&gr[..p]);
                    gb.extend_from_slice(&gr[p..]);
                }
                accumulate_raw(grads, *a, av.shape(), ga);
                accumulate_raw(grads, *b, bv.shape(), gb);
            }
            Op::StraightThrough(a) => accumulate(grads, *a, g.clone()),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shapes agree")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Gradient buffer of `v`, zero-initialised on first use.
fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut [f64] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn accumulate_raw(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    let t = Tensor::new(shape.to_vec(), data).expect("gradient shape matches value");
    accumulate(grads, v, t);
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to any node; zero if the node is off the loss path.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads
            .get(v.0)
            .and_then(Option::clone)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> Vec<Tensor> {
        self.params.iter().map(|&n| self.wrt(Var(n))).collect()
    }
}
