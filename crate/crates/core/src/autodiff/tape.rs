//! Define-by-run gradient tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. After
//! the forward pass, [`Tape::backward`] walks the records in reverse and
//! returns a [`Gradients`] table. Tapes are cheap to build and are meant to be
//! thrown away after each optimisation step.

use std::cell::{Ref, RefCell};

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Neg(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// How the smaller operand of a binary op maps onto the larger one.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs repeats every `n` elements of lhs
    Rhs(usize),
    /// lhs repeats every `n` elements of rhs
    Lhs(usize),
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let start = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[start..]
}

fn broadcast_rule(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    if lhs == rhs {
        return Ok((Broadcast::Same, lhs.to_vec()));
    }
    let (nl, nr) = (numel(lhs), numel(rhs));
    let suffix = |small: &[usize], big: &[usize]| {
        let s = strip_leading_ones(small);
        s.len() <= big.len() && big[big.len() - s.len()..] == *s
    };
    if nl >= nr && nr > 0 && suffix(rhs, lhs) {
        return Ok((Broadcast::Rhs(nr), lhs.to_vec()));
    }
    if nr > nl && nl > 0 && suffix(lhs, rhs) {
        return Ok((Broadcast::Lhs(nl), rhs.to_vec()));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn check_nan<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.has_nan() {
        Err(Error::NaN { op })
    } else {
        Ok(())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(64)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn node_value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Result<Var> {
        check_nan("param", &value)?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        check_nan("constant", &value)?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.node_value(v).clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.node_value(v).shape().to_vec()
    }

    /// First element of `v`; intended for scalars.
    pub fn item(&self, v: Var) -> T {
        self.node_value(v).item()
    }

    fn unary(&self, op_name: &'static str, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = {
            let xv = self.node_value(x);
            let data = xv.data().iter().map(|&a| f(a)).collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        check_nan(op_name, &out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, op, rg))
    }

    fn binary(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let out = {
            let av = self.node_value(a);
            let bv = self.node_value(b);
            let (rule, shape) = broadcast_rule(op_name, av.shape(), bv.shape())?;
            let (ad, bd) = (av.data(), bv.data());
            let data: Vec<T> = match rule {
                Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::Rhs(n) => ad
                    .chunks(n)
                    .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                    .collect(),
                Broadcast::Lhs(n) => bd
                    .chunks(n)
                    .flat_map(|row| ad.iter().zip(row).map(|(&x, &y)| f(x, y)))
                    .collect(),
            };
            Tensor::new(shape, data)?
        };
        check_nan(op_name, &out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, op, rg))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let av = self.node_value(a);
            let bv = self.node_value(b);
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let mut data = vec![T::zero(); n * m];
            let (ad, bd) = (av.data(), bv.data());
            for i in 0..n {
                let out_row = &mut data[i * m..(i + 1) * m];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    let b_row = &bd[p * m..(p + 1) * m];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::new(vec![n, m], data)?
        };
        check_nan("matmul", &out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise add; the smaller operand may broadcast over leading dims.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, Op::Maximum(a, b), T::max)
    }

    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, Op::Minimum(a, b), T::min)
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, c), |a| a * c)
    }

    pub fn offset(&self, x: Var, c: T) -> Result<Var> {
        self.unary("offset", x, Op::Offset(x), |a| a + c)
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary("neg", x, Op::Neg(x), |a| -a)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), T::tanh)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), T::exp)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log(x), T::ln)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x), |a| a * a)
    }

    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::Invalid(format!("clamp: lower bound {lo} above upper bound {hi}")));
        }
        self.unary("clamp", x, Op::Clamp(x, lo, hi), |a| a.max(lo).min(hi))
    }

    fn rowwise(&self, op_name: &'static str, x: Var, op: Op<T>, log: bool) -> Result<Var> {
        let out = {
            let xv = self.node_value(x);
            if xv.shape().is_empty() {
                return Err(Error::InvalidShape {
                    op: op_name,
                    shape: vec![],
                    reason: "needs at least one dimension",
                });
            }
            let width = *xv.shape().last().unwrap();
            let mut data = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(width.max(1)) {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NaN { op: op_name });
                }
                if log {
                    data.extend(crate::scalar::log_softmax(row));
                } else {
                    data.extend(crate::scalar::softmax(row));
                }
            }
            Tensor::new(xv.shape().to_vec(), data)?
        };
        let rg = self.requires_grad(x);
        Ok(self.push(out, op, rg))
    }

    /// Softmax over the last dimension. Inputs must be finite.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.rowwise("softmax", x, Op::Softmax(x), false)
    }

    /// Log-softmax over the last dimension, max-subtracted.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        self.rowwise("log_softmax", x, Op::LogSoftmax(x), true)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s: T = self.node_value(x).data().iter().copied().sum();
        let out = Tensor::scalar(s);
        check_nan("sum", &out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.node_value(x);
            if xv.is_empty() {
                return Err(Error::InvalidShape {
                    op: "mean",
                    shape: xv.shape().to_vec(),
                    reason: "empty tensor",
                });
            }
            let s: T = xv.data().iter().copied().sum();
            Tensor::scalar(s / T::lit(xv.len() as f64))
        };
        check_nan("mean", &out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Mean(x), rg))
    }

    /// Sum over the last dimension, dropping it.
    pub fn sum_last(&self, x: Var) -> Result<Var> {
        let out = {
            let xv = self.node_value(x);
            let shape = xv.shape();
            if shape.is_empty() {
                return Err(Error::InvalidShape {
                    op: "sum_last",
                    shape: vec![],
                    reason: "needs at least one dimension",
                });
            }
            let width = shape[shape.len() - 1];
            let out_shape = shape[..shape.len() - 1].to_vec();
            let data = if width == 0 {
                vec![T::zero(); numel(&out_shape)]
            } else {
                xv.data().chunks(width).map(|r| r.iter().copied().sum()).collect()
            };
            Tensor::new(out_shape, data)?
        };
        check_nan("sum_last", &out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SumLast(x), rg))
    }

    /// `out[i] = x[i, index[i]]` for a `[n, k]` input.
    pub fn gather(&self, x: Var, index: &[usize]) -> Result<Var> {
        let out = {
            let xv = self.node_value(x);
            let shape = xv.shape();
            if shape.len() != 2 || shape[0] != index.len() {
                return Err(Error::ShapeMismatch {
                    op: "gather",
                    lhs: shape.to_vec(),
                    rhs: vec![index.len()],
                });
            }
            let k = shape[1];
            let mut data = Vec::with_capacity(index.len());
            for (i, &j) in index.iter().enumerate() {
                if j >= k {
                    return Err(Error::IndexOutOfRange {
                        what: "gather",
                        index: j,
                        len: k,
                    });
                }
                data.push(xv.data()[i * k + j]);
            }
            Tensor::from_vec(data)
        };
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Gather(x, index.to_vec()), rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_retaining(loss, &[])
    }

    /// Like [`Tape::backward`], but also keeps the gradients of the listed
    /// intermediate nodes.
    pub fn backward_retaining(&self, loss: Var, keep: &[Var]) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape();
        if numel(loss_shape) != 1 || loss_shape.len() > 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut kept = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if keep.iter().any(|v| v.0 == idx) && !matches!(node.op, Op::Leaf) {
                kept.push((idx, g.clone()));
            }
            let out = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;

            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if needs(*a) {
                        let mut da = vec![T::zero(); n * k];
                        for i in 0..n {
                            let g_row = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let b_row = &bv.data()[p * m..(p + 1) * m];
                                let mut acc = T::zero();
                                for (&x, &y) in g_row.iter().zip(b_row) {
                                    acc += x * y;
                                }
                                da[i * k + p] = acc;
                            }
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); k * m];
                        for i in 0..n {
                            let g_row = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let aip = av.data()[i * k + p];
                                let db_row = &mut db[p * m..(p + 1) * m];
                                for (d, &x) in db_row.iter_mut().zip(g_row) {
                                    *d += aip * x;
                                }
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                    let (rule, _) = broadcast_rule("add", val(*a).shape(), val(*b).shape())?;
                    if needs(*a) {
                        let da = reduce_broadcast(&g, rule, true, val(*a).len(), |gi, _| gi);
                        accumulate(&mut grads[a.0], da);
                    }
                    if needs(*b) {
                        let db = reduce_broadcast(&g, rule, false, val(*b).len(), |gi, _| sign * gi);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (rule, _) = broadcast_rule("mul", av.shape(), bv.shape())?;
                    // other operand's value at each output position
                    let other_b = expand(bv.data(), rule, false, g.len());
                    let other_a = expand(av.data(), rule, true, g.len());
                    if needs(*a) {
                        let da = reduce_broadcast(&g, rule, true, av.len(), |gi, i| gi * other_b[i]);
                        accumulate(&mut grads[a.0], da);
                    }
                    if needs(*b) {
                        let db = reduce_broadcast(&g, rule, false, bv.len(), |gi, i| gi * other_a[i]);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let is_max = matches!(node.op, Op::Maximum(..));
                    let (av, bv) = (val(*a), val(*b));
                    let (rule, _) = broadcast_rule("maximum", av.shape(), bv.shape())?;
                    let ea = expand(av.data(), rule, true, g.len());
                    let eb = expand(bv.data(), rule, false, g.len());
                    let half = T::lit(0.5);
                    let share_a = |i: usize| {
                        let (x, y) = (ea[i], eb[i]);
                        if x == y {
                            half
                        } else if (x > y) == is_max {
                            T::one()
                        } else {
                            T::zero()
                        }
                    };
                    if needs(*a) {
                        let da = reduce_broadcast(&g, rule, true, av.len(), |gi, i| gi * share_a(i));
                        accumulate(&mut grads[a.0], da);
                    }
                    if needs(*b) {
                        let db = reduce_broadcast(&g, rule, false, bv.len(), |gi, i| {
                            gi * (T::one() - share_a(i))
                        });
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads[x.0], g.iter().map(|&gi| gi * c).collect());
                }
                Op::Offset(x) | Op::Reshape(x) => accumulate(&mut grads[x.0], g),
                Op::Neg(x) => accumulate(&mut grads[x.0], g.iter().map(|&gi| -gi).collect()),
                Op::Tanh(x) => {
                    let d = g
                        .iter()
                        .zip(out.data())
                        .map(|(&gi, &y)| gi * (T::one() - y * y))
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Exp(x) => {
                    let d = g.iter().zip(out.data()).map(|(&gi, &y)| gi * y).collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Log(x) => {
                    let d = g.iter().zip(val(*x).data()).map(|(&gi, &a)| gi / a).collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Square(x) => {
                    let two = T::lit(2.0);
                    let d = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&gi, &a)| two * a * gi)
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Clamp(x, lo, hi) => {
                    let d = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&gi, &a)| if a >= *lo && a <= *hi { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
                Op::Softmax(x) => {
                    let width = *out.shape().last().unwrap();
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(width).zip(out.data().chunks(width)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        d.extend(gr.iter().zip(yr).map(|(&gi, &y)| y * (gi - dot)));
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::LogSoftmax(x) => {
                    let width = *out.shape().last().unwrap();
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(width).zip(out.data().chunks(width)) {
                        let total: T = gr.iter().copied().sum();
                        d.extend(gr.iter().zip(yr).map(|(&gi, &y)| gi - y.exp() * total));
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Sum(x) => {
                    let n = val(*x).len();
                    accumulate(&mut grads[x.0], vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = val(*x).len();
                    let gi = g[0] / T::lit(n as f64);
                    accumulate(&mut grads[x.0], vec![gi; n]);
                }
                Op::SumLast(x) => {
                    let xv = val(*x);
                    let width = *xv.shape().last().unwrap();
                    let mut d = Vec::with_capacity(xv.len());
                    for &gi in &g {
                        d.extend(std::iter::repeat_n(gi, width));
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Gather(x, index) => {
                    let xv = val(*x);
                    let k = xv.shape()[1];
                    let mut d = vec![T::zero(); xv.len()];
                    for (i, (&j, &gi)) in index.iter().zip(&g).enumerate() {
                        d[i * k + j] = gi;
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
        }

        for (idx, g) in kept {
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g)))
            .map(Option::transpose)
            .collect::<Result<Vec<_>>>()?;
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, d: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        None => *slot = Some(d),
    }
}

/// Values of an operand laid out at every output position.
fn expand<T: Real>(data: &[T], rule: Broadcast, is_lhs: bool, n_out: usize) -> Vec<T> {
    match (rule, is_lhs) {
        (Broadcast::Same, _) | (Broadcast::Rhs(_), true) | (Broadcast::Lhs(_), false) => data.to_vec(),
        _ => (0..n_out).map(|i| data[i % data.len()]).collect(),
    }
}

/// Gradient for one operand, summing over broadcast positions.
fn reduce_broadcast<T: Real>(
    g: &[T],
    rule: Broadcast,
    is_lhs: bool,
    len: usize,
    f: impl Fn(T, usize) -> T,
) -> Vec<T> {
    let broadcasted = matches!((rule, is_lhs), (Broadcast::Rhs(_), false) | (Broadcast::Lhs(_), true));
    if !broadcasted {
        return g.iter().enumerate().map(|(i, &gi)| f(gi, i)).collect();
    }
    let mut d = vec![T::zero(); len];
    for (i, &gi) in g.iter().enumerate() {
        d[i % len] += f(gi, i);
    }
    d
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
