//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations on [`Var`] handles record nodes on a [`Tape`]; calling
//! [`Tape::backward`] walks the tape once in reverse, accumulating
//! vector-Jacobian products into every node that requires a gradient.
//!
//! Operators whose gradient is a closed form rather than a trace of their
//! forward computation implement [`CustomOp`] and are recorded as a single
//! node via [`Tape::register_custom_op`] / [`Tape::apply_custom`]. Whatever
//! work the custom forward does internally never reaches the tape.
//!
//! ```
//! use toksel::autodiff::Tape;
//! use toksel::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(&x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    label: &'static str,
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Operator with a hand-written backward rule.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Computes the output and whatever the backward rule needs to keep.
    fn forward(&self, inputs: &[&Tensor]) -> Result<CustomForward>;

    /// Maps (saved values, upstream gradient) to one gradient per input.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, saved: &[Tensor], upstream: &Tensor) -> Vec<Option<Tensor>>;
}

pub struct CustomForward {
    pub output: Tensor,
    pub saved: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OpId(usize);

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    custom: RefCell<Vec<Rc<dyn CustomOp>>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of its shape when nothing flowed to it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf("param", value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf("const", value, false)
    }

    fn leaf(&self, label: &'static str, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            label,
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels of all recorded nodes, in recording order.
    pub fn labels(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.label).collect()
    }

    fn record(
        &self,
        label: &'static str,
        value: Tensor,
        inputs: &[Var<'_>],
        backward: impl Fn(&Tensor, &[Rc<Tensor>], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            label,
            value: Rc::new(value),
            inputs: ids,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn register_custom_op(&self, op: impl CustomOp + 'static) -> OpId {
        let mut ops = self.custom.borrow_mut();
        ops.push(Rc::new(op));
        OpId(ops.len() - 1)
    }

    /// Runs a registered custom op and records it as one node.
    ///
    /// Returns the output handle and the values the op saved for backward.
    pub fn apply_custom<'t>(
        &'t self,
        id: OpId,
        inputs: &[Var<'t>],
    ) -> Result<(Var<'t>, Rc<Vec<Tensor>>)> {
        let op = self
            .custom
            .borrow()
            .get(id.0)
            .cloned()
            .ok_or_else(|| Error::Input(format!("unregistered custom op {id:?}")))?;
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let CustomForward { output, saved } = op.forward(&refs)?;
        let saved = Rc::new(saved);
        let keep = Rc::clone(&saved);
        let label = op.name();
        let var = self.record(label, output, inputs, move |g, _, _| op.backward(&keep, g));
        Ok((var, saved))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::dim("backward", out.value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::ones(out.value.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> = node
                .inputs
                .iter()
                .map(|&i| Rc::clone(&nodes[i].value))
                .collect();
            let contributions = backward(&upstream, &inputs, &node.value);
            for (&input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(c.shape(), nodes[input].value.shape(), "{}", node.label);
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(c.data())
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(c),
                }
            }
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    /// rhs indexes the leading axes of lhs; each rhs element covers `block` entries.
    Prefix(usize),
    /// rhs matches the trailing axes of lhs and repeats every `len` entries.
    Suffix(usize),
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Prefix(block) => i / block,
            Bcast::Suffix(len) => i % len,
        }
    }

    fn reduce(self, full: Vec<f64>, rhs_shape: &[usize]) -> Tensor {
        let n: usize = rhs_shape.iter().product();
        let data = match self {
            Bcast::Same => full,
            _ => {
                let mut out = vec![0.0; n];
                for (i, v) in full.into_iter().enumerate() {
                    out[self.index(i)] += v;
                }
                out
            }
        };
        Tensor::new(rhs_shape.to_vec(), data).expect("reduced gradient shape")
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(
        &self,
        label: &'static str,
        value: Tensor,
        local: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        // local(x, y) is dy/dx evaluated at input x with output y
        self.tape
            .record(label, value, &[*self], move |g, inp, out| {
                let d = inp[0]
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| g * local(x, y))
                    .collect();
                vec![Some(
                    Tensor::new(inp[0].shape().to_vec(), d).expect("unary grad"),
                )]
            })
    }

    fn binary(&self, rhs: &Var<'t>, op: BinOp, bc: Bcast) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = b.data()[bc.index(i)];
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(a.shape().to_vec(), out).expect("binary shape");
        let label = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        self.tape
            .record(label, value, &[*self, *rhs], move |g, inp, _| {
                let (a, b) = (&inp[0], &inp[1]);
                let mut ga = Vec::with_capacity(a.numel());
                let mut gb = Vec::with_capacity(a.numel());
                for (i, (&gi, &x)) in g.data().iter().zip(a.data()).enumerate() {
                    let y = b.data()[bc.index(i)];
                    let (da, db) = match op {
                        BinOp::Add => (gi, gi),
                        BinOp::Sub => (gi, -gi),
                        BinOp::Mul => (gi * y, gi * x),
                        BinOp::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga.push(da);
                    gb.push(db);
                }
                vec![
                    Some(Tensor::new(a.shape().to_vec(), ga).expect("binary grad")),
                    Some(bc.reduce(gb, b.shape())),
                ]
            })
    }

    fn same_or_scalar(&self, rhs: &Var<'t>, op: &'static str) -> Result<Bcast> {
        let (a, b) = (self.shape(), rhs.shape());
        if a == b {
            Ok(Bcast::Same)
        } else if b.is_empty() || (b.len() == 1 && b[0] == 1) {
            Ok(Bcast::Scalar)
        } else {
            Err(Error::dim(op, &a, &b))
        }
    }

    /// Elementwise sum; `rhs` must have the same shape or be a scalar.
    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let bc = self.same_or_scalar(rhs, "add")?;
        Ok(self.binary(rhs, BinOp::Add, bc))
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let bc = self.same_or_scalar(rhs, "sub")?;
        Ok(self.binary(rhs, BinOp::Sub, bc))
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let bc = self.same_or_scalar(rhs, "mul")?;
        Ok(self.binary(rhs, BinOp::Mul, bc))
    }

    pub fn div(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let bc = self.same_or_scalar(rhs, "div")?;
        Ok(self.binary(rhs, BinOp::Div, bc))
    }

    fn prefix(&self, rhs: &Var<'t>, op: &'static str) -> Result<Bcast> {
        let (a, b) = (self.shape(), rhs.shape());
        if b.len() > a.len() || a[..b.len()] != b[..] {
            return Err(Error::dim(op, &a, &b));
        }
        Ok(Bcast::Prefix(a[b.len()..].iter().product()))
    }

    /// Scales each leading-axis slice by the matching `rhs` entry
    /// (`[B, N, D] * [B, N]`).
    pub fn mul_rows(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let bc = self.prefix(rhs, "mul_rows")?;
        Ok(self.binary(rhs, BinOp::Mul, bc))
    }

    /// Divides each leading-axis slice by the matching `rhs` entry.
    pub fn div_rows(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let bc = self.prefix(rhs, "div_rows")?;
        Ok(self.binary(rhs, BinOp::Div, bc))
    }

    /// Adds `rhs` along the trailing axes (`[B, H] + [H]`).
    pub fn add_bias(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), rhs.shape());
        if b.len() > a.len() || a[a.len() - b.len()..] != b[..] {
            return Err(Error::dim("add_bias", &a, &b));
        }
        Ok(self.binary(rhs, BinOp::Add, Bcast::Suffix(b.iter().product())))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = self.value().map(|x| x * c);
        self.unary("scale", value, move |_, _| c)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let value = self.value().map(sigmoid);
        self.unary("sigmoid", value, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Var<'t> {
        let value = self.value().map(|x| x.max(0.0));
        self.unary("relu", value, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(&self) -> Result<Var<'t>> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = v.map(f64::ln);
        Ok(self.unary("log", value, |x, _| 1.0 / x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let value = self.value().map(|x| x.clamp(lo, hi));
        self.unary("clamp", value, move |x, _| {
            if (lo..=hi).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&rhs.value())?;
        Ok(self
            .tape
            .record("matmul", value, &[*self, *rhs], |g, inp, _| {
                let (a, b) = (&inp[0], &inp[1]);
                vec![
                    Some(matmul_grad_lhs(g, a, b)),
                    Some(matmul_grad_rhs(g, a, b)),
                ]
            }))
    }

    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let value = self.value().transpose_last2()?;
        Ok(self.tape.record("transpose", value, &[*self], |g, _, _| {
            vec![Some(g.transpose_last2().expect("transpose grad"))]
        }))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.record("reshape", value, &[*self], |g, inp, _| {
            vec![Some(g.reshape(inp[0].shape()).expect("reshape grad"))]
        }))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let value = self.value().sum_axis(axis)?;
        Ok(self.tape.record("sum", value, &[*self], move |g, inp, _| {
            let len = inp[0].shape()[axis];
            vec![Some(g.expand_axis(axis, len).expect("sum grad"))]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let value = self.value().mean_axis(axis)?;
        Ok(self.tape.record("mean", value, &[*self], move |g, inp, _| {
            let len = inp[0].shape()[axis];
            let spread = g.expand_axis(axis, len).expect("mean grad");
            vec![Some(spread.map(|x| x / len as f64))]
        }))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.record("sum_all", value, &[*self], |g, inp, _| {
            vec![Some(Tensor::full(inp[0].shape(), g.item()))]
        })
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Picks one entry per row of a `[B, C]` tensor: `out[b] = x[b, idx[b]]`.
    pub fn gather_last(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, cols) = rows_cols(&v, "gather_last")?;
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(Error::Input(format!(
                "gather indices {idx:?} invalid for shape {:?}",
                v.shape()
            )));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| v.data()[r * cols + c])
            .collect();
        let value = Tensor::new([rows], data)?;
        let idx = idx.to_vec();
        Ok(self
            .tape
            .record("gather", value, &[*self], move |g, inp, _| {
                let mut out = Tensor::zeros(inp[0].shape());
                for (r, &c) in idx.iter().enumerate() {
                    out.data_mut()[r * cols + c] = g.data()[r];
                }
                vec![Some(out)]
            }))
    }

    /// Row-wise `log Σ exp` over the last axis of a `[B, C]` tensor.
    pub fn logsumexp_last(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (_, cols) = rows_cols(&v, "logsumexp")?;
        let data = v.data().chunks(cols).map(logsumexp).collect();
        let value = Tensor::new([v.shape()[0]], data)?;
        Ok(self
            .tape
            .record("logsumexp", value, &[*self], move |g, inp, out| {
                let mut d = Vec::with_capacity(inp[0].numel());
                for ((row, &lse), &gr) in inp[0].data().chunks(cols).zip(out.data()).zip(g.data()) {
                    d.extend(row.iter().map(|&x| gr * (x - lse).exp()));
                }
                vec![Some(
                    Tensor::new(inp[0].shape().to_vec(), d).expect("lse grad"),
                )]
            }))
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        let (outer, _, inner) = values[0].axis_split(axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(first.tape.record("concat", value, parts, move |g, inp, _| {
            let mut offset = 0;
            inp.iter()
                .zip(&lens)
                .map(|(x, &len)| {
                    let mut d = Vec::with_capacity(x.numel());
                    for o in 0..outer {
                        d.extend_from_slice(
                            &g.data()[(o * total + offset) * inner..][..len * inner],
                        );
                    }
                    offset += len;
                    Some(Tensor::new(x.shape().to_vec(), d).expect("concat grad"))
                })
                .collect()
        }))
    }
}

fn rows_cols(v: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match v.shape() {
        &[r, c] if c > 0 => Ok((r, c)),
        s => Err(Error::dim(op, s, &[])),
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn matmul_grad_lhs(g: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    let bt = b.transpose_last2().expect("matmul grad");
    let full = g.matmul(&bt).expect("matmul grad");
    if a.rank() == 2 && full.rank() > 2 {
        // lhs was shared across the batch
        let (m, p) = (a.shape()[0], a.shape()[1]);
        let flat = full
            .reshape([full.numel() / (m * p), m, p])
            .expect("matmul grad");
        flat.sum_axis(0).expect("matmul grad")
    } else {
        full
    }
}

fn matmul_grad_rhs(g: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    if b.rank() == 2 && a.rank() > 2 {
        let p = a.shape()[a.rank() - 1];
        let n = g.shape()[g.rank() - 1];
        let a2 = a.reshape([a.numel() / p, p]).expect("matmul grad");
        let g2 = g.reshape([g.numel() / n, n]).expect("matmul grad");
        return a2
            .transpose_last2()
            .expect("matmul grad")
            .matmul(&g2)
            .expect("matmul grad");
    }
    let full = a
        .transpose_last2()
        .expect("matmul grad")
        .matmul(g)
        .expect("matmul grad");
    if b.rank() == 2 && full.rank() > 2 {
        let (p, n) = (b.shape()[0], b.shape()[1]);
        let flat = full
            .reshape([full.numel() / (p * n), p, n])
            .expect("matmul grad");
        flat.sum_axis(0).expect("matmul grad")
    } else {
        full
    }
}
