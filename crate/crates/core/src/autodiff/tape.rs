//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a record to the [`Tape`].
//! Backward rules are themselves written in terms of tape operations, so the
//! gradients produced with `create_graph = true` are ordinary tape nodes and
//! can be differentiated again. Without `create_graph` the backward records
//! are discarded once the gradient values have been read out.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    ClampMin(NodeId, f64),
    Ln(NodeId),
    Recip(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    GatherRows(NodeId, Rc<[usize]>),
    ScatterRows(NodeId, Rc<[usize]>),
    Gather(NodeId, Rc<[Option<usize>]>),
    ScatterAdd(NodeId, Rc<[Option<usize>]>),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Transpose(a) | Relu(a) | Sigmoid(a) | SoftmaxRows(a) | ClampMin(a, _) | Ln(a)
            | Recip(a) | Exp(a) | Sum(a) | Mean(a) | Square(a) | Scale(a, _)
            | GatherRows(a, _) | ScatterRows(a, _) | Gather(a, _) | ScatterAdd(a, _)
            | Reshape(a) => vec![*a],
            Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of operations. Inputs always precede the records that use them.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn elementwise_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() && (!b.is_scalar() || b.shape().len() > a.shape().len()) {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let n: usize = shape.iter().product();
    let data = match (ad.len() == n, bd.len() == n) {
        (true, true) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => ad.iter().map(|&x| f(x, bd[0])).collect(),
        (false, true) => bd.iter().map(|&y| f(ad[0], y)).collect(),
        (false, false) => vec![f(ad[0], bd[0])],
    };
    Tensor::from_parts(shape, data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn softmax_rows_values(a: &Tensor) -> Tensor {
    let (rows, cols) = a.matrix_dims();
    let mut out = Vec::with_capacity(a.numel());
    for r in 0..rows {
        let row = &a.data()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf that gradients may be taken with respect to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(Op::Leaf, value)
    }

    /// Records a leaf that is treated as a constant by callers.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_unchecked(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op: Op, name: &'static str, value: Tensor) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(op, value))
    }

    fn var(&self, id: NodeId) -> Var<'_> {
        Var { tape: self, id }
    }

    fn value_of(&self, id: NodeId) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].id].value;
            let (rows, _) = require_matrix("concat", first)?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let v = &nodes[p.id].value;
                let (r, c) = require_matrix("concat", v)?;
                if r != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            Tensor::from_parts(vec![rows, total], data)
        };
        self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), "concat", value)
    }

    /// Gradients of a scalar `output` with respect to each tensor in `wrt`.
    ///
    /// With `create_graph` the returned gradients stay on the tape and can be
    /// differentiated again; otherwise they are detached constants. A `wrt`
    /// tensor that `output` does not depend on gets a zero gradient.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        if !self.owns(&output) || wrt.iter().any(|w| !self.owns(w)) {
            return Err(Error::contract("grad: tensor is not recorded on this tape"));
        }
        let out_shape = self.value_of(output.id).shape().to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::contract(format!(
                "grad: output must be a scalar, got shape {out_shape:?}"
            )));
        }

        let n = output.id + 1;
        let mut reach = vec![false; n];
        for w in wrt {
            if w.id < n {
                reach[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !reach[i] {
                    reach[i] = nodes[i].op.inputs().iter().any(|&j| reach[j]);
                }
            }
        }

        let mark = self.len();
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        if reach[output.id] {
            grads[output.id] = Some(self.constant(Tensor::ones(&out_shape)));
        }
        for i in (0..n).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            for (input, contribution) in self.vjp(i, &op, g, &reach)? {
                grads[input] = Some(match grads[input] {
                    None => contribution,
                    Some(prev) => prev.add(contribution)?,
                });
            }
        }

        let results: Vec<Tensor> = wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g.value(),
                None => Tensor::zeros(&w.shape()),
            })
            .collect();
        if create_graph {
            Ok(wrt
                .iter()
                .zip(results)
                .map(|(w, value)| match grads.get(w.id).copied().flatten() {
                    Some(g) => g,
                    None => self.constant(value),
                })
                .collect())
        } else {
            self.nodes.borrow_mut().truncate(mark);
            Ok(results.into_iter().map(|v| self.constant(v)).collect())
        }
    }

    /// Gradient values without keeping any backward records.
    pub fn grad_values<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let grads = self.grad(output, wrt, false)?;
        let values = grads.iter().map(Var::value).collect();
        self.nodes.borrow_mut().truncate(mark);
        Ok(values)
    }

    /// Vector-Jacobian products of node `id` for every input that reaches a
    /// gradient target. Built from tape ops so the result is differentiable.
    fn vjp<'t>(
        &'t self,
        id: NodeId,
        op: &Op,
        g: Var<'t>,
        reach: &[bool],
    ) -> Result<Vec<(NodeId, Var<'t>)>> {
        let mut out = Vec::with_capacity(2);
        let shape_of = |j: NodeId| self.value_of(j).shape().to_vec();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if reach[*a] {
                    out.push((*a, g.reduce_to(&shape_of(*a))?));
                }
                if reach[*b] {
                    out.push((*b, g.reduce_to(&shape_of(*b))?));
                }
            }
            Op::Sub(a, b) => {
                if reach[*a] {
                    out.push((*a, g.reduce_to(&shape_of(*a))?));
                }
                if reach[*b] {
                    out.push((*b, g.scale(-1.0)?.reduce_to(&shape_of(*b))?));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.var(*a), self.var(*b));
                if reach[*a] {
                    out.push((*a, g.mul(vb)?.reduce_to(&shape_of(*a))?));
                }
                if reach[*b] {
                    out.push((*b, g.mul(va)?.reduce_to(&shape_of(*b))?));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.var(*a), self.var(*b));
                if reach[*a] {
                    out.push((*a, g.matmul(vb.transpose()?)?));
                }
                if reach[*b] {
                    out.push((*b, va.transpose()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose()?)),
            Op::Relu(a) => {
                let mask = map(&self.value_of(*a), |x| if x > 0.0 { 1.0 } else { 0.0 });
                out.push((*a, g.mul(self.constant(mask))?));
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                let mask = map(&self.value_of(*a), |x| if x >= floor { 1.0 } else { 0.0 });
                out.push((*a, g.mul(self.constant(mask))?));
            }
            Op::Sigmoid(a) => {
                let s = self.var(id);
                let one_minus = self.scalar(1.0).sub(s)?;
                out.push((*a, g.mul(s)?.mul(one_minus)?));
            }
            Op::SoftmaxRows(a) => {
                let s = self.var(id);
                let (_, cols) = self.value_of(id).matrix_dims();
                let gs = g.mul(s)?;
                let row_dot = gs.row_sum()?;
                let spread = row_dot.matmul(self.constant(Tensor::ones(&[1, cols])))?;
                let spread = spread.reshape(&shape_of(id))?;
                out.push((*a, s.mul(g.sub(spread)?)?));
            }
            Op::Ln(a) => out.push((*a, g.mul(self.var(*a).recip()?)?)),
            Op::Recip(a) => {
                let r = self.var(id);
                out.push((*a, g.mul(r)?.mul(r)?.scale(-1.0)?));
            }
            Op::Exp(a) => out.push((*a, g.mul(self.var(id))?)),
            Op::Sum(a) => {
                let ones = self.constant(Tensor::ones(&shape_of(*a)));
                out.push((*a, ones.mul(g)?));
            }
            Op::Mean(a) => {
                let shape = shape_of(*a);
                let n = shape.iter().product::<usize>() as f64;
                let ones = self.constant(Tensor::ones(&shape));
                out.push((*a, ones.mul(g)?.scale(1.0 / n)?));
            }
            Op::Square(a) => out.push((*a, g.mul(self.var(*a))?.scale(2.0)?)),
            Op::Scale(a, c) => out.push((*a, g.scale(*c)?)),
            Op::GatherRows(a, idx) => {
                let rows = shape_of(*a)[0];
                out.push((*a, g.scatter_rows_shared(idx.clone(), rows)?));
            }
            Op::ScatterRows(a, idx) => out.push((*a, g.gather_rows_shared(idx.clone())?)),
            Op::Gather(a, map) => {
                out.push((*a, g.scatter_add_shared(map.clone(), &shape_of(*a))?));
            }
            Op::ScatterAdd(a, map) => {
                out.push((*a, g.gather_shared(map.clone(), &shape_of(*a))?));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = shape_of(p)[1];
                    if reach[p] {
                        out.push((p, g.slice_cols(offset, offset + width)?));
                    }
                    offset += width;
                }
            }
            Op::Reshape(a) => out.push((*a, g.reshape(&shape_of(*a))?)),
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    /// First element of the value; intended for scalars.
    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// Copy of this value as a new leaf with no history.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands are recorded on different tapes"))
        }
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let shape = elementwise_shape(name, &a, &b)?;
            zip_broadcast(&a, &b, shape, f)
        };
        self.tape.push(op, name, value)
    }

    fn unary(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = map(&self.tape.value_of(self.id), f);
        self.tape.push(op, name, value)
    }

    /// Elementwise sum; one side may be a single-element tensor.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    /// Elementwise product; one side may be a single-element tensor.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.add(self.tape.scalar(c))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = matmul_values(&self.tape.value_of(self.id), &self.tape.value_of(other.id))?;
        self.tape.push(Op::MatMul(self.id, other.id), "matmul", value)
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let (r, c) = require_matrix("transpose", &a)?;
            let d = a.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        };
        self.tape.push(Op::Transpose(self.id), "transpose", value)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let value = softmax_rows_values(&self.tape.value_of(self.id));
        self.tape.push(Op::SoftmaxRows(self.id), "softmax", value)
    }

    pub fn clamp_min(&self, floor: f64) -> Result<Var<'t>> {
        self.unary("clamp_min", Op::ClampMin(self.id, floor), |x| x.max(floor))
    }

    /// Natural logarithm without clamping; non-positive inputs are an error.
    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary("log", Op::Ln(self.id), f64::ln)
    }

    /// Logarithm of values clamped below at [`LOG_FLOOR`].
    pub fn log(&self) -> Result<Var<'t>> {
        self.clamp_min(LOG_FLOOR)?.ln()
    }

    pub fn recip(&self) -> Result<Var<'t>> {
        self.unary("recip", Op::Recip(self.id), |x| 1.0 / x)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |x| x * x)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |x| x * c)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s: f64 = self.tape.value_of(self.id).data().iter().sum();
        self.tape.push(Op::Sum(self.id), "sum", Tensor::scalar(s))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Result<Var<'t>> {
        let m = {
            let v = self.tape.value_of(self.id);
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        self.tape.push(Op::Mean(self.id), "mean", Tensor::scalar(m))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if shape.iter().product::<usize>() != a.numel() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            Tensor::from_parts(shape.to_vec(), a.data().to_vec())
        };
        self.tape.push(Op::Reshape(self.id), "reshape", value)
    }

    /// Row sums of a matrix as an `[rows, 1]` column.
    pub fn row_sum(&self) -> Result<Var<'t>> {
        let (rows, cols) = self.tape.value_of(self.id).matrix_dims();
        let m = self.reshape(&[rows, cols])?;
        m.matmul(self.tape.constant(Tensor::ones(&[cols, 1])))
    }

    /// Row means of a matrix as an `[rows, 1]` column.
    pub fn row_mean(&self) -> Result<Var<'t>> {
        let (_, cols) = self.tape.value_of(self.id).matrix_dims();
        self.row_sum()?.scale(1.0 / cols as f64)
    }

    /// Output row `i` is input row `indices[i]`; rows may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        self.gather_rows_shared(indices.into())
    }

    fn gather_rows_shared(&self, indices: Rc<[usize]>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let (rows, _) = require_matrix("gather_rows", &a)?;
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(Error::contract(format!(
                    "gather_rows: index {bad} out of range for {rows} rows"
                )));
            }
            if indices.is_empty() {
                return Err(Error::contract("gather_rows: empty index list"));
            }
            a.select_rows(&indices)
        };
        self.tape.push(Op::GatherRows(self.id, indices), "gather_rows", value)
    }

    /// Adds input row `i` into output row `indices[i]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Var<'t>> {
        self.scatter_rows_shared(indices.into(), rows)
    }

    fn scatter_rows_shared(&self, indices: Rc<[usize]>, rows: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            let (n, cols) = require_matrix("scatter_rows", &a)?;
            if n != indices.len() || indices.iter().any(|&i| i >= rows) {
                return Err(Error::contract("scatter_rows: indices do not match input rows"));
            }
            let mut out = vec![0.0; rows * cols];
            for (r, &dst) in indices.iter().enumerate() {
                for (o, &v) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(a.row(r)) {
                    *o += v;
                }
            }
            Tensor::from_parts(vec![rows, cols], out)
        };
        self.tape.push(Op::ScatterRows(self.id, indices), "scatter_rows", value)
    }

    /// Flat gather: output element `i` is input element `map[i]`, or zero for `None`.
    pub fn gather(&self, map: Vec<Option<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        self.gather_shared(map.into(), shape)
    }

    fn gather_shared(&self, map: Rc<[Option<usize>]>, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if shape.iter().product::<usize>() != map.len() {
                return Err(Error::contract("gather: map length does not match shape"));
            }
            let d = a.data();
            let mut out = Vec::with_capacity(map.len());
            for m in map.iter() {
                out.push(match *m {
                    Some(i) if i < d.len() => d[i],
                    Some(i) => {
                        return Err(Error::contract(format!("gather: index {i} out of range")))
                    }
                    None => 0.0,
                });
            }
            Tensor::from_parts(shape.to_vec(), out)
        };
        self.tape.push(Op::Gather(self.id, map), "gather", value)
    }

    /// Flat scatter-add: input element `i` is added to output element `map[i]`.
    pub fn scatter_add(&self, map: Vec<Option<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        self.scatter_add_shared(map.into(), shape)
    }

    fn scatter_add_shared(&self, map: Rc<[Option<usize>]>, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if a.numel() != map.len() {
                return Err(Error::contract("scatter_add: map length does not match input"));
            }
            let len: usize = shape.iter().product();
            let mut out = vec![0.0; len];
            for (&v, m) in a.data().iter().zip(map.iter()) {
                if let Some(i) = *m {
                    if i >= len {
                        return Err(Error::contract(format!(
                            "scatter_add: index {i} out of range"
                        )));
                    }
                    out[i] += v;
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        };
        self.tape.push(Op::ScatterAdd(self.id, map), "scatter_add", value)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (rows, cols) = require_matrix("slice_cols", &self.tape.value_of(self.id))?;
        if start >= end || end > cols {
            return Err(Error::contract(format!(
                "slice_cols: range {start}..{end} invalid for {cols} columns"
            )));
        }
        let width = end - start;
        let map = (0..rows)
            .flat_map(|r| (start..end).map(move |c| Some(r * cols + c)))
            .collect();
        self.gather(map, &[rows, width])
    }

    /// Sums a broadcast gradient back down to `shape`.
    fn reduce_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        if self.shape() == shape {
            Ok(*self)
        } else {
            self.sum()?.reshape(shape)
        }
    }
}
