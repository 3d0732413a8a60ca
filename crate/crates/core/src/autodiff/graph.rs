//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every operation in
//! creation order and, on [`Graph::backward`], walks the tape in reverse to
//! produce [`Gradients`]. Creation order is a valid topological order, so no
//! sorting is needed.

use std::collections::HashMap;

use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// An operation with a hand-written vector-Jacobian product.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>)
        -> Vec<Tensor<T>>;
}

enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    /// `x · wᵀ + b`
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Every row of the first operand multiplied elementwise by a single row.
    MulRow(NodeId, NodeId),
    /// Multiplication by a one-element node.
    Scale(NodeId, NodeId),
    ScaleConst(NodeId, T),
    Sigmoid(NodeId),
    Tanh(NodeId),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    Gather(NodeId, Vec<usize>),
    Sum(NodeId),
    Custom(Box<dyn CustomOp<T>>, Vec<NodeId>),
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Option<Tensor<T>>,
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.store.value(*p),
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Input, t)
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, k) = (xv.rows(), xv.cols());
        let (o, wk) = (wv.rows(), wv.cols());
        if k != wk {
            return shape_err(format!("linear: input width {k} vs weight width {wk}"));
        }
        let mut out = vec![T::zero(); r * o];
        let (xd, wd) = (xv.data(), wv.data());
        for i in 0..r {
            let xr = &xd[i * k..(i + 1) * k];
            for j in 0..o {
                let wr = &wd[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for q in 0..k {
                    acc += xr[q] * wr[q];
                }
                out[i * o + j] = acc;
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != o {
                return shape_err(format!("linear: bias {} vs output {o}", bv.len()));
            }
            for i in 0..r {
                for j in 0..o {
                    out[i * o + j] += bv.data()[j];
                }
            }
        }
        let t = Tensor::new(vec![r, o], out)?;
        Ok(self.push(Op::Linear { x, w, b }, t))
    }

    fn same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.rows() != bv.rows() {
            return shape_err(format!("{what}: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "add")?;
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "mul")?;
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(a).clone();
        for (x, y) in t.data_mut().iter_mut().zip(bv) {
            *x *= y;
        }
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let c = self.value(a).cols();
        let rv = self.value(row).data().to_vec();
        if rv.len() != c {
            return shape_err(format!("mul_row: row of {} vs {c} columns", rv.len()));
        }
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(c) {
            for (x, &y) in chunk.iter_mut().zip(&rv) {
                *x *= y;
            }
        }
        Ok(self.push(Op::MulRow(a, row), t))
    }

    pub fn scale(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return shape_err(format!("scale: factor has shape {:?}", sv.shape()));
        }
        let k = sv.item();
        let t = self.value(a).map(|x| x * k);
        Ok(self.push(Op::Scale(a, s), t))
    }

    pub fn scale_const(&mut self, a: NodeId, k: T) -> NodeId {
        let t = self.value(a).map(|x| x * k);
        self.push(Op::ScaleConst(a, k), t)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(T::tanh);
        self.push(Op::Tanh(a), t)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return shape_err("concat_cols: no inputs".into()),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return shape_err("concat_cols: row counts differ".into());
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return shape_err("stack_rows: no inputs".into()),
        };
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return shape_err("stack_rows: column counts differ".into());
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::StackRows(parts.to_vec()), t))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start >= end || end > v.cols() {
            return shape_err(format!("slice_cols {start}..{end} of {}", v.cols()));
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let t = Tensor::new(vec![v.rows(), end - start], data)?;
        Ok(self.push(Op::SliceCols(a, start, end), t))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start >= end || end > v.rows() {
            return shape_err(format!("slice_rows {start}..{end} of {}", v.rows()));
        }
        let c = v.cols();
        let data = v.data()[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], data)?;
        Ok(self.push(Op::SliceRows(a, start, end), t))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.slice_rows(a, i, i + 1)
    }

    /// Embedding lookup: rows `indices` of `table`.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        if indices.is_empty() {
            return shape_err("gather: no indices".into());
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::OutOfRange(format!("row {bad} of {}-row table", v.rows())));
        }
        let mut data = Vec::with_capacity(indices.len() * v.cols());
        for &i in indices {
            data.extend_from_slice(v.row(i));
        }
        let t = Tensor::new(vec![indices.len(), v.cols()], data)?;
        Ok(self.push(Op::Gather(table, indices.to_vec()), t))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), t)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        let t = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
            op.forward(&vals)?
        };
        Ok(self.push(Op::Custom(op, inputs.to_vec()), t))
    }

    /// Reverse pass from a one-element `loss` node.
    ///
    /// Parameters unreachable from `loss` get no entry (read as zero).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite("forward pass".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = Gradients::empty(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("backward at node {i}")));
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => out.grads[p.0] = Some(g),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (r, k, o) = (xv.rows(), xv.cols(), wv.rows());
                    let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                    let mut dx = vec![T::zero(); r * k];
                    let mut dw = vec![T::zero(); o * k];
                    for row in 0..r {
                        for j in 0..o {
                            let gij = gd[row * o + j];
                            if gij == T::zero() {
                                continue;
                            }
                            for q in 0..k {
                                dx[row * k + q] += gij * wd[j * k + q];
                                dw[j * k + q] += gij * xd[row * k + q];
                            }
                        }
                    }
                    add_grad(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    add_grad(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); o];
                        for row in 0..r {
                            for j in 0..o {
                                db[j] += gd[row * o + j];
                            }
                        }
                        let bs = self.value(*b).shape().to_vec();
                        add_grad(&mut grads, *b, Tensor::new(bs, db)?);
                    }
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, reshape_like(&g, self.value(*a)));
                    add_grad(&mut grads, *b, reshape_like(&g, self.value(*b)));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, bv, |gg, y| gg * y);
                    let db = zip_map(&g, av, |gg, x| gg * x);
                    add_grad(&mut grads, *a, reshape_like(&da, av));
                    add_grad(&mut grads, *b, reshape_like(&db, bv));
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let c = av.cols();
                    let mut da = g.clone();
                    let mut dr = vec![T::zero(); c];
                    for (ri, chunk) in da.data_mut().chunks_mut(c).enumerate() {
                        for q in 0..c {
                            dr[q] += chunk[q] * av.row(ri)[q];
                            chunk[q] *= rv.data()[q];
                        }
                    }
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *row, Tensor::new(rv.shape().to_vec(), dr)?);
                }
                Op::Scale(a, s) => {
                    let (av, sv) = (self.value(*a), self.value(*s));
                    let k = sv.item();
                    let ds: T = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).sum();
                    add_grad(&mut grads, *a, g.map(|x| x * k));
                    add_grad(&mut grads, *s, Tensor::full(sv.shape(), ds));
                }
                Op::ScaleConst(a, k) => {
                    let k = *k;
                    add_grad(&mut grads, *a, g.map(|x| x * k));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    let da = zip_map(&g, y, |gg, s| gg * s * (T::one() - s));
                    add_grad(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("value");
                    let da = zip_map(&g, y, |gg, t| gg * (T::one() - t * t));
                    add_grad(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let c = pv.cols();
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        offset += c;
                        add_grad(&mut grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                }
                Op::StackRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.rows() * c;
                        let d = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        add_grad(&mut grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                }
                Op::SliceCols(a, s, e) => {
                    let av = self.value(*a);
                    let mut d = Tensor::zeros(av.shape());
                    for r in 0..av.rows() {
                        d.row_mut(r)[*s..*e].copy_from_slice(g.row(r));
                    }
                    add_grad(&mut grads, *a, d);
                }
                Op::SliceRows(a, s, _e) => {
                    let av = self.value(*a);
                    let c = av.cols();
                    let mut d = Tensor::zeros(av.shape());
                    d.data_mut()[s * c..s * c + g.len()].copy_from_slice(g.data());
                    add_grad(&mut grads, *a, d);
                }
                Op::Gather(table, idx) => {
                    let tv = self.value(*table);
                    let mut d = Tensor::zeros(tv.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, &y) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    add_grad(&mut grads, *table, d);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    add_grad(&mut grads, *a, Tensor::full(av.shape(), g.item()));
                }
                Op::Custom(op, inputs) => {
                    let vals: Vec<&Tensor<T>> = inputs.iter().map(|&n| self.value(n)).collect();
                    let y = node.value.as_ref().expect("value");
                    let gs = op.backward(&vals, y, &g);
                    for (&n, d) in inputs.iter().zip(gs) {
                        add_grad(&mut grads, n, d);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn add_grad<T: Scalar>(grads: &mut [Option<Tensor<T>>], n: NodeId, d: Tensor<T>) {
    match &mut grads[n.0] {
        Some(acc) => acc.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same length")
}

fn reshape_like<T: Scalar>(g: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    Tensor::new(like.shape().to_vec(), g.data().to_vec()).expect("same length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut s = ParamStore::<f64>::new();
        let p = s.register("p", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap()).unwrap();
        let mut g = Graph::new(&s);
        let n = g.param(p);
        let l = g.sum(n);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn constant_loss_leaves_params_untouched() {
        let mut s = ParamStore::<f64>::new();
        let p = s.register("p", Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new(&s);
        let c = g.input(Tensor::scalar(4.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.dense(&s, p).data(), &[0.0; 3]);
    }

    #[test]
    fn tanh_scalar_chain_matches_closed_form() {
        let mut s = ParamStore::<f64>::new();
        let w = s.register("w", Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let wn = g.param(w);
        let wx = g.linear(x, wn, None).unwrap();
        let y = g.tanh(wx);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let expected = 0.5 * (1.0 - 0.5f64.tanh().powi(2));
        assert!((grads.get(w).unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_loss_is_reported() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::scalar(f64::NAN));
        assert!(matches!(g.backward(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn linear_shape_mismatch() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::zeros(&[1, 3]));
        let w = g.input(Tensor::zeros(&[2, 4]));
        assert!(g.linear(x, w, None).is_err());
    }
}
