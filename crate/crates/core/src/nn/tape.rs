//! Reverse-mode automatic differentiation over 64-bit matrices.
//!
//! A [`Tape`] records matrix-level operations as they execute; [`Tape::backward`]
//! replays them in reverse, accumulating gradients into every recorded node and
//! finally into a [`GradStore`] aligned with the parameter store. Scalars are
//! 1x1 matrices, row vectors are 1xd.
//!
//! The op set is deliberately small: exactly what the encoder, tracing module,
//! decoder, and losses need. Shape errors at this level are programming errors
//! and panic; the public wrappers in [`crate::nn::ops`] validate shapes and
//! return typed errors.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::params::{GradStore, ParamId, ParamStore};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Row-broadcast add: (r x c) + (1 x c).
    AddRow(Var, Var),
    /// Column-broadcast multiply: (r x c) * (r x 1).
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var),
    Ln(Var),
    Abs(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    /// Row-wise softmax with entries at `false` mask positions exactly zero.
    MaskedSoftmaxRows(Var),
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_cache: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
            param_cache: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.dim(), (1, 1), "not a scalar node");
        val[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node
    /// so gradient contributions accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_cache[id.index()] {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_cache[id.index()] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.dim(), vb.dim(), "add shape mismatch");
            va + vb
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.dim(), vb.dim(), "sub shape mismatch");
            va - vb
        };
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.dim(), vb.dim(), "mul shape mismatch");
            va * vb
        };
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.dim(), vb.dim(), "div shape mismatch");
            va / vb
        };
        self.push(value, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
            assert_eq!(vb.nrows(), 1, "bias must be a row vector");
            assert_eq!(va.ncols(), vb.ncols(), "add_row shape mismatch");
            va + vb
        };
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = {
            let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
            assert_eq!(vc.ncols(), 1, "mask must be a column vector");
            assert_eq!(va.nrows(), vc.nrows(), "mul_col shape mismatch");
            va * vc
        };
        self.push(value, Op::MulCol(a, col))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(va.ncols(), vb.nrows(), "matmul shape mismatch");
            va.dot(vb)
        };
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.0].value * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.0].value + k;
        self.push(value, Op::AddScalar(a))
    }

    pub fn clamp_min(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(k));
        self.push(value, Op::ClampMin(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(value, Op::Elu(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch")
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch")
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = {
            let va = &self.nodes[a.0].value;
            assert!(indices.iter().all(|&i| i < va.nrows()), "gather index out of range");
            va.select(Axis(0), indices)
        };
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let va = &self.nodes[a.0].value;
            assert!(start + len <= va.ncols(), "slice_cols out of range");
            va.slice(s![.., start..start + len]).to_owned()
        };
        self.push(value, Op::SliceCols(a, start, len))
    }

    /// Row-wise masked softmax with max-subtraction. Entries at masked
    /// positions are exactly zero; each row must keep at least one survivor.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Array2<bool>) -> Result<Var> {
        let value = {
            let va = &self.nodes[a.0].value;
            assert_eq!(va.dim(), mask.dim(), "softmax mask shape mismatch");
            let mut out = Array2::zeros(va.raw_dim());
            for r in 0..va.nrows() {
                let mut max = f64::NEG_INFINITY;
                for c in 0..va.ncols() {
                    if mask[[r, c]] {
                        max = max.max(va[[r, c]]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::AllMasked);
                }
                let mut sum = 0.0;
                for c in 0..va.ncols() {
                    if mask[[r, c]] {
                        let e = (va[[r, c]] - max).exp();
                        out[[r, c]] = e;
                        sum += e;
                    }
                }
                for c in 0..va.ncols() {
                    out[[r, c]] /= sum;
                }
            }
            out
        };
        Ok(self.push(value, Op::MaskedSoftmaxRows(a)))
    }

    /// Runs reverse accumulation from a scalar loss node. Call once per tape.
    pub fn backward(&mut self, loss: Var) -> GradStore {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        self.nodes[loss.0].grad[[0, 0]] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            match &node.op {
                Op::Const | Op::Param(_) => {}
                Op::Add(a, b) => {
                    let g = node.grad.clone();
                    head[a.0].grad += &g;
                    head[b.0].grad += &g;
                }
                Op::Sub(a, b) => {
                    let g = node.grad.clone();
                    head[a.0].grad += &g;
                    head[b.0].grad -= &g;
                }
                Op::Mul(a, b) => {
                    let da = &node.grad * &head[b.0].value;
                    let db = &node.grad * &head[a.0].value;
                    head[a.0].grad += &da;
                    head[b.0].grad += &db;
                }
                Op::Div(a, b) => {
                    let da = &node.grad / &head[b.0].value;
                    let db = -(&node.grad * &node.value) / &head[b.0].value;
                    head[a.0].grad += &da;
                    head[b.0].grad += &db;
                }
                Op::AddRow(a, bias) => {
                    head[a.0].grad += &node.grad;
                    let db = node.grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    head[bias.0].grad += &db;
                }
                Op::MulCol(a, col) => {
                    let da = &node.grad * &head[col.0].value;
                    let dc = (&node.grad * &head[a.0].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    head[a.0].grad += &da;
                    head[col.0].grad += &dc;
                }
                Op::MatMul(a, b) => {
                    let da = node.grad.dot(&head[b.0].value.t());
                    let db = head[a.0].value.t().dot(&node.grad);
                    head[a.0].grad += &da;
                    head[b.0].grad += &db;
                }
                Op::Transpose(a) => {
                    let da = node.grad.t().to_owned();
                    head[a.0].grad += &da;
                }
                Op::Scale(a, k) => {
                    let da = &node.grad * *k;
                    head[a.0].grad += &da;
                }
                Op::AddScalar(a) => {
                    head[a.0].grad += &node.grad;
                }
                Op::ClampMin(a, k) => {
                    let x = &head[a.0].value;
                    let mut da = node.grad.clone();
                    ndarray::Zip::from(&mut da).and(x).for_each(|d, &xv| {
                        if xv <= *k {
                            *d = 0.0;
                        }
                    });
                    head[a.0].grad += &da;
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = &node.grad * y * (1.0 - y);
                    head[a.0].grad += &da;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = &node.grad * (1.0 - y * y);
                    head[a.0].grad += &da;
                }
                Op::Relu(a) => {
                    let x = &head[a.0].value;
                    let mut da = node.grad.clone();
                    ndarray::Zip::from(&mut da).and(x).for_each(|d, &xv| {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    head[a.0].grad += &da;
                }
                Op::Elu(a) => {
                    let x = &head[a.0].value;
                    let y = &node.value;
                    let mut da = node.grad.clone();
                    ndarray::Zip::from(&mut da).and(x).and(y).for_each(|d, &xv, &yv| {
                        if xv <= 0.0 {
                            *d *= yv + 1.0;
                        }
                    });
                    head[a.0].grad += &da;
                }
                Op::Ln(a) => {
                    let da = &node.grad / &head[a.0].value;
                    head[a.0].grad += &da;
                }
                Op::Abs(a) => {
                    let x = &head[a.0].value;
                    let mut da = node.grad.clone();
                    ndarray::Zip::from(&mut da).and(x).for_each(|d, &xv| {
                        *d *= if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    });
                    head[a.0].grad += &da;
                }
                Op::SumAll(a) => {
                    let g = node.grad[[0, 0]];
                    head[a.0].grad += g;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = head[p.0].value.ncols();
                        let slice = node.grad.slice(s![.., offset..offset + w]).to_owned();
                        head[p.0].grad += &slice;
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = head[p.0].value.nrows();
                        let slice = node.grad.slice(s![offset..offset + h, ..]).to_owned();
                        head[p.0].grad += &slice;
                        offset += h;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let g = node.grad.clone();
                    let dst = &mut head[a.0].grad;
                    for (i, &src) in indices.iter().enumerate() {
                        let mut row = dst.row_mut(src);
                        row += &g.row(i);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let g = node.grad.clone();
                    let mut dst = head[a.0].grad.slice_mut(s![.., *start..*start + *len]);
                    dst += &g;
                }
                Op::MaskedSoftmaxRows(a) => {
                    let y = &node.value;
                    let g = &node.grad;
                    let mut da = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let mut dot = 0.0;
                        for c in 0..y.ncols() {
                            dot += g[[r, c]] * y[[r, c]];
                        }
                        for c in 0..y.ncols() {
                            da[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    head[a.0].grad += &da;
                }
            }
        }

        let mut out = GradStore::zeros_like(self.params);
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                out.add(id, &node.grad);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store_with(values: &[(&str, Array2<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.add(n, v.clone()).unwrap();
        }
        s
    }

    #[test]
    fn matmul_gradients() {
        let store = store_with(&[
            ("a", array![[1.0, 2.0], [3.0, 4.0]]),
            ("b", array![[0.5, -1.0], [2.0, 0.0]]),
        ]);
        let (ia, ib) = (store.id("a").unwrap(), store.id("b").unwrap());
        let mut t = Tape::new(&store);
        let a = t.param(ia);
        let b = t.param(ib);
        let c = t.matmul(a, b);
        let loss = t.sum_all(c);
        let grads = t.backward(loss);
        // d(sum(AB))/dA = 1 B^T, d/dB = A^T 1.
        let ones = Array2::ones((2, 2));
        let expect_a = ones.dot(&store.value(ib).t());
        let expect_b = store.value(ia).t().dot(&ones);
        assert_eq!(grads.get(ia), &expect_a);
        assert_eq!(grads.get(ib), &expect_b);
    }

    #[test]
    fn masked_softmax_exact_zero_and_sum() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.row(&[5.0, 9.0, 5.0]);
        let mask = Array2::from_shape_vec((1, 3), vec![true, false, true]).unwrap();
        let p = t.masked_softmax_rows(x, &mask).unwrap();
        let v = t.value(p);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((v[[0, 2]] - 0.5).abs() < 1e-12);
        assert!((v.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_error() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.row(&[1.0, 2.0]);
        let mask = Array2::from_elem((1, 2), false);
        assert!(matches!(t.masked_softmax_rows(x, &mask), Err(Error::AllMasked)));
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let store = store_with(&[("a", array![[1.0], [2.0]])]);
        let ia = store.id("a").unwrap();
        let mut t = Tape::new(&store);
        let a = t.param(ia);
        let g = t.gather_rows(a, &[0, 0, 1]);
        let loss = t.sum_all(g);
        let grads = t.backward(loss);
        assert_eq!(grads.get(ia), &array![[2.0], [1.0]]);
    }

    #[test]
    fn concat_and_slice_roundtrip_gradient() {
        let store = store_with(&[("a", array![[1.0, 2.0]]), ("b", array![[3.0]])]);
        let (ia, ib) = (store.id("a").unwrap(), store.id("b").unwrap());
        let mut t = Tape::new(&store);
        let a = t.param(ia);
        let b = t.param(ib);
        let cat = t.concat_cols(&[a, b]);
        let right = t.slice_cols(cat, 2, 1);
        let loss = t.sum_all(right);
        let grads = t.backward(loss);
        assert_eq!(grads.get(ia), &array![[0.0, 0.0]]);
        assert_eq!(grads.get(ib), &array![[1.0]]);
    }
}
