//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated. Calling
//! [`Tape::backward`] walks the recorded nodes in exact reverse order and
//! accumulates gradients for every node that depends on a parameter leaf.
//!
//! The primitive set is closed: matmul, masked matmul, add, sub,
//! elementwise mul, scale, add-scalar, tanh, exp, log, abs, clamp, sum,
//! mean, row sums, column permutation and the pairwise outer difference
//! used by ratio statistics.

use std::sync::Arc;

use super::mat::{gemm, Mat};
use crate::error::{FlozError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MaskedMatMul(Var, Var, Arc<Mat>),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    PermuteCols(Var, Arc<Vec<usize>>),
    PairDiff(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MaskedMatMul(..) => "masked_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::PermuteCols(..) => "permute_cols",
            Op::PairDiff(_) => "pair_diff",
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Mat>>,
    params: Vec<usize>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a parameter node, `None` if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter in registration order. Parameters that do
    /// not participate in the output receive zeros.
    pub fn into_param_grads(mut self) -> Vec<Mat> {
        self.params
            .iter()
            .zip(&self.shapes)
            .map(|(&idx, &(r, c))| self.by_node[idx].take().unwrap_or_else(|| Mat::zeros(r, c)))
            .collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
    first_non_finite: Option<&'static str>,
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Error naming the first primitive that produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(op) => Err(FlozError::NumericalOverflow { op: op.to_string() }),
        }
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Mat::scalar(value))
    }

    /// Trainable input. Parameters are numbered in registration order.
    pub fn param(&mut self, value: Mat) -> Var {
        let v = self.push(value, Op::Param, true);
        self.params.push(v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x · (w ⊙ mask)` with a fixed binary mask.
    pub fn masked_matmul(&mut self, x: Var, w: Var, mask: Arc<Mat>) -> Var {
        let masked = self.value(w).hadamard(&mask);
        let value = self.value(x).matmul(&masked);
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::MaskedMatMul(x, w, mask), rg)
    }

    fn bcast_of(&self, a: Var, b: Var, op: &str) -> Bcast {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) == (br, bc) {
            Bcast::Same
        } else if (br, bc) == (1, 1) {
            Bcast::Scalar
        } else if br == 1 && bc == ac {
            Bcast::Row
        } else {
            panic!("{op}: cannot broadcast {br}x{bc} onto {ar}x{ac}");
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> (Mat, Bcast) {
        let kind = self.bcast_of(a, b, name);
        let av = self.value(a);
        let bv = self.value(b);
        let cols = av.cols();
        let mut out = av.clone();
        match kind {
            Bcast::Same => {
                for (o, &y) in out.as_mut_slice().iter_mut().zip(bv.as_slice()) {
                    *o = f(*o, y);
                }
            }
            Bcast::Scalar => {
                let y = bv.item();
                for o in out.as_mut_slice() {
                    *o = f(*o, y);
                }
            }
            Bcast::Row => {
                let row = bv.as_slice();
                for chunk in out.as_mut_slice().chunks_mut(cols) {
                    for (o, &y) in chunk.iter_mut().zip(row) {
                        *o = f(*o, y);
                    }
                }
            }
        }
        (out, kind)
    }

    /// `a + b`; `b` may be a 1×c row or a 1×1 scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (value, kind) = self.binary(a, b, "add", |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b, kind), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (value, kind) = self.binary(a, b, "sub", |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b, kind), rg)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (value, kind) = self.binary(a, b, "mul", |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b, kind), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        let rg = self.rg(a);
        self.push(Mat::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.as_slice().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Mat::scalar(s), Op::Mean(a), rg)
    }

    /// Per-row sums: N×c → N×1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols().max(1);
        let sums: Vec<f64> = if v.cols() == 0 {
            vec![0.0; v.rows()]
        } else {
            v.as_slice().chunks(cols).map(|r| r.iter().sum()).collect()
        };
        let value = Mat::column(&sums);
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// `out[:, k] = a[:, perm[k]]`.
    pub fn permute_cols(&mut self, a: Var, perm: Arc<Vec<usize>>) -> Var {
        let v = self.value(a);
        assert_eq!(perm.len(), v.cols(), "permute_cols: permutation length");
        let mut out = Mat::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            let src = v.row_slice(r);
            let dst = out.row_slice_mut(r);
            for (k, &p) in perm.iter().enumerate() {
                dst[k] = src[p];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::PermuteCols(a, perm), rg)
    }

    /// N×1 column → N×N matrix with entries `a_i − a_j`.
    pub fn pair_diff(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert_eq!(v.cols(), 1, "pair_diff expects a column vector");
        let n = v.rows();
        let a_vals = v.as_slice();
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            let ai = a_vals[i];
            for (o, &aj) in out.row_slice_mut(i).iter_mut().zip(a_vals) {
                *o = ai - aj;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::PairDiff(a), rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(
            self.value(out).shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(Mat::scalar(1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            // intermediate gradients are released as soon as they are consumed
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(FlozError::NumericalOverflow {
                        op: format!("{} (backward)", node.op.name()),
                    });
                }
            }
        }

        let shapes = self
            .params
            .iter()
            .map(|&i| self.nodes[i].value.shape())
            .collect();
        Ok(Gradients {
            by_node: grads,
            params: self.params.clone(),
            shapes,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn reduce_bcast(g: &Mat, kind: Bcast, b_shape: (usize, usize)) -> Mat {
        match kind {
            Bcast::Same => g.clone(),
            Bcast::Scalar => Mat::scalar(g.as_slice().iter().sum()),
            Bcast::Row => {
                let mut out = vec![0.0; b_shape.1];
                for chunk in g.as_slice().chunks(b_shape.1) {
                    for (o, &x) in out.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                Mat::row(&out)
            }
        }
    }

    fn expand_bcast(b: &Mat, kind: Bcast, shape: (usize, usize)) -> Mat {
        match kind {
            Bcast::Same => b.clone(),
            Bcast::Scalar => Mat::filled(shape.0, shape.1, b.item()),
            Bcast::Row => {
                let mut out = Mat::zeros(shape.0, shape.1);
                for r in 0..shape.0 {
                    out.row_slice_mut(r).copy_from_slice(b.as_slice());
                }
                out
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut da, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut db, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaskedMatMul(x, w, mask) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*x) {
                    let masked = wv.hadamard(mask);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    gemm(g, false, &masked, true, &mut dx, 0.0);
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Mat::zeros(wv.rows(), wv.cols());
                    gemm(xv, true, g, false, &mut dw, 0.0);
                    for (d, &m) in dw.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *d *= m;
                    }
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Add(a, b, kind) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let db = Self::reduce_bcast(g, *kind, self.value(*b).shape());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sub(a, b, kind) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let db = Self::reduce_bcast(g, *kind, self.value(*b).shape()).map(|x| -x);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let bx = Self::expand_bcast(bv, *kind, av.shape());
                    self.accumulate(grads, *a, g.hadamard(&bx));
                }
                if self.rg(*b) {
                    let db = Self::reduce_bcast(&g.hadamard(av), *kind, bv.shape());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| c * x));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut da = g.clone();
                for (d, &t) in da.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                    *d *= 1.0 - t * t;
                }
                self.accumulate(grads, *a, da);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.hadamard(&node.value)),
            Op::Log(a) => {
                let mut da = g.clone();
                for (d, &x) in da.as_mut_slice().iter_mut().zip(self.value(*a).as_slice()) {
                    *d /= x;
                }
                self.accumulate(grads, *a, da);
            }
            Op::Abs(a) => {
                let mut da = g.clone();
                for (d, &x) in da.as_mut_slice().iter_mut().zip(self.value(*a).as_slice()) {
                    if x < 0.0 {
                        *d = -*d;
                    } else if x == 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let mut da = g.clone();
                for (d, &x) in da.as_mut_slice().iter_mut().zip(self.value(*a).as_slice()) {
                    if x < *lo || x > *hi {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Mat::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c) as f64;
                self.accumulate(grads, *a, Mat::filled(r, c, g.item() / n));
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    da.row_slice_mut(i).iter_mut().for_each(|d| *d = gi);
                }
                self.accumulate(grads, *a, da);
            }
            Op::PermuteCols(a, perm) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Mat::zeros(r, c);
                for i in 0..r {
                    let src = g.row_slice(i);
                    let dst = da.row_slice_mut(i);
                    for (k, &p) in perm.iter().enumerate() {
                        dst[p] += src[k];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::PairDiff(a) => {
                let n = self.value(*a).rows();
                let mut da = vec![0.0; n];
                for i in 0..n {
                    let row = g.row_slice(i);
                    let mut s = 0.0;
                    for (j, &gij) in row.iter().enumerate() {
                        s += gij;
                        da[j] -= gij;
                    }
                    da[i] += s;
                }
                self.accumulate(grads, *a, Mat::column(&da));
            }
        }
    }
}

/// Builds a scalar expression of `params` on a fresh tape and returns its
/// value together with one gradient per parameter.
pub fn evaluate_with_gradients<F>(params: &[Mat], build: F) -> Result<(f64, Vec<Mat>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out)?;
    Ok((tape.scalar(out), grads.into_param_grads()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let w = Mat::row(&[1.0, 2.0, 3.0]);
        let (value, grads) = evaluate_with_gradients(&[w], |t, p| {
            let sq = t.mul(p[0], p[0]);
            t.sum(sq)
        })
        .unwrap();
        assert_eq!(value, 14.0);
        assert_eq!(grads[0].as_slice(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn log_exp_identity_has_unit_gradient() {
        let w = Mat::row(&[-3.5, 0.0, 0.25, 12.0]);
        let (_, grads) = evaluate_with_gradients(&[w], |t, p| {
            let e = t.exp(p[0]);
            let l = t.log(e);
            t.sum(l)
        })
        .unwrap();
        for g in grads[0].as_slice() {
            assert!((g - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let a = Mat::row(&[1.0, 2.0]);
        let b = Mat::from_rows(&[vec![5.0], vec![6.0]]);
        let (_, grads) = evaluate_with_gradients(&[a, b], |t, p| t.sum(p[0])).unwrap();
        assert_eq!(grads[1].as_slice(), &[0.0, 0.0]);
        assert_eq!(grads[1].shape(), (2, 1));
    }

    #[test]
    fn overflow_names_the_op() {
        let w = Mat::row(&[1000.0]);
        let err = evaluate_with_gradients(&[w], |t, p| {
            let e = t.exp(p[0]);
            t.sum(e)
        })
        .unwrap_err();
        match err {
            FlozError::NumericalOverflow { op } => assert_eq!(op, "exp"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn pair_diff_values() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::column(&[1.0, 4.0]));
        let d = t.pair_diff(a);
        assert_eq!(t.value(d).as_slice(), &[0.0, -3.0, 3.0, 0.0]);
    }

    #[test]
    fn row_broadcast_add_reduces_gradient() {
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let b = Mat::row(&[0.5, -0.5]);
        let (_, grads) = evaluate_with_gradients(&[x, b], |t, p| {
            let s = t.add(p[0], p[1]);
            t.sum(s)
        })
        .unwrap();
        assert_eq!(grads[1].as_slice(), &[3.0, 3.0]);
    }
}
