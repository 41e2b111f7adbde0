//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! The tape is eager: every op computes its value when recorded, so callers
//! can inspect intermediate values (for example to pick a hard subset) while
//! building the graph. The op set is closed; [`Tape::backward`] knows the
//! adjoint of every variant.

use std::sync::Arc;

use crate::error::{Result, SorexError};
use crate::sparse::SparseMatrix;
use crate::tensor::{axpy, dot, sigmoid, softplus, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Gather { x: Var, idx: Vec<usize> },
    SpMM { w: Arc<SparseMatrix>, x: Var },
    LinComb(Vec<(Var, f64)>),
    RowScale { x: Var, scale: Vec<f64> },
    Affine { x: Var, a: f64 },
    GatherDot { a: Var, ia: Vec<usize>, b: Var, ib: Vec<usize> },
    RowNormalize { x: Var, norms: Vec<f64> },
    SegmentSoftmax { x: Var, offsets: Vec<usize> },
    LogConcrete { p: Var, dz_dp: Vec<f64>, z: Vec<f64> },
    SoftplusNeg { x: Var },
    Sum { x: Var },
    SumSquares { x: Var },
    WeightedRowSum { alpha: Var, table: Var, rows: Vec<usize>, seg: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn column(values: Vec<f64>) -> Matrix {
    Matrix::column(values)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Rows `idx` of `x`, in order, repeats allowed.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let value = self.value(x).gather_rows(&idx);
        self.push(value, Op::Gather { x, idx })
    }

    /// `w * x` for a constant sparse `w`.
    pub fn spmm(&mut self, w: Arc<SparseMatrix>, x: Var) -> Var {
        let value = w.matmul(self.value(x));
        self.push(value, Op::SpMM { w, x })
    }

    /// `sum_i c_i * x_i` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty(), "empty linear combination");
        let shape = self.value(terms[0].0).shape();
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &(v, c) in &terms {
            assert_eq!(self.value(v).shape(), shape, "lincomb shape");
            value.add_scaled(self.value(v), c);
        }
        self.push(value, Op::LinComb(terms))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.lincomb(vec![(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.lincomb(vec![(a, 1.0), (b, -1.0)])
    }

    /// Row `r` multiplied by the constant `scale[r]`.
    pub fn row_scale(&mut self, x: Var, scale: Vec<f64>) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(scale.len(), value.rows(), "row scale length");
        for (r, &s) in scale.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|y| *y *= s);
        }
        self.push(value, Op::RowScale { x, scale })
    }

    /// Elementwise `a * x + b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let src = self.value(x);
        let value = Matrix::from_vec(src.rows(), src.cols(), src.data().iter().map(|&y| a * y + b).collect());
        self.push(value, Op::Affine { x, a })
    }

    /// Column of `<a[ia[t]], b[ib[t]]>`.
    pub fn gather_dot(&mut self, a: Var, ia: Vec<usize>, b: Var, ib: Vec<usize>) -> Var {
        assert_eq!(ia.len(), ib.len(), "gather_dot index lengths");
        let (av, bv) = (self.value(a), self.value(b));
        let value = column(ia.iter().zip(&ib).map(|(&i, &j)| dot(av.row(i), bv.row(j))).collect());
        self.push(value, Op::GatherDot { a, ia, b, ib })
    }

    /// Each row divided by its Euclidean norm; zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let norms: Vec<f64> = (0..src.rows()).map(|r| dot(src.row(r), src.row(r)).sqrt()).collect();
        let mut value = src.clone();
        for (r, &n) in norms.iter().enumerate() {
            let row = value.row_mut(r);
            if n > 0.0 {
                row.iter_mut().for_each(|y| *y /= n);
            }
        }
        self.push(value, Op::RowNormalize { x, norms })
    }

    /// Softmax of a column within each segment `offsets[s]..offsets[s+1]`.
    pub fn segment_softmax(&mut self, x: Var, offsets: Vec<usize>) -> Var {
        let src = self.value(x).data();
        assert_eq!(*offsets.last().unwrap_or(&0), src.len(), "segment offsets");
        let mut out = vec![0.0; src.len()];
        for w in offsets.windows(2) {
            let seg = &src[w[0]..w[1]];
            if seg.is_empty() {
                continue;
            }
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &y) in out[w[0]..w[1]].iter_mut().zip(seg) {
                *o = (y - max).exp();
                total += *o;
            }
            out[w[0]..w[1]].iter_mut().for_each(|o| *o /= total);
        }
        self.push(column(out), Op::SegmentSoftmax { x, offsets })
    }

    /// `log sigmoid(z)` with `z = (logit p + logit u) / tau`: the log of a
    /// binary-concrete draw. `p` and `u` are clamped to `[eps, 1 - eps]`,
    /// and the clamp has zero derivative.
    pub fn log_concrete(&mut self, p: Var, noise: &[f64], tau: f64, eps: f64) -> Var {
        let src = self.value(p).data();
        assert_eq!(src.len(), noise.len(), "noise length");
        let mut z = Vec::with_capacity(src.len());
        let mut dz_dp = Vec::with_capacity(src.len());
        for (&pv, &u) in src.iter().zip(noise) {
            let pc = pv.clamp(eps, 1.0 - eps);
            let uc = u.clamp(eps, 1.0 - eps);
            z.push(((pc / (1.0 - pc)).ln() + (uc / (1.0 - uc)).ln()) / tau);
            dz_dp.push(if pv > eps && pv < 1.0 - eps { 1.0 / (tau * pc * (1.0 - pc)) } else { 0.0 });
        }
        let value = column(z.iter().map(|&zz| -softplus(-zz)).collect());
        self.push(value, Op::LogConcrete { p, dz_dp, z })
    }

    /// Elementwise `softplus(-x) = -log sigmoid(x)`.
    pub fn softplus_neg(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Matrix::from_vec(src.rows(), src.cols(), src.data().iter().map(|&y| softplus(-y)).collect());
        self.push(value, Op::SoftplusNeg { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum { x })
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum_squares());
        self.push(value, Op::SumSquares { x })
    }

    /// Output row `s` is `sum_{e: seg[e] = s} alpha[e] * table[rows[e]]`.
    pub fn weighted_row_sum(&mut self, alpha: Var, table: Var, rows: Vec<usize>, seg: Vec<usize>, segments: usize) -> Var {
        let (av, tv) = (self.value(alpha).data(), self.value(table));
        assert_eq!(av.len(), rows.len(), "weighted_row_sum alpha length");
        assert_eq!(rows.len(), seg.len(), "weighted_row_sum index lengths");
        let mut value = Matrix::zeros(segments, tv.cols());
        for ((&a, &r), &s) in av.iter().zip(&rows).zip(&seg) {
            axpy(a, tv.row(r), value.row_mut(s));
        }
        self.push(value, Op::WeightedRowSum { alpha, table, rows, seg })
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(SorexError::Tape(format!("variable {} not on this tape", root.0)));
        }
        if self.value(root).shape() != (1, 1) {
            return Err(SorexError::Tape(format!("backward root has shape {:?}, expected scalar", self.value(root).shape())));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate_adjoint(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate_adjoint(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Gather { x, idx } => {
                let dx = slot(grads, &self.nodes, *x);
                for (t, &r) in idx.iter().enumerate() {
                    axpy(1.0, g.row(t), dx.row_mut(r));
                }
            }
            Op::SpMM { w, x } => {
                w.transpose_matmul_into(g, slot(grads, &self.nodes, *x));
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    slot(grads, &self.nodes, v).add_scaled(g, c);
                }
            }
            Op::RowScale { x, scale } => {
                let dx = slot(grads, &self.nodes, *x);
                for (r, &s) in scale.iter().enumerate() {
                    axpy(s, g.row(r), dx.row_mut(r));
                }
            }
            Op::Affine { x, a } => slot(grads, &self.nodes, *x).add_scaled(g, *a),
            Op::GatherDot { a, ia, b, ib } => {
                let gd = g.data();
                {
                    let bv = &self.nodes[b.0].value;
                    let da = slot(grads, &self.nodes, *a);
                    for (t, (&i, &j)) in ia.iter().zip(ib).enumerate() {
                        axpy(gd[t], bv.row(j), da.row_mut(i));
                    }
                }
                let av = &self.nodes[a.0].value;
                let db = slot(grads, &self.nodes, *b);
                for (t, (&i, &j)) in ia.iter().zip(ib).enumerate() {
                    axpy(gd[t], av.row(i), db.row_mut(j));
                }
            }
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                let dx = slot(grads, &self.nodes, *x);
                for (r, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let proj = dot(y.row(r), g.row(r));
                    let out = dx.row_mut(r);
                    for ((o, &gy), &yy) in out.iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o += (gy - yy * proj) / n;
                    }
                }
            }
            Op::SegmentSoftmax { x, offsets } => {
                let y = node.value.data();
                let gd = g.data();
                let dx = slot(grads, &self.nodes, *x).data_mut();
                for w in offsets.windows(2) {
                    let inner: f64 = (w[0]..w[1]).map(|e| y[e] * gd[e]).sum();
                    for e in w[0]..w[1] {
                        dx[e] += y[e] * (gd[e] - inner);
                    }
                }
            }
            Op::LogConcrete { p, dz_dp, z } => {
                let gd = g.data();
                let dp = slot(grads, &self.nodes, *p).data_mut();
                for e in 0..z.len() {
                    dp[e] += gd[e] * sigmoid(-z[e]) * dz_dp[e];
                }
            }
            Op::SoftplusNeg { x } => {
                let xv = self.nodes[x.0].value.data();
                let gd = g.data();
                let dx = slot(grads, &self.nodes, *x).data_mut();
                for e in 0..gd.len() {
                    dx[e] -= gd[e] * sigmoid(-xv[e]);
                }
            }
            Op::Sum { x } => {
                let s = g.item();
                slot(grads, &self.nodes, *x).data_mut().iter_mut().for_each(|d| *d += s);
            }
            Op::SumSquares { x } => {
                let s = 2.0 * g.item();
                let xv = &self.nodes[x.0].value;
                slot(grads, &self.nodes, *x).add_scaled(xv, s);
            }
            Op::WeightedRowSum { alpha, table, rows, seg } => {
                {
                    let tv = &self.nodes[table.0].value;
                    let da = slot(grads, &self.nodes, *alpha).data_mut();
                    for (e, (&r, &s)) in rows.iter().zip(seg).enumerate() {
                        da[e] += dot(g.row(s), tv.row(r));
                    }
                }
                let av = self.nodes[alpha.0].value.data();
                let dt = slot(grads, &self.nodes, *table);
                for (e, (&r, &s)) in rows.iter().zip(seg).enumerate() {
                    axpy(av[e], g.row(s), dt.row_mut(r));
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], nodes: &[Node], v: Var) -> &'a mut Matrix {
    let (r, c) = nodes[v.0].value.shape();
    grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
