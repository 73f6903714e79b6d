//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! appended in topological order, so `backward` is a single reverse sweep.
//! Values that do not depend on any parameter are never differentiated.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::sparse::Csr;

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Rc<Vec<f64>>),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    PickElems(Var, Rc<Vec<(usize, usize)>>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SpMM(Rc<Csr>, Var),
    Bce(Var, Rc<Mat>, Rc<Mat>),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

const BCE_CLAMP: f64 = 1e-7;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn unary(&mut self, a: Var, value: Mat, op: Op) -> Var {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Mat, op: Op) -> Var {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.binary(a, b, value, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    /// Adds the `1×m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b), (1, self.shape(a).1), "add_row shape mismatch");
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1×m` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b), (1, self.shape(a).1), "mul_row shape mismatch");
        let value = self.value(a) * self.value(b);
        self.binary(a, b, value, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.unary(a, value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.unary(a, value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.unary(a, value, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.unary(a, value, Op::LogSoftmax(a))
    }

    /// Row-wise standardization (zero mean, unit variance), without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.unary(a, out, Op::LayerNorm(a, Rc::new(inv_std)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Array2::from_elem((1, 1), m.sum() / m.len() as f64);
        self.unary(a, value, Op::Mean(a))
    }

    /// Stacks `a[idx[i], :]` into row `i`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut out = Array2::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).assign(&src.row(r));
        }
        self.unary(a, out, Op::GatherRows(a, Rc::new(idx.to_vec())))
    }

    /// Column vector of the selected `(row, col)` entries.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let src = self.value(a);
        let out = Array2::from_shape_fn((at.len(), 1), |(k, _)| src[at[k]]);
        self.unary(a, out, Op::PickElems(a, Rc::new(at.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.unary(a, value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.unary(a, value, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), tracked)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), tracked)
    }

    /// Sparse constant times dense variable.
    pub fn spmm(&mut self, sparse: Rc<Csr>, b: Var) -> Var {
        let value = sparse.matmul(self.value(b));
        self.unary(b, value, Op::SpMM(sparse, b))
    }

    /// Weighted mean binary cross-entropy of probabilities `p` against
    /// `target`: `Σ w·bce / Σ w`. Probabilities are clamped to
    /// `[1e-7, 1 - 1e-7]` before the logarithm; clamped entries pass no gradient.
    pub fn bce(&mut self, p: Var, target: Rc<Mat>, weight: Rc<Mat>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), target.dim());
        assert_eq!(pv.dim(), weight.dim());
        let total_w: f64 = weight.sum();
        let mut acc = 0.0;
        Zip::from(pv).and(&*target).and(&*weight).for_each(|&p, &t, &w| {
            if w != 0.0 {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                acc += w * -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
            }
        });
        let value = Array2::from_elem((1, 1), if total_w > 0.0 { acc / total_w } else { 0.0 });
        self.unary(p, value, Op::Bce(p, target, weight))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    let gb = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *gv *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g * &out.mapv(|y| y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let mut ga = g * out;
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(out.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|gv, &y| *gv -= y * dot);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for (mut row, yrow) in ga.rows_mut().into_iter().zip(out.rows()) {
                    let total = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|gv, &y| *gv -= y.exp() * total);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let mut ga = g.clone();
                for (r, (mut row, yrow)) in ga.rows_mut().into_iter().zip(out.rows()).enumerate() {
                    let n = row.len() as f64;
                    let mean_g = row.sum() / n;
                    let mean_gy = row.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    let is = inv_std[r];
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|gv, &y| *gv = is * (*gv - mean_g - y * mean_gy));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (i, &r) in idx.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(i);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PickElems(a, at) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (k, &(r, c)) in at.iter().enumerate() {
                    ga[[r, c]] += g[[k, 0]];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::SpMM(sparse, b) => {
                self.accumulate(grads, *b, sparse.transpose().matmul(g));
            }
            Op::Bce(p, target, weight) => {
                let total_w: f64 = weight.sum();
                if total_w <= 0.0 {
                    return;
                }
                let scale = g[[0, 0]] / total_w;
                let mut gp = Array2::zeros(self.shape(*p));
                Zip::from(&mut gp)
                    .and(self.value(*p))
                    .and(&**target)
                    .and(&**weight)
                    .for_each(|gv, &pv, &t, &w| {
                        if w != 0.0 && pv > BCE_CLAMP && pv < 1.0 - BCE_CLAMP {
                            *gv = scale * w * (pv - t) / (pv * (1.0 - pv));
                        }
                    });
                self.accumulate(grads, *p, gp);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
