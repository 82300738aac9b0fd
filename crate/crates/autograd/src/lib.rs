//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value in a [`Graph`] is a 2-D matrix; scalars are `1×1`. Nodes are
//! appended in evaluation order, so a single reverse sweep over the tape in
//! [`Graph::backward`] visits every node after all of its consumers.
//!
//! Leaves created with [`Graph::constant`] (or produced by [`Graph::detach`])
//! never receive gradients and gradients never flow through them. That is the
//! only stop-gradient mechanism, and it is what the trainer relies on.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sqrt(Var),
    Square(Var),
    SelectElems { x: Var, picks: Vec<(usize, usize)> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Evaluation tape. Build the forward pass with the op methods, then call
/// [`Graph::backward`] on a `1×1` node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

// libm's tanh goes through expm1 and dominates the forward pass otherwise.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 19.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp();
    (e - 1.0) / (e + 1.0)
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = fast_tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn row_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn row_log_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives or propagates gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn item(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `x + row` with `row` of shape `1×D` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1xD row");
        let value = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    /// `x ⊙ row` with `row` of shape `1×D` broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1xD row");
        let value = self.value(x) * self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) * s;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) + s;
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(0.0, |acc, &v| acc + v * v) / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = row_softmax(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let value = row_log_softmax(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Scales every row to unit Euclidean norm (norm floored at `eps`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.fold(0.0, |acc, &v| acc + v * v).sqrt().max(eps);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// New matrix whose `k`-th row is row `rows[k]` of `x`. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        let rg = self.rg(x);
        self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, rg)
    }

    /// Reinterprets the row-major element order under a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = xv.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("reshape: size mismatch");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Array2::from_elem((1, 1), xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Per-row sums, `N×D → N×1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(value, Op::SumCols(x), rg)
    }

    /// Per-column means, `N×D → 1×D`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = (xv.sum_axis(Axis(0)) / xv.nrows() as f64).insert_axis(Axis(0));
        let rg = self.rg(x);
        self.push(value, Op::MeanRows(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        let rg = self.rg(x);
        self.push(value, Op::Log(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        let rg = self.rg(x);
        self.push(value, Op::Abs(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Softplus(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::sqrt);
        let rg = self.rg(x);
        self.push(value, Op::Sqrt(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    /// Column vector `K×1` of the picked `(row, col)` elements.
    pub fn select_elems(&mut self, x: Var, picks: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let data: Vec<f64> = picks.iter().map(|&(r, c)| xv[[r, c]]).collect();
        let value = Array2::from_shape_vec((picks.len(), 1), data).expect("select_elems");
        let rg = self.rg(x);
        self.push(value, Op::SelectElems { x, picks: picks.to_vec() }, rg)
    }

    /// Reverse sweep from a `1×1` node. Only nodes that require gradient are
    /// populated in the result.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar node");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || -&g);
                }
                Op::Mul(a, b) => {
                    self.acc(&mut grads, *a, || &g * self.value(*b));
                    self.acc(&mut grads, *b, || &g * self.value(*a));
                }
                Op::AddRow(x, row) => {
                    self.acc(&mut grads, *x, || g.clone());
                    self.acc(&mut grads, *row, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRow(x, row) => {
                    self.acc(&mut grads, *x, || &g * self.value(*row));
                    self.acc(&mut grads, *row, || {
                        (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0))
                    });
                }
                Op::Scale(x, s) => self.acc(&mut grads, *x, || &g * *s),
                Op::AddScalar(x) => self.acc(&mut grads, *x, || g.clone()),
                Op::MatMul(a, b) => {
                    self.acc(&mut grads, *a, || g.dot(&self.value(*b).t()));
                    self.acc(&mut grads, *b, || self.value(*a).t().dot(&g));
                }
                Op::MatMulNt(a, b) => {
                    self.acc(&mut grads, *a, || g.dot(self.value(*b)));
                    self.acc(&mut grads, *b, || g.t().dot(self.value(*a)));
                }
                Op::Gelu(x) => {
                    self.acc(&mut grads, *x, || {
                        let mut out = g.clone();
                        Zip::from(&mut out)
                            .and(self.value(*x))
                            .for_each(|o, &xv| *o *= gelu_grad_scalar(xv));
                        out
                    });
                }
                Op::LayerNorm { x, inv_std } => {
                    self.acc(&mut grads, *x, || {
                        let y = &node.value;
                        let d = y.ncols() as f64;
                        let mut out = g.clone();
                        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
                            let yr = y.row(r);
                            let mean_g = row.sum() / d;
                            let mean_gy = row.dot(&yr) / d;
                            let inv = inv_std[r];
                            Zip::from(&mut row)
                                .and(&yr)
                                .for_each(|o, &yv| *o = inv * (*o - mean_g - yv * mean_gy));
                        }
                        out
                    });
                }
                Op::Softmax(x) => {
                    self.acc(&mut grads, *x, || {
                        let y = &node.value;
                        let mut out = g.clone();
                        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
                            let yr = y.row(r);
                            let dot = row.dot(&yr);
                            Zip::from(&mut row).and(&yr).for_each(|o, &yv| *o = yv * (*o - dot));
                        }
                        out
                    });
                }
                Op::LogSoftmax(x) => {
                    self.acc(&mut grads, *x, || {
                        let y = &node.value;
                        let mut out = g.clone();
                        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
                            let total = row.sum();
                            let yr = y.row(r);
                            Zip::from(&mut row).and(&yr).for_each(|o, &yv| *o -= yv.exp() * total);
                        }
                        out
                    });
                }
                Op::L2Normalize { x, norms } => {
                    self.acc(&mut grads, *x, || {
                        let y = &node.value;
                        let mut out = g.clone();
                        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
                            let yr = y.row(r);
                            let dot = row.dot(&yr);
                            let n = norms[r];
                            Zip::from(&mut row).and(&yr).for_each(|o, &yv| *o = (*o - yv * dot) / n);
                        }
                        out
                    });
                }
                Op::SliceCols { x, start } => {
                    self.acc(&mut grads, *x, || {
                        let mut out = Array2::zeros(self.shape(*x));
                        out.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                        out
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let lo = offset;
                        self.acc(&mut grads, p, || g.slice(s![.., lo..lo + w]).to_owned());
                        offset += w;
                    }
                }
                Op::GatherRows { x, rows } => {
                    self.acc(&mut grads, *x, || {
                        let mut out = Array2::zeros(self.shape(*x));
                        for (k, &r) in rows.iter().enumerate() {
                            let mut dst = out.row_mut(r);
                            dst += &g.row(k);
                        }
                        out
                    });
                }
                Op::Reshape(x) => {
                    self.acc(&mut grads, *x, || {
                        let data: Vec<f64> = g.iter().copied().collect();
                        Array2::from_shape_vec(self.shape(*x), data).expect("reshape grad")
                    });
                }
                Op::Sum(x) => {
                    let gv = g[[0, 0]];
                    self.acc(&mut grads, *x, || Array2::from_elem(self.shape(*x), gv));
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len() as f64;
                    let gv = g[[0, 0]] / n;
                    self.acc(&mut grads, *x, || Array2::from_elem(self.shape(*x), gv));
                }
                Op::SumCols(x) => {
                    self.acc(&mut grads, *x, || {
                        let (r, c) = self.shape(*x);
                        Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]])
                    });
                }
                Op::MeanRows(x) => {
                    self.acc(&mut grads, *x, || {
                        let (r, c) = self.shape(*x);
                        let n = r as f64;
                        Array2::from_shape_fn((r, c), |(_, j)| g[[0, j]] / n)
                    });
                }
                Op::Log(x) => self.acc(&mut grads, *x, || &g / self.value(*x)),
                Op::Exp(x) => self.acc(&mut grads, *x, || &g * &node.value),
                Op::Abs(x) => self.acc(&mut grads, *x, || {
                    let mut out = g.clone();
                    Zip::from(&mut out).and(self.value(*x)).for_each(|o, &xv| {
                        *o *= if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    out
                }),
                Op::Sigmoid(x) => self.acc(&mut grads, *x, || {
                    let mut out = g.clone();
                    Zip::from(&mut out).and(&node.value).for_each(|o, &y| *o *= y * (1.0 - y));
                    out
                }),
                Op::Softplus(x) => self.acc(&mut grads, *x, || {
                    let mut out = g.clone();
                    Zip::from(&mut out)
                        .and(self.value(*x))
                        .for_each(|o, &xv| *o *= sigmoid_scalar(xv));
                    out
                }),
                Op::Clamp { x, lo, hi } => self.acc(&mut grads, *x, || {
                    let mut out = g.clone();
                    Zip::from(&mut out).and(self.value(*x)).for_each(|o, &xv| {
                        if xv < *lo || xv > *hi {
                            *o = 0.0;
                        }
                    });
                    out
                }),
                Op::Sqrt(x) => self.acc(&mut grads, *x, || {
                    let mut out = g.clone();
                    Zip::from(&mut out).and(&node.value).for_each(|o, &y| *o /= 2.0 * y);
                    out
                }),
                Op::Square(x) => self.acc(&mut grads, *x, || {
                    let mut out = g.clone();
                    Zip::from(&mut out).and(self.value(*x)).for_each(|o, &xv| *o *= 2.0 * xv);
                    out
                }),
                Op::SelectElems { x, picks } => {
                    self.acc(&mut grads, *x, || {
                        let mut out = Array2::zeros(self.shape(*x));
                        for (k, &(r, c)) in picks.iter().enumerate() {
                            out[[r, c]] += g[[k, 0]];
                        }
                        out
                    });
                }
            }
            // Leaves keep their gradient; interior nodes are released after use.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], target: Var, grad: impl FnOnce() -> Mat) {
        if !self.rg(target) {
            return;
        }
        let g = grad();
        match &mut grads[target.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Leaf gradients from one [`Graph::backward`] sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of a leaf. `None` when the leaf is a constant or was not
    /// reached from the loss.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
