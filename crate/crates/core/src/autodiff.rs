//! Reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Tape`] records matrix-valued operations during the forward pass and
//! replays them in reverse to accumulate exact adjoints. The graph is rebuilt
//! every step (no caching across steps); one tape is owned by one logical
//! thread. [`grad_check`] compares backward gradients against central finite
//! differences and is the checking mode used throughout the test suite.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore, Value};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Recip(Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// Inverse of a small square matrix (Gauss-Jordan forward).
    Inverse(Var),
    /// `[m,n] + [1,n]`
    AddRow(Var, Var),
    /// `[m,n] + [m,1]`
    AddCol(Var, Var),
    /// `[m,n] * [m,1]`
    ScaleRows(Var, Var),
    /// `[m,n] * [1,n]`
    ScaleCols(Var, Var),
    AddConst(Var, f64),
    Scale(Var, f64),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    /// Full reduction to `[1,1]`.
    Sum(Var),
    /// `[m,n] -> [m,1]`
    SumRows(Var),
    /// Inclusive cumulative product along each row.
    CumprodRows(Var),
    /// Exclusive cumulative product along each row (first entry 1).
    ExclCumprodRows(Var),
    /// Exclusive cumulative sum along each row (first entry 0).
    ExclCumsumRows(Var),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    /// `weights [R,K]`, `values [R*K,C] -> [R,C]`; row-major ray-major layout.
    SegmentWeightedSum { weights: Var, values: Var },
}

struct Node {
    value: Value,
    op: Op,
}

/// Wengert tape. Values are dense `f64` matrices; scalars are `[1,1]`.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    check_finite: bool,
    first_non_finite: Option<String>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            check_finite: false,
            first_non_finite: None,
        }
    }

    /// Enable per-node finiteness checks (checking mode; slower).
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn node_name(&self, idx: usize) -> String {
        match &self.nodes[idx].op {
            Op::Leaf { param: Some(p) } => self.store.name(*p).to_string(),
            Op::Leaf { param: None } => format!("const#{idx}"),
            op => format!("{}#{idx}", op_tag(op)),
        }
    }

    /// First node whose value went non-finite, if checking is enabled.
    pub fn finite_error(&self) -> Result<()> {
        match &self.first_non_finite {
            Some(name) => Err(Error::NonFinite { node: name.clone() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Value, op: Op) -> Var {
        let idx = self.nodes.len();
        if self.check_finite
            && self.first_non_finite.is_none()
            && !value.iter().all(|v| v.is_finite())
        {
            self.nodes.push(Node {
                value: value.clone(),
                op: op.clone(),
            });
            self.first_non_finite = Some(self.node_name(idx));
            self.nodes.pop();
        }
        self.nodes.push(Node { value, op });
        Var(idx)
    }

    // ---- leaves ------------------------------------------------------

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.value(id).clone();
        self.push(value, Op::Leaf { param: Some(id) })
    }

    pub fn constant(&mut self, value: Value) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Value::from_elem((1, 1), v))
    }

    pub fn row(&mut self, v: &[f64]) -> Var {
        self.constant(Value::from_shape_vec((1, v.len()), v.to_vec()).unwrap())
    }

    // ---- primitives --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn inverse(&mut self, a: Var) -> Var {
        let v = invert_small(&self.nodes[a.0].value);
        self.push(v, Op::Inverse(a))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[col.0].value;
        self.push(v, Op::AddCol(a, col))
    }

    pub fn scale_rows(&mut self, a: Var, col: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[col.0].value;
        self.push(v, Op::ScaleRows(a, col))
    }

    pub fn scale_cols(&mut self, a: Var, row: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        self.push(v, Op::ScaleCols(a, row))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddConst(a, c))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Value::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::Sum(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(v, Op::SumRows(a))
    }

    pub fn cumprod_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mut acc = 1.0;
            for e in row.iter_mut() {
                acc *= *e;
                *e = acc;
            }
        }
        self.push(v, Op::CumprodRows(a))
    }

    pub fn excl_cumprod_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Value::zeros(x.raw_dim());
        for (xr, mut vr) in x.rows().into_iter().zip(v.rows_mut()) {
            let mut acc = 1.0;
            for (xe, ve) in xr.iter().zip(vr.iter_mut()) {
                *ve = acc;
                acc *= *xe;
            }
        }
        self.push(v, Op::ExclCumprodRows(a))
    }

    pub fn excl_cumsum_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Value::zeros(x.raw_dim());
        for (xr, mut vr) in x.rows().into_iter().zip(v.rows_mut()) {
            let mut acc = 0.0;
            for (xe, ve) in xr.iter().zip(vr.iter_mut()) {
                *ve = acc;
                acc += *xe;
            }
        }
        self.push(v, Op::ExclCumsumRows(a))
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Value::zeros((x.nrows(), cols.len()));
        for (j, &c) in cols.iter().enumerate() {
            v.column_mut(j).assign(&x.column(c));
        }
        self.push(v, Op::SelectCols(a, cols.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.nrows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut v = Value::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let x = &self.nodes[p.0].value;
            v.slice_mut(s![.., at..at + x.ncols()]).assign(x);
            at += x.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(x.len(), rows * cols);
        let flat: Vec<f64> = x.iter().copied().collect();
        let v = Value::from_shape_vec((rows, cols), flat).unwrap();
        self.push(v, Op::Reshape(a))
    }

    /// Composite each ray's K sample values with per-sample weights:
    /// `out[r, c] = sum_k weights[r, k] * values[r*K + k, c]`.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var) -> Var {
        let w = &self.nodes[weights.0].value;
        let x = &self.nodes[values.0].value;
        let (rays, k) = w.dim();
        debug_assert_eq!(x.nrows(), rays * k);
        let mut v = Value::zeros((rays, x.ncols()));
        for r in 0..rays {
            for kk in 0..k {
                let wv = w[(r, kk)];
                let xr = x.row(r * k + kk);
                let mut out = v.row_mut(r);
                out.zip_mut_with(&xr, |o, &e| *o += wv * e);
            }
        }
        self.push(v, Op::SegmentWeightedSum { weights, values })
    }

    // ---- composites --------------------------------------------------

    /// Row-wise squared Euclidean norm: `[m,n] -> [m,1]`.
    pub fn sq_norm_rows(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_rows(sq)
    }

    /// Scalar mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar loss; returns gradients for all
    /// parameter leaves. Adjoints are tape-local and freshly zeroed, so
    /// repeated passes over identical tapes are bit-identical.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.dim();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut adjoints: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Value::from_elem((1, 1), 1.0));
        let mut grads = Gradients::new(self.store.len());

        for idx in (0..self.nodes.len()).rev() {
            let g = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        grads.add(*p, &g);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, g.clone());
                    accumulate(&mut adjoints, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints, *a, g.clone());
                    accumulate(&mut adjoints, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut adjoints, *a, ga);
                    accumulate(&mut adjoints, *b, gb);
                }
                Op::Neg(a) => accumulate(&mut adjoints, *a, -g),
                Op::Recip(a) => {
                    let y = &self.nodes[idx].value;
                    accumulate(&mut adjoints, *a, -(&g * y * y));
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut adjoints, *a, ga);
                    accumulate(&mut adjoints, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut adjoints, *a, g.t().to_owned()),
                Op::Inverse(a) => {
                    // d(X^-1) = -X^-1 dX X^-1  =>  X_bar = -Y^T G Y^T
                    let y_t = self.nodes[idx].value.t();
                    let ga = -(y_t.dot(&g).dot(&y_t));
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adjoints, *a, g);
                    accumulate(&mut adjoints, *row, grow);
                }
                Op::AddCol(a, col) => {
                    let gcol = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut adjoints, *a, g);
                    accumulate(&mut adjoints, *col, gcol);
                }
                Op::ScaleRows(a, col) => {
                    let ga = &g * &self.nodes[col.0].value;
                    let gcol = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    accumulate(&mut adjoints, *a, ga);
                    accumulate(&mut adjoints, *col, gcol);
                }
                Op::ScaleCols(a, row) => {
                    let ga = &g * &self.nodes[row.0].value;
                    let grow = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut adjoints, *a, ga);
                    accumulate(&mut adjoints, *row, grow);
                }
                Op::AddConst(a, _) => accumulate(&mut adjoints, *a, g),
                Op::Scale(a, c) => accumulate(&mut adjoints, *a, g.mapv(|x| x * c)),
                Op::Sin(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(f64::cos);
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Cos(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(|x| -x.sin());
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &self.nodes[idx].value;
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Log(a) => {
                    let ga = &g / &self.nodes[a.0].value;
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = &g * &(y * &y.mapv(|v| 1.0 - v));
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = &g * &self.nodes[idx].value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(sigmoid);
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Abs(a) => {
                    // Subgradient at 0 is defined as 0.
                    let ga = &g * &self.nodes[a.0].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[a.0].value;
                    let mask = x.mapv(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                    accumulate(&mut adjoints, *a, &g * &mask);
                }
                Op::Sum(a) => {
                    let ga = Value::from_elem(self.nodes[a.0].value.raw_dim(), g[(0, 0)]);
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::SumRows(a) => {
                    let shape = self.nodes[a.0].value.raw_dim();
                    let mut ga = Value::zeros(shape);
                    for (mut row, gv) in ga.rows_mut().into_iter().zip(g.iter()) {
                        row.fill(*gv);
                    }
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::CumprodRows(a) => {
                    // dL/da_l = prefix_{<l} * Q_l with Q_l = g_l + a_{l+1} Q_{l+1}
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[idx].value;
                    let mut ga = Value::zeros(x.raw_dim());
                    let k = x.ncols();
                    for r in 0..x.nrows() {
                        let mut q = 0.0;
                        for l in (0..k).rev() {
                            q = g[(r, l)] + if l + 1 < k { x[(r, l + 1)] * q } else { 0.0 };
                            let prefix = if l == 0 { 1.0 } else { y[(r, l - 1)] };
                            ga[(r, l)] = prefix * q;
                        }
                    }
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::ExclCumprodRows(a) => {
                    // dL/da_l = P_l * S_l with S_l = g_{l+1} + a_{l+1} S_{l+1}
                    let x = &self.nodes[a.0].value;
                    let p = &self.nodes[idx].value;
                    let mut ga = Value::zeros(x.raw_dim());
                    let k = x.ncols();
                    for r in 0..x.nrows() {
                        let mut s_acc = 0.0;
                        for l in (0..k).rev() {
                            if l + 1 < k {
                                s_acc = g[(r, l + 1)] + x[(r, l + 1)] * s_acc;
                            } else {
                                s_acc = 0.0;
                            }
                            ga[(r, l)] = p[(r, l)] * s_acc;
                        }
                    }
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::ExclCumsumRows(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut ga = Value::zeros(x.raw_dim());
                    let k = x.ncols();
                    for r in 0..x.nrows() {
                        let mut acc = 0.0;
                        for l in (0..k).rev() {
                            if l + 1 < k {
                                acc += g[(r, l + 1)];
                            }
                            ga[(r, l)] = acc;
                        }
                    }
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::SelectCols(a, cols) => {
                    let mut ga = Value::zeros(self.nodes[a.0].value.raw_dim());
                    for (j, &c) in cols.iter().enumerate() {
                        let gj = g.column(j);
                        let mut target = ga.column_mut(c);
                        target += &gj;
                    }
                    accumulate(&mut adjoints, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let gp = g.slice(s![.., at..at + w]).to_owned();
                        accumulate(&mut adjoints, *p, gp);
                        at += w;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    accumulate(&mut adjoints, *a, Value::from_shape_vec(shape, flat).unwrap());
                }
                Op::SegmentWeightedSum { weights, values } => {
                    let w = &self.nodes[weights.0].value;
                    let x = &self.nodes[values.0].value;
                    let (rays, k) = w.dim();
                    let mut gw = Value::zeros((rays, k));
                    let mut gx = Value::zeros(x.raw_dim());
                    for r in 0..rays {
                        let gr = g.row(r);
                        for kk in 0..k {
                            let xr = x.row(r * k + kk);
                            gw[(r, kk)] = gr.dot(&xr);
                            let mut gxr = gx.row_mut(r * k + kk);
                            gxr.zip_mut_with(&gr, |o, &e| *o += w[(r, kk)] * e);
                        }
                    }
                    accumulate(&mut adjoints, *weights, gw);
                    accumulate(&mut adjoints, *values, gx);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adjoints: &mut [Option<Value>], v: Var, g: Value) {
    match &mut adjoints[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
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

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Gauss-Jordan inverse with partial pivoting; meant for 3x3 transforms.
fn invert_small(m: &Value) -> Value {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "inverse requires a square matrix");
    let mut a = m.clone();
    let mut inv = Value::eye(n);
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[(r, col)].abs() > a[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for c in 0..n {
                a.swap((col, c), (pivot, c));
                inv.swap((col, c), (pivot, c));
            }
        }
        let d = a[(col, col)];
        let inv_d = 1.0 / d;
        for c in 0..n {
            a[(col, c)] *= inv_d;
            inv[(col, c)] *= inv_d;
        }
        for r in 0..n {
            if r != col {
                let f = a[(r, col)];
                if f != 0.0 {
                    for c in 0..n {
                        a[(r, c)] -= f * a[(col, c)];
                        inv[(r, c)] -= f * inv[(col, c)];
                    }
                }
            }
        }
    }
    inv
}

fn op_tag(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Neg(..) => "neg",
        Op::Recip(..) => "recip",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Inverse(..) => "inverse",
        Op::AddRow(..) => "add_row",
        Op::AddCol(..) => "add_col",
        Op::ScaleRows(..) => "scale_rows",
        Op::ScaleCols(..) => "scale_cols",
        Op::AddConst(..) => "add_const",
        Op::Scale(..) => "scale",
        Op::Sin(..) => "sin",
        Op::Cos(..) => "cos",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Softplus(..) => "softplus",
        Op::Abs(..) => "abs",
        Op::Clamp(..) => "clamp",
        Op::Sum(..) => "sum",
        Op::SumRows(..) => "sum_rows",
        Op::CumprodRows(..) => "cumprod_rows",
        Op::ExclCumprodRows(..) => "excl_cumprod_rows",
        Op::ExclCumsumRows(..) => "excl_cumsum_rows",
        Op::SelectCols(..) => "select_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Reshape(..) => "reshape",
        Op::SegmentWeightedSum { .. } => "segment_weighted_sum",
    }
}

// ---- finite-difference checking -------------------------------------

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Outcome of [`grad_check`]. Non-finite comparisons are reported, not
/// thrown, and excluded from the max.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub non_finite: Vec<String>,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_err < threshold
    }
}

/// Compare backward gradients with central finite differences of step
/// `epsilon` for the listed parameters. `cap` limits checked components
/// per parameter (deterministic stride subsample); `None` checks all.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    epsilon: f64,
    cap: Option<usize>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store).with_finite_checks();
        let loss = build(&mut tape)?;
        tape.finite_error()?;
        tape.backward(loss)?
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        Ok(tape.scalar_value(loss))
    };

    let mut per_param = Vec::new();
    let mut non_finite = Vec::new();
    let mut global_max: f64 = 0.0;

    for &id in params {
        let n = store.value(id).len();
        let shape = store.value(id).raw_dim();
        let indices: Vec<usize> = match cap {
            Some(c) if c < n => {
                // Evenly strided subsample keeps coverage deterministic.
                (0..c).map(|i| i * n / c).collect()
            }
            _ => (0..n).collect(),
        };
        let mut max_rel: f64 = 0.0;
        for &flat in &indices {
            let (r, c) = (flat / shape[1], flat % shape[1]);
            let orig = store.value(id)[(r, c)];
            store.entry_mut(id).value[(r, c)] = orig + epsilon;
            let plus = eval(store)?;
            store.entry_mut(id).value[(r, c)] = orig - epsilon;
            let minus = eval(store)?;
            store.entry_mut(id).value[(r, c)] = orig;

            let fd = (plus - minus) / (2.0 * epsilon);
            let ad = grads.get(id).map_or(0.0, |g| g[(r, c)]);
            if !fd.is_finite() || !ad.is_finite() {
                non_finite.push(format!("{}[{},{}]", store.name(id), r, c));
                continue;
            }
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        global_max = global_max.max(max_rel);
        per_param.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: max_rel,
            checked: indices.len(),
        });
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: global_max,
        non_finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{glorot, ParamGroup};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: &[(&str, Value)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, v)| {
                store
                    .register(n, ParamGroup::Transforms, v.clone())
                    .unwrap()
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn exp_at_zero_has_unit_value_and_derivative() {
        let (store, ids) = store_with(&[("x", Value::zeros((1, 1)))]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ids[0]);
        let y = tape.exp(x);
        assert_eq!(tape.scalar_value(y), 1.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let (store, ids) = store_with(&[("x", Value::zeros((1, 1)))]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ids[0]);
        let y = tape.sigmoid(x);
        assert_eq!(tape.scalar_value(y), 0.5);
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(ids[0]).unwrap()[(0, 0)] - 0.25).abs() < 1e-15);
    }

    // Hand-expanded dot product: (a . b) for length-3 vectors.
    #[test]
    fn dot_product_matches_hand_expansion() {
        let a = Value::from_shape_vec((1, 3), vec![1.5, -2.0, 0.25]).unwrap();
        let b = Value::from_shape_vec((1, 3), vec![4.0, 0.5, -3.0]).unwrap();
        let expected = 1.5 * 4.0 + (-2.0) * 0.5 + 0.25 * (-3.0);
        let (store, ids) = store_with(&[("a", a), ("b", b)]);
        let mut tape = Tape::new(&store);
        let av = tape.param(ids[0]);
        let bv = tape.param(ids[1]);
        let prod = tape.mul(av, bv);
        let dot = tape.sum(prod);
        assert!((tape.scalar_value(dot) - expected).abs() < 1e-15);
        // d(dot)/da = b, d(dot)/db = a
        let grads = tape.backward(dot).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap(), store.value(ids[1]));
        assert_eq!(grads.get(ids[1]).unwrap(), store.value(ids[0]));
    }

    #[test]
    fn single_parameter_loss_has_unit_gradient() {
        let (store, ids) = store_with(&[("p", Value::from_elem((1, 1), 7.0))]);
        let mut tape = Tape::new(&store);
        let p = tape.param(ids[0]);
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn square_loss_gradient_is_two_p() {
        let (store, ids) = store_with(&[("p", Value::from_elem((1, 1), 3.0))]);
        let mut tape = Tape::new(&store);
        let p = tape.param(ids[0]);
        let sq = tape.mul(p, p);
        assert_eq!(tape.scalar_value(sq), 9.0);
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap()[(0, 0)], 6.0);
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let (store, ids) = store_with(&[("p", Value::zeros((2, 3)))]);
        let mut tape = Tape::new(&store);
        let p = tape.param(ids[0]);
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let (mut store, _) = store_with(&[("p", Value::from_elem((1, 1), 2.0))]);
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(&mut store, &ids, 1e-5, None, |tape| {
            Ok(tape.scalar(4.2))
        })
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn quadratic_loss_grad_check_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut store, ids) = store_with(&[("w", glorot(&mut rng, 4, 4)), ("x", glorot(&mut rng, 1, 4))]);
        let report = grad_check(&mut store, &ids, 1e-5, None, |tape| {
            let w = tape.param(ids[0]);
            let x = tape.param(ids[1]);
            let y = tape.matmul(x, w);
            let n = tape.sq_norm_rows(y);
            Ok(tape.sum(n))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "max rel {}", report.max_rel_err);
    }

    // Random 3-deep composition of the supported primitives against
    // central finite differences.
    #[test]
    fn random_composition_matches_finite_differences() {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (mut store, ids) = store_with(&[
                ("w1", glorot(&mut rng, 3, 5)),
                ("w2", glorot(&mut rng, 5, 4)),
                ("b", glorot(&mut rng, 1, 4)),
                ("x", glorot(&mut rng, 2, 3)),
            ]);
            let report = grad_check(&mut store, &ids, 1e-5, None, |tape| {
                let w1 = tape.param(ids[0]);
                let w2 = tape.param(ids[1]);
                let b = tape.param(ids[2]);
                let x = tape.param(ids[3]);
                let h = tape.matmul(x, w1);
                let h = tape.sin(h);
                let h = tape.matmul(h, w2);
                let h = tape.add_row(h, b);
                let h = tape.sigmoid(h);
                let h = tape.excl_cumprod_rows(h);
                let sq = tape.mul(h, h);
                let s = tape.sum(sq);
                let e = tape.exp(s);
                Ok(tape.add_const(e, -1.0))
            })
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "seed {seed}: max rel {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn cumprod_reductions_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = glorot(&mut rng, 3, 6).mapv(|v| v + 2.0); // keep away from zero
        let (mut store, ids) = store_with(&[("x", x)]);
        for op in 0..3 {
            let report = grad_check(&mut store, &ids, 1e-5, None, |tape| {
                let xv = tape.param(ids[0]);
                let y = match op {
                    0 => tape.cumprod_rows(xv),
                    1 => tape.excl_cumprod_rows(xv),
                    _ => tape.excl_cumsum_rows(xv),
                };
                let sq = tape.mul(y, y);
                Ok(tape.sum(sq))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "op {op}: {}", report.max_rel_err);
        }
    }

    #[test]
    fn inverse_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Value::eye(3) + glorot(&mut rng, 3, 3).mapv(|v| 0.3 * v);
        let (mut store, ids) = store_with(&[("a", a)]);
        let report = grad_check(&mut store, &ids, 1e-6, None, |tape| {
            let a = tape.param(ids[0]);
            let inv = tape.inverse(a);
            let sq = tape.mul(inv, inv);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }

    #[test]
    fn segment_weighted_sum_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut store, ids) = store_with(&[
            ("w", glorot(&mut rng, 2, 3)),
            ("v", glorot(&mut rng, 6, 4)),
        ]);
        let report = grad_check(&mut store, &ids, 1e-5, None, |tape| {
            let w = tape.param(ids[0]);
            let v = tape.param(ids[1]);
            let out = tape.segment_weighted_sum(w, v);
            let sq = tape.mul(out, out);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn select_concat_reshape_round_trip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (mut store, ids) = store_with(&[("x", glorot(&mut rng, 4, 3))]);
        let report = grad_check(&mut store, &ids, 1e-5, None, |tape| {
            let x = tape.param(ids[0]);
            let a = tape.select_cols(x, &[2, 0]);
            let b = tape.select_cols(x, &[1]);
            let y = tape.concat_cols(&[a, b]);
            let y = tape.reshape(y, 2, 6);
            let sq = tape.mul(y, y);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn two_passes_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (store, ids) = store_with(&[("w", glorot(&mut rng, 8, 8)), ("x", glorot(&mut rng, 4, 8))]);
        let run = || {
            let mut tape = Tape::new(&store);
            let w = tape.param(ids[0]);
            let x = tape.param(ids[1]);
            let h = tape.matmul(x, w);
            let h = tape.tanh(h);
            let s = tape.sq_norm_rows(h);
            let loss = tape.sum(s);
            tape.backward(loss).unwrap()
        };
        let g1 = run();
        let g2 = run();
        for id in &ids {
            let a = g1.get(*id).unwrap();
            let b = g2.get(*id).unwrap();
            assert!(a
                .iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn finite_check_names_the_offending_node() {
        let (store, ids) = store_with(&[("x", Value::from_elem((1, 1), -1.0))]);
        let mut tape = Tape::new(&store).with_finite_checks();
        let x = tape.param(ids[0]);
        let _ = tape.log(x); // ln of a negative value
        let err = tape.finite_error().unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("log"), "{msg}");
    }

    #[test]
    fn abs_derivative_at_zero_is_zero() {
        let (store, ids) = store_with(&[("x", Value::zeros((1, 1)))]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ids[0]);
        let y = tape.abs(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap()[(0, 0)], 0.0);
    }
}
