//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Leaves created with
//! [`Tape::constant`] never receive gradients; leaves created with
//! [`Tape::variable`] do, and so does every node downstream of one. Calling
//! [`Tape::backward`] on a 1x1 node walks the record in reverse.
//!
//! Vectors are represented as 1xN matrices; broadcasting exists only for the
//! row-bias case ([`Tape::add_row`]).

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    Reshape(Var),
    /// Scalar head whose input gradient was computed during the forward pass.
    Scalar {
        x: Var,
        grad: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a 1xN row to every row of an MxN matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: bias must be 1x{n}");
        let value = self.value(a) + self.value(row);
        let rg = self.any_grad(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with a learned 1xN scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.dim();
        let mut xhat = Array2::zeros((m, n));
        let mut inv_std = Vec::with_capacity(m);
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            xhat.row_mut(i)
                .zip_mut_with(&row, |h, &v| *h = (v - mean) * inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Divides each row by its Euclidean norm. Rows with zero norm are the
    /// caller's responsibility to reject beforehand.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt();
            norms.push(norm);
            row.mapv_inplace(|v| v / norm);
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// `out.flat[i] = x.flat[index[i]]`, producing a `rows x cols` matrix.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather: index length");
        let src = self.value(x);
        let src = src.as_slice().expect("tape values are contiguous");
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let value = Array2::from_shape_vec((rows, cols), data).expect("gather shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gather { x, index }, rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(x)
            .to_shape((rows, cols))
            .expect("reshape: element count")
            .to_owned();
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `x`.
    pub fn scalar(&mut self, x: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(self.shape(x), grad.dim(), "scalar: gradient shape");
        let rg = self.any_grad(&[x]);
        self.push(Array2::from_elem((1, 1), value), Op::Scalar { x, grad }, rg)
    }

    /// Back-propagates from a 1x1 node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward expects a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.dot(self.value(*b));
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = g.t().dot(self.value(*a));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.requires_grad(*row) {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(|x| {
                    let inner = GELU_C * (x + GELU_K * x * x * x);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
                });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = node.value.mapv(|y| y * (1.0 - y));
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = y * g;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * dot);
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.requires_grad(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, dg);
                }
                if self.requires_grad(*beta) {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *beta, db);
                }
                if self.requires_grad(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (i, (dh, h)) in dxhat.rows().into_iter().zip(xhat.rows()).enumerate() {
                        let sum_d = dh.sum();
                        let sum_dh = dh.dot(&h);
                        let inv = inv_std[i];
                        Zip::from(dx.row_mut(i))
                            .and(&dh)
                            .and(&h)
                            .for_each(|o, &d, &hv| *o = inv / n * (n * d - sum_d - hv * sum_dh));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (i, (mut drow, yrow)) in dx.rows_mut().into_iter().zip(y.rows()).enumerate() {
                    let dot = drow.dot(&yrow);
                    let inv = 1.0 / norms[i];
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &yv| *dv = (*dv - yv * dot) * inv);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                let end = start + g.ncols();
                d.slice_mut(s![.., *start..end]).assign(g);
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::Gather { x, index } => {
                let mut d = Array2::<f64>::zeros(self.shape(*x));
                {
                    let dst = d.as_slice_mut().expect("contiguous");
                    let src = g.as_slice().expect("contiguous");
                    for (&i, &gv) in index.iter().zip(src) {
                        dst[i] += gv;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g
                    .to_shape(self.shape(*x))
                    .expect("reshape gradient")
                    .to_owned();
                self.accumulate(grads, *x, d);
            }
            Op::Scalar { x, grad } => {
                let up = g[[0, 0]];
                self.accumulate(grads, *x, grad * up);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
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
