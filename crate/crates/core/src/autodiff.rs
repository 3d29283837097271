//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Only the handful of operations the toy backbone needs are supported:
//! products, sums, scaling and row softmax. The tape is rebuilt for every
//! forward pass.

use std::ops::Range;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for i in 0..self.cols {
                let a = self.data[k * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, bv) in orow.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "add shape"
        );
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "add shape"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn softmax_rows(&self) -> Mat {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - peak).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        out
    }

    /// Columns `range` as a new matrix.
    pub fn columns(&self, range: Range<usize>) -> Mat {
        let cols = range.len();
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Mat::from_vec(self.rows, cols, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].matmul(&self.values[b.0]);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`, the shape of a linear layer applied to row vectors.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].matmul_t(&self.values[b.0]);
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].add(&self.values[b.0]);
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.values[a.0].scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.values[a.0].softmax_rows();
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Propagates the seed cotangents back through the tape. Returns one
    /// gradient slot per node; `None` where no gradient flowed.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.values.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match self.ops[idx] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(&self.values[b.0]);
                    let db = self.values[a.0].t_matmul(&g);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(&self.values[b.0]);
                    let db = g.t_matmul(&self.values[a.0]);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.clone());
                }
                Op::Scale(a, s) => accumulate(&mut grads, a, g.scale(s)),
                Op::SoftmaxRows(a) => {
                    let y = &self.values[idx];
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            dx.data[r * y.cols + c] = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, a, dx);
                }
            }
            // keep leaf gradients for the caller
            if matches!(self.ops[idx], Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}
