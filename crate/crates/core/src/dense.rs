use serde::Serialize;

use crate::error::{Error, Result};
use crate::linop::LinearOperator;

/// Row-major dense square matrix, optionally flagged symmetric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenseSymMatrix {
    n: usize,
    data: Vec<f64>,
    symmetric: bool,
}

impl DenseSymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
            symmetric: true,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Wraps row-major data. When `symmetric` is set, the data must be
    /// symmetric to within `1e-13` relative to its largest entry.
    pub fn from_row_major(n: usize, data: Vec<f64>, symmetric: bool) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearAlgebra("matrix has non-finite entries".into()));
        }
        let m = Self { n, data, symmetric };
        if symmetric {
            let scale = m.max_abs().max(f64::MIN_POSITIVE);
            let asym = m.asymmetry();
            if asym > 1e-13 * scale {
                return Err(Error::LinearAlgebra(format!(
                    "matrix flagged symmetric but max |A - A^T| = {asym:e}"
                )));
            }
        }
        Ok(m)
    }

    /// Builds a symmetric matrix from a generator evaluated on the lower
    /// triangle and mirrored.
    pub fn from_lower_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.data[i * n + j] - self.data[j * n + i]).abs());
            }
        }
        worst
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.apply(x, &mut y);
        y
    }

    pub fn matmul(&self, other: &DenseSymMatrix) -> DenseSymMatrix {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let orow = &mut out[i * n..(i + 1) * n];
            for k in 0..n {
                let a = self.data[i * n + k];
                if a != 0.0 {
                    for (o, b) in orow.iter_mut().zip(other.row(k)) {
                        *o += a * b;
                    }
                }
            }
        }
        DenseSymMatrix {
            n,
            data: out,
            symmetric: false,
        }
    }

    pub fn sub(&self, other: &DenseSymMatrix) -> DenseSymMatrix {
        DenseSymMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            symmetric: self.symmetric && other.symmetric,
        }
    }

    pub fn scaled(&self, s: f64) -> DenseSymMatrix {
        DenseSymMatrix {
            n: self.n,
            data: self.data.iter().map(|a| a * s).collect(),
            symmetric: self.symmetric,
        }
    }

    /// Replaces the matrix by `(A + A^T) / 2` and flags it symmetric.
    pub fn symmetrize(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
        self.symmetric = true;
    }

    pub fn transpose(&self) -> DenseSymMatrix {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[j * n + i] = self.data[i * n + j];
            }
        }
        DenseSymMatrix {
            n,
            data: out,
            symmetric: self.symmetric,
        }
    }
}

impl LinearOperator for DenseSymMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (yi, row) in y.iter_mut().zip(self.data.chunks_exact(self.n)) {
            *yi = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

/// Four independent partial sums so the loop vectorises; the summation
/// order depends only on the length.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}


pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
