//! Dense f64 tensors (matrices and column vectors).
//!
//! Everything trainable is a `Tensor`; column vectors are `(n, 1)` and
//! scalars `(1, 1)`. f64 throughout so finite-difference gradient checks are
//! meaningful at 1e-4 relative error.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { rows: n, cols: 1, data }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![x] }
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// First element; the conventional read-out for `(1,1)` scalar tensors.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * v` for a `(rows, cols)` matrix and `(cols, 1)` vector.
    pub fn matvec(&self, v: &Tensor) -> Tensor {
        assert_eq!(self.cols, v.rows, "matvec shape mismatch");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row_slice(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v.data.iter()) {
                acc += a * b;
            }
            out[r] = acc;
        }
        Tensor::vector(out)
    }

    /// `selfᵀ * v` for a `(rows, cols)` matrix and `(rows, 1)` vector.
    pub fn mat_t_vec(&self, v: &Tensor) -> Tensor {
        assert_eq!(self.rows, v.rows, "mat_t_vec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row_slice(r);
            let s = v.data[r];
            for (o, a) in out.iter_mut().zip(row.iter()) {
                *o += a * s;
            }
        }
        Tensor::vector(out)
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * scale;
        }
    }

    pub fn fill(&mut self, x: f64) {
        self.data.iter_mut().for_each(|v| *v = x);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically safe softmax (max subtraction), used by oracle-side code;
/// the tape has its own mirrored implementation.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        let m = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = Tensor::vector(vec![1.0, 0.0, -1.0]);
        let mv = m.matvec(&v);
        assert_eq!(mv.as_slice(), &[-2.0, -2.0]);
        let w = Tensor::vector(vec![1.0, 1.0]);
        let mtv = m.mat_t_vec(&w);
        assert_eq!(mtv.as_slice(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_is_stable() {
        let p = softmax(&[1000.0, 1001.0, 999.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
    }
}
