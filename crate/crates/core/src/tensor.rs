//! Dense 64-bit float tensors, the only numeric carrier in the network.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// An n-dimensional row-major array of `f64`. In practice the network uses
/// vectors (`[n]`) and matrices (`[rows, cols]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Matrix filled from a seeded uniform distribution on `[lo, hi]`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..=hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[0],
            n => panic!("rows() on {n}-d tensor"),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[1],
            n => panic!("cols() on {n}-d tensor"),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// `M x`, for a `[rows, cols]` matrix and a `cols` vector.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.rows(), self.cols());
        assert_eq!(x.len(), cols, "matvec width mismatch");
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matvec_matches_hand_computation() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = m.matvec(&[1.0, 0.5, -1.0]);
        assert_eq!(y, vec![1.0 + 1.0 - 3.0, 4.0 + 2.5 - 6.0]);
    }

    #[test]
    fn uniform_is_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::uniform(&[3, 4], -0.08, 0.08, &mut r1);
        let b = Tensor::uniform(&[3, 4], -0.08, 0.08, &mut r2);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (-0.08..=0.08).contains(v)));
    }

    #[test]
    fn row_access() {
        let m = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m.row(1), &[2.0, 3.0]);
        assert_eq!(m.at(2, 0), 4.0);
    }
}
