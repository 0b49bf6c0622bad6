//! Reverse-mode differentiation over dense 2-D real arrays.
//!
//! The op set is exactly what the model needs: matmul, transpose, add,
//! scale, elementwise mul, relu, sigmoid, row softmax, fixed layer norm,
//! cross entropy from logits, column/row concatenation, row stacking and
//! sums. Every primitive registers its reverse rule on a [`Tape`]; the
//! reverse pass visits ops in exact reverse order and accumulates
//! gradients additively at fan-out, so identical tapes yield bit-identical
//! gradients.
//!
//! Values are stored as `f64`. A tape built with [`Precision::F32`]
//! rounds every op result to `f32` resolution while keeping reductions in
//! `f64`, which emulates 32-bit storage with 64-bit accumulation.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;

/// Storage resolution for tape values. Reductions always accumulate in
/// `f64`; `F32` only rounds stored results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Dense row-major 2-D array. Row vectors are `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// I.i.d. Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Sum of squared entries.
    pub fn l2_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}x{}]", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn identity_diagonal() {
        let t = Tensor::identity(3);
        assert_eq!(t.get(1, 1), 1.0);
        assert_eq!(t.get(1, 2), 0.0);
    }
}
