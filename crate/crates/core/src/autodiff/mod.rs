//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records each op as it runs. Calling [`Tape::backward`] on a
//! scalar sweeps the record in reverse and yields [`Gradients`] for every
//! tracked leaf. Parameters stay outside the tape as [`Tensor`]s and are
//! copied on with [`Tape::leaf`] or [`Tape::param`].
//!
//! ```
//! use uvlm::autodiff::{Tape, Tensor};
//!
//! let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5])?.with_requires_grad(true);
//! let mut tape = Tape::new();
//! let v = tape.leaf(&x);
//! let sq = tape.mul(v, v)?;
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss)?;
//! assert_eq!(grads.get(v).unwrap(), &[2.0, -4.0, 1.0]);
//! # Ok::<(), uvlm::Error>(())
//! ```

pub mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, GradCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Eager (tape-free) helpers used by inference code and tests.
pub mod eager {
    use super::kernels;

    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let mut out = row.to_vec();
        kernels::softmax_in_place(&mut out);
        out
    }

    pub fn log_sigmoid(x: f64) -> f64 {
        kernels::log_sigmoid(x)
    }

    pub fn gelu(x: f64) -> f64 {
        kernels::gelu(x)
    }

    /// Index of the maximum; ties resolve to the lowest index.
    pub fn argmax(xs: &[f64]) -> usize {
        kernels::argmax(xs)
    }

    /// `a (m×k) · b (k×n)` on plain row-major slices.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a, false, b, false, 0.0, &mut out);
        out
    }

    /// `a (m×k) · bᵀ` where `b` is stored `n×k`.
    pub fn matmul_t(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a, false, b, true, 0.0, &mut out);
        out
    }
}
