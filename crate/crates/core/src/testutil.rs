//! Independent dense-matrix oracles and random fixtures for unit tests.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::seed;

pub fn gaussian_matrix(rows: usize, cols: usize, s: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(s, &[0xC0FFEE]);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

pub fn gaussian_vector(len: usize, s: u64) -> DVector<f64> {
    gaussian_matrix(len, 1, s).column(0).into_owned()
}

/// `(XᵀX + τI)⁻¹Xᵀy` by Cholesky of the explicit normal matrix.
pub fn dense_ridge(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64) -> DVector<f64> {
    let q = x.ncols();
    let a = x.transpose() * x + DMatrix::identity(q, q) * tau;
    a.cholesky().expect("SPD").solve(&(x.transpose() * y))
}

/// GCV from its definition with an explicit hat matrix.
pub fn dense_gcv(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64) -> f64 {
    let (n, q) = x.shape();
    let a = x.transpose() * x + DMatrix::identity(q, q) * tau;
    let hat = x * a.try_inverse().expect("invertible") * x.transpose();
    let resid = y - &hat * y;
    let denom = n as f64 - hat.trace();
    resid.norm_squared() / (denom * denom)
}

/// `I − Xs(XsᵀXs)⁻¹Xsᵀ`.
pub fn dense_annihilator(xs: &DMatrix<f64>) -> DMatrix<f64> {
    let n = xs.nrows();
    let gram_inv = (xs.transpose() * xs).try_inverse().expect("full rank");
    DMatrix::identity(n, n) - xs * gram_inv * xs.transpose()
}
