#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use semforge::{seed, DataSet, ExoAssignment};

pub fn gaussian(rows: usize, cols: usize, s: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(s, &[0xfeed]);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

pub fn gaussian_vec(len: usize, s: u64) -> DVector<f64> {
    gaussian(len, 1, s).column(0).into_owned()
}

/// F2-coded genotypes.
pub fn genotypes(rows: usize, cols: usize, s: u64) -> DMatrix<f64> {
    use rand::Rng;
    let mut rng = seed::rng(s, &[0xbeef]);
    DMatrix::from_fn(rows, cols, |_, _| {
        f64::from(u8::from(rng.random_bool(0.5)) + u8::from(rng.random_bool(0.5)))
    })
}

/// Data from `Y(I − Γ) = XΨ + ε` with one instrument per node (`Ψ = I`).
pub fn system(gamma: &DMatrix<f64>, n: usize, noise_sd: f64, s: u64) -> (DataSet, ExoAssignment) {
    let p = gamma.nrows();
    let x = genotypes(n, p, s);
    let eps = gaussian(n, p, s + 1) * noise_sd;
    let rhs = &x + eps;
    let y = (DMatrix::identity(p, p) - gamma)
        .transpose()
        .lu()
        .solve(&rhs.transpose())
        .expect("I − Γ invertible")
        .transpose();
    (DataSet::unnamed(y, x), ExoAssignment::consecutive_blocks(p, 1))
}

/// Y1 → Y2 with effect 0.8.
pub fn two_node(n: usize, s: u64) -> (DataSet, ExoAssignment) {
    let mut g = DMatrix::zeros(2, 2);
    g[(0, 1)] = 0.8;
    system(&g, n, 0.1, s)
}
