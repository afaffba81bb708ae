//! Stage two: one adaptive-lasso regression per structural equation.
//!
//! For equation `k` with instruments `X_S` the penalized problem
//!
//! ```text
//! ½‖y_k − Ẑ_{−k}γ − X_S ψ‖² + λ Σ_j ω_j |γ_j|
//! ```
//!
//! is profiled over `ψ`, leaving a weighted lasso on the annihilated data
//! `H y_k`, `H Ẑ_{−k}` with `H = I − X_S(X_SᵀX_S)⁻¹X_Sᵀ`. Weights come from
//! a pilot estimate, `λ` from K-fold cross-validation over a log-spaced
//! path, and `ψ̂` is recovered by least squares once `γ̂` is known.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ridge::log_grid;
use crate::seed;
use crate::{Error, Result};

/// Relative residual norm under which an instrument column counts as
/// dependent on the ones before it.
const DEPENDENCE_TOLERANCE: f64 = 1e-8;

/// Penalty of the ridge fallback used for pilot estimates.
pub const RIDGE_PILOT_PENALTY: f64 = 1.0;

/// Condition-number ceiling on the pilot Gram matrix for least squares.
const PILOT_CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DependentColumns {
    Reject,
    Drop,
}

/// Applies `H = I − Q·Qᵀ` where `Q` is an orthonormal basis of the
/// instrument columns; also solves least squares on those columns.
#[derive(Debug, Clone)]
pub struct Annihilator {
    basis: DMatrix<f64>,
    // upper triangular factor of the kept columns, `X_kept = Q·R`
    r: DMatrix<f64>,
    kept: Vec<usize>,
    dropped: Vec<usize>,
    ncols: usize,
}

impl Annihilator {
    /// Orthonormalizes `xs` by modified Gram-Schmidt with one
    /// reorthogonalization pass.
    pub fn new(xs: &DMatrix<f64>, dependent: DependentColumns) -> Result<Self> {
        let (n, s) = xs.shape();
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(s);
        let mut r_cols: Vec<(Vec<f64>, f64)> = Vec::with_capacity(s);
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..s {
            let mut v = xs.column(j).into_owned();
            let norm0 = v.norm();
            let mut coeffs = vec![0.0; basis.len()];
            for _ in 0..2 {
                for (i, q) in basis.iter().enumerate() {
                    let c = q.dot(&v);
                    v.axpy(-c, q, 1.0);
                    coeffs[i] += c;
                }
            }
            let rn = v.norm();
            if norm0 == 0.0 || rn <= DEPENDENCE_TOLERANCE * norm0 {
                dropped.push(j);
                continue;
            }
            basis.push(v / rn);
            r_cols.push((coeffs, rn));
            kept.push(j);
        }
        if !dropped.is_empty() && (dependent == DependentColumns::Reject || kept.is_empty()) {
            return Err(Error::CollinearInstruments { dependent: dropped });
        }
        let rank = kept.len();
        let mut r = DMatrix::zeros(rank, rank);
        for (c, (coeffs, diag)) in r_cols.into_iter().enumerate() {
            for (i, v) in coeffs.into_iter().enumerate() {
                r[(i, c)] = v;
            }
            r[(c, c)] = diag;
        }
        let basis = if basis.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&basis)
        };
        Ok(Self {
            basis,
            r,
            kept,
            dropped,
            ncols: s,
        })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.basis * self.basis.tr_mul(v)
    }

    pub fn apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m - &self.basis * self.basis.tr_mul(m)
    }

    /// `(X_SᵀX_S)⁻¹X_Sᵀv` on the kept columns; dropped columns get zero.
    pub fn least_squares(&self, v: &DVector<f64>) -> DVector<f64> {
        let b = self.basis.tr_mul(v);
        let mut out = DVector::zeros(self.ncols);
        if b.is_empty() {
            return out;
        }
        let coef = self
            .r
            .solve_upper_triangular(&b)
            .expect("triangular factor has a positive diagonal");
        for (slot, &col) in self.kept.iter().enumerate() {
            out[col] = coef[slot];
        }
        out
    }
}

/// Strict constructor: collinear instruments are an error.
pub fn annihilator(xs: &DMatrix<f64>) -> Result<Annihilator> {
    Annihilator::new(xs, DependentColumns::Reject)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotMethod {
    LeastSquares,
    Ridge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotEstimate {
    pub coef: DVector<f64>,
    pub method: PilotMethod,
}

impl PilotEstimate {
    pub fn penalty(&self) -> f64 {
        match self.method {
            PilotMethod::LeastSquares => 0.0,
            PilotMethod::Ridge => RIDGE_PILOT_PENALTY,
        }
    }
}

/// Pilot estimate for the adaptive weights: least squares when `n > m` and
/// the Gram matrix is well conditioned, otherwise ridge with penalty 1.
pub fn initial_estimate(y: &DVector<f64>, z: &DMatrix<f64>) -> PilotEstimate {
    let (n, m) = z.shape();
    if m == 0 {
        return PilotEstimate {
            coef: DVector::zeros(0),
            method: PilotMethod::LeastSquares,
        };
    }
    let svd = z.clone().svd(true, true);
    let d = &svd.singular_values;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    let dmax = d.max();
    let dmin = d.min();
    let well_posed =
        n > m && d.len() == m && dmin > 0.0 && (dmax / dmin).powi(2) <= PILOT_CONDITION_LIMIT;
    let coords = u.tr_mul(y);
    let scaled = DVector::from_iterator(
        d.len(),
        d.iter().zip(coords.iter()).map(|(&s, &c)| {
            if well_posed {
                c / s
            } else {
                c * s / (s * s + RIDGE_PILOT_PENALTY)
            }
        }),
    );
    PilotEstimate {
        coef: v_t.tr_mul(&scaled),
        method: if well_posed {
            PilotMethod::LeastSquares
        } else {
            PilotMethod::Ridge
        },
    }
}

/// `ω_j = (|γ̃_j| + ε)^(−δ)` with `ε = 1e-10·max(1, max|γ̃|)`.
pub fn weights(pilot: &DVector<f64>, delta: f64) -> DVector<f64> {
    assert!(delta > 0.0, "weight exponent must be positive");
    let floor = 1e-10 * pilot.amax().max(1.0);
    pilot.map(|g| (g.abs() + floor).powf(-delta))
}

fn soft_threshold(a: f64, b: f64) -> f64 {
    if a > b {
        a - b
    } else if a < -b {
        a + b
    } else {
        0.0
    }
}

/// Which gradient bookkeeping the coordinate-descent solver uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    /// Covariance updates when `m ≤ n`, residual updates otherwise.
    #[default]
    Auto,
    /// Keeps `DᵀD` and updates the gradient in `O(m)` per coordinate.
    Covariance,
    /// Keeps the residual and updates it in `O(n)` per coordinate.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub max_sweeps: usize,
    /// Converged when the largest coefficient change of a full sweep is at
    /// most `tolerance·(1 + max|γ|)`.
    pub tolerance: f64,
    /// Try an exact solve on the active set once sweeps have settled.
    pub polish: bool,
    pub mode: SolverMode,
    #[serde(skip)]
    pub trace_objective: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 100_000,
            tolerance: 1e-7,
            polish: true,
            mode: SolverMode::Auto,
            trace_objective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub coef: DVector<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after every sweep (and after an accepted polish step),
    /// only filled when `trace_objective` is set.
    pub objective_trace: Vec<f64>,
}

/// Per-design precomputation shared by every `(ω, λ)` solve.
pub struct LassoWorkspace<'a> {
    y: &'a DVector<f64>,
    d: &'a DMatrix<f64>,
    col_sq: DVector<f64>,
    dty: DVector<f64>,
    yty: f64,
    gram: Option<DMatrix<f64>>,
    scale: f64,
}

struct CdState {
    coef: DVector<f64>,
    // gradient Dᵀ(y − Dγ) in covariance mode, residual y − Dγ otherwise
    work: DVector<f64>,
}

impl<'a> LassoWorkspace<'a> {
    pub fn new(y: &'a DVector<f64>, d: &'a DMatrix<f64>, mode: SolverMode) -> Self {
        assert_eq!(y.len(), d.nrows(), "response and design row counts differ");
        let (n, m) = d.shape();
        let covariance = match mode {
            SolverMode::Auto => m <= n,
            SolverMode::Covariance => true,
            SolverMode::Residual => false,
        };
        let dty = d.tr_mul(y);
        let col_sq = DVector::from_iterator(m, d.column_iter().map(|c| c.norm_squared()));
        Self {
            y,
            d,
            col_sq,
            scale: dty.amax().max(1.0),
            dty,
            yty: y.norm_squared(),
            gram: covariance.then(|| d.tr_mul(d)),
        }
    }

    pub fn ncols(&self) -> usize {
        self.d.ncols()
    }

    /// Smallest `λ` at which the solution is identically zero.
    pub fn lambda_max(&self, omega: &DVector<f64>) -> f64 {
        self.dty
            .iter()
            .zip(omega.iter())
            .map(|(g, w)| g.abs() / w)
            .fold(0.0, f64::max)
    }

    fn partial(&self, st: &CdState, j: usize) -> f64 {
        match &self.gram {
            Some(_) => st.work[j],
            None => self.d.column(j).dot(&st.work),
        }
    }

    fn shift(&self, st: &mut CdState, j: usize, delta: f64) {
        match &self.gram {
            Some(g) => st.work.axpy(-delta, &g.column(j), 1.0),
            None => st.work.axpy(-delta, &self.d.column(j), 1.0),
        }
    }

    fn refresh(&self, st: &mut CdState) {
        st.work = match &self.gram {
            Some(g) => &self.dty - g * &st.coef,
            None => self.y - self.d * &st.coef,
        };
    }

    fn gradient(&self, st: &CdState) -> DVector<f64> {
        match &self.gram {
            Some(_) => st.work.clone(),
            None => self.d.tr_mul(&st.work),
        }
    }

    fn objective(&self, st: &CdState, omega: &DVector<f64>, lambda: f64) -> f64 {
        let smooth = match &self.gram {
            Some(_) => 0.5 * self.yty - 0.5 * st.coef.dot(&(&self.dty + &st.work)),
            None => 0.5 * st.work.norm_squared(),
        };
        smooth + lambda * penalty(&st.coef, omega)
    }

    fn sweep(
        &self,
        st: &mut CdState,
        omega: &DVector<f64>,
        lambda: f64,
        indices: &[usize],
    ) -> f64 {
        let mut largest = 0.0f64;
        for &j in indices {
            let a = self.col_sq[j];
            let old = st.coef[j];
            if a == 0.0 {
                st.coef[j] = 0.0;
                continue;
            }
            let c = self.partial(st, j) + a * old;
            let new = soft_threshold(c, lambda * omega[j]) / a;
            if new != old {
                self.shift(st, j, new - old);
                st.coef[j] = new;
                largest = largest.max((new - old).abs());
            }
        }
        largest
    }

    fn kkt_holds(&self, grad: &DVector<f64>, coef: &DVector<f64>, omega: &DVector<f64>, lambda: f64) -> bool {
        coef.iter().enumerate().all(|(j, &g)| {
            let bound = lambda * omega[j];
            if g != 0.0 {
                (grad[j] - bound * g.signum()).abs() <= 1e-7 * bound + 1e-13 * self.scale
            } else {
                grad[j].abs() <= bound + 1e-9 * self.scale
            }
        })
    }

    /// Solves the stationarity equations on the current active set with the
    /// current signs. Accepted only if the result keeps those signs and
    /// satisfies the inactive-set conditions.
    fn polish(&self, st: &mut CdState, omega: &DVector<f64>, lambda: f64) -> bool {
        let active: Vec<usize> = (0..st.coef.len()).filter(|&j| st.coef[j] != 0.0).collect();
        if active.is_empty() {
            let grad = self.gradient(st);
            return self.kkt_holds(&grad, &st.coef, omega, lambda);
        }
        let gram_aa = match &self.gram {
            Some(g) => g.select_rows(&active).select_columns(&active),
            None => {
                let da = self.d.select_columns(&active);
                da.tr_mul(&da)
            }
        };
        let rhs = DVector::from_iterator(
            active.len(),
            active
                .iter()
                .map(|&j| self.dty[j] - lambda * omega[j] * st.coef[j].signum()),
        );
        let Some(chol) = gram_aa.cholesky() else {
            return false;
        };
        let solved = chol.solve(&rhs);
        if active
            .iter()
            .zip(solved.iter())
            .any(|(&j, &v)| v == 0.0 || v.signum() != st.coef[j].signum() || !v.is_finite())
        {
            return false;
        }
        let mut candidate = CdState {
            coef: DVector::zeros(st.coef.len()),
            work: DVector::zeros(0),
        };
        for (&j, &v) in active.iter().zip(solved.iter()) {
            candidate.coef[j] = v;
        }
        self.refresh(&mut candidate);
        let grad = self.gradient(&candidate);
        if !self.kkt_holds(&grad, &candidate.coef, omega, lambda) {
            return false;
        }
        let before = self.objective(st, omega, lambda);
        let after = self.objective(&candidate, omega, lambda);
        if after > before + 1e-12 * (before.abs() + self.yty) {
            return false;
        }
        *st = candidate;
        true
    }

    /// Minimizes `½‖y − Dγ‖² + λ Σ ω_j|γ_j|` by cyclic coordinate descent.
    pub fn solve(
        &self,
        omega: &DVector<f64>,
        lambda: f64,
        warm_start: Option<&DVector<f64>>,
        opts: &LassoOptions,
    ) -> LassoSolution {
        let m = self.ncols();
        assert_eq!(omega.len(), m, "weight vector length");
        assert!(lambda >= 0.0, "penalty must be nonnegative");
        let mut st = CdState {
            coef: warm_start.cloned().unwrap_or_else(|| DVector::zeros(m)),
            work: DVector::zeros(0),
        };
        self.refresh(&mut st);

        let all: Vec<usize> = (0..m).collect();
        let mut trace = Vec::new();
        let mut tol = opts.tolerance;
        let mut sweeps = 0;
        let mut converged = false;
        let record = |st: &CdState, trace: &mut Vec<f64>| {
            if opts.trace_objective {
                trace.push(self.objective(st, omega, lambda));
            }
        };
        record(&st, &mut trace);

        'outer: while sweeps < opts.max_sweeps {
            let change = self.sweep(&mut st, omega, lambda, &all);
            sweeps += 1;
            record(&st, &mut trace);
            if change <= tol * (1.0 + st.coef.amax()) {
                self.refresh(&mut st);
                if opts.polish && self.polish(&mut st, omega, lambda) {
                    record(&st, &mut trace);
                    converged = true;
                    break;
                }
                let grad = self.gradient(&st);
                if self.kkt_holds(&grad, &st.coef, omega, lambda) || tol < 1e-15 {
                    converged = true;
                    break;
                }
                tol *= 1e-2;
                continue;
            }
            // settle the active set before the next full sweep
            loop {
                if sweeps >= opts.max_sweeps {
                    break 'outer;
                }
                let active: Vec<usize> = (0..m).filter(|&j| st.coef[j] != 0.0).collect();
                let change = self.sweep(&mut st, omega, lambda, &active);
                sweeps += 1;
                record(&st, &mut trace);
                if change <= tol * (1.0 + st.coef.amax()) {
                    break;
                }
            }
        }
        if !converged {
            warn!("coordinate descent stopped after {sweeps} sweeps without converging");
        }
        LassoSolution {
            coef: st.coef,
            sweeps,
            converged,
            objective_trace: trace,
        }
    }
}

fn penalty(coef: &DVector<f64>, omega: &DVector<f64>) -> f64 {
    coef.iter().zip(omega.iter()).map(|(g, w)| w * g.abs()).sum()
}

/// `½‖y − Dγ‖² + λ Σ ω_j|γ_j|`.
pub fn lasso_objective(
    y: &DVector<f64>,
    d: &DMatrix<f64>,
    omega: &DVector<f64>,
    lambda: f64,
    coef: &DVector<f64>,
) -> f64 {
    0.5 * (y - d * coef).norm_squared() + lambda * penalty(coef, omega)
}

/// One-shot weighted lasso with default solver options.
pub fn weighted_lasso_cd(
    y: &DVector<f64>,
    d: &DMatrix<f64>,
    omega: &DVector<f64>,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
) -> LassoSolution {
    LassoWorkspace::new(y, d, SolverMode::Auto).solve(
        omega,
        lambda,
        warm_start,
        &LassoOptions::default(),
    )
}

/// Outcome of checking the lasso stationarity conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// Largest `|g_j − λω_j·sign(γ_j)| / (λω_j)` over active coordinates.
    pub active_violation: f64,
    /// Largest `|g_j| − λω_j` over inactive coordinates (≤ 0 when slack).
    pub inactive_excess: f64,
    pub scale: f64,
    pub satisfied: bool,
}

/// Checks `g = Dᵀ(y − Dγ)` against the optimality conditions: for active
/// `j`, `g_j = λω_j·sign(γ_j)` within `1e-6·λω_j`; for inactive `j`,
/// `|g_j| ≤ λω_j + 1e-8·scale` with `scale = max(1, max|Dᵀy|)`.
pub fn kkt_certificate(
    y: &DVector<f64>,
    d: &DMatrix<f64>,
    omega: &DVector<f64>,
    lambda: f64,
    coef: &DVector<f64>,
) -> KktReport {
    let grad = d.tr_mul(&(y - d * coef));
    let scale = d.tr_mul(y).amax().max(1.0);
    let mut active_violation = 0.0f64;
    let mut inactive_excess = f64::NEG_INFINITY;
    let mut satisfied = true;
    for j in 0..coef.len() {
        let bound = lambda * omega[j];
        if coef[j] != 0.0 {
            let gap = (grad[j] - bound * coef[j].signum()).abs();
            if bound > 0.0 {
                active_violation = active_violation.max(gap / bound);
                satisfied &= gap <= 1e-6 * bound;
            } else {
                satisfied &= gap <= 1e-8 * scale;
            }
        } else {
            let excess = grad[j].abs() - bound;
            inactive_excess = inactive_excess.max(excess);
            satisfied &= excess <= 1e-8 * scale;
        }
    }
    KktReport {
        active_violation,
        inactive_excess,
        scale,
        satisfied,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// The path value with the smallest mean CV error.
    CrossValidated,
    /// The largest path value whose mean CV error is within one standard
    /// error (across folds) of the minimum.
    #[default]
    OneStandardError,
    Fixed(f64),
}


/// Settings shared by the stage-two fits and the adaptive-lasso stage one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveLassoConfig {
    /// Weight exponent `δ`.
    pub delta: f64,
    pub folds: usize,
    pub path_length: usize,
    pub lambda_min_ratio: f64,
    pub lambda: LambdaRule,
    pub solver: LassoOptions,
}

impl Default for AdaptiveLassoConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            folds: 5,
            path_length: 50,
            lambda_min_ratio: 1e-4,
            lambda: LambdaRule::OneStandardError,
            solver: LassoOptions::default(),
        }
    }
}

impl AdaptiveLassoConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.path_length == 0 {
            return bad("path length must be positive".into());
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return bad(format!(
                "lambda_min_ratio must lie in (0, 1), got {}",
                self.lambda_min_ratio
            ));
        }
        if let LambdaRule::Fixed(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return bad(format!("fixed lambda must be nonnegative, got {l}"));
            }
        }
        Ok(())
    }
}

/// Descending log-spaced path from `lambda_max` to `ratio·lambda_max`.
pub fn lambda_path(lambda_max: f64, length: usize, ratio: f64) -> Vec<f64> {
    if lambda_max <= 0.0 {
        return vec![0.0];
    }
    if length == 1 {
        return vec![lambda_max];
    }
    let mut path = log_grid(ratio * lambda_max, lambda_max, length);
    path.reverse();
    path
}

/// Fold label of every row; a pure function of `(n, folds, seed)`.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[]));
    let mut label = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        label[row] = pos % folds;
    }
    label
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvSelection {
    pub lambda: f64,
    /// Position of `lambda` in `path`.
    pub index: usize,
    pub path: Vec<f64>,
    /// Mean squared held-out prediction error for each path value.
    pub errors: Vec<f64>,
    /// Standard error of `errors`, from the spread of per-fold errors.
    pub standard_errors: Vec<f64>,
    /// Position of the smallest mean error.
    pub min_index: usize,
    /// `(fold, λ)` fits that hit the sweep limit.
    pub unconverged: usize,
}

impl CvSelection {
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.path.iter().copied().zip(self.errors.iter().copied()).collect()
    }
}

/// K-fold cross-validation of `λ` over a warm-started path.
///
/// Under [`LambdaRule::OneStandardError`] the largest `λ` within one
/// standard error of the minimum wins; otherwise the smallest mean error
/// wins. Exact ties go to the larger `λ`.
pub fn cv_select_lambda(
    y: &DVector<f64>,
    d: &DMatrix<f64>,
    omega: &DVector<f64>,
    cfg: &AdaptiveLassoConfig,
    seed: u64,
) -> Result<CvSelection> {
    cfg.check()?;
    let n = y.len();
    let k = cfg.folds;
    if n < 2 * k {
        return Err(Error::InvalidConfig(format!(
            "{k}-fold cross-validation needs at least {} rows, got {n}",
            2 * k
        )));
    }
    let full = LassoWorkspace::new(y, d, cfg.solver.mode);
    let path = lambda_path(full.lambda_max(omega), cfg.path_length, cfg.lambda_min_ratio);
    let labels = fold_assignment(n, k, seed);
    let mut sse = vec![0.0; path.len()];
    let mut fold_mse = vec![vec![0.0; k]; path.len()];
    let mut unconverged = 0;
    for fold in 0..k {
        let train: Vec<usize> = (0..n).filter(|&i| labels[i] != fold).collect();
        let test: Vec<usize> = (0..n).filter(|&i| labels[i] == fold).collect();
        let d_train = d.select_rows(&train);
        let y_train = y.select_rows(&train);
        let d_test = d.select_rows(&test);
        let y_test = y.select_rows(&test);
        let ws = LassoWorkspace::new(&y_train, &d_train, cfg.solver.mode);
        let mut warm = DVector::zeros(d.ncols());
        for (slot, &lambda) in path.iter().enumerate() {
            let sol = ws.solve(omega, lambda, Some(&warm), &cfg.solver);
            unconverged += usize::from(!sol.converged);
            let err = (&y_test - &d_test * &sol.coef).norm_squared();
            sse[slot] += err;
            fold_mse[slot][fold] = err / test.len() as f64;
            warm = sol.coef;
        }
    }
    let errors: Vec<f64> = sse.iter().map(|s| s / n as f64).collect();
    let standard_errors: Vec<f64> = fold_mse
        .iter()
        .map(|m| {
            let mean = m.iter().sum::<f64>() / k as f64;
            let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        })
        .collect();
    let mut min_index = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e < errors[min_index] {
            min_index = i;
        }
    }
    let index = match cfg.lambda {
        LambdaRule::OneStandardError => {
            let cap = errors[min_index] + standard_errors[min_index];
            errors
                .iter()
                .position(|&e| e <= cap)
                .expect("the minimum is within its own bound")
        }
        _ => min_index,
    };
    Ok(CvSelection {
        lambda: path[index],
        index,
        path,
        errors,
        standard_errors,
        min_index,
        unconverged,
    })
}

/// Result of one adaptive-lasso regression.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveLassoFit {
    pub coef: DVector<f64>,
    pub lambda: f64,
    pub omega: DVector<f64>,
    pub pilot: PilotEstimate,
    pub cv: Option<CvSelection>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Pilot estimate, weights, `λ` selection and the final weighted lasso.
pub fn adaptive_lasso_fit(
    y: &DVector<f64>,
    d: &DMatrix<f64>,
    cfg: &AdaptiveLassoConfig,
    seed: u64,
) -> Result<AdaptiveLassoFit> {
    cfg.check()?;
    if y.len() != d.nrows() {
        return Err(Error::Dimension(format!(
            "response has {} rows, design has {}",
            y.len(),
            d.nrows()
        )));
    }
    let pilot = initial_estimate(y, d);
    let omega = weights(&pilot.coef, cfg.delta);
    if d.ncols() == 0 {
        return Ok(AdaptiveLassoFit {
            coef: DVector::zeros(0),
            lambda: 0.0,
            omega,
            pilot,
            cv: None,
            sweeps: 0,
            converged: true,
        });
    }
    let ws = LassoWorkspace::new(y, d, cfg.solver.mode);
    let (sol, lambda, cv) = match cfg.lambda {
        LambdaRule::Fixed(lambda) => (ws.solve(&omega, lambda, None, &cfg.solver), lambda, None),
        LambdaRule::CrossValidated | LambdaRule::OneStandardError => {
            let cv = cv_select_lambda(y, d, &omega, cfg, seed)?;
            // follow the path down to the selected value for stable warm starts
            let mut warm = DVector::zeros(d.ncols());
            let mut sweeps = 0;
            let mut last = None;
            for &lambda in &cv.path[..=cv.index] {
                let sol = ws.solve(&omega, lambda, Some(&warm), &cfg.solver);
                sweeps += sol.sweeps;
                warm = sol.coef.clone();
                last = Some(sol);
            }
            let mut sol = last.expect("path is nonempty");
            sol.sweeps = sweeps;
            (sol, cv.lambda, Some(cv))
        }
    };
    Ok(AdaptiveLassoFit {
        coef: sol.coef,
        lambda,
        omega,
        pilot,
        cv,
        sweeps: sol.sweeps,
        converged: sol.converged,
    })
}

/// Data for one structural equation.
#[derive(Debug, Clone, PartialEq)]
pub struct EquationProblem {
    pub equation: usize,
    /// Centered response `y_k`.
    pub y: DVector<f64>,
    /// `Ẑ` without column `k`, n×(p−1).
    pub z: DMatrix<f64>,
    /// Centered instrument columns `X_{S_k}`.
    pub xs: DMatrix<f64>,
    /// Global endogenous index of each column of `z`.
    pub column_map: Vec<usize>,
}

impl EquationProblem {
    /// Builds the problem for equation `k` from stage-one fits and the
    /// centered exogenous matrix.
    pub fn assemble(
        k: usize,
        y: &DMatrix<f64>,
        zhat: &DMatrix<f64>,
        x: &DMatrix<f64>,
        instruments: &[usize],
    ) -> Self {
        let column_map: Vec<usize> = (0..zhat.ncols()).filter(|&j| j != k).collect();
        Self {
            equation: k,
            y: y.column(k).into_owned(),
            z: zhat.select_columns(&column_map),
            xs: x.select_columns(instruments),
            column_map,
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.y.len();
        if self.z.nrows() != n || self.xs.nrows() != n {
            return Err(Error::Dimension("equation blocks have different row counts".into()));
        }
        if self.xs.ncols() == 0 {
            return Err(Error::InvalidConfig("equation has no instruments".into()));
        }
        if self.column_map.len() != self.z.ncols() {
            return Err(Error::Dimension("column map does not match Ẑ".into()));
        }
        if self.column_map.contains(&self.equation) {
            return Err(Error::InvalidConfig("Ẑ must exclude the target column".into()));
        }
        let mut seen = self.column_map.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.column_map.len() {
            return Err(Error::InvalidConfig("column map is not injective".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquationFit {
    pub equation: usize,
    /// Regulatory effects on the target, indexed like `column_map`.
    pub gamma: DVector<f64>,
    /// Instrument effects, indexed like the instrument set.
    pub psi: DVector<f64>,
    pub lambda: f64,
    pub omega: DVector<f64>,
    pub delta: f64,
    pub pilot: PilotMethod,
    /// `(λ, mean CV error)` pairs; empty when `λ` was fixed.
    pub cv_curve: Vec<(f64, f64)>,
    pub cv_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub unconverged_cv_fits: usize,
    /// Instrument positions dropped as linearly dependent.
    pub dropped_instruments: Vec<usize>,
}

/// Fits one structural equation end to end.
pub fn fit_equation(prob: &EquationProblem, cfg: &AdaptiveLassoConfig, seed: u64) -> Result<EquationFit> {
    let k = prob.equation;
    fit_equation_inner(prob, cfg, seed).map_err(|e| e.in_equation(k))
}

fn fit_equation_inner(prob: &EquationProblem, cfg: &AdaptiveLassoConfig, seed: u64) -> Result<EquationFit> {
    prob.check()?;
    let ann = Annihilator::new(&prob.xs, DependentColumns::Drop)?;
    if !ann.dropped().is_empty() {
        warn!(
            "equation {}: dropped dependent instrument columns {:?}",
            prob.equation,
            ann.dropped()
        );
    }
    let y_proj = ann.apply(&prob.y);
    let z_proj = ann.apply_matrix(&prob.z);
    let fit = adaptive_lasso_fit(&y_proj, &z_proj, cfg, seed)?;
    let psi = ann.least_squares(&(&prob.y - &prob.z * &fit.coef));
    let (cv_curve, cv_error, unconverged_cv_fits) = match &fit.cv {
        Some(cv) => (cv.curve(), Some(cv.errors[cv.index]), cv.unconverged),
        None => (Vec::new(), None, 0),
    };
    Ok(EquationFit {
        equation: prob.equation,
        gamma: fit.coef,
        psi,
        lambda: fit.lambda,
        omega: fit.omega,
        delta: cfg.delta,
        pilot: fit.pilot.method,
        cv_curve,
        cv_error,
        iterations: fit.sweeps,
        converged: fit.converged,
        unconverged_cv_fits,
        dropped_instruments: ann.dropped().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{dense_annihilator, gaussian_matrix, gaussian_vector};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn single_column_annihilator_zeroes_that_coordinate() {
        let mut xs = DMatrix::zeros(5, 1);
        xs[(0, 0)] = 3.0;
        let h = annihilator(&xs).unwrap();
        let v = DVector::from_vec(vec![2.0, 1.0, -1.0, 4.0, 0.5]);
        let out = h.apply(&v);
        assert_eq!(out[0], 0.0);
        assert_eq!(out.rows(1, 4), v.rows(1, 4));
    }

    #[test]
    fn annihilator_kills_span_and_matches_dense() {
        let xs = gaussian_matrix(40, 3, 1);
        let h = annihilator(&xs).unwrap();
        let in_span = &xs * gaussian_vector(3, 2);
        assert!(h.apply(&in_span).norm() <= 1e-10 * in_span.norm());
        assert!(h.apply_matrix(&xs).norm() <= 1e-10 * xs.norm());

        let dense = dense_annihilator(&xs);
        let probe = gaussian_vector(40, 3);
        assert_relative_eq!(h.apply(&probe), &dense * &probe, epsilon = 1e-10);
        let once = h.apply(&probe);
        assert_relative_eq!(h.apply(&once), once, epsilon = 1e-12);
    }

    #[test]
    fn collinear_instruments() {
        let mut xs = gaussian_matrix(20, 3, 4);
        let dup = xs.column(0) * 2.0 - xs.column(1);
        xs.set_column(2, &dup);
        assert_eq!(
            annihilator(&xs).unwrap_err(),
            Error::CollinearInstruments { dependent: vec![2] }
        );
        let h = Annihilator::new(&xs, DependentColumns::Drop).unwrap();
        assert_eq!(h.kept(), &[0, 1]);
        assert_eq!(h.dropped(), &[2]);
        assert!(Annihilator::new(&DMatrix::zeros(5, 2), DependentColumns::Drop).is_err());
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let xs = gaussian_matrix(30, 3, 5);
        let v = gaussian_vector(30, 6);
        let h = annihilator(&xs).unwrap();
        let want = (xs.transpose() * &xs).cholesky().unwrap().solve(&(xs.transpose() * &v));
        assert_relative_eq!(h.least_squares(&v), want, max_relative = 1e-10);
    }

    #[test]
    fn pilot_least_squares_branch() {
        let z = gaussian_matrix(100, 2, 7);
        let y = gaussian_vector(100, 8);
        let pilot = initial_estimate(&y, &z);
        assert_eq!(pilot.method, PilotMethod::LeastSquares);
        let want = (z.transpose() * &z).cholesky().unwrap().solve(&(z.transpose() * &y));
        assert_relative_eq!(pilot.coef, want, max_relative = 1e-10);
    }

    #[test]
    fn pilot_ridge_branch_when_wide_or_zero() {
        let z = gaussian_matrix(20, 25, 9);
        let pilot = initial_estimate(&gaussian_vector(20, 10), &z);
        assert_eq!(pilot.method, PilotMethod::Ridge);
        assert!(pilot.coef.iter().all(|v| v.is_finite()));

        let pilot = initial_estimate(&gaussian_vector(20, 11), &DMatrix::zeros(20, 4));
        assert_eq!(pilot.method, PilotMethod::Ridge);
        assert_eq!(pilot.coef, DVector::zeros(4));
    }

    #[test]
    fn weight_examples() {
        let w = weights(&DVector::from_vec(vec![1.0, 0.5]), 1.0);
        assert_relative_eq!(w[0], 1.0, max_relative = 1e-9);
        assert_relative_eq!(w[1], 2.0, max_relative = 1e-9);

        let w = weights(&DVector::from_vec(vec![2.0, -2.0]), 2.0);
        assert_relative_eq!(w[0], 0.25, max_relative = 1e-9);
        assert_eq!(w[0], w[1]);

        let w = weights(&DVector::from_vec(vec![0.0, 3.0]), 1.0);
        assert_relative_eq!(w[0], 1.0 / 3e-10, max_relative = 1e-9);
        assert!(w.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn zero_penalty_gives_least_squares() {
        let d = gaussian_matrix(50, 6, 12);
        let y = gaussian_vector(50, 13);
        let want = (d.transpose() * &d).cholesky().unwrap().solve(&(d.transpose() * &y));
        for mode in [SolverMode::Covariance, SolverMode::Residual] {
            let ws = LassoWorkspace::new(&y, &d, mode);
            let sol = ws.solve(&DVector::from_element(6, 1.0), 0.0, None, &LassoOptions::default());
            assert!(sol.converged);
            assert_relative_eq!(sol.coef, want, max_relative = 1e-9);
        }
    }

    #[test]
    fn orthonormal_design_soft_thresholds() {
        let d = gaussian_matrix(30, 5, 14).qr().q();
        let y = gaussian_vector(30, 15);
        let lambda = 0.4;
        let sol = weighted_lasso_cd(&y, &d, &DVector::from_element(5, 1.0), lambda, None);
        for j in 0..5 {
            let want = soft_threshold(d.column(j).dot(&y), lambda);
            assert_relative_eq!(sol.coef[j], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn full_shrinkage_at_lambda_max() {
        let d = gaussian_matrix(40, 8, 16);
        let y = gaussian_vector(40, 17);
        let omega = weights(&gaussian_vector(8, 18), 1.0);
        let ws = LassoWorkspace::new(&y, &d, SolverMode::Auto);
        let lmax = ws.lambda_max(&omega);
        let sol = ws.solve(&omega, lmax, None, &LassoOptions::default());
        assert!(sol.coef.iter().all(|&v| v == 0.0));
        let sol = ws.solve(&omega, lmax * 0.9, None, &LassoOptions::default());
        assert!(sol.coef.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unconverged_solution_is_flagged() {
        let d = gaussian_matrix(30, 10, 19);
        let y = gaussian_vector(30, 20);
        let opts = LassoOptions {
            max_sweeps: 1,
            polish: false,
            ..Default::default()
        };
        let ws = LassoWorkspace::new(&y, &d, SolverMode::Residual);
        let sol = ws.solve(&DVector::from_element(10, 1.0), 0.01, None, &opts);
        assert!(!sol.converged);
        assert_eq!(sol.sweeps, 1);
    }

    #[test]
    fn fold_assignment_is_balanced_and_deterministic() {
        let a = fold_assignment(23, 5, 7);
        assert_eq!(a, fold_assignment(23, 5, 7));
        assert_ne!(a, fold_assignment(23, 5, 8));
        for f in 0..5 {
            let size = a.iter().filter(|&&x| x == f).count();
            assert!(size == 4 || size == 5);
        }
    }

    #[test]
    fn cv_rejects_too_few_rows() {
        let d = gaussian_matrix(9, 3, 21);
        let y = gaussian_vector(9, 22);
        let err = cv_select_lambda(&y, &d, &DVector::from_element(3, 1.0), &Default::default(), 0);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn cv_is_deterministic_and_ties_go_large() {
        let d = gaussian_matrix(60, 5, 23);
        let y = gaussian_vector(60, 24);
        let omega = DVector::from_element(5, 1.0);
        let cfg = AdaptiveLassoConfig {
            lambda: LambdaRule::CrossValidated,
            ..Default::default()
        };
        let a = cv_select_lambda(&y, &d, &omega, &cfg, 3).unwrap();
        let b = cv_select_lambda(&y, &d, &omega, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.index, a.min_index);
        let best = a.errors[a.index];
        assert!(a.errors[..a.index].iter().all(|&e| e > best));
        assert!(a.errors.iter().all(|&e| e >= best));
        assert_eq!(a.path.len(), 50);
        assert_relative_eq!(a.path[49], a.path[0] * 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn one_standard_error_rule_takes_the_largest_close_lambda() {
        let d = gaussian_matrix(80, 6, 25);
        let beta = DVector::from_vec(vec![1.0, -0.5, 0.0, 0.0, 0.2, 0.0]);
        let y = &d * beta + gaussian_vector(80, 26) * 0.5;
        let omega = DVector::from_element(6, 1.0);
        let one_se = cv_select_lambda(&y, &d, &omega, &Default::default(), 4).unwrap();
        let min_cfg = AdaptiveLassoConfig {
            lambda: LambdaRule::CrossValidated,
            ..Default::default()
        };
        let min = cv_select_lambda(&y, &d, &omega, &min_cfg, 4).unwrap();
        assert_eq!(one_se.errors, min.errors);
        assert_eq!(one_se.min_index, min.index);
        let cap = min.errors[min.index] + one_se.standard_errors[min.index];
        assert!(one_se.index <= min.index);
        assert!(one_se.errors[one_se.index] <= cap);
        assert!(one_se.errors[..one_se.index].iter().all(|&e| e > cap));
        assert!(one_se.standard_errors.iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn empty_active_set_gives_instrument_ols() {
        // target depends only on its instrument; huge fixed penalty
        let xs = gaussian_matrix(80, 1, 25);
        let z = gaussian_matrix(80, 4, 26);
        let y = &xs * DVector::from_element(1, 1.5) + gaussian_vector(80, 27) * 0.1;
        let prob = EquationProblem {
            equation: 0,
            y: y.clone(),
            z,
            xs: xs.clone(),
            column_map: vec![1, 2, 3, 4],
        };
        let cfg = AdaptiveLassoConfig {
            lambda: LambdaRule::Fixed(1e12),
            ..Default::default()
        };
        let fit = fit_equation(&prob, &cfg, 0).unwrap();
        assert!(fit.gamma.iter().all(|&g| g == 0.0));
        let ols = xs.column(0).dot(&y) / xs.column(0).norm_squared();
        assert_relative_eq!(fit.psi[0], ols, max_relative = 1e-12);
    }

    #[test]
    fn equation_errors_carry_the_index() {
        let prob = EquationProblem {
            equation: 7,
            y: gaussian_vector(10, 28),
            z: gaussian_matrix(10, 2, 29),
            xs: DMatrix::zeros(10, 1),
            column_map: vec![0, 1],
        };
        let err = fit_equation(&prob, &Default::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Equation { equation: 7, .. }));
    }

    fn random_problem(seed: u64, n: usize, m: usize) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let d = gaussian_matrix(n, m, seed);
        let mut beta = DVector::zeros(m);
        for j in 0..m.min(3) {
            beta[j] = 1.0 - j as f64 * 0.6;
        }
        let y = &d * beta + gaussian_vector(n, seed + 1);
        let omega = weights(&gaussian_vector(m, seed + 2), 1.0);
        (y, d, omega)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn objective_never_increases_across_sweeps(
            seed in 0u64..500,
            n in 20usize..60,
            m in 2usize..80,
            frac in 0.01f64..0.9,
            residual in any::<bool>(),
        ) {
            let (y, d, omega) = random_problem(seed, n, m);
            let mode = if residual { SolverMode::Residual } else { SolverMode::Covariance };
            let ws = LassoWorkspace::new(&y, &d, mode);
            let lambda = frac * ws.lambda_max(&omega);
            let opts = LassoOptions { trace_objective: true, ..Default::default() };
            let sol = ws.solve(&omega, lambda, None, &opts);
            let slack = 1e-10 * (1.0 + y.norm_squared());
            for w in sol.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + slack, "{} -> {}", w[0], w[1]);
            }
            prop_assert!(kkt_certificate(&y, &d, &omega, lambda, &sol.coef).satisfied);
        }

        #[test]
        fn weight_scale_equivariance(
            seed in 0u64..500,
            c in 0.05f64..20.0,
            frac in 0.05f64..0.8,
        ) {
            let (y, d, omega) = random_problem(seed, 40, 12);
            let ws = LassoWorkspace::new(&y, &d, SolverMode::Auto);
            let lambda = frac * ws.lambda_max(&omega);
            let a = ws.solve(&omega, lambda, None, &LassoOptions::default()).coef;
            let b = ws.solve(&(&omega * c), lambda / c, None, &LassoOptions::default()).coef;
            prop_assert!((&a - &b).amax() <= 1e-6 * (1.0 + a.amax()));
        }

        #[test]
        fn profiled_objective_equals_reduced_objective(
            seed in 0u64..500,
            lambda in 0.0f64..5.0,
        ) {
            let n = 40;
            let y = gaussian_vector(n, seed);
            let z = gaussian_matrix(n, 6, seed + 1);
            let xs = gaussian_matrix(n, 2, seed + 2);
            let omega = weights(&gaussian_vector(6, seed + 3), 1.0);
            let gamma = gaussian_vector(6, seed + 4);
            let h = annihilator(&xs).unwrap();
            let psi = h.least_squares(&(&y - &z * &gamma));
            let full = 0.5 * (&y - &z * &gamma - &xs * &psi).norm_squared()
                + lambda * penalty(&gamma, &omega);
            let reduced = lasso_objective(&h.apply(&y), &h.apply_matrix(&z), &omega, lambda, &gamma);
            prop_assert!((full - reduced).abs() <= 1e-10 * full.abs());
        }
    }
}
