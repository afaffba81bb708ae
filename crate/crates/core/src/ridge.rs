//! Stage one: ridge estimates of the conditional expectations `E[Y_j | X]`.
//!
//! Each reduced-form equation `Y_j = X·π_j + ξ_j` is fitted by ridge
//! regression, with its penalty `τ_j` chosen by generalized cross-validation.
//! A single thin SVD `X = U·diag(d)·Vᵀ` of the centered design serves every
//! column and every penalty value:
//!
//! ```text
//! P_τ   = U·diag(d²/(d²+τ))·Uᵀ
//! G(τ)  = ‖(I − P_τ)y‖² / (n − tr P_τ)²
//! π̂(τ)  = V·diag(d/(d²+τ))·Uᵀy
//! ```

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alasso::{adaptive_lasso_fit, AdaptiveLassoConfig};
use crate::data::DataSet;
use crate::seed;
use crate::{Error, Result};

/// Relative cutoff below which singular values are treated as zero.
const RANK_TOLERANCE: f64 = 1e-12;

/// Thin SVD of a centered design, truncated to its numerical rank.
#[derive(Debug, Clone)]
pub struct DesignFactorization {
    singular_values: DVector<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    n: usize,
    q: usize,
}

impl DesignFactorization {
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    /// Left singular vectors, n×r.
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Right singular vectors, q×r.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.q
    }

    /// `tr(P_τ) = Σ d²/(d²+τ)`.
    pub fn hat_trace(&self, tau: f64) -> f64 {
        self.singular_values
            .iter()
            .map(|&d| d * d / (d * d + tau))
            .sum()
    }

    /// Default search interval `[1e-4·d_r², 1e4·d_1²]`.
    pub fn default_tau_bounds(&self) -> (f64, f64) {
        let d1 = self.singular_values[0];
        let dr = self.singular_values[self.rank() - 1];
        (1e-4 * dr * dr, 1e4 * d1 * d1)
    }
}

/// Factorizes a centered design matrix.
pub fn decompose_design(xc: &DMatrix<f64>) -> Result<DesignFactorization> {
    let (n, q) = xc.shape();
    if n == 0 || q == 0 {
        return Err(Error::Dimension(format!("empty design {n}x{q}")));
    }
    if xc.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("design has non-finite entries".into()));
    }
    if xc.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroDesign);
    }
    let svd = xc.clone().svd(true, true);
    let d = &svd.singular_values;
    let cutoff = RANK_TOLERANCE * d[0];
    let r = d.iter().take_while(|&&s| s > cutoff).count();
    let u = svd.u.expect("requested U").columns(0, r).into_owned();
    let v = svd.v_t.expect("requested Vᵀ").rows(0, r).transpose();
    Ok(DesignFactorization {
        singular_values: d.rows(0, r).into_owned(),
        u,
        v,
        n,
        q,
    })
}

/// Precomputed projections of one response, making each GCV evaluation
/// `O(r)` instead of `O(n·r)`.
#[derive(Debug, Clone)]
pub struct GcvProfile<'a> {
    fact: &'a DesignFactorization,
    coords: DVector<f64>,
    residual_sq: f64,
}

impl<'a> GcvProfile<'a> {
    pub fn new(fact: &'a DesignFactorization, y: &DVector<f64>) -> Result<Self> {
        if y.len() != fact.n {
            return Err(Error::Dimension(format!(
                "response has {} rows, design has {}",
                y.len(),
                fact.n
            )));
        }
        let coords = fact.u.tr_mul(y);
        let residual_sq = (y - &fact.u * &coords).norm_squared();
        Ok(Self {
            fact,
            coords,
            residual_sq,
        })
    }

    pub fn value(&self, tau: f64) -> Result<f64> {
        // 1 - d²/(d²+τ) is evaluated as τ/(d²+τ) to avoid cancellation.
        let mut numerator = self.residual_sq;
        let mut denominator = (self.fact.n - self.fact.rank()) as f64;
        for (&d, &c) in self.fact.singular_values.iter().zip(self.coords.iter()) {
            let shrink = tau / (d * d + tau);
            numerator += shrink * shrink * c * c;
            denominator += shrink;
        }
        if denominator <= 1e-10 {
            return Err(Error::DegenerateGcv(denominator));
        }
        Ok(numerator / (denominator * denominator))
    }
}

/// `G(τ) = ‖(I − P_τ)y‖² / (n − tr P_τ)²`.
pub fn gcv_value(fact: &DesignFactorization, y: &DVector<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    GcvProfile::new(fact, y)?.value(tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcvSearchConfig {
    /// Explicit `(tau_min, tau_max)`; `None` derives them from the spectrum.
    pub tau_bounds: Option<(f64, f64)>,
    pub grid_points: usize,
    /// Relative bracket width at which golden-section refinement stops.
    pub refine_tolerance: f64,
}

impl Default for GcvSearchConfig {
    fn default() -> Self {
        Self {
            tau_bounds: None,
            grid_points: 49,
            refine_tolerance: 1e-3,
        }
    }
}

impl GcvSearchConfig {
    pub fn check(&self) -> Result<()> {
        if self.grid_points < 8 {
            return Err(Error::InvalidConfig(format!(
                "GCV grid needs at least 8 points, got {}",
                self.grid_points
            )));
        }
        if !(self.refine_tolerance > 0.0) {
            return Err(Error::InvalidConfig("refine_tolerance must be positive".into()));
        }
        if let Some((lo, hi)) = self.tau_bounds {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "invalid tau bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn bounds_for(&self, fact: &DesignFactorization) -> (f64, f64) {
        self.tau_bounds.unwrap_or_else(|| fact.default_tau_bounds())
    }

    /// The log-spaced evaluation grid.
    pub fn grid(&self, fact: &DesignFactorization) -> Vec<f64> {
        let (lo, hi) = self.bounds_for(fact);
        log_grid(lo, hi, self.grid_points)
    }
}

pub(crate) fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    let last = (points - 1).max(1) as f64;
    (0..points)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == points - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / last).exp()
            }
        })
        .collect()
}

/// Minimizes `G(τ)`: grid search, then golden-section refinement in
/// `log τ` between the grid neighbours of the best grid point.
pub fn select_tau(
    fact: &DesignFactorization,
    y: &DVector<f64>,
    cfg: &GcvSearchConfig,
) -> Result<f64> {
    cfg.check()?;
    let profile = GcvProfile::new(fact, y)?;
    let grid = cfg.grid(fact);
    let values = grid
        .iter()
        .map(|&t| profile.value(t))
        .collect::<Result<Vec<_>>>()?;

    let (mut best, mut best_value) = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best_value {
            best = i;
            best_value = v;
        }
    }
    let worst = values.iter().copied().fold(f64::MIN, f64::max);
    if worst - best_value <= 1e-12 * best_value {
        return Ok(grid[0]);
    }

    let mut lo = grid[best.saturating_sub(1)].ln();
    let mut hi = grid[(best + 1).min(grid.len() - 1)].ln();
    let (mut arg, mut arg_value) = (grid[best], best_value);
    let stop = (1.0 + cfg.refine_tolerance).ln();
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = profile.value(x1.exp())?;
    let mut f2 = profile.value(x2.exp())?;
    while hi - lo > stop {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = profile.value(x1.exp())?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = profile.value(x2.exp())?;
        }
    }
    for (x, f) in [(x1, f1), (x2, f2)] {
        if f < arg_value {
            arg = x.exp();
            arg_value = f;
        }
    }
    Ok(arg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    /// `X·π̂`, the fitted conditional expectation.
    pub zhat: DVector<f64>,
    pub pihat: DVector<f64>,
}

/// Ridge solution `π̂ = (XᵀX + τI)⁻¹Xᵀy` through the factorization.
/// `tau = 0` is ordinary least squares and needs full column rank.
pub fn ridge_fit(fact: &DesignFactorization, y: &DVector<f64>, tau: f64) -> Result<RidgeFit> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidConfig(format!("tau must be nonnegative, got {tau}")));
    }
    if tau == 0.0 && fact.rank() < fact.q {
        return Err(Error::OlsUndefined {
            rank: fact.rank(),
            columns: fact.q,
        });
    }
    if y.len() != fact.n {
        return Err(Error::Dimension(format!(
            "response has {} rows, design has {}",
            y.len(),
            fact.n
        )));
    }
    let coords = fact.u.tr_mul(y);
    let mut coef_coords = coords.clone();
    let mut fit_coords = coords;
    for (i, &d) in fact.singular_values.iter().enumerate() {
        let denom = d * d + tau;
        coef_coords[i] *= d / denom;
        fit_coords[i] *= d * d / denom;
    }
    Ok(RidgeFit {
        zhat: &fact.u * fit_coords,
        pihat: &fact.v * coef_coords,
    })
}

/// How the reduced-form equations are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StageOneStrategy {
    /// Ridge with GCV-selected penalty (2SPLS).
    #[default]
    RidgeGcv,
    /// Adaptive lasso with cross-validated penalty (the 2SAL variant).
    AdaptiveLasso,
}

impl StageOneStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            StageOneStrategy::RidgeGcv => "2SPLS",
            StageOneStrategy::AdaptiveLasso => "2SAL",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOneResult {
    /// Fitted conditional expectations, n×p.
    pub zhat: DMatrix<f64>,
    /// Per-column ridge penalty. For the adaptive-lasso strategy this is the
    /// pilot penalty (0 for least squares, 1 for the ridge fallback).
    pub taus: Vec<f64>,
    /// Reduced-form coefficients, q×p.
    pub pi_hat: DMatrix<f64>,
    /// Columns whose selected `τ_j` exceeded `√n`.
    pub large_tau_columns: Vec<usize>,
}

/// Fits every reduced-form equation of an already centered data set.
///
/// Columns are fitted in parallel; the output does not depend on the
/// schedule because each column is an independent, deterministic task.
pub fn stage_one(
    ds: &DataSet,
    gcv: &GcvSearchConfig,
    strategy: StageOneStrategy,
    alasso: &AdaptiveLassoConfig,
    master_seed: u64,
) -> Result<StageOneResult> {
    gcv.check()?;
    let (n, p, q) = (ds.n(), ds.p(), ds.q());
    let fact = match strategy {
        StageOneStrategy::RidgeGcv => Some(decompose_design(ds.x())?),
        StageOneStrategy::AdaptiveLasso => None,
    };

    let columns: Vec<Result<(RidgeFit, f64)>> = (0..p)
        .into_par_iter()
        .map(|j| {
            let y = ds.y().column(j).into_owned();
            match &fact {
                Some(fact) => {
                    let tau = select_tau(fact, &y, gcv)?;
                    Ok((ridge_fit(fact, &y, tau)?, tau))
                }
                None => {
                    let s = seed::substream(master_seed, &[seed::tag::STAGE_ONE, j as u64]);
                    let fit = adaptive_lasso_fit(&y, ds.x(), alasso, s)?;
                    let zhat = ds.x() * &fit.coef;
                    Ok((
                        RidgeFit {
                            zhat,
                            pihat: fit.coef,
                        },
                        fit.pilot.penalty(),
                    ))
                }
            }
            .map_err(|e: Error| e.in_column(j))
        })
        .collect();

    let mut zhat = DMatrix::zeros(n, p);
    let mut pi_hat = DMatrix::zeros(q, p);
    let mut taus = Vec::with_capacity(p);
    let mut large_tau_columns = Vec::new();
    let root_n = (n as f64).sqrt();
    for (j, col) in columns.into_iter().enumerate() {
        let (fit, tau) = col?;
        zhat.set_column(j, &fit.zhat);
        pi_hat.set_column(j, &fit.pihat);
        if strategy == StageOneStrategy::RidgeGcv && tau > root_n {
            warn!("column {j}: selected tau {tau:.4e} exceeds sqrt(n) = {root_n:.3}");
            large_tau_columns.push(j);
        }
        taus.push(tau);
    }
    Ok(StageOneResult {
        zhat,
        taus,
        pi_hat,
        large_tau_columns,
    })
}
