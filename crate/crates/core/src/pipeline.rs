//! Whole-system fitting and bootstrap edge confidence.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alasso::{fit_equation, AdaptiveLassoConfig, EquationProblem, PilotMethod};
use crate::data::{validate, DataSet, ExoAssignment};
use crate::ridge::{stage_one, GcvSearchConfig, StageOneStrategy};
use crate::seed::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub stage_one: StageOneStrategy,
    pub gcv: GcvSearchConfig,
    pub alasso: AdaptiveLassoConfig,
    pub master_seed: u64,
    /// Worker threads; `None` or `Some(0)` uses the ambient rayon pool.
    pub threads: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            stage_one: StageOneStrategy::RidgeGcv,
            gcv: GcvSearchConfig::default(),
            alasso: AdaptiveLassoConfig::default(),
            master_seed: 0,
            threads: None,
        }
    }
}

impl FitConfig {
    pub fn check(&self) -> Result<()> {
        self.gcv.check()?;
        self.alasso.check()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationDiagnostic {
    pub equation: usize,
    pub active: usize,
    pub lambda: f64,
    pub cv_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub unconverged_cv_fits: usize,
    pub pilot: Option<PilotMethod>,
    pub dropped_instruments: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemEstimate {
    /// p×p; entry `(j, k)` is the effect of endogenous `j` on endogenous `k`.
    pub gamma: DMatrix<f64>,
    /// q×p; column `k` is supported on `S_k`.
    pub psi: DMatrix<f64>,
    pub lambdas: Vec<f64>,
    pub taus: Vec<f64>,
    pub diagnostics: Vec<EquationDiagnostic>,
    pub large_tau_columns: Vec<usize>,
}

impl SystemEstimate {
    /// Nonzero `(source, target, effect)` triples in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let p = self.gamma.nrows();
        let mut out = Vec::new();
        for j in 0..p {
            for k in 0..p {
                let v = self.gamma[(j, k)];
                if v != 0.0 {
                    out.push((j, k, v));
                }
            }
        }
        out
    }

    pub fn failed_equations(&self) -> Vec<usize> {
        self.diagnostics
            .iter()
            .filter(|d| d.error.is_some())
            .map(|d| d.equation)
            .collect()
    }
}

/// Runs `f` on a pool of the requested size, or inline when unspecified.
pub(crate) fn with_threads<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T> {
    match threads {
        None | Some(0) => Ok(f()),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}"))),
    }
}

/// Fits the full system, one structural equation per endogenous variable.
///
/// A failing equation leaves a zero column in `Γ̂` and `Ψ̂` and an error in
/// its diagnostic record; it never aborts the other equations.
pub fn fit_system(ds: &DataSet, ea: &ExoAssignment, cfg: &FitConfig) -> Result<SystemEstimate> {
    cfg.check()?;
    with_threads(cfg.threads, || fit_system_pooled(ds, ea, cfg))?
}

fn fit_system_pooled(ds: &DataSet, ea: &ExoAssignment, cfg: &FitConfig) -> Result<SystemEstimate> {
    let warnings = validate(ds, ea).into_result()?;
    for w in &warnings {
        warn!("{w:?}");
    }
    let centered = ds.centered();
    let first = stage_one(
        &centered,
        &cfg.gcv,
        cfg.stage_one,
        &cfg.alasso,
        cfg.master_seed,
    )?;
    let (p, q) = (ds.p(), ds.q());

    let fits: Vec<_> = (0..p)
        .into_par_iter()
        .map(|k| {
            let prob = EquationProblem::assemble(
                k,
                centered.y(),
                &first.zhat,
                centered.x(),
                ea.set(k),
            );
            let s = seed::substream(cfg.master_seed, &[tag::STAGE_TWO, k as u64]);
            fit_equation(&prob, &cfg.alasso, s).map(|fit| (prob.column_map, fit))
        })
        .collect();

    let mut gamma = DMatrix::zeros(p, p);
    let mut psi = DMatrix::zeros(q, p);
    let mut lambdas = vec![0.0; p];
    let mut diagnostics = Vec::with_capacity(p);
    for (k, outcome) in fits.into_iter().enumerate() {
        match outcome {
            Ok((column_map, fit)) => {
                for (local, &global) in column_map.iter().enumerate() {
                    gamma[(global, k)] = fit.gamma[local];
                }
                for (slot, &i) in ea.set(k).iter().enumerate() {
                    psi[(i, k)] = fit.psi[slot];
                }
                lambdas[k] = fit.lambda;
                diagnostics.push(EquationDiagnostic {
                    equation: k,
                    active: fit.gamma.iter().filter(|&&g| g != 0.0).count(),
                    lambda: fit.lambda,
                    cv_error: fit.cv_error,
                    iterations: fit.iterations,
                    converged: fit.converged,
                    unconverged_cv_fits: fit.unconverged_cv_fits,
                    pilot: Some(fit.pilot),
                    dropped_instruments: fit.dropped_instruments.clone(),
                    error: None,
                });
            }
            Err(e) => {
                warn!("{e}");
                diagnostics.push(EquationDiagnostic {
                    equation: k,
                    active: 0,
                    lambda: 0.0,
                    cv_error: None,
                    iterations: 0,
                    converged: false,
                    unconverged_cv_fits: 0,
                    pilot: None,
                    dropped_instruments: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(SystemEstimate {
        gamma,
        psi,
        lambdas,
        taus: first.taus,
        diagnostics,
        large_tau_columns: first.large_tau_columns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub master_seed: u64,
    /// Rows below this selection frequency are left out of the table.
    pub frequency_threshold: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 100,
            master_seed: 0,
            frequency_threshold: 0.0,
        }
    }
}

impl BootstrapConfig {
    pub fn check(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidConfig("need at least one bootstrap replicate".into()));
        }
        if !(0.0..=1.0).contains(&self.frequency_threshold) {
            return Err(Error::InvalidConfig(format!(
                "frequency threshold {} outside [0, 1]",
                self.frequency_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeFrequency {
    pub source: usize,
    pub target: usize,
    /// Mean effect over the replicates that selected the edge.
    pub mean_effect: f64,
    pub frequency: f64,
    /// Replicates that selected the edge.
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeFrequencyTable {
    pub rows: Vec<EdgeFrequency>,
    pub requested: usize,
    /// Replicates in the frequency denominator.
    pub used: usize,
    pub skipped: usize,
}

impl EdgeFrequencyTable {
    pub fn filtered(&self, threshold: f64) -> EdgeFrequencyTable {
        EdgeFrequencyTable {
            rows: self
                .rows
                .iter()
                .filter(|r| r.frequency >= threshold)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

/// Row indices of bootstrap replicate `replicate`, drawn with replacement.
pub fn bootstrap_rows(n: usize, master_seed: u64, replicate: usize) -> Vec<usize> {
    let mut rng = seed::rng(master_seed, &[tag::BOOTSTRAP_ROWS, replicate as u64]);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Fit configuration used for bootstrap replicate `replicate`.
pub fn replicate_fit_config(fit: &FitConfig, boot_seed: u64, replicate: usize) -> FitConfig {
    FitConfig {
        master_seed: seed::substream(
            fit.master_seed,
            &[tag::BOOTSTRAP_FIT, boot_seed, replicate as u64],
        ),
        threads: None,
        ..fit.clone()
    }
}

fn is_constant(m: &DMatrix<f64>, col: usize) -> bool {
    let c = m.column(col);
    c.iter().all(|&v| v == c[0])
}

enum Replicate {
    Edges(Vec<(usize, usize, f64)>),
    Skipped(String),
}

/// Refits the system on `B` row-resampled copies of the data and reports
/// how often each directed edge is selected.
///
/// A replicate is skipped (and left out of the denominator) when an
/// assigned instrument column that varies in the original data is
/// constant in the resample, or when any equation fails.
pub fn bootstrap_edges(
    ds: &DataSet,
    ea: &ExoAssignment,
    fit_cfg: &FitConfig,
    boot_cfg: &BootstrapConfig,
) -> Result<EdgeFrequencyTable> {
    fit_cfg.check()?;
    boot_cfg.check()?;
    validate(ds, ea).into_result()?;
    let assigned: Vec<usize> = ea
        .sets()
        .iter()
        .flatten()
        .copied()
        .filter(|&i| !is_constant(ds.x(), i))
        .collect();
    let n = ds.n();

    let outcomes: Vec<Replicate> = with_threads(fit_cfg.threads, || {
        (0..boot_cfg.replicates)
            .into_par_iter()
            .map(|b| {
                let rows = bootstrap_rows(n, boot_cfg.master_seed, b);
                let sample = ds.select_rows(&rows);
                if let Some(&i) = assigned.iter().find(|&&i| is_constant(sample.x(), i)) {
                    return Replicate::Skipped(format!("exogenous column {i} constant"));
                }
                let cfg = replicate_fit_config(fit_cfg, boot_cfg.master_seed, b);
                match fit_system_pooled(&sample, ea, &cfg) {
                    Ok(est) if est.failed_equations().is_empty() => Replicate::Edges(est.edges()),
                    Ok(est) => Replicate::Skipped(format!(
                        "equations {:?} failed",
                        est.failed_equations()
                    )),
                    Err(e) => Replicate::Skipped(e.to_string()),
                }
            })
            .collect()
    })?;

    // (count, effect sum) accumulated in replicate order
    let mut tally: BTreeMap<(usize, usize), (usize, f64)> = BTreeMap::new();
    let mut skipped = 0;
    for (b, outcome) in outcomes.iter().enumerate() {
        match outcome {
            Replicate::Edges(edges) => {
                for &(j, k, v) in edges {
                    let entry = tally.entry((j, k)).or_insert((0, 0.0));
                    entry.0 += 1;
                    entry.1 += v;
                }
            }
            Replicate::Skipped(reason) => {
                warn!("bootstrap replicate {b} skipped: {reason}");
                skipped += 1;
            }
        }
    }
    let used = boot_cfg.replicates - skipped;
    let mut rows: Vec<EdgeFrequency> = tally
        .into_iter()
        .map(|((source, target), (count, sum))| EdgeFrequency {
            source,
            target,
            mean_effect: sum / count as f64,
            frequency: count as f64 / used as f64,
            selected: count,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.selected
            .cmp(&a.selected)
            .then(a.source.cmp(&b.source))
            .then(a.target.cmp(&b.target))
    });
    let table = EdgeFrequencyTable {
        rows,
        requested: boot_cfg.replicates,
        used,
        skipped,
    };
    Ok(table.filtered(boot_cfg.frequency_threshold))
}
