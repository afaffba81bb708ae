//! Synthetic networks and data sets, and power/FDR scoring.
//!
//! Genotypes mimic an F2 cross: each marker is the sum of two fair
//! Bernoulli alleles, so it takes 0, 1, 2 with probabilities ¼, ½, ¼.
//! Regulatory effects are uniform on `(−1, −0.5) ∪ (0.5, 1)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Schur};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{center_columns, DataSet, ExoAssignment};
use crate::pipeline::{fit_system, FitConfig};
use crate::ridge::StageOneStrategy;
use crate::seed::{self, tag};
use crate::{Error, Result};

const CYCLIC_ATTEMPTS: usize = 1000;
const MAX_SPECTRAL_RADIUS: f64 = 0.95;
const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Acyclic,
    Cyclic,
}

impl Topology {
    pub fn label(&self) -> &'static str {
        match self {
            Topology::Acyclic => "acyclic",
            Topology::Cyclic => "cyclic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// One regulatory effect per node on average.
    Sparse,
    /// Three regulatory effects per node on average.
    Dense,
    MeanDegree(f64),
}

impl Density {
    pub fn mean_degree(&self) -> f64 {
        match self {
            Density::Sparse => 1.0,
            Density::Dense => 3.0,
            Density::MeanDegree(d) => *d,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Density::Sparse => "sparse".into(),
            Density::Dense => "dense".into(),
            Density::MeanDegree(d) => format!("{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HubSpec {
    pub count: usize,
    /// Expected number of targets of each hub.
    pub mean_degree: f64,
}

/// How the instruments of each node are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExoScenario {
    /// Independent markers, all effects equal to one.
    Independent,
    /// Markers within a node's block are exchangeably correlated and carry
    /// the given effects; fits keep only the strongest marker per node.
    Correlated { correlation: f64, effects: Vec<f64> },
}

impl ExoScenario {
    pub fn linked_triple() -> Self {
        ExoScenario::Correlated {
            correlation: 0.8,
            effects: vec![1.0, 0.5, -0.3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorSpec {
    Normal { sd: f64 },
    StudentT { df: f64, scale: f64 },
}

impl Default for ErrorSpec {
    fn default() -> Self {
        ErrorSpec::Normal { sd: 0.1 }
    }
}

impl ErrorSpec {
    /// Baseline normal errors with their variance multiplied by `factor`.
    pub fn scaled_variance(factor: f64) -> Self {
        ErrorSpec::Normal {
            sd: 0.1 * factor.sqrt(),
        }
    }

    /// Student-t errors rescaled to standard deviation `sd` (needs `df > 2`).
    pub fn student_t_with_sd(df: f64, sd: f64) -> Self {
        ErrorSpec::StudentT {
            df,
            scale: sd / (df / (df - 2.0)).sqrt(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ErrorSpec::Normal { sd } => format!("normal(sd={sd})"),
            ErrorSpec::StudentT { df, scale } => format!("t(df={df},scale={scale})"),
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            ErrorSpec::Normal { sd } => sd >= 0.0 && sd.is_finite(),
            ErrorSpec::StudentT { df, scale } => df > 0.0 && scale >= 0.0 && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid error spec {self:?}")))
        }
    }

    fn sampler(&self) -> Box<dyn Fn(&mut ChaCha8Rng) -> f64 + '_> {
        match *self {
            ErrorSpec::Normal { sd } => Box::new(move |rng| {
                let z: f64 = StandardNormal.sample(rng);
                z * sd
            }),
            ErrorSpec::StudentT { df, scale } => {
                let t = StudentT::new(df).expect("df checked positive");
                Box::new(move |rng| t.sample(rng) * scale)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub p: usize,
    pub topology: Topology,
    pub density: Density,
    /// Instruments per node.
    pub ee_count: usize,
    pub hubs: Option<HubSpec>,
    pub exo: ExoScenario,
    pub error: ErrorSpec,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(p: usize, topology: Topology, density: Density, ee_count: usize) -> Self {
        Self {
            p,
            topology,
            density,
            ee_count,
            hubs: None,
            exo: ExoScenario::Independent,
            error: ErrorSpec::default(),
            seed: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.p < 2 {
            return bad(format!("need p >= 2, got {}", self.p));
        }
        let d = self.density.mean_degree();
        if !(d >= 0.0 && d < self.p as f64) {
            return bad(format!("mean degree {d} must lie in [0, p)"));
        }
        if self.ee_count == 0 {
            return bad("ee_count must be positive".into());
        }
        if let Some(h) = self.hubs {
            if h.count > self.p || !(h.mean_degree >= 0.0) {
                return bad(format!("invalid hub spec {h:?}"));
            }
        }
        if let ExoScenario::Correlated {
            correlation,
            effects,
        } = &self.exo
        {
            if effects.len() != self.ee_count {
                return bad(format!(
                    "{} correlated effects for ee_count {}",
                    effects.len(),
                    self.ee_count
                ));
            }
            if !(0.0..=1.0).contains(correlation) {
                return bad(format!("marker correlation {correlation} outside [0, 1]"));
            }
        }
        self.error.check()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub gamma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub ea: ExoAssignment,
    pub exo: ExoScenario,
}

impl GroundTruth {
    pub fn p(&self) -> usize {
        self.gamma.nrows()
    }

    /// Reduced-form coefficients `Π = Ψ(I − Γ)⁻¹`, via a solve.
    pub fn reduced_form(&self) -> DMatrix<f64> {
        let p = self.p();
        let lhs = (DMatrix::identity(p, p) - &self.gamma).transpose();
        lhs.lu()
            .solve(&self.psi.transpose())
            .expect("I − Γ invertible by construction")
            .transpose()
    }

    pub fn edge_count(&self) -> usize {
        self.gamma.iter().filter(|&&v| v != 0.0).count()
    }
}

fn draw_effect(rng: &mut ChaCha8Rng) -> f64 {
    let magnitude = rng.random_range(0.5..1.0);
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Largest eigenvalue modulus of a square matrix.
///
/// Falls back to Gelfand's formula `ρ = lim ‖Mᵏ‖^{1/k}` when the Schur
/// iteration stalls, which happens on strongly defective matrices.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if let Some(schur) = Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        return schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
    }
    let mut power = m.clone();
    let mut log_scale = 0.0;
    let mut k = 1.0;
    for _ in 0..40 {
        let norm = power.norm();
        if norm == 0.0 {
            return 0.0;
        }
        power /= norm;
        log_scale += norm.ln() / k;
        power = &power * &power;
        k *= 2.0;
    }
    // ‖M^(2^40)‖^(2^-40), accumulated in log space
    (log_scale + power.norm().ln() / k).exp()
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = m.clone().singular_values();
    let min = s.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        s.max() / min
    }
}

/// Draws a network and its instrument effects.
///
/// Acyclic networks only allow edges from earlier to later nodes in a
/// random order; each admissible pair is an edge with probability
/// `2d/(p−1)`, so the expected edge count is `p·d`. Cyclic networks allow
/// every ordered pair with probability `d/(p−1)` and are redrawn until
/// `ρ(Γ) ≤ 0.95` and `cond(I − Γ) ≤ 1e8`. Hubs target `mean_degree`
/// outgoing edges each; in acyclic networks they sit in the first half of
/// the order so enough targets exist.
pub fn gen_network(spec: &NetworkSpec) -> Result<GroundTruth> {
    spec.check()?;
    let p = spec.p;
    let d = spec.density.mean_degree();
    let mut rng = seed::rng(spec.seed, &[tag::NETWORK]);
    let attempts = match spec.topology {
        Topology::Acyclic => 1,
        Topology::Cyclic => CYCLIC_ATTEMPTS,
    };
    for _ in 0..attempts {
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut rng);
        let mut is_hub = vec![false; p];
        if let Some(h) = spec.hubs {
            let pool = match spec.topology {
                Topology::Acyclic => &order[..p.div_ceil(2).max(h.count)],
                Topology::Cyclic => &order[..],
            };
            for &node in pool.choose_multiple(&mut rng, h.count) {
                is_hub[node] = true;
            }
        }
        let hub_degree = spec.hubs.map_or(0.0, |h| h.mean_degree);
        let mut gamma = DMatrix::zeros(p, p);
        match spec.topology {
            Topology::Acyclic => {
                let base = (2.0 * d / (p - 1) as f64).min(1.0);
                for a in 0..p {
                    let src = order[a];
                    let later = p - 1 - a;
                    let prob = if is_hub[src] {
                        (hub_degree / later.max(1) as f64).min(1.0)
                    } else {
                        base
                    };
                    for &tgt in &order[a + 1..] {
                        if rng.random_bool(prob) {
                            gamma[(src, tgt)] = draw_effect(&mut rng);
                        }
                    }
                }
            }
            Topology::Cyclic => {
                let base = (d / (p - 1) as f64).min(1.0);
                let hub_prob = (hub_degree / (p - 1) as f64).min(1.0);
                for src in 0..p {
                    let prob = if is_hub[src] { hub_prob } else { base };
                    for tgt in 0..p {
                        if tgt != src && rng.random_bool(prob) {
                            gamma[(src, tgt)] = draw_effect(&mut rng);
                        }
                    }
                }
            }
        }
        // acyclic Γ is nilpotent, so its spectral radius is zero
        let stable = (spec.topology == Topology::Acyclic
            || spectral_radius(&gamma) <= MAX_SPECTRAL_RADIUS)
            && condition_number(&(DMatrix::identity(p, p) - &gamma)) <= MAX_CONDITION;
        if stable {
            let ea = ExoAssignment::consecutive_blocks(p, spec.ee_count);
            let mut psi = DMatrix::zeros(p * spec.ee_count, p);
            for k in 0..p {
                for (slot, &i) in ea.set(k).iter().enumerate() {
                    psi[(i, k)] = match &spec.exo {
                        ExoScenario::Independent => 1.0,
                        ExoScenario::Correlated { effects, .. } => effects[slot],
                    };
                }
            }
            return Ok(GroundTruth {
                gamma,
                psi,
                ea,
                exo: spec.exo.clone(),
            });
        }
    }
    Err(Error::UnstableNetwork(attempts))
}

fn allele(rng: &mut ChaCha8Rng) -> f64 {
    f64::from(u8::from(rng.random_bool(0.5)))
}

/// Draws `n` observations from the system `Y(I − Γ) = XΨ + ε`.
pub fn gen_dataset(gt: &GroundTruth, n: usize, error: &ErrorSpec, seed: u64) -> Result<DataSet> {
    error.check()?;
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need n >= 2, got {n}")));
    }
    let (q, p) = gt.psi.shape();
    let mut rng = seed::rng(seed, &[tag::DATASET]);
    let mut x = DMatrix::zeros(n, q);
    match &gt.exo {
        ExoScenario::Independent => {
            for col in 0..q {
                for row in 0..n {
                    x[(row, col)] = allele(&mut rng) + allele(&mut rng);
                }
            }
        }
        ExoScenario::Correlated { correlation, .. } => {
            // each allele copies a shared founder allele with probability
            // √ρ, giving pairwise correlation ρ within a block
            let copy = correlation.sqrt();
            for row in 0..n {
                for block in gt.ea.sets() {
                    for _ in 0..2 {
                        let founder = allele(&mut rng);
                        for &col in block {
                            let a = if rng.random_bool(copy) {
                                founder
                            } else {
                                allele(&mut rng)
                            };
                            x[(row, col)] += a;
                        }
                    }
                }
            }
        }
    }
    let sample = error.sampler();
    let mut eps = DMatrix::zeros(n, p);
    for col in 0..p {
        for row in 0..n {
            eps[(row, col)] = sample(&mut rng);
        }
    }
    let rhs = &x * &gt.psi + eps;
    let lhs = (DMatrix::identity(p, p) - &gt.gamma).transpose();
    let y = lhs
        .lu()
        .solve(&rhs.transpose())
        .ok_or_else(|| Error::Singular("I − Γ".into()))?
        .transpose();
    let endo = (1..=p).map(|j| format!("G{j}")).collect();
    let exo = (1..=q).map(|i| format!("M{i}")).collect();
    Ok(DataSet::new(y, x, endo, exo))
}

/// For each node, the single instrument with the largest marginal
/// regression |t|-statistic against its expression.
pub fn strongest_single_instrument(ds: &DataSet, ea: &ExoAssignment) -> ExoAssignment {
    let n = ds.n() as f64;
    let (xc, _) = center_columns(ds.x());
    let (yc, _) = center_columns(ds.y());
    let sets = ea
        .sets()
        .iter()
        .enumerate()
        .map(|(k, set)| {
            let y = yc.column(k);
            let mut best = set[0];
            let mut best_t = f64::NEG_INFINITY;
            for &i in set {
                let x = xc.column(i);
                let sxx = x.norm_squared();
                let t = if sxx == 0.0 {
                    0.0
                } else {
                    let b = x.dot(&y) / sxx;
                    let rss = (y - x * b).norm_squared();
                    let se = (rss / (n - 2.0).max(1.0) / sxx).sqrt();
                    if se == 0.0 {
                        f64::INFINITY
                    } else {
                        (b / se).abs()
                    }
                };
                if t > best_t {
                    best_t = t;
                    best = i;
                }
            }
            vec![best]
        })
        .collect();
    ExoAssignment::new(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub power: f64,
    pub fdr: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// True positives whose estimated sign matches the truth.
    pub sign_correct: usize,
}

/// Compares edge supports: an edge `j → k` is any off-diagonal nonzero.
pub fn score(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Score {
    assert_eq!(est.shape(), truth.shape(), "score needs matching shapes");
    let p = truth.nrows();
    let (mut tp, mut fp, mut fn_, mut sign_correct) = (0, 0, 0, 0);
    for j in 0..p {
        for k in 0..p {
            if j == k {
                continue;
            }
            let (e, t) = (est[(j, k)], truth[(j, k)]);
            match (e != 0.0, t != 0.0) {
                (true, true) => {
                    tp += 1;
                    sign_correct += usize::from(e.signum() == t.signum());
                }
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let truth_edges = tp + fn_;
    let selected = tp + fp;
    Score {
        power: if truth_edges == 0 {
            1.0
        } else {
            tp as f64 / truth_edges as f64
        },
        fdr: fp as f64 / selected.max(1) as f64,
        tp,
        fp,
        fn_,
        sign_correct,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub spec: NetworkSpec,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cell: usize,
    pub topology: Topology,
    pub density: String,
    pub ee_count: usize,
    pub n: usize,
    pub strategy: StageOneStrategy,
    pub replicate: usize,
    pub power: f64,
    pub fdr: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub fit_seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub cell: usize,
    pub topology: Topology,
    pub density: String,
    pub ee_count: usize,
    pub n: usize,
    pub strategy: StageOneStrategy,
    /// Replicates that produced a score.
    pub replicates: usize,
    pub failures: usize,
    pub mean_power: f64,
    pub sd_power: f64,
    pub mean_fdr: f64,
    pub sd_fdr: f64,
    pub mean_fit_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub summary: Vec<MetricsSummary>,
}

impl MetricsTable {
    pub fn summary_for(&self, cell: usize, strategy: StageOneStrategy) -> Option<&MetricsSummary> {
        self.summary
            .iter()
            .find(|s| s.cell == cell && s.strategy == strategy)
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (m, var.sqrt())
}

/// Seeds of replicate `r` of a cell: `(network, dataset, fit)`.
///
/// Cells sharing a spec seed share networks, and data sets also share the
/// sample size, so scenario comparisons use common random numbers.
pub fn replicate_seeds(spec_seed: u64, fit_seed: u64, n: usize, r: usize) -> (u64, u64, u64) {
    (
        seed::substream(spec_seed, &[tag::NETWORK, r as u64]),
        seed::substream(spec_seed, &[tag::DATASET, r as u64, n as u64]),
        seed::substream(fit_seed, &[tag::FIT, r as u64]),
    )
}

/// Generates, fits and scores `replicates` systems per grid cell and
/// strategy. Failures are recorded per row; other rows proceed.
pub fn run_experiment(
    grid: &[ExperimentCell],
    replicates: usize,
    strategies: &[StageOneStrategy],
    fit_cfg: &FitConfig,
) -> Result<MetricsTable> {
    fit_cfg.check()?;
    let tasks: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..replicates).map(move |r| (c, r)))
        .collect();
    let pooled = crate::pipeline::with_threads(fit_cfg.threads, || {
        tasks
            .par_iter()
            .map(|&(c, r)| run_replicate(&grid[c], c, r, strategies, fit_cfg))
            .collect::<Vec<_>>()
    })?;
    let rows: Vec<MetricsRow> = pooled.into_iter().flatten().collect();

    let mut summary = Vec::new();
    for (c, cell) in grid.iter().enumerate() {
        for &strategy in strategies {
            let picked: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.cell == c && r.strategy == strategy)
                .collect();
            let ok: Vec<&&MetricsRow> = picked.iter().filter(|r| r.error.is_none()).collect();
            let power: Vec<f64> = ok.iter().map(|r| r.power).collect();
            let fdr: Vec<f64> = ok.iter().map(|r| r.fdr).collect();
            let secs: Vec<f64> = ok.iter().map(|r| r.fit_seconds).collect();
            let (mean_power, sd_power) = mean_sd(&power);
            let (mean_fdr, sd_fdr) = mean_sd(&fdr);
            summary.push(MetricsSummary {
                cell: c,
                topology: cell.spec.topology,
                density: cell.spec.density.label(),
                ee_count: cell.spec.ee_count,
                n: cell.n,
                strategy,
                replicates: ok.len(),
                failures: picked.len() - ok.len(),
                mean_power,
                sd_power,
                mean_fdr,
                sd_fdr,
                mean_fit_seconds: mean_sd(&secs).0,
            });
        }
    }
    Ok(MetricsTable { rows, summary })
}

fn run_replicate(
    cell: &ExperimentCell,
    c: usize,
    r: usize,
    strategies: &[StageOneStrategy],
    fit_cfg: &FitConfig,
) -> Vec<MetricsRow> {
    let spec = &cell.spec;
    let (net_seed, data_seed, fit_seed) = replicate_seeds(spec.seed, fit_cfg.master_seed, cell.n, r);
    let row = |strategy, outcome: Result<(Score, f64)>| {
        let (score, secs, error) = match outcome {
            Ok((s, t)) => (Some(s), t, None),
            Err(e) => (None, 0.0, Some(e.to_string())),
        };
        MetricsRow {
            cell: c,
            topology: spec.topology,
            density: spec.density.label(),
            ee_count: spec.ee_count,
            n: cell.n,
            strategy,
            replicate: r,
            power: score.map_or(f64::NAN, |s| s.power),
            fdr: score.map_or(f64::NAN, |s| s.fdr),
            tp: score.map_or(0, |s| s.tp),
            fp: score.map_or(0, |s| s.fp),
            fn_: score.map_or(0, |s| s.fn_),
            fit_seconds: secs,
            error,
        }
    };
    let prepared = (|| {
        let gt = gen_network(&NetworkSpec {
            seed: net_seed,
            ..spec.clone()
        })?;
        let ds = gen_dataset(&gt, cell.n, &spec.error, data_seed)?;
        let ea = match gt.exo {
            ExoScenario::Independent => gt.ea.clone(),
            ExoScenario::Correlated { .. } => strongest_single_instrument(&ds, &gt.ea),
        };
        Ok((gt, ds, ea))
    })();
    let (gt, ds, ea) = match prepared {
        Ok(v) => v,
        Err(e) => {
            let e: Error = e;
            return strategies
                .iter()
                .map(|&s| row(s, Err(e.clone())))
                .collect();
        }
    };
    strategies
        .iter()
        .map(|&strategy| {
            let cfg = FitConfig {
                stage_one: strategy,
                master_seed: fit_seed,
                threads: None,
                ..fit_cfg.clone()
            };
            let start = Instant::now();
            let outcome = fit_system(&ds, &ea, &cfg)
                .map(|est| (score(&est.gamma, &gt.gamma), start.elapsed().as_secs_f64()));
            row(strategy, outcome)
        })
        .collect()
}

/// True if the support of `gamma` admits a topological order.
pub fn is_acyclic(gamma: &DMatrix<f64>) -> bool {
    let p = gamma.nrows();
    let mut indegree: Vec<usize> = (0..p)
        .map(|k| (0..p).filter(|&j| j != k && gamma[(j, k)] != 0.0).count())
        .collect();
    let mut ready: Vec<usize> = (0..p).filter(|&k| indegree[k] == 0).collect();
    let mut seen = 0;
    while let Some(j) = ready.pop() {
        seen += 1;
        for k in 0..p {
            if k != j && gamma[(j, k)] != 0.0 {
                indegree[k] -= 1;
                if indegree[k] == 0 {
                    ready.push(k);
                }
            }
        }
    }
    seen == p
}

/// Column means of a genotype matrix, used by spot checks.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    center_columns(m).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(p: usize, topology: Topology, density: Density, seed: u64) -> NetworkSpec {
        NetworkSpec {
            seed,
            ..NetworkSpec::new(p, topology, density, 1)
        }
    }

    #[test]
    fn effects_are_in_the_two_sided_band() {
        for topology in [Topology::Acyclic, Topology::Cyclic] {
            let gt = gen_network(&spec(60, topology, Density::Sparse, 1)).unwrap();
            assert!(gt.edge_count() > 0);
            for &v in gt.gamma.iter().filter(|v| **v != 0.0) {
                assert!(v.abs() > 0.5 && v.abs() < 1.0, "{v}");
            }
            for k in 0..60 {
                assert_eq!(gt.gamma[(k, k)], 0.0);
            }
        }
    }

    #[test]
    fn spectral_radius_of_known_matrices() {
        let mut two_cycle = DMatrix::zeros(3, 3);
        two_cycle[(0, 1)] = 0.9;
        two_cycle[(1, 0)] = 0.4;
        assert_relative_eq!(spectral_radius(&two_cycle), 0.6, epsilon = 1e-9);
        let mut chain = DMatrix::zeros(30, 30);
        for i in 0..29 {
            chain[(i, i + 1)] = 0.9;
        }
        assert!(spectral_radius(&chain) < 0.05);
        let rotation = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert_relative_eq!(spectral_radius(&rotation), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn acyclic_networks_sort_topologically() {
        for s in 0..10 {
            let gt = gen_network(&spec(40, Topology::Acyclic, Density::Dense, s)).unwrap();
            assert!(is_acyclic(&gt.gamma));
        }
        let mut cyc = DMatrix::zeros(3, 3);
        cyc[(0, 1)] = 1.0;
        cyc[(1, 2)] = 1.0;
        cyc[(2, 0)] = 1.0;
        assert!(!is_acyclic(&cyc));
    }

    #[test]
    fn cyclic_networks_pass_the_stability_gate() {
        for s in 0..10 {
            let gt = gen_network(&spec(30, Topology::Cyclic, Density::Sparse, s)).unwrap();
            assert!(spectral_radius(&gt.gamma) <= MAX_SPECTRAL_RADIUS);
        }
    }

    #[test]
    fn impossible_cyclic_spec_exhausts_budget() {
        // every ordered pair an edge: ρ(Γ) far above the gate
        let s = spec(40, Topology::Cyclic, Density::MeanDegree(39.0), 0);
        assert_eq!(gen_network(&s).unwrap_err(), Error::UnstableNetwork(1000));
    }

    #[test]
    fn hubs_raise_out_degree() {
        let mut s = spec(200, Topology::Acyclic, Density::Sparse, 3);
        s.hubs = Some(HubSpec {
            count: 6,
            mean_degree: 20.0,
        });
        let mut hub_total = 0usize;
        let mut reps = 0;
        for seed in 0..20 {
            s.seed = seed;
            let gt = gen_network(&s).unwrap();
            let mut out: Vec<usize> = (0..200)
                .map(|j| gt.gamma.row(j).iter().filter(|v| **v != 0.0).count())
                .collect();
            out.sort_unstable_by(|a, b| b.cmp(a));
            hub_total += out[..6].iter().sum::<usize>();
            reps += 1;
        }
        let mean_hub = hub_total as f64 / (6 * reps) as f64;
        assert!(mean_hub > 15.0, "{mean_hub}");
    }

    #[test]
    fn decoupled_system_is_direct() {
        let mut gt = gen_network(&spec(5, Topology::Acyclic, Density::Sparse, 4)).unwrap();
        gt.gamma.fill(0.0);
        let ds = gen_dataset(&gt, 50, &ErrorSpec::Normal { sd: 0.0 }, 5).unwrap();
        assert_relative_eq!(ds.y().clone(), ds.x() * &gt.psi, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_data_follow_reduced_form() {
        let gt = gen_network(&spec(20, Topology::Cyclic, Density::Sparse, 6)).unwrap();
        let ds = gen_dataset(&gt, 40, &ErrorSpec::Normal { sd: 0.0 }, 7).unwrap();
        let p = gt.p();
        let inverse = (DMatrix::identity(p, p) - &gt.gamma).try_inverse().unwrap();
        let oracle = ds.x() * &gt.psi * inverse;
        assert!((ds.y() - &oracle).norm() <= 1e-8 * oracle.norm());
        assert!((ds.y() - ds.x() * gt.reduced_form()).norm() <= 1e-8 * oracle.norm());
    }

    #[test]
    fn genotype_moments() {
        let gt = gen_network(&spec(4, Topology::Acyclic, Density::Sparse, 8)).unwrap();
        let ds = gen_dataset(&gt, 1000, &ErrorSpec::default(), 9).unwrap();
        for col in ds.x().column_iter() {
            assert!(col.iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0;
            assert!((mean - 1.0).abs() <= 0.1, "{mean}");
            assert!((var - 0.5).abs() <= 0.07, "{var}");
        }
    }

    #[test]
    fn correlated_markers_reach_target_correlation() {
        let mut s = spec(3, Topology::Acyclic, Density::Sparse, 10);
        s.ee_count = 3;
        s.exo = ExoScenario::linked_triple();
        let gt = gen_network(&s).unwrap();
        assert_eq!(gt.psi[(1, 0)], 0.5);
        assert_eq!(gt.psi[(2, 0)], -0.3);
        let ds = gen_dataset(&gt, 4000, &ErrorSpec::default(), 11).unwrap();
        let (xc, _) = center_columns(ds.x());
        let corr = |a: usize, b: usize| {
            xc.column(a).dot(&xc.column(b)) / (xc.column(a).norm() * xc.column(b).norm())
        };
        for (a, b) in [(0, 1), (0, 2), (1, 2), (3, 5)] {
            assert!((corr(a, b) - 0.8).abs() < 0.04, "{a},{b}: {}", corr(a, b));
        }
        assert!(corr(0, 3).abs() < 0.06);
        let mean = ds.x().column(4).mean();
        assert!((mean - 1.0).abs() < 0.06);
    }

    #[test]
    fn error_toggles_change_only_the_noise() {
        let gt = gen_network(&spec(5, Topology::Acyclic, Density::Sparse, 12)).unwrap();
        let base = gen_dataset(&gt, 4000, &ErrorSpec::default(), 13).unwrap();
        let doubled = gen_dataset(&gt, 4000, &ErrorSpec::scaled_variance(2.0), 13).unwrap();
        let heavy = gen_dataset(&gt, 4000, &ErrorSpec::student_t_with_sd(3.0, 0.1), 13).unwrap();
        assert_eq!(base.x(), doubled.x());
        assert_eq!(base.x(), heavy.x());
        let p = gt.p();
        let resid = |ds: &DataSet| (ds.y() * (DMatrix::identity(p, p) - &gt.gamma)) - ds.x() * &gt.psi;
        let var = |m: &DMatrix<f64>| m.norm_squared() / m.len() as f64;
        let (rb, rd, rh) = (resid(&base), resid(&doubled), resid(&heavy));
        assert_relative_eq!(var(&rd) / var(&rb), 2.0, max_relative = 1e-9);
        assert!((var(&rh) / 0.01 - 1.0).abs() < 0.35);
        let kurt = |m: &DMatrix<f64>| {
            let v = var(m);
            m.iter().map(|e| e.powi(4)).sum::<f64>() / m.len() as f64 / (v * v)
        };
        assert!(kurt(&rb) < 3.3);
        assert!(kurt(&rh) > 5.0);
    }

    #[test]
    fn score_examples() {
        let mut truth = DMatrix::zeros(3, 3);
        truth[(0, 1)] = 0.7;
        truth[(1, 2)] = -0.6;
        let s = score(&truth, &truth);
        assert_eq!((s.power, s.fdr, s.tp, s.sign_correct), (1.0, 0.0, 2, 2));

        let s = score(&DMatrix::zeros(3, 3), &truth);
        assert_eq!((s.power, s.fdr, s.fn_), (0.0, 0.0, 2));

        let mut est = DMatrix::zeros(3, 3);
        est[(0, 1)] = -0.1;
        est[(2, 0)] = 0.3;
        let s = score(&est, &truth);
        assert_eq!((s.power, s.fdr, s.tp, s.fp, s.fn_), (0.5, 0.5, 1, 1, 1));
        assert_eq!(s.sign_correct, 0);
    }

    #[test]
    fn score_is_relabeling_invariant() {
        let gt = gen_network(&spec(12, Topology::Cyclic, Density::Dense, 14)).unwrap();
        let mut est = gt.gamma.clone();
        est[(0, 5)] = 0.3;
        est[(3, 7)] = 0.0;
        let perm: Vec<usize> = (0..12).rev().collect();
        let relabel = |m: &DMatrix<f64>| m.select_rows(&perm).select_columns(&perm);
        assert_eq!(score(&est, &gt.gamma), score(&relabel(&est), &relabel(&gt.gamma)));
    }

    #[test]
    fn strongest_instrument_is_the_large_effect() {
        let mut s = spec(4, Topology::Acyclic, Density::Sparse, 15);
        s.ee_count = 3;
        s.exo = ExoScenario::Correlated {
            correlation: 0.3,
            effects: vec![1.0, 0.5, -0.3],
        };
        let gt = gen_network(&s).unwrap();
        let ds = gen_dataset(&gt, 800, &ErrorSpec::default(), 16).unwrap();
        let picked = strongest_single_instrument(&ds, &gt.ea);
        for k in 0..4 {
            assert_eq!(picked.set(k), &[3 * k]);
        }
    }

    #[test]
    fn experiment_is_deterministic() {
        let grid = vec![ExperimentCell {
            spec: spec(6, Topology::Acyclic, Density::Sparse, 17),
            n: 60,
        }];
        let strategies = [StageOneStrategy::RidgeGcv, StageOneStrategy::AdaptiveLasso];
        let cfg = FitConfig::default();
        let strip = |t: MetricsTable| {
            t.rows
                .into_iter()
                .map(|r| (r.replicate, r.strategy, r.power.to_bits(), r.fdr.to_bits()))
                .collect::<Vec<_>>()
        };
        let a = run_experiment(&grid, 2, &strategies, &cfg).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert_eq!(a.summary.len(), 2);
        let s = a.summary_for(0, StageOneStrategy::RidgeGcv).unwrap();
        let direct: Vec<f64> = a
            .rows
            .iter()
            .filter(|r| r.strategy == StageOneStrategy::RidgeGcv)
            .map(|r| r.power)
            .collect();
        assert_relative_eq!(s.mean_power, direct.iter().sum::<f64>() / 2.0);
        let b = run_experiment(&grid, 2, &strategies, &cfg).unwrap();
        assert_eq!(strip(a), strip(b));
    }

    #[test]
    fn failed_cells_are_recorded() {
        let grid = vec![
            ExperimentCell {
                spec: spec(40, Topology::Cyclic, Density::MeanDegree(39.0), 0),
                n: 30,
            },
            ExperimentCell {
                spec: spec(4, Topology::Acyclic, Density::Sparse, 0),
                n: 30,
            },
        ];
        let t = run_experiment(&grid, 1, &[StageOneStrategy::RidgeGcv], &FitConfig::default()).unwrap();
        assert!(t.rows[0].error.is_some());
        assert!(t.rows[1].error.is_none());
        assert_eq!(t.summary[0].failures, 1);
    }
}
