use std::path::Path;

use semforge::data::ValidationWarning;
use semforge::pipeline::EquationDiagnostic;
use semforge::simgen::{
    self, Density, ErrorSpec, ExoScenario, ExperimentCell, HubSpec, NetworkSpec, Topology,
};
use semforge::{
    bootstrap_edges, fit_system, validate, AdaptiveLassoConfig, BootstrapConfig, DataSet,
    ExoAssignment, FitConfig, LambdaRule, StageOneStrategy,
};
use serde::Serialize;

use crate::io::{self, Table};
use crate::{
    BenchArgs, BootstrapArgs, CliError, CvRuleArg, ErrorArg, FitArgs, FitOptions, InputArgs, NetworkArgs,
    SimulateArgs, StageOneArg, TopologyArg,
};

#[derive(Serialize)]
struct Echo<'a> {
    version: &'static str,
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    inputs: Option<Inputs<'a>>,
    seed: u64,
    threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<&'a FitConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<&'a BootstrapConfig>,
}

#[derive(Serialize)]
struct Inputs<'a> {
    y: &'a Path,
    x: &'a Path,
    assign: &'a Path,
}

impl<'a> Inputs<'a> {
    fn of(a: &'a InputArgs) -> Self {
        Inputs {
            y: &a.y,
            x: &a.x,
            assign: &a.assign,
        }
    }
}

fn strategy(s: StageOneArg) -> StageOneStrategy {
    match s {
        StageOneArg::Ridge => StageOneStrategy::RidgeGcv,
        StageOneArg::Alasso => StageOneStrategy::AdaptiveLasso,
    }
}

fn fit_config(o: &FitOptions, seed: u64, threads: Option<usize>) -> Result<FitConfig, CliError> {
    let cfg = FitConfig {
        stage_one: strategy(o.stage1),
        alasso: AdaptiveLassoConfig {
            delta: o.delta,
            folds: o.cv_folds,
            path_length: o.path_length,
            lambda: match (o.lambda, o.cv_rule) {
                (Some(l), _) => LambdaRule::Fixed(l),
                (None, CvRuleArg::Min) => LambdaRule::CrossValidated,
                (None, CvRuleArg::OneSe) => LambdaRule::OneStandardError,
            },
            ..AdaptiveLassoConfig::default()
        },
        master_seed: seed,
        threads,
        ..FitConfig::default()
    };
    cfg.check()?;
    Ok(cfg)
}

fn load(a: &InputArgs) -> Result<(DataSet, ExoAssignment), CliError> {
    let y = io::read_table(&a.y)?;
    let x = io::read_table(&a.x)?;
    io::unique_names(&y.names, "endogenous")?;
    io::unique_names(&x.names, "exogenous")?;
    let ea = io::read_assignment(&a.assign, &y.names, &x.names)?;
    let ds = DataSet::new(y.values, x.values, y.names, x.names);
    Ok((ds, ea))
}

fn num(v: f64) -> String {
    v.to_string()
}

#[derive(Serialize)]
struct StageOneEntry<'a> {
    variable: &'a str,
    tau: f64,
}

#[derive(Serialize)]
struct EquationEntry<'a> {
    variable: &'a str,
    lambda: f64,
    #[serde(flatten)]
    diagnostic: &'a EquationDiagnostic,
}

#[derive(Serialize)]
struct FitReport<'a> {
    config: Echo<'a>,
    observations: usize,
    endogenous: usize,
    exogenous: usize,
    edges: usize,
    warnings: Vec<String>,
    stage_one: Vec<StageOneEntry<'a>>,
    large_tau_variables: Vec<&'a str>,
    equations: Vec<EquationEntry<'a>>,
    failed_equations: Vec<&'a str>,
}

fn warnings(ds: &DataSet, ea: &ExoAssignment) -> Vec<String> {
    validate(ds, ea)
        .warnings
        .iter()
        .map(|w| match w {
            ValidationWarning::ConstantExogenous { index } => {
                format!("exogenous variable {:?} is constant", ds.exo_names()[*index])
            }
        })
        .collect()
}

pub fn fit(a: &FitArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let cfg = fit_config(&a.fit, seed, threads)?;
    let (ds, ea) = load(&a.input)?;
    let est = fit_system(&ds, &ea, &cfg)?;
    io::ensure_dir(&a.input.out)?;

    let endo = ds.endo_names();
    let edges = est.edges();
    let rows: Vec<Vec<String>> = edges
        .iter()
        .map(|&(j, k, v)| vec![endo[j].clone(), endo[k].clone(), num(v)])
        .collect();
    io::write_tsv(
        &a.input.out.join("edges.tsv"),
        &["source", "target", "effect"],
        &rows,
    )?;

    let failed = est.failed_equations();
    for &k in &failed {
        eprintln!(
            "semforge: warning: equation for {:?} failed: {}",
            endo[k],
            est.diagnostics[k].error.as_deref().unwrap_or("unknown error")
        );
    }
    let report = FitReport {
        config: Echo {
            version: env!("CARGO_PKG_VERSION"),
            command: "fit",
            inputs: Some(Inputs::of(&a.input)),
            seed,
            threads,
            fit: Some(&cfg),
            bootstrap: None,
        },
        observations: ds.n(),
        endogenous: ds.p(),
        exogenous: ds.q(),
        edges: edges.len(),
        warnings: warnings(&ds, &ea),
        stage_one: endo
            .iter()
            .zip(&est.taus)
            .map(|(name, &tau)| StageOneEntry { variable: name, tau })
            .collect(),
        large_tau_variables: est.large_tau_columns.iter().map(|&j| endo[j].as_str()).collect(),
        equations: endo
            .iter()
            .zip(&est.lambdas)
            .zip(&est.diagnostics)
            .map(|((name, &lambda), diagnostic)| EquationEntry {
                variable: name,
                lambda,
                diagnostic,
            })
            .collect(),
        failed_equations: failed.iter().map(|&k| endo[k].as_str()).collect(),
    };
    io::write_json(&a.input.out.join("report.json"), &report)
}

#[derive(Serialize)]
struct BootstrapReport<'a> {
    config: Echo<'a>,
    requested: usize,
    used: usize,
    skipped: usize,
    reported_edges: usize,
}

pub fn bootstrap(a: &BootstrapArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let cfg = fit_config(&a.fit, seed, threads)?;
    let boot = BootstrapConfig {
        replicates: a.boot_b,
        master_seed: seed,
        frequency_threshold: a.boot_threshold,
    };
    boot.check()?;
    let (ds, ea) = load(&a.input)?;
    let table = bootstrap_edges(&ds, &ea, &cfg, &boot)?;
    io::ensure_dir(&a.input.out)?;

    let endo = ds.endo_names();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                endo[r.source].clone(),
                endo[r.target].clone(),
                num(r.mean_effect),
                num(r.frequency),
                r.selected.to_string(),
                table.used.to_string(),
                table.skipped.to_string(),
            ]
        })
        .collect();
    io::write_tsv(
        &a.input.out.join("edges.tsv"),
        &["source", "target", "effect", "frequency", "selected", "B", "skipped"],
        &rows,
    )?;
    if table.skipped > 0 {
        eprintln!(
            "semforge: warning: {} of {} bootstrap replicates skipped",
            table.skipped, table.requested
        );
    }
    let report = BootstrapReport {
        config: Echo {
            version: env!("CARGO_PKG_VERSION"),
            command: "bootstrap",
            inputs: Some(Inputs::of(&a.input)),
            seed,
            threads,
            fit: Some(&cfg),
            bootstrap: Some(&boot),
        },
        requested: table.requested,
        used: table.used,
        skipped: table.skipped,
        reported_edges: table.rows.len(),
    };
    io::write_json(&a.input.out.join("report.json"), &report)
}

fn parse_density(s: &str) -> Result<Density, CliError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "sparse" => Ok(Density::Sparse),
        "dense" => Ok(Density::Dense),
        other => other
            .parse::<f64>()
            .map(Density::MeanDegree)
            .map_err(|_| CliError::Validation(format!("unrecognized density {s:?}"))),
    }
}

fn parse_hubs(s: &str) -> Result<HubSpec, CliError> {
    let bad = || CliError::Validation(format!("hubs must look like count:mean_degree, got {s:?}"));
    let (count, degree) = s.split_once(':').ok_or_else(bad)?;
    Ok(HubSpec {
        count: count.trim().parse().map_err(|_| bad())?,
        mean_degree: degree.trim().parse().map_err(|_| bad())?,
    })
}

/// Every combination of the topology, density and instrument-count lists.
fn network_specs(a: &NetworkArgs, seed: u64) -> Result<Vec<NetworkSpec>, CliError> {
    let hubs = a.hubs.as_deref().map(parse_hubs).transpose()?;
    let exo = match a.ee_correlation {
        None => ExoScenario::Independent,
        Some(correlation) => ExoScenario::Correlated {
            correlation,
            effects: a.ee_effects.clone().unwrap_or_else(|| vec![1.0, 0.5, -0.3]),
        },
    };
    let error = match a.error {
        ErrorArg::Normal => ErrorSpec::Normal { sd: a.error_sd },
        ErrorArg::T if a.error_df > 2.0 => ErrorSpec::student_t_with_sd(a.error_df, a.error_sd),
        ErrorArg::T => {
            return Err(CliError::Validation(format!(
                "t errors need df > 2 for a finite sd, got {}",
                a.error_df
            )))
        }
    };
    let mut specs = Vec::new();
    for &t in &a.topology {
        for d in &a.density {
            for &ee_count in &a.ee_count {
                let spec = NetworkSpec {
                    p: a.p,
                    topology: match t {
                        TopologyArg::Acyclic => Topology::Acyclic,
                        TopologyArg::Cyclic => Topology::Cyclic,
                    },
                    density: parse_density(d)?,
                    ee_count,
                    hubs,
                    exo: exo.clone(),
                    error,
                    seed,
                };
                spec.check()?;
                specs.push(spec);
            }
        }
    }
    Ok(specs)
}

#[derive(Serialize)]
struct SimulateEcho<'a> {
    version: &'static str,
    command: &'static str,
    seed: u64,
    n: usize,
    spec: &'a NetworkSpec,
    network_seed: u64,
    dataset_seed: u64,
    edges: usize,
}

pub fn simulate(a: &SimulateArgs, seed: u64) -> Result<(), CliError> {
    let mut specs = network_specs(&a.network, seed)?;
    if specs.len() != 1 {
        return Err(CliError::Validation(
            "simulate takes a single topology, density and ee-count".into(),
        ));
    }
    let spec = specs.remove(0);
    let (network_seed, dataset_seed, _) = simgen::replicate_seeds(seed, seed, a.n, 0);
    let gt = simgen::gen_network(&NetworkSpec {
        seed: network_seed,
        ..spec.clone()
    })?;
    let ds = simgen::gen_dataset(&gt, a.n, &spec.error, dataset_seed)?;
    io::ensure_dir(&a.out)?;

    let (endo, exo) = (ds.endo_names(), ds.exo_names());
    io::write_table(
        &a.out.join("y.tsv"),
        &Table {
            names: endo.to_vec(),
            values: ds.y().clone(),
        },
    )?;
    io::write_table(
        &a.out.join("x.tsv"),
        &Table {
            names: exo.to_vec(),
            values: ds.x().clone(),
        },
    )?;
    io::write_assignment(&a.out.join("assign.json"), &gt.ea, endo, exo)?;

    let mut edges = Vec::new();
    let mut effects = Vec::new();
    for j in 0..gt.p() {
        for k in 0..gt.p() {
            if gt.gamma[(j, k)] != 0.0 {
                edges.push(vec![endo[j].clone(), endo[k].clone(), num(gt.gamma[(j, k)])]);
            }
        }
    }
    for i in 0..gt.psi.nrows() {
        for k in 0..gt.p() {
            if gt.psi[(i, k)] != 0.0 {
                effects.push(vec![exo[i].clone(), endo[k].clone(), num(gt.psi[(i, k)])]);
            }
        }
    }
    io::write_tsv(
        &a.out.join("truth_edges.tsv"),
        &["source", "target", "effect"],
        &edges,
    )?;
    io::write_tsv(
        &a.out.join("truth_instruments.tsv"),
        &["instrument", "target", "effect"],
        &effects,
    )?;
    io::write_json(
        &a.out.join("simulation.json"),
        &SimulateEcho {
            version: env!("CARGO_PKG_VERSION"),
            command: "simulate",
            seed,
            n: a.n,
            spec: &spec,
            network_seed,
            dataset_seed,
            edges: edges.len(),
        },
    )
}

#[derive(Serialize)]
struct BenchEcho<'a> {
    version: &'static str,
    command: &'static str,
    seed: u64,
    threads: Option<usize>,
    replicates: usize,
    strategies: Vec<&'static str>,
    grid: &'a [ExperimentCell],
    fit: &'a FitConfig,
    omit_timing: bool,
}

pub fn bench(a: &BenchArgs, seed: u64, threads: Option<usize>) -> Result<(), CliError> {
    let cfg = fit_config(&a.fit, seed, threads)?;
    let specs = network_specs(&a.network, seed)?;
    if a.replicates == 0 {
        return Err(CliError::Validation("replicates must be positive".into()));
    }
    let grid: Vec<ExperimentCell> = specs
        .iter()
        .flat_map(|s| {
            a.ns.iter().map(move |&n| ExperimentCell {
                spec: s.clone(),
                n,
            })
        })
        .collect();
    let strategies: Vec<StageOneStrategy> = a.strategies.iter().map(|&s| strategy(s)).collect();
    let table = simgen::run_experiment(&grid, a.replicates, &strategies, &cfg)?;
    io::ensure_dir(&a.out)?;

    let secs = |v: f64| if a.omit_timing { "0".to_string() } else { num(v) };
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.topology.label().to_string(),
                r.density.clone(),
                r.ee_count.to_string(),
                r.n.to_string(),
                r.strategy.label().to_string(),
                r.replicate.to_string(),
                num(r.power),
                num(r.fdr),
                secs(r.fit_seconds),
            ]
        })
        .collect();
    io::write_csv(
        &a.out.join("metrics.csv"),
        &[
            "topology", "density", "ee_count", "n", "strategy", "replicate", "power", "fdr",
            "fit_seconds",
        ],
        &rows,
    )?;
    let summary: Vec<Vec<String>> = table
        .summary
        .iter()
        .map(|s| {
            vec![
                s.topology.label().to_string(),
                s.density.clone(),
                s.ee_count.to_string(),
                s.n.to_string(),
                s.strategy.label().to_string(),
                s.replicates.to_string(),
                s.failures.to_string(),
                num(s.mean_power),
                num(s.sd_power),
                num(s.mean_fdr),
                num(s.sd_fdr),
                secs(s.mean_fit_seconds),
            ]
        })
        .collect();
    io::write_csv(
        &a.out.join("summary.csv"),
        &[
            "topology", "density", "ee_count", "n", "strategy", "replicates", "failures",
            "mean_power", "sd_power", "mean_fdr", "sd_fdr", "mean_fit_seconds",
        ],
        &summary,
    )?;
    for r in table.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "semforge: warning: cell {} replicate {} ({}) failed: {}",
            r.cell,
            r.replicate,
            r.strategy.label(),
            r.error.as_deref().unwrap_or_default()
        );
    }
    io::write_json(
        &a.out.join("bench.json"),
        &BenchEcho {
            version: env!("CARGO_PKG_VERSION"),
            command: "bench",
            seed,
            threads,
            replicates: a.replicates,
            strategies: strategies.iter().map(|s| s.label()).collect(),
            grid: &grid,
            fit: &cfg,
            omit_timing: a.omit_timing,
        },
    )
}
