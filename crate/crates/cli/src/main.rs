use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod io;

/// Two-stage penalized least squares network inference.
#[derive(Debug, Parser)]
#[command(name = "semforge", version)]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, env = "SEMFORGE_THREADS", default_value_t = 0)]
    threads: usize,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the system and write its edge list and a run report.
    Fit(FitArgs),
    /// Bootstrap edge selection frequencies.
    Bootstrap(BootstrapArgs),
    /// Generate a synthetic data set with its true network.
    Simulate(SimulateArgs),
    /// Score fits over a grid of synthetic networks.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Endogenous matrix (rows = observations), .tsv or .csv.
    #[arg(long)]
    y: PathBuf,
    /// Exogenous matrix (rows = observations), .tsv or .csv.
    #[arg(long)]
    x: PathBuf,
    /// JSON object mapping each endogenous name to its instrument names.
    #[arg(long)]
    assign: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageOneArg {
    Ridge,
    Alasso,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CvRuleArg {
    /// Smallest mean CV error.
    Min,
    /// Largest penalty within one standard error of the minimum.
    #[value(name = "1se")]
    OneSe,
}

#[derive(Debug, Args)]
pub struct FitOptions {
    /// Adaptive weight exponent.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
    #[arg(long, default_value_t = 50)]
    path_length: usize,
    #[arg(long, value_enum, default_value_t = StageOneArg::Ridge)]
    stage1: StageOneArg,
    /// How cross-validation picks the stage-two penalty.
    #[arg(long, value_enum, default_value_t = CvRuleArg::OneSe)]
    cv_rule: CvRuleArg,
    /// Fixed stage-two penalty instead of cross-validation.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    fit: FitOptions,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    fit: FitOptions,
    #[arg(long, default_value_t = 100)]
    boot_b: usize,
    /// Report only edges selected in at least this fraction of replicates.
    #[arg(long, default_value_t = 0.0)]
    boot_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TopologyArg {
    Acyclic,
    Cyclic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ErrorArg {
    Normal,
    T,
}

/// Network generation flags. List-valued flags take comma-separated values;
/// `bench` crosses them into a grid, `simulate` wants one value each.
#[derive(Debug, Args)]
pub struct NetworkArgs {
    #[arg(long, default_value_t = 30)]
    p: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [TopologyArg::Acyclic])]
    topology: Vec<TopologyArg>,
    /// `sparse`, `dense`, or a mean out-degree.
    #[arg(long, value_delimiter = ',', default_values_t = ["sparse".to_string()])]
    density: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize])]
    ee_count: Vec<usize>,
    /// Hubs as `count:mean_degree`, e.g. `6:5`.
    #[arg(long)]
    hubs: Option<String>,
    /// Pairwise correlation of the markers assigned to one node.
    #[arg(long)]
    ee_correlation: Option<f64>,
    /// Marker effects under correlation; defaults to 1,0.5,-0.3.
    #[arg(long, value_delimiter = ',')]
    ee_effects: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = ErrorArg::Normal)]
    error: ErrorArg,
    /// Error standard deviation (t errors are rescaled to it).
    #[arg(long, default_value_t = 0.1)]
    error_sd: f64,
    #[arg(long, default_value_t = 3.0)]
    error_df: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    network: NetworkArgs,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    network: NetworkArgs,
    /// Sample sizes, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [StageOneArg::Ridge])]
    strategies: Vec<StageOneArg>,
    #[command(flatten)]
    fit: FitOptions,
    /// Write 0 for fit_seconds so outputs are byte-reproducible.
    #[arg(long)]
    omit_timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<semforge::Error> for CliError {
    fn from(e: semforge::Error) -> Self {
        use semforge::Error as E;
        match e {
            E::Validation(_) | E::InvalidConfig(_) | E::Dimension(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = (cli.threads > 0).then_some(cli.threads);
    let result = match &cli.command {
        Command::Fit(a) => commands::fit(a, cli.seed, threads),
        Command::Bootstrap(a) => commands::bootstrap(a, cli.seed, threads),
        Command::Simulate(a) => commands::simulate(a, cli.seed),
        Command::Bench(a) => commands::bench(a, cli.seed, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semforge: {e}");
            ExitCode::from(e.code())
        }
    }
}
