//! `qllm`: factorize dense weight matrices into circuit-disentangled MPOs.
//!
//! Every command writes a JSON report to `--report` or standard output and
//! logs to standard error. Exit codes: 0 success, 1 invalid input, 2
//! numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "qllm",
    version,
    about = "Circuit-disentangled MPO factorization of weight matrices"
)]
struct Cli {
    /// Write the JSON report here instead of standard output.
    #[arg(long, global = true)]
    report: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic target `W = U₀·M₀·V₀†` with known factors.
    Plant(PlantArgs),
    /// Plain MPO factorization of a matrix at a fixed bond dimension.
    Factorize(FactorizeArgs),
    /// Circuit-disentangled factorization `W ≈ U·M·V†`.
    Disentangle(DisentangleArgs),
    /// Recompute metrics of a stored layer, optionally against a reference.
    Evaluate(EvaluateArgs),
    /// Compare plain MPO, polar and disentangler representations.
    Baseline(BaselineArgs),
    /// Add circuit layers and grow the core bond dimension.
    Enhance(EnhanceArgs),
    /// Retrain a stored layer against an operator or a data batch.
    Retrain(RetrainArgs),
    /// Shot-noise study of sampling a circuit's output distribution.
    SampleStudy(SampleStudyArgs),
}

#[derive(Args, Debug, Clone)]
struct MatrixInput {
    /// Dense matrix in QTEN format.
    #[arg(long)]
    input: PathBuf,
    /// Physical dimension of each site.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    site_dim: u64,
    /// Zero-pad rows and columns up to the next power of the site dimension.
    #[arg(long)]
    pad: bool,
}

#[derive(Args, Debug)]
struct PlantArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    site_dim: u64,
    /// Layers on both sides, unless overridden per side.
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long)]
    layers_u: Option<usize>,
    #[arg(long)]
    layers_v: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    chi: u64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path of the dense target.
    #[arg(long)]
    out: PathBuf,
    /// Optional manifest path for the planted factors.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FactorizeArgs {
    #[command(flatten)]
    matrix: MatrixInput,
    /// Maximum bond dimension.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    chi: u64,
    /// Manifest path for the factorized layer.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Identity,
    Haar,
}

#[derive(Args, Debug)]
struct DisentangleArgs {
    #[command(flatten)]
    matrix: MatrixInput,
    /// Layers on both sides, unless overridden per side.
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long)]
    layers_u: Option<usize>,
    #[arg(long)]
    layers_v: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    chi_new: u64,
    #[arg(long, default_value_t = qllm_core::disentangler::DEFAULT_MAX_SWEEPS)]
    max_sweeps: usize,
    #[arg(long, default_value_t = qllm_core::disentangler::DEFAULT_FID_TOL)]
    fid_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Identity)]
    init: InitArg,
    /// Independent starts run in parallel; the best fidelity is kept.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    restarts: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Layer manifest.
    #[arg(long)]
    layer: PathBuf,
    /// Dense reference matrix in QTEN format.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[command(flatten)]
    matrix: MatrixInput,
    #[arg(long, default_value_t = 1e-3)]
    target_error: f64,
    /// Disentangler layers per side.
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    restarts: u64,
    #[arg(long, default_value_t = 500)]
    max_sweeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[arg(long)]
    layer: PathBuf,
    /// Layers added on both sides, unless overridden per side.
    #[arg(long, default_value_t = 0)]
    add_layers: usize,
    #[arg(long)]
    add_layers_u: Option<usize>,
    #[arg(long)]
    add_layers_v: Option<usize>,
    /// New bond dimension; defaults to the current maximum.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    new_chi: Option<u64>,
    /// Seeded noise on the core, relative to each core's RMS entry.
    #[arg(long, default_value_t = 0.0)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    MatrixFidelity,
    DataMse,
}

#[derive(Args, Debug)]
struct RetrainArgs {
    #[arg(long)]
    layer: PathBuf,
    /// Target operator (dense QTEN) for matrix_fidelity.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Input columns (QTEN) for data_mse.
    #[arg(long)]
    x: Option<PathBuf>,
    /// Output columns (QTEN) for data_mse.
    #[arg(long)]
    y: Option<PathBuf>,
    /// Defaults to matrix_fidelity with --target, data_mse with --x/--y.
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    #[arg(long)]
    grad_check: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CircuitArg {
    U,
    VDag,
}

#[derive(Args, Debug)]
struct SampleStudyArgs {
    /// Take the circuit from this layer manifest instead of a random one.
    #[arg(long)]
    layer: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CircuitArg::U)]
    circuit: CircuitArg,
    /// Sites of the random circuit.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Layers of the random circuit.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    circuit_seed: u64,
    /// Input vector (QTEN); a seeded random vector otherwise.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![100u64, 1_000, 10_000, 100_000])]
    shots: Vec<u64>,
    /// Number of sampling seeds per shot count.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
