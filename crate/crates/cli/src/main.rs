use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sliced_attention::{Dtype, Error, Variant};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "sliced-attn",
    version,
    about = "Sliced ReLU attention: kernels, benchmarks and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a multi-head layer on a token file.
    Forward(ForwardArgs),
    /// Time kernels over a grid of sequence lengths and write CSV.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences of the oracle.
    Gradcheck(GradcheckArgs),
    /// Check the quadratic form of the ReLU kernel on zero-sum weights.
    Cpd(CpdArgs),
    /// Build and verify layers matching random sources to random targets.
    Expressivity(ExpressivityArgs),
    /// Write the kernel weight field around a query on a planar grid.
    Heatmap(HeatmapArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum VariantArg {
    Relu,
    Bump,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Relu => Variant::Relu,
            VariantArg::Bump => Variant::Bump,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ProjectionArg {
    Linear,
    Mlp1,
}

#[derive(Args, Debug, Clone)]
struct KernelArgs {
    #[arg(long, value_enum, default_value = "relu")]
    variant: VariantArg,
    /// Half-width of the bump kernel.
    #[arg(long, default_value_t = 1.0)]
    bandwidth: f64,
    /// Normalizer floor; defaults to 1e-12 for f64 and 1e-6 for f32.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Mix raw values instead of mean-centered ones.
    #[arg(long)]
    no_centering: bool,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DtypeArg,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Seed for every random draw.
    #[arg(long, env = "SLICED_ATTN_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads for head-parallel evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    /// Tokens as JSON {"n","d","data"} or headerless CSV (by extension).
    #[arg(long)]
    input: PathBuf,
    /// Head parameters as JSON; random heads from the seed when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Number of random heads when no parameter file is given.
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Add the input tokens to the mixed head outputs.
    #[arg(long)]
    residual: bool,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384])]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Implementations to time; defaults to the sliced kernel of --variant
    /// plus naive_relu.
    #[arg(long, value_delimiter = ',')]
    impls: Vec<String>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Run quadratic kernels above n = 8192.
    #[arg(long)]
    force_naive: bool,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    instances: usize,
    #[arg(long, value_enum, default_value = "linear")]
    projection: ProjectionArg,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct CpdArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Points per trial.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Random pairs for the ReLU/absolute-value identity.
    #[arg(long, default_value_t = 100_000)]
    pairs: usize,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct ExpressivityArgs {
    /// Number of sequences.
    #[arg(long, default_value_t = 2)]
    p: usize,
    /// Tokens per sequence.
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    /// Parameters whose first head supplies the projection (d = 2).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Projection direction used when no parameter file is given.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.0])]
    direction: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.0])]
    query: Vec<f64>,
    /// The grid spans [-w, w] in both coordinates.
    #[arg(long, default_value_t = 3.0)]
    half_width: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 101)]
    points: usize,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    common: CommonArgs,
}

/// A failed check, as opposed to an error while running it.
#[derive(Debug)]
struct PropertyFailure(String);

enum Failure {
    Library(&'static str, Error),
    Property(&'static str, PropertyFailure),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parse(_)
        | Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::Precondition(_)
        | Error::Degenerate(_)
        | Error::Unsupported(_) => 2,
        Error::Shape(_) | Error::EmptyInput(_) => 3,
        Error::NonFinite { .. }
        | Error::ScoreTie { .. }
        | Error::Unsorted { .. }
        | Error::NoValidDirection { .. } => 4,
        Error::Internal(_) => 1,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let lib = |name: &'static str| move |e: Error| Failure::Library(name, e);
    match cli.command {
        Command::Forward(a) => commands::forward(a).map_err(lib("forward")),
        Command::Bench(a) => commands::bench(a).map_err(lib("bench")),
        Command::Gradcheck(a) => commands::gradcheck(a).map_err(|e| e.tagged("gradcheck")),
        Command::Cpd(a) => commands::cpd(a).map_err(|e| e.tagged("cpd")),
        Command::Expressivity(a) => commands::expressivity(a).map_err(|e| e.tagged("expressivity")),
        Command::Heatmap(a) => commands::heatmap(a).map_err(lib("heatmap")),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Library(name, e)) => {
            eprintln!("error: {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Property(name, PropertyFailure(msg))) => {
            eprintln!("check failed: {name}: {msg}");
            ExitCode::from(1)
        }
    }
}
