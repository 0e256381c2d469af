//! `invnorm`: verification, data generation, training, evaluation and
//! reporting for invertible style normalization.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 usage or
//! configuration error.

// `!(x > 0.0)` is how NaN gets rejected alongside out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "invnorm",
    version,
    about = "Invertible style normalization toolkit"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for every random stream
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Directory for generated files
    #[arg(long, global = true, default_value = "out")]
    pub output_dir: PathBuf,

    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    pub log_level: LogLevel,

    /// Flat TOML file of `flag-name = value` defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for independent trials and domains
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check decode(encode(x)) == x on random models and inputs
    Roundtrip(RoundtripArgs),
    /// Compare tape gradients with central finite differences
    Gradcheck(GradcheckArgs),
    /// Compare layer log-determinants with the dense Jacobian
    LogdetCheck(LogdetArgs),
    /// Render a multi-domain dataset into the output directory
    GenData(GenDataArgs),
    /// Train the baseline and/or InvNorm variant with one domain held out
    Train(TrainArgs),
    /// Evaluate trained models on a dataset
    Eval(EvalArgs),
    /// Aggregate EvalReport files into a table, CSV and SVG chart
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct RoundtripArgs {
    /// Comma-separated BxCxHxW shapes
    #[arg(long, value_delimiter = ',', default_values_t = invnorm::verify::default_roundtrip_shapes())]
    pub shapes: Vec<invnorm::Shape>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long = "tol", default_value_t = invnorm::verify::ROUNDTRIP_TOL)]
    pub tolerance: f64,
    /// Coupling network width
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Comma-separated layer names
    #[arg(long, value_delimiter = ',', default_values_t = invnorm::verify::GradLayer::ALL)]
    pub layers: Vec<invnorm::verify::GradLayer>,
    #[arg(long, default_value_t = invnorm::numerics::check::DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = invnorm::verify::GRAD_REL_TOL)]
    pub rel_tol: f64,
}

#[derive(Args, Debug)]
pub struct LogdetArgs {
    /// Largest C*H*W handed to the dense oracle
    #[arg(long, default_value_t = 16)]
    pub max_dim: usize,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 500)]
    pub n_per_domain: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Image height and width
    #[arg(long, default_value_t = 32)]
    pub hw: usize,
    /// JSON list of domain specs; the four built-in domains otherwise
    #[arg(long)]
    pub domains: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Invnorm,
    Both,
}

impl VariantArg {
    pub fn variants(self) -> Vec<invnorm::harness::Variant> {
        use invnorm::harness::Variant;
        match self {
            VariantArg::Baseline => vec![Variant::Baseline],
            VariantArg::Invnorm => vec![Variant::InvNorm],
            VariantArg::Both => Variant::ALL.to_vec(),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: PathBuf,
    /// Domain excluded from training
    #[arg(long)]
    pub held_out: String,
    #[arg(long, value_enum, default_value_t = VariantArg::Both)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5)]
    pub steps_per_block: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Largest global gradient norm per step
    #[arg(long, default_value_t = 2.0)]
    pub grad_clip: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by train
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub held_out: String,
    #[arg(long, value_enum, default_value_t = VariantArg::Both)]
    pub variant: VariantArg,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// EvalReport JSON files
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write accuracy.svg
    #[arg(long)]
    pub svg: bool,
}

fn main() -> ExitCode {
    let cmd = Cli::command();
    let args = match config::merge_args(&cmd, std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    // clap exits with 2 on usage errors and 0 on --help/--version
    let cli = Cli::parse_from(args);
    env_logger::Builder::new()
        .filter_level(match cli.log_level {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
        })
        .format_timestamp(None)
        .format_target(false)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs as usize)
        .build_global()
    {
        log::warn!("thread pool: {e}");
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
