//! `hessquant`: runs the quantization experiment pipeline from a JSON
//! config. See the README for the config schema and output layout.

mod artifacts;
mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hessquant::ComputeMode;

use crate::commands::Session;
use crate::config::{Loaded, Overrides};
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "hessquant", version, about = "Hessian-aware mixed-precision quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision baseline.
    Train(Common),
    /// Estimate top Hessian eigenvalues per layer over data shards and the Ω sensitivity.
    Probe(Common),
    /// Assign per-layer bit-widths and report model sizes.
    Allocate {
        #[command(flatten)]
        common: Common,
        /// Swap the high and low bit levels.
        #[arg(long)]
        reverse: bool,
    },
    /// Quantization-aware fine-tuning with the allocated bit-widths.
    Qat(Common),
    /// Uniform, single-group quantization baseline.
    Directq(Common),
    /// Accuracy of every saved model on both splits.
    Evaluate(Common),
    /// Loss grid along the top two Hessian eigenvectors of one layer.
    Landscape(Common),
    /// Attention KL divergence of the quantized models from the baseline.
    Kl(Common),
    /// Collect all tables and run metadata.
    Report(Common),
    /// Every step above, in order.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight grouping: a group count, `per-head` or `layerwise`.
    #[arg(long)]
    groups: Option<String>,
    /// Comma-separated bit-widths: one per encoder layer, or a single
    /// value for `directq`.
    #[arg(long, value_delimiter = ',')]
    bits: Option<Vec<u8>>,
    /// Training precision.
    #[arg(long)]
    compute: Option<ComputeMode>,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("QB_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("QB_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let (common, directq_bits) = match &cli.command {
        Command::Directq(c) => {
            let bits = match c.bits.as_deref() {
                None => None,
                Some([b]) => Some(*b),
                Some(_) => return Err(Failure::config("directq takes a single --bits value")),
            };
            (c, bits)
        }
        Command::Allocate { common, .. } => (common, None),
        Command::Train(c)
        | Command::Probe(c)
        | Command::Qat(c)
        | Command::Evaluate(c)
        | Command::Landscape(c)
        | Command::Kl(c)
        | Command::Report(c)
        | Command::Pipeline(c) => (c, None),
    };
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        groups: common.groups.clone(),
        bits: if directq_bits.is_some() { None } else { common.bits.clone() },
        compute: common.compute,
    };
    let session = Session::open(Loaded::read(&common.config, &overrides)?)?;
    match cli.command {
        Command::Train(_) => session.train(),
        Command::Probe(_) => session.probe(),
        Command::Allocate { reverse, .. } => session.allocate(reverse),
        Command::Qat(_) => session.qat(),
        Command::Directq(_) => session.directq(directq_bits),
        Command::Evaluate(_) => session.evaluate(),
        Command::Landscape(_) => session.landscape(),
        Command::Kl(_) => session.kl(),
        Command::Report(_) => session.report(),
        Command::Pipeline(_) => session.pipeline(),
    }?;
    session.art.write_manifest()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.code)
        }
    }
}
