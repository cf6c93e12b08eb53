//! Batch front end for the `semdiff` library.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod bench;
mod diffuse;
mod eval;
mod gradcheck;
mod opdemo;

#[derive(Parser, Debug)]
#[command(name = "semdiff", version, about = "Guided diffusion, semantic difference convolution and boundary metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the explicit guided diffusion scheme on an image.
    Diffuse(DiffuseArgs),
    /// Apply vanilla, central-difference or semantic-difference convolution.
    Opdemo(OpdemoArgs),
    /// Certify the analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the toy segmenter with every neck variant.
    Bench(BenchArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct DiffuseArgs {
    /// PGM, PPM or .tns image to diffuse.
    #[arg(long)]
    input: PathBuf,
    /// Guidance image path, or `constant` for plain isotropic diffusion.
    #[arg(long, default_value = "constant")]
    guidance: String,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Defaults to 1 / (h·w) for the chosen neighborhood.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Neighborhood extents as HxW.
    #[arg(long, default_value = "3x3")]
    kernel: String,
    /// Output path; the extension picks the format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OpdemoArgs {
    /// vanilla, cdc or sdc.
    #[arg(long)]
    op: String,
    /// Input image. Mutually exclusive with --scene.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    input: Option<PathBuf>,
    /// Use the built-in textured fixture scene with this seed.
    #[arg(long)]
    scene: Option<u64>,
    /// Guidance image path or `constant`. Defaults to the fixture guidance with
    /// --scene and to `constant` otherwise.
    #[arg(long)]
    guidance: Option<String>,
    /// `HxW` for an all-ones channel-diagonal kernel, or a .tns of shape (Co, Ci, h, w).
    #[arg(long, default_value = "3x3")]
    kernel: String,
    #[arg(long, default_value_t = 1)]
    dilation: usize,
    /// Similarity scale for sdc. Defaults to the fixture's value.
    #[arg(long)]
    lambda: Option<f64>,
    /// Label map for the region/boundary energy report.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output prefix: writes PREFIX.pgm and PREFIX.tns.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = semdiff::grad::GRADCHECK_INSTANCES)]
    instances: usize,
    /// Perturb the analytic gradients; a test fixture for the failure path.
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted label maps (PGM or .tns).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label maps with matching file names.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Exit status for a run that found nothing to do.
const EXIT_NO_DATA: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Diffuse(a) => diffuse::run(&a),
        Command::Opdemo(a) => opdemo::run(&a),
        Command::Gradcheck(a) => gradcheck::run(&a),
        Command::Bench(a) => bench::run(&a),
        Command::Eval(a) => eval::run(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Parses `HxW` (or a single odd `N` for `NxN`).
pub(crate) fn parse_extents(spec: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| anyhow::anyhow!("bad kernel extents {spec:?}"));
    match spec.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(spec)?;
            Ok((n, n))
        }
    }
}

pub(crate) fn require_file(path: &std::path::Path) -> Result<()> {
    anyhow::ensure!(path.is_file(), "{} is not a readable file", path.display());
    Ok(())
}

pub(crate) fn write_text(path: &std::path::Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))
}

pub(crate) type Outcome = Result<ExitCode>;
