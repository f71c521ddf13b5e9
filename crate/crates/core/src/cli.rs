//! Command-line front end. Machine output goes to stdout, diagnostics to
//! stderr. Exit codes: 0 success, 1 runtime failure, 2 usage or validation.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metric};
use crate::model::{forward_snapshots, load_checkpoint, Variant};
use crate::pointcloud::{add_noise, load, save, synth, CloudFormat, NoiseSpec, PointCloud, Shape};
use crate::selftest;
use crate::spectral::{closed_form_response, lambda_grid, response_csv, ClosedForm, FilterSpec};
use crate::tensor::Tensor;
use crate::train::train;
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const THREADS_ENV: &str = "GDFLOW_THREADS";

/// Salt separating the noise stream from the shape-sampling stream.
const NOISE_SALT: u64 = 0x6e6f_6973_65;

#[derive(Debug, Parser)]
#[command(name = "gdflow", version, about = "Point cloud denoising with graph ODE flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic shape and optionally add Gaussian noise.
    Synth(SynthArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Denoise a cloud with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Compare two clouds; prints a JSON report.
    Eval(EvalArgs),
    /// Tabulate a spectral filter response as CSV.
    FilterResponse(FilterResponseArgs),
    /// Run the built-in numerical checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = ["sphere", "torus", "cube", "plane"])]
    pub shape: String,
    #[arg(long)]
    pub n: usize,
    /// Noise std relative to the bounding-box diagonal.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noisy output.
    #[arg(long)]
    pub out: PathBuf,
    /// Clean output.
    #[arg(long)]
    pub clean: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the variant stored in the checkpoint.
    #[arg(long)]
    pub variant: Option<String>,
    /// Fractions of the integration window; one file per fraction.
    #[arg(long, value_delimiter = ',')]
    pub snapshots: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value = "cd,emd,hd,rmsd")]
    pub metrics: String,
}

#[derive(Debug, Args)]
pub struct FilterResponseArgs {
    /// Learned polynomial basis (`bernstein`).
    #[arg(long, conflicts_with = "filter", value_parser = ["bernstein"])]
    pub basis: Option<String>,
    /// Closed-form filter: ppr, gnn-lf, gnn-hf, chebyshev, vanilla.
    #[arg(long)]
    pub filter: Option<String>,
    /// Bernstein order; must match the number of coefficients minus one.
    #[arg(long = "K")]
    pub order: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    pub theta: Vec<f64>,
    /// Number of evenly spaced λ samples in [0, 1].
    #[arg(long, default_value_t = 256)]
    pub grid: usize,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Corrupts the backward pass of the named op.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Exit code for an error: validation problems are 2, the rest 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Parse { .. } | Error::EmptyCloud | Error::Shape { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Argument(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a).map(|_| 0),
        Command::Train(a) => cmd_train(&a).map(|_| 0),
        Command::Denoise(a) => cmd_denoise(&a).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a).map(|_| 0),
        Command::FilterResponse(a) => cmd_filter_response(&a).map(|_| 0),
        Command::Selftest(a) => cmd_selftest(&a),
    }
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    load(path, CloudFormat::from_path(path)?)
}

pub fn save_cloud(pc: &PointCloud, path: &Path) -> Result<()> {
    save(pc, path, CloudFormat::from_path(path)?)
}

/// Every `.xyz`, `.txt` or `.ply` cloud in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && CloudFormat::from_path(&path).is_ok() {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!("no point clouds found in '{}'", dir.display())));
    }
    paths.iter().map(|p| load_cloud(p)).collect()
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let shape: Shape = a.shape.parse()?;
    let clean = synth(shape, a.n, a.seed)?;
    let noisy = add_noise(&clean, &NoiseSpec::gaussian(a.noise, a.seed ^ NOISE_SALT))?;
    save_cloud(&noisy, &a.out)?;
    if let Some(path) = &a.clean {
        save_cloud(&clean, path)?;
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let data = load_dir(&a.data)?;
    let val = load_dir(&a.val)?;
    eprintln!(
        "training on {} clouds, validating on {}, {} iterations",
        data.len(),
        val.len(),
        cfg.train.iterations
    );
    let init = crate::model::ModelParams::init(&cfg.model, cfg.train.seed)?;
    let outcome = train(&cfg.model, &init, &data, &val, &cfg.train, Some(&a.out))?;
    let summary = serde_json::json!({
        "iterations": cfg.train.iterations,
        "initial_val_cd": outcome.initial_val_cd,
        "best_val_cd": outcome.best_val_cd,
        "checkpoint": a.out,
    });
    println!("{summary}");
    Ok(())
}

/// `out.xyz` with fraction 0.5 becomes `out.t0.5.xyz`.
pub fn snapshot_path(out: &Path, fraction: f64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.t{fraction:?}.{}", ext.to_string_lossy()),
        None => format!("{stem}.t{fraction:?}"),
    };
    out.with_file_name(name)
}

pub fn cmd_denoise(a: &DenoiseArgs) -> Result<()> {
    let (params, mut cfg) = load_checkpoint(&a.ckpt, None)?;
    if let Some(v) = &a.variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    let noisy = load_cloud(&a.input)?;
    let fractions = a.snapshots.clone().unwrap_or_else(|| vec![1.0]);
    if fractions.is_empty() {
        return Err(Error::Argument("--snapshots needs at least one fraction".into()));
    }
    let outs = forward_snapshots(&params, &cfg, cfg.variant, &noisy.to_tensor(), &fractions)?;
    for (f, t) in fractions.iter().zip(&outs) {
        let pc = PointCloud::from_tensor(t)?;
        let path = if a.snapshots.is_some() { snapshot_path(&a.out, *f) } else { a.out.clone() };
        save_cloud(&pc, &path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let metrics = Metric::parse_list(&a.metrics)?;
    let reference = load_cloud(&a.reference)?;
    let test = load_cloud(&a.test)?;
    let report = evaluate(&reference, &test, &metrics)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn filter_response(a: &FilterResponseArgs) -> Result<String> {
    let grid = lambda_grid(a.grid)?;
    let response = match (&a.basis, &a.filter) {
        (Some(_), None) => {
            if a.theta.is_empty() {
                return Err(Error::Argument("--theta needs at least one coefficient".into()));
            }
            if let Some(k) = a.order {
                if k + 1 != a.theta.len() {
                    return Err(Error::Argument(format!(
                        "--K {k} needs {} coefficients, got {}",
                        k + 1,
                        a.theta.len()
                    )));
                }
            }
            let spec = FilterSpec::new(Tensor::new(a.theta.clone(), &[a.theta.len()])?)?;
            grid.iter().map(|l| spec.response(*l)).collect::<Result<Vec<f64>>>()?
        }
        (None, Some(name)) => closed_form_response(name.parse::<ClosedForm>()?, &a.theta, &grid)?,
        _ => return Err(Error::Argument("give exactly one of --basis or --filter".into())),
    };
    Ok(response_csv(&grid, &response))
}

pub fn cmd_filter_response(a: &FilterResponseArgs) -> Result<()> {
    let csv = filter_response(a)?;
    match &a.out {
        Some(path) => std::fs::write(path, csv).map_err(|e| Error::io(path, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn cmd_selftest(a: &SelftestArgs) -> Result<i32> {
    let report = selftest::run(a.inject_fault.as_deref())?;
    for s in &report.suites {
        if s.passed {
            eprintln!("{}: PASS (max error {:e})", s.suite, s.max_error);
        } else {
            eprintln!("{}: FAIL (max error {:e}) in {}", s.suite, s.max_error, s.failures.join(", "));
        }
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(if report.passed { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_names() {
        assert_eq!(snapshot_path(Path::new("d/out.xyz"), 0.5), PathBuf::from("d/out.t0.5.xyz"));
        assert_eq!(snapshot_path(Path::new("out.ply"), 1.0), PathBuf::from("out.t1.0.ply"));
        assert_eq!(snapshot_path(Path::new("out"), 0.3), PathBuf::from("out.t0.3"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Argument("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 1);
        assert_eq!(exit_code(&Error::Divergence { step: 1, stage: 2 }), 1);
        assert_eq!(run_from(["gdflow", "synth", "--shape", "pyramid", "--n", "10", "--out", "x.xyz"]), 2);
        assert_eq!(run_from(["gdflow", "bogus"]), 2);
    }
}
