//! Benchmark harness for the accelerated implicit-step solver.
//!
//! Subcommands: `generate` an instance descriptor, `run` a solver matrix to
//! CSV traces plus a JSON summary, `slope` to fit the empirical rate exponent
//! of a trace, and `validate` to check an instance's oracle against finite
//! differences and the Taylor remainder bounds.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atd::bench::{self, InstanceSpec, RunSpec};
use atd::oracle::validate_oracle;

#[derive(Parser)]
#[command(name = "atd-bench", version, about = "Benchmark harness for higher-order accelerated convex solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct InstanceArgs {
    /// Instance family: power, quadratic, or logsumexp.
    #[arg(long, default_value = "power")]
    family: String,
    /// Oracle order p (1, 2, or 3).
    #[arg(long, default_value_t = 2)]
    p: usize,
    /// Problem dimension d.
    #[arg(long, default_value_t = 10)]
    dim: usize,
    /// Number of data rows m.
    #[arg(long, default_value_t = 20)]
    rows: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Planted minimizer norm (power and quadratic; ignored by logsumexp).
    #[arg(long, default_value_t = 1.0)]
    norm: f64,
}

impl InstanceArgs {
    fn spec(&self) -> InstanceSpec {
        InstanceSpec {
            family: self.family.clone(),
            d: self.dim,
            m: self.rows,
            p: self.p,
            seed: self.seed,
            target_norm: Some(self.norm),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build an instance and write its descriptor JSON.
    Generate {
        #[command(flatten)]
        instance: InstanceArgs,
        /// Descriptor output path.
        #[arg(long, default_value = "instance.json")]
        out: PathBuf,
    },
    /// Run a matrix of (instance, method) cells; one CSV per cell plus summary.json.
    Run {
        #[command(flatten)]
        instance: InstanceArgs,
        /// Methods to run (repeatable): atd, gd, agd, tensor.
        #[arg(long = "method", default_values_t = vec!["atd".to_string()])]
        methods: Vec<String>,
        /// Iteration count K.
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Target gap for certified early exit.
        #[arg(long, default_value_t = 1e-9)]
        eps: f64,
        /// Abort a cell on the first invariant violation.
        #[arg(long)]
        strict: bool,
        /// Stand-in bound on the minimizer norm for instances without ground truth.
        #[arg(long)]
        radius: Option<f64>,
        /// JSON file holding a RunSpec list; overrides the single-instance flags.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
    },
    /// Fit the least-squares slope of log(gap) vs log(k) on a trace CSV.
    Slope {
        /// Trace CSV produced by `run`.
        trace: PathBuf,
        /// Window lower bound on k (default: start of the last positive-gap half).
        #[arg(long)]
        k_min: Option<usize>,
        /// Window upper bound on k (default: last positive-gap iteration).
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Check oracle consistency: Taylor remainder ratios and finite differences.
    Validate {
        #[command(flatten)]
        instance: InstanceArgs,
        /// Sampling radius around the expansion centers.
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Number of (center, probe) sample pairs.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> atd::Result<ExitCode> {
    match cli.command {
        Command::Generate { instance, out } => {
            let built = instance.spec().build()?;
            bench::write_descriptor(&built.descriptor, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { instance, methods, iters, eps, strict, radius, config, out } => {
            let specs = match config {
                Some(path) => bench::read_specs(&path)?,
                None => vec![RunSpec {
                    instance: instance.spec(),
                    methods,
                    iters,
                    epsilon: eps,
                    strict,
                    radius,
                }],
            };
            let summary = bench::run_matrix(&specs, &out)?;
            let mut failed = 0usize;
            for cell in &summary.cells {
                let label = cell.instance.label();
                match cell.status.as_str() {
                    "ok" => println!(
                        "ok    {label} {} gap={} violations={} max_probes={}",
                        cell.method,
                        cell.final_gap.map_or("n/a".into(), |g| format!("{g:.3e}")),
                        cell.violation_total.unwrap_or(0),
                        cell.max_probes.unwrap_or(0),
                    ),
                    _ => {
                        failed += 1;
                        println!(
                            "error {label} {}: {}",
                            cell.method,
                            cell.error.as_deref().unwrap_or("unknown")
                        );
                    }
                }
            }
            println!("summary: {}", out.join("summary.json").display());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Slope { trace, k_min, k_max } => {
            let records = bench::read_trace(&trace)?;
            let window = match (k_min, k_max) {
                (None, None) => None,
                (lo, hi) => {
                    let last = records.iter().map(|r| r.k).max().unwrap_or(1);
                    Some((lo.unwrap_or(1), hi.unwrap_or(last)))
                }
            };
            let est = bench::fit_slope(&records, window)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&est)
                    .map_err(|e| atd::AtdError::Serialization(e.to_string()))?
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { instance, radius, samples } => {
            let built = instance.spec().build()?;
            let report = validate_oracle(&built.oracle, radius, samples, instance.seed)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report)
                    .map_err(|e| atd::AtdError::Serialization(e.to_string()))?
            );
            Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
