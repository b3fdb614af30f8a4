//! Command-line front end: parameter sweeps, named verification suites and
//! sample generation.
//!
//! Exit codes: 0 success, 1 a requested check failed (or a run aborted),
//! 2 configuration error.

pub mod spec;
pub mod sweep;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use kou_sgm::diagnostics::CheckReport;
use kou_sgm::{pipeline, sampler, verify};
use serde_json::json;

use crate::spec::ExperimentSpec;
use crate::sweep::{CheckOutcome, ResultRow, CSV_HEADER};

#[derive(Debug, Parser)]
#[command(name = "kou-sgm", version, about = "OU and kinetic-OU score diffusion laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the sweep described by a spec file.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run a named property suite (or `all`).
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
        /// Also write the reports as CSV into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples for a single configuration.
    Sample {
        spec: PathBuf,
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

/// Recorded in `summary.json`: the OU transition law used throughout.
pub const OU_KERNEL_CONVENTION: &str = "N(e^{-t} x, (1 - e^{-2t}) I), stationary law N(0, I)";

/// A failed command with its exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn check(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn with_pool<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Failure::config("--workers must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Failure::check(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { spec, out, seed, workers } => cmd_run(&spec, out.as_deref(), seed, workers),
        Command::Verify { suite, seed, workers, out } => cmd_verify(&suite, seed, workers, out.as_deref()),
        Command::Sample { spec, out, seed, workers } => cmd_sample(&spec, &out, seed, workers),
    }
}

pub fn load_spec(path: &Path, seed: Option<u64>) -> Result<ExperimentSpec, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let mut spec = ExperimentSpec::from_json(&text).map_err(Failure::config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::check(format!("cannot write {}: {e}", path.display()))
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::check(format!("cannot write {}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Failure::check(format!("cannot write {}: {e}", path.display()));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn cmd_run(spec_path: &Path, out: Option<&Path>, seed: Option<u64>, workers: Option<usize>) -> Result<(), Failure> {
    let started = Instant::now();
    let spec = load_spec(spec_path, seed)?;
    let points = spec.points().map_err(Failure::config)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| spec.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    eprintln!("run: {} sweep points, seed {}", points.len(), spec.seed);

    let (rows, outcomes) = with_pool(workers, || -> Result<_, Failure> {
        let rows = sweep::evaluate_all(&spec, &points).map_err(|e| Failure::check(format!("run aborted: {e}")))?;
        let mut outcomes: Vec<CheckOutcome> = Vec::new();
        for name in &spec.checks {
            outcomes.extend(sweep::run_check(name, &spec, &rows, spec.seed).map_err(Failure::check)?);
        }
        Ok((rows, outcomes))
    })??;

    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let csv_path = out_dir.join("results.csv");
    write_rows(&csv_path, &rows)?;
    let fits = sweep::slopes(&rows);
    let all_pass = outcomes.iter().all(|o| o.pass);
    let summary = json!({
        "schema": spec::SCHEMA_VERSION,
        "name": spec.name,
        "seed": spec.seed,
        "rows": rows.len(),
        "ou_kernel": OU_KERNEL_CONVENTION,
        "slopes": fits,
        "checks": outcomes,
        "pass": all_pass,
        "runtime_seconds": started.elapsed().as_secs_f64(),
    });
    let summary_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, text + "\n").map_err(io_err(&summary_path))?;

    for f in &fits {
        eprintln!("slope {} vs {} {}: {:.4} (R² {:.4})", f.metric, f.axis, f.group, f.slope, f.r_squared);
    }
    for o in &outcomes {
        eprintln!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.check, o.detail);
    }
    eprintln!("wrote {} and {}", csv_path.display(), summary_path.display());
    if all_pass {
        Ok(())
    } else {
        let failed: Vec<String> = outcomes.iter().filter(|o| !o.pass).map(|o| format!("{} ({})", o.check, o.detail)).collect();
        Err(Failure::check(format!("check failed: {}", failed.join("; "))))
    }
}

fn report_instance(r: &CheckReport) -> String {
    r.params.get("instance").and_then(|v| v.as_str()).unwrap_or("").to_string()
}

pub fn cmd_verify(suite: &str, seed: u64, workers: Option<usize>, out: Option<&Path>) -> Result<(), Failure> {
    let names: Vec<&str> = if suite == "all" {
        verify::SUITES.to_vec()
    } else if verify::SUITES.contains(&suite) {
        vec![suite]
    } else {
        return Err(Failure::config(format!(
            "unknown suite '{suite}' (known: {}, all)",
            verify::SUITES.join(", ")
        )));
    };
    let reports = with_pool(workers, || -> Result<Vec<CheckReport>, Failure> {
        let mut all = Vec::new();
        for n in &names {
            all.extend(verify::run_suite(n, seed).map_err(|e| Failure::check(format!("suite {n}: {e}")))?);
        }
        Ok(all)
    })??;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for r in &reports {
        let _ = writeln!(lock, "{}", r.to_json());
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("verify_{suite}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::check(format!("cannot write {}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| Failure::check(format!("cannot write {}: {e}", path.display()));
        w.write_record(["check", "instance", "estimate", "std_error", "bound", "margin", "pass"]).map_err(csv_err)?;
        for r in &reports {
            w.write_record([
                r.check.clone(),
                report_instance(r),
                format!("{:?}", r.estimate),
                format!("{:?}", r.std_error),
                format!("{:?}", r.bound),
                format!("{:?}", r.margin),
                r.pass.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} [{}]", r.check, report_instance(r)))
        .collect();
    if failed.is_empty() {
        eprintln!("verify {suite}: {} checks passed", reports.len());
        Ok(())
    } else {
        Err(Failure::check(format!("check failed: {}", failed.join(", "))))
    }
}

pub fn cmd_sample(spec_path: &Path, out: &Path, seed: Option<u64>, workers: Option<usize>) -> Result<(), Failure> {
    let spec = load_spec(spec_path, seed)?;
    let points = spec.points().map_err(Failure::config)?;
    if points.len() != 1 {
        return Err(Failure::config(format!(
            "sample needs a single configuration, the sweep has {} points",
            points.len()
        )));
    }
    if spec.n_paths == 0 {
        return Err(Failure::config("n_paths must be > 0 for sample"));
    }
    let point = &points[0];
    let batch = with_pool(workers, || sampler::run(&point.config))?.map_err(|e| Failure::check(format!("sampling aborted: {e}")))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = fs::File::create(out).map_err(io_err(out))?;
    let mut w = std::io::BufWriter::new(file);
    batch.write_csv(&mut w).map_err(io_err(out))?;
    w.flush().map_err(io_err(out))?;

    let (mean, cov) = batch.moments();
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> { (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect() };
    let mut summary = json!({
        "n_paths": batch.points.len(),
        "stop_time": batch.stop_time,
        "mean": mean.iter().copied().collect::<Vec<f64>>(),
        "cov": rows(&cov),
    });
    let affine = point.data.is_single_gaussian() && !matches!(point.kind(), kou_sgm::OracleKind::IsotropicNoise { .. });
    if affine {
        let prop = pipeline::propagate(&point.config).map_err(|e| Failure::check(format!("pipeline: {e}")))?;
        summary["pipeline_mean"] = json!(prop.final_state.mean.iter().copied().collect::<Vec<f64>>());
        summary["pipeline_cov"] = json!(rows(&prop.final_state.cov));
        summary["max_z"] = json!(sweep::moment_z(&batch, &prop.final_state));
    }
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    eprintln!("wrote {} samples to {}", batch.points.len(), out.display());
    Ok(())
}
