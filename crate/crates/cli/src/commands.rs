use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mpoe::analysis::{central_unchanged, redundancy_report, Kernel, ReportOptions};
use mpoe::experiment::{self, loss_csv, probe_inputs, ExperimentConfig};
use mpoe::io::{self, Dtype};
use mpoe::layer::MoeBank;
use mpoe::mpo::{self, normalize, plan_factorization, FactorizationPlan, Normalization};
use mpoe::Error;

pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult = Result<ExitCode, CliError>;

pub const VIOLATION: u8 = 1;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format(_) => IO,
            _ => USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError {
        code: IO,
        message: format!("{}: {e}", path.display()),
    }
}

/// Checkpoint and manifest files that fail to parse count as unreadable.
fn unreadable(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| match e {
        Error::Io(_) | Error::Format(_) | Error::Json(_) => io_err(path, e),
        other => other.into(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    io::write_atomic(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

fn to_json<S: serde::Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize") + "\n"
}

pub fn decompose(
    input: &Path,
    m: usize,
    plan: Option<&str>,
    caps: Option<Vec<usize>>,
    normalization: Normalization,
    dtype: Dtype,
    out: &Path,
) -> CliResult {
    let w = io::read_tensor(input).map_err(unreadable(input))?;
    if w.rank() != 2 {
        return Err(Error::Shape(format!("input has shape {:?}, expected a matrix", w.shape())).into());
    }
    let mut plan = match plan {
        Some(p) => p.parse::<FactorizationPlan>()?,
        None => plan_factorization(w.rows(), w.cols(), m)?,
    };
    if let Some(caps) = caps {
        plan = plan.with_caps(caps)?;
    }
    let f = normalize(&mpo::decompose(&w, &plan)?, normalization)?;
    let manifest = io::save_decomposition(out, &plan, &f, normalization, &w, dtype).map_err(unreadable(out))?;
    println!("plan        {}", manifest.plan);
    println!("bond dims   {:?}", &manifest.bond_dims[1..manifest.bond_dims.len() - 1]);
    println!("shapes      {:?}", manifest.local_shapes);
    println!("central     index {} ({} params)", manifest.central_index, manifest.central_params);
    println!("auxiliary   {} params", manifest.auxiliary_params);
    match manifest.gamma {
        Some(g) => println!("gamma       {g:.4}"),
        None => println!("gamma       inf"),
    }
    println!("bound       {:e}", manifest.bound);
    println!("max |delta| {:e}", manifest.max_abs_error);
    Ok(ExitCode::SUCCESS)
}

pub fn reconstruct(dir: &Path, out: &Path, dtype: Dtype) -> CliResult {
    let (manifest, f) = io::load_decomposition(dir).map_err(unreadable(dir))?;
    let w = f.reconstruct()?;
    io::write_tensor(out, &w, dtype).map_err(|e| io_err(out, e))?;
    println!("wrote {}x{} matrix to {}", manifest.rows, manifest.cols, out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn verify_bound(trials: usize, max_dim: usize, seed: u64, exact: bool, csv: Option<&Path>) -> CliResult {
    let results = experiment::verify_bound(trials, max_dim, seed, !exact)?;
    let mut table = String::from("trial,seed,rows,cols,plan,error,bound,ok\n");
    for t in &results {
        let _ = writeln!(
            table,
            "{},{},{},{},\"{}\",{:e},{:e},{}",
            t.trial, t.seed, t.rows, t.cols, t.plan, t.error, t.bound, t.ok
        );
    }
    match csv {
        Some(p) => write_text(p, &table)?,
        None => print!("{table}"),
    }
    let failures: Vec<_> = results.iter().filter(|t| !t.ok).collect();
    if let Some(t) = failures.first() {
        eprintln!(
            "{} of {} trials violate the bound; first counterexample: trial {} seed {} ({}x{}, {}): error {:e} > bound {:e}",
            failures.len(),
            results.len(),
            t.trial,
            t.seed,
            t.rows,
            t.cols,
            t.plan,
            t.error,
            t.bound
        );
        return Ok(ExitCode::from(VIOLATION));
    }
    eprintln!("all {} trials within the bound", results.len());
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    ExperimentConfig::from_json(&text).map_err(|e| CliError {
        code: USAGE,
        message: format!("{}: {e}", path.display()),
    })
}

fn output_path(configured: &Option<String>, out: Option<&Path>, default_name: &str) -> Option<PathBuf> {
    configured
        .as_ref()
        .map(PathBuf::from)
        .or_else(|| out.map(|d| d.join(default_name)))
}

pub fn train(config: &Path, out: Option<&Path>) -> CliResult {
    let cfg = load_config(config)?;
    let outcome = experiment::train(&cfg)?;
    let o = &cfg.outputs;
    if let Some(p) = output_path(&o.loss_csv_path, out, "loss.csv") {
        write_text(&p, &loss_csv(&outcome.records))?;
    }
    if let Some(p) = output_path(&o.checkpoint_path, out, "checkpoint") {
        io::save_checkpoint(&p, &outcome.bank, Some(&outcome.initial_central)).map_err(|e| io_err(&p, e))?;
    }
    if let Some(p) = output_path(&o.report_path, out, "report.json") {
        let probes = probe_inputs(o.report_probes, cfg.task.d_model, cfg.optimizer.seed);
        let mut report = redundancy_report(&outcome.bank, &probes, ReportOptions::default())?;
        report.central_unchanged = Some(central_unchanged(&outcome.bank, &outcome.initial_central));
        write_text(&p, &to_json(&report))?;
    }
    print!("{}", to_json(&outcome.summary));
    Ok(ExitCode::SUCCESS)
}

pub fn sweep_m(config: &Path, ms: &[usize], csv: Option<&Path>) -> CliResult {
    let cfg = load_config(config)?;
    let rows = experiment::sweep_m(&cfg, ms)?;
    let mut table = String::from("m,mpo_params,shared,per_expert,gamma,initial_loss,final_loss,w1_plan,w2_plan\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{:.6},{:e},{:e},\"{}\",\"{}\"",
            r.m, r.mpo_params, r.shared, r.per_expert, r.gamma, r.initial_loss, r.final_loss, r.plans[0], r.plans[1]
        );
    }
    if let Some(p) = csv {
        write_text(p, &table)?;
    }
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

pub fn analyze(checkpoint: &Path, probes: usize, seed: u64, kernel: Kernel, alpha: f64, out: Option<&Path>) -> CliResult {
    if !checkpoint.join(io::MANIFEST_NAME).is_file() {
        return Err(io_err(checkpoint, "no checkpoint manifest found"));
    }
    let ck = io::load_checkpoint(checkpoint).map_err(unreadable(checkpoint))?;
    if probes < 2 {
        return Err(Error::Config("at least two probes are needed".into()).into());
    }
    let x = probe_inputs(probes, ck.bank.d_model(), seed);
    let opts = ReportOptions {
        kernel,
        alpha,
        ..ReportOptions::default()
    };
    let mut report = redundancy_report(&ck.bank, &x, opts)?;
    report.central_unchanged = ck.initial_central.as_ref().map(|c| central_unchanged(&ck.bank, c));
    let text = to_json(&report);
    match out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn default_config() -> CliResult {
    print!("{}", to_json(&ExperimentConfig::default()));
    Ok(ExitCode::SUCCESS)
}
