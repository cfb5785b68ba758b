//! Command-line front end. Exit codes: 0 success, 1 failed check or run
//! error, 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablation::run_ablation;
use crate::attention::matrix_text;
use crate::bench::{reports_csv, reports_long_csv, run_bench};
use crate::config::{Precision, RunConfig, SEED_ENV};
use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape};
use crate::routing::route_stats_table;
use crate::sparse_global::identity_equivalence;
use crate::tokens::SceneGenerator;
use crate::training::{gradcheck_total_loss, train_toy, ToyModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "adattn",
    about = "Adaptive sparse alternating attention: checks, benchmarks and toy training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// f32 or f64.
    #[arg(long, global = true)]
    pub precision: Option<String>,

    /// Output directory for reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Analytic vs finite-difference gradients of the training loss.
    Gradcheck,
    /// Identity-compression sparse attention vs dense global attention.
    Equivalence,
    /// FLOP counts and wall-clock of frame, dense and sparse attention.
    Bench,
    /// Train the toy cross-frame regression model.
    TrainToy,
    /// Per-block branch occupancy after training.
    RouteStats {
        /// Also write per-frame weight matrices and compressed key/value sets.
        #[arg(long)]
        dump: bool,
    },
    /// Train the full model and ablations V1-V4 and compare them.
    Ablate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::Equivalence => "equivalence",
            Command::Bench => "bench",
            Command::TrainToy => "train-toy",
            Command::RouteStats { .. } => "route-stats",
            Command::Ablate => "ablate",
        }
    }
}

/// Settings in precedence order: `ADATTN_SEED`, config file, flags.
pub fn collect_settings(cli: &Cli, env_seed: Option<String>) -> Result<Vec<(String, String)>> {
    let mut settings = Vec::new();
    if let Some(s) = env_seed {
        settings.push(("seed".to_string(), s));
    }
    if let Some(path) = &cli.config {
        let text =
            fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        settings.extend(RunConfig::parse_text(&text)?);
    }
    if let Some(seed) = cli.seed {
        settings.push(("seed".into(), seed.to_string()));
    }
    if let Some(p) = &cli.precision {
        settings.push(("precision".into(), p.clone()));
    }
    if let Some(out) = &cli.out {
        settings.push(("out".into(), out.display().to_string()));
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        settings.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(settings)
}

/// Command defaults with `settings` applied. `gradcheck` starts from the
/// small finite-difference configuration, everything else from the toy
/// training configuration.
pub fn resolve_config(command: &Command, settings: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match command {
        Command::Gradcheck => RunConfig::gradcheck(),
        _ => RunConfig::default(),
    };
    for (k, v) in settings {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let resolved = collect_settings(&cli, std::env::var(SEED_ENV).ok())
        .and_then(|settings| resolve_config(&cli.command, &settings));
    let cfg = match resolved {
        Ok(cfg) => cfg,
        Err(e) => return report_error(err, &e),
    };
    match run(&cli.command, &cfg, out, err) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => report_error(err, &e),
    }
}

fn report_error(err: &mut dyn Write, e: &Error) -> i32 {
    let _ = writeln!(err, "error: kind={} msg={}", e.kind(), e);
    match e.kind() {
        "config" => EXIT_USAGE,
        _ => EXIT_CHECK_FAILED,
    }
}

/// Runs one command with a resolved config; `Ok(false)` means a check failed.
pub fn run(command: &Command, cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    fs::create_dir_all(&cfg.out)?;
    match (command, cfg.precision) {
        (Command::Gradcheck | Command::Equivalence, Precision::F32) => Err(Error::config(format!(
            "{} is a 64-bit oracle; use --precision f64",
            command.name()
        ))),
        (Command::Gradcheck, _) => gradcheck(cfg, out),
        (Command::Equivalence, _) => equivalence(cfg, out),
        (_, Precision::F32) => run_typed::<f32>(command, cfg, out, err),
        (_, Precision::F64) => run_typed::<f64>(command, cfg, out, err),
    }
}

fn run_typed<T: Scalar>(command: &Command, cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    match command {
        Command::Bench => bench::<T>(cfg, out, err),
        Command::TrainToy => train::<T>(cfg, out),
        Command::RouteStats { dump } => route_stats::<T>(cfg, *dump, out),
        Command::Ablate => ablate::<T>(cfg, out),
        Command::Gradcheck | Command::Equivalence => unreachable!("64-bit commands are handled by run"),
    }
}

fn emit(cfg: &RunConfig, file: &str, body: &str) -> Result<PathBuf> {
    let path = cfg.out.join(file);
    fs::write(&path, format!("{}{body}", cfg.header()))?;
    Ok(path)
}

fn status(passed: bool) -> &'static str {
    if passed {
        "pass"
    } else {
        "FAIL"
    }
}

fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    let r = gradcheck_total_loss(&cfg.model, &cfg.loss, cfg.train.seed, cfg.gradcheck_step)?;
    let passed = r.passes(cfg.gradcheck_tol);
    let body = format!(
        "worst_rel_err = {:.6e}\nworst_param = {}\nworst_index = {}\nanalytic = {:.10e}\nnumeric = {:.10e}\nentries = {}\ntolerance = {:e}\nstatus = {}\n",
        r.worst_rel_err,
        r.worst_param,
        r.worst_index,
        r.analytic,
        r.numeric,
        r.entries,
        cfg.gradcheck_tol,
        status(passed)
    );
    emit(cfg, "gradcheck.txt", &body)?;
    write!(out, "{body}")?;
    Ok(passed)
}

fn equivalence(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    let mut csv = String::from("seed,L,M,S,max_dev\n");
    let mut worst: f64 = 0.0;
    for i in 0..cfg.equivalence_seeds as u64 {
        let c = identity_equivalence(cfg.train.seed.wrapping_add(i), cfg.model.dim, cfg.model.heads)?;
        worst = worst.max(c.max_dev);
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.6e}",
            c.seed, c.frames, c.patches, c.specials, c.max_dev
        );
    }
    let passed = worst < cfg.equivalence_tol;
    emit(cfg, "equivalence.csv", &csv)?;
    writeln!(
        out,
        "cases = {}\nmax_dev = {worst:.6e}\ntolerance = {:e}\nstatus = {}",
        cfg.equivalence_seeds,
        cfg.equivalence_tol,
        status(passed)
    )?;
    Ok(passed)
}

fn bench<T: Scalar>(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    let reports = run_bench::<T>(&cfg.bench)?;
    let csv = reports_csv(&reports);
    emit(cfg, "bench.csv", &csv)?;
    emit(cfg, "bench_long.csv", &reports_long_csv(&reports))?;
    for r in &reports {
        for w in &r.warnings {
            writeln!(err, "warning: {w}")?;
        }
    }
    write!(out, "{csv}")?;
    Ok(true)
}

fn occupancy_report(cfg: &RunConfig, occupancy: &[Vec<f64>]) -> String {
    let ratios = match cfg.model.variant {
        crate::sparse_global::Variant::V2 => cfg.model.ratios[..1].to_vec(),
        _ => cfg.model.ratios.clone(),
    };
    route_stats_table(&ratios, occupancy)
}

fn train<T: Scalar>(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    let rep = train_toy::<T>(&cfg.model, &cfg.loss, &cfg.train)?;
    emit(cfg, "train_toy.csv", &rep.trajectory_csv())?;
    let stats = occupancy_report(cfg, &rep.last.occupancy);
    emit(cfg, "route_stats.txt", &stats)?;
    writeln!(
        out,
        "steps = {}\neval_task_loss_initial = {:.6e}\neval_task_loss_final = {:.6e}\nmean_k_initial = {:.6}\nmean_k_final = {:.6}",
        rep.records.len(),
        rep.initial.task_loss,
        rep.last.task_loss,
        rep.initial.mean_k,
        rep.last.mean_k
    )?;
    write!(out, "{stats}")?;
    Ok(true)
}

fn route_stats<T: Scalar>(cfg: &RunConfig, dump: bool, out: &mut dyn Write) -> Result<bool> {
    let rep = train_toy::<T>(&cfg.model, &cfg.loss, &cfg.train)?;
    let stats = occupancy_report(cfg, &rep.last.occupancy);
    emit(cfg, "route_stats.txt", &stats)?;
    write!(out, "{stats}")?;
    if dump {
        let path = write_dump(cfg, &rep.params)?;
        writeln!(out, "dump = {}", file_name(&path))?;
    }
    Ok(true)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `W_i` and `x^c` of every block on one held-out batch.
fn write_dump<T: Scalar>(cfg: &RunConfig, params: &crate::numcore::ParamStore<T>) -> Result<PathBuf> {
    let model = ToyModel::new(cfg.model.clone())?;
    let (h, w) = cfg.model.image_size();
    let images = SceneGenerator::new(cfg.model.frames, h, w, cfg.train.seed ^ 0xD0_0D).next_batch::<T>();
    let tape = Tape::with_params(params).inference();
    let (output, traces) = model.forward_traced(&tape, &images)?;
    let mut body = String::new();
    for (n, trace) in traces.iter().enumerate() {
        if let Some(d) = output.decisions.get(n) {
            let _ = writeln!(body, "# block{n} branch_index = {:?}", d.branch_index);
        }
        for (i, w) in trace.weight_matrices.iter().enumerate() {
            body.push_str(&matrix_text(&format!("block{n}.W{i}"), w));
        }
        if let Some(kv) = &trace.compressed_kv {
            body.push_str(&matrix_text(&format!("block{n}.xc"), kv));
        }
    }
    emit(cfg, "dump.txt", &body)
}

fn ablate<T: Scalar>(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool> {
    let rep = run_ablation::<T>(&cfg.model, &cfg.loss, &cfg.train)?;
    let body = format!("{}\n{}", rep.table(), rep.checks_text());
    emit(cfg, "ablation.tsv", &body)?;
    write!(out, "{body}")?;
    Ok(rep.passed())
}
