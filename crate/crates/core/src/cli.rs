//! Command-line driver: `train`, `eval`, `sweep`, `bench` and `synth`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 finished without convergence
//! (outputs are still written), 64 usage error.
//!
//! All CSV and record outputs are deterministic for fixed flags. Wall-clock
//! timings go to separate `*.timing.csv` files.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::builder::PossibleValue;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::data::{
    fmt_f64, load_dense_csv, load_groups, load_sparse_svmlight, make_synthetic, save_dense_csv, save_svmlight, split,
    split_indices, SplitRule, Standardizer,
};
use crate::error::{Error, Result};
use crate::eval::{count_errors, evaluate, EvalReport, ObjectiveMode, DEFAULT_NONZERO_THRESHOLD};
use crate::model::{BlockStructure, Dataset, GroupMode, ModelVector, RegularizerKind, RegularizerSpec};
use crate::solvers::{SolveReport, SolverConfig, SolverKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Default sweep grid: powers of ten from 1e-3 to 1e3.
pub const DEFAULT_ALPHAS: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

const MODEL_MAGIC: &str = "proxsvm-model 1";

impl ValueEnum for SolverKind {
    fn value_variants<'a>() -> &'a [Self] {
        &SolverKind::ALL
    }

    fn to_possible_value(&self) -> Option<PossibleValue> {
        Some(PossibleValue::new(self.name()))
    }
}

impl ValueEnum for RegularizerKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[
            RegularizerKind::L1,
            RegularizerKind::L12,
            RegularizerKind::L1Inf,
            RegularizerKind::SquaredL2,
        ]
    }

    fn to_possible_value(&self) -> Option<PossibleValue> {
        Some(PossibleValue::new(self.name()))
    }
}

impl ValueEnum for GroupMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[GroupMode::PerClass, GroupMode::CrossClass]
    }

    fn to_possible_value(&self) -> Option<PossibleValue> {
        Some(PossibleValue::new(match self {
            GroupMode::PerClass => "per-class",
            GroupMode::CrossClass => "cross-class",
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Csv,
    Svmlight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Csv,
    Record,
}

#[derive(Debug, Parser)]
#[command(
    name = "proxsvm",
    version,
    about = "Sparse multiclass SVM training by proximal splitting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write it with a run report.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset.
    Eval(EvalArgs),
    /// Average test errors and sparsity over an alpha grid and repeated splits.
    Sweep(SweepArgs),
    /// Time solvers and trace the distance to a long-run reference solution.
    Bench(BenchArgs),
    /// Write a synthetic Gaussian-cluster dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// File format; inferred from the extension when absent (`.csv` is dense).
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    /// Number of features (svmlight only; default: largest index).
    #[arg(long)]
    pub features: Option<usize>,
    /// Number of classes (default: largest label).
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    #[arg(long, value_enum, default_value = "l1")]
    pub reg: RegularizerKind,
    /// Group size for contiguous groups, or a file with one group per line.
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long, value_enum, default_value = "per-class")]
    pub group: GroupMode,
    /// Stopping tolerance on the relative iterate change.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 20_000)]
    pub max_iter: usize,
    /// Primal step size (default: derived from the operator norm).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Dual step size (default: derived from the operator norm).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Standardize features with statistics of the training data.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Fraction of each class used for training.
    #[arg(long, conflicts_with = "per_class")]
    pub train_fraction: Option<f64>,
    /// Number of training samples per class.
    #[arg(long)]
    pub per_class: Option<usize>,
}

impl SplitArgs {
    fn rule(&self) -> Option<SplitRule> {
        match (self.train_fraction, self.per_class) {
            (Some(f), _) => Some(SplitRule::Fraction(f)),
            (None, Some(c)) => Some(SplitRule::PerClass(c)),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "fbpd-reg")]
    pub solver: SolverKind,
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// lambda = 1/alpha for penalized solvers, eta = alpha * L for the constrained one.
    #[arg(long)]
    pub alpha: f64,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model output path. The report goes to `<out>.report`, statistics to `<out>.stats`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Magnitude above which a weight counts as non-zero.
    #[arg(long, default_value_t = DEFAULT_NONZERO_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value = "record")]
    pub emit: Emit,
    /// Write the result here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Separate test set; when given, every repetition trains on all of `--data`.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fbpd-reg")]
    pub solver: SolverKind,
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Comma-separated alpha grid.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Number of random training subsets.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_NONZERO_THRESHOLD)]
    pub threshold: f64,
    /// Summary CSV; timings go to `<out stem>.timing.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV with one row per (alpha, repetition).
    #[arg(long)]
    pub runs_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated solvers (default: all).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub solvers: Option<Vec<SolverKind>>,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub alpha: f64,
    /// Iteration budget of the reference solve.
    #[arg(long, default_value_t = 200_000)]
    pub reference_max_iter: usize,
    /// Stopping tolerance of the reference solve.
    #[arg(long, default_value_t = 1e-10)]
    pub reference_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub features: usize,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn resolve_format(path: &Path, format: Option<DataFormat>) -> DataFormat {
    format.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
        _ => DataFormat::Svmlight,
    })
}

fn load_data(path: &Path, args: &DataArgs) -> Result<Dataset> {
    match resolve_format(path, args.format) {
        DataFormat::Csv => load_dense_csv(path, args.classes),
        DataFormat::Svmlight => load_sparse_svmlight(path, args.features, args.classes),
    }
}

fn build_spec(problem: &ProblemArgs, features: usize) -> CliResult<RegularizerSpec> {
    let blocks = match &problem.blocks {
        None => None,
        Some(_) if !problem.reg.needs_blocks() => {
            return usage(format!("--blocks does not apply to regularizer {}", problem.reg))
        }
        Some(text) => Some(match text.parse::<usize>() {
            Ok(0) => return usage("--blocks size must be positive"),
            Ok(size) => BlockStructure::contiguous(features, size, problem.group)?,
            Err(_) => load_groups(text, features, problem.group)?,
        }),
    };
    if problem.reg.needs_blocks() && blocks.is_none() {
        return usage(format!("regularizer {} needs --blocks", problem.reg));
    }
    Ok(RegularizerSpec {
        kind: problem.reg,
        blocks,
    })
}

fn check_problem(problem: &ProblemArgs) -> CliResult<()> {
    if !(problem.tol >= 0.0) {
        return usage("--tol must be non-negative");
    }
    for (name, v) in [("--tau", problem.tau), ("--sigma", problem.sigma)] {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                return usage(format!("{name} must be positive"));
            }
        }
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> CliResult<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        usage(format!("alpha must be positive and finite, got {alpha}"))
    }
}

fn solver_config(kind: SolverKind, alpha: f64, train: &Dataset, problem: &ProblemArgs) -> SolverConfig {
    SolverConfig {
        tau: problem.tau,
        sigma: problem.sigma,
        ..SolverConfig::new(kind.param_from_alpha(alpha, train.len()))
            .max_iter(problem.max_iter)
            .rel_tol(problem.tol)
    }
}

fn objective_mode(kind: SolverKind, param: f64) -> ObjectiveMode {
    if kind.is_constrained() {
        ObjectiveMode::Constrained { eta: param }
    } else {
        ObjectiveMode::Regularized { lambda: param }
    }
}

/// Fits standardization on `train` when requested and applies it to both sets.
fn preprocess(standardize: bool, train: Dataset, test: Dataset) -> Result<(Dataset, Dataset, Option<Standardizer>)> {
    if !standardize {
        return Ok((train, test, None));
    }
    let stats = Standardizer::fit(&train)?;
    let train = stats.apply(&train)?;
    let test = stats.apply(&test)?;
    Ok((train, test, Some(stats)))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, body: &str) -> Result<()> {
    out.write_all(body.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `out.csv` becomes `out.timing.csv`.
fn timing_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => path.with_extension(format!("timing.{ext}")),
        None => sidecar(path, ".timing.csv"),
    }
}

fn record(fields: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in fields {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

fn join_counts(counts: &[usize]) -> String {
    counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Everything stored in a model file besides the coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMeta {
    pub solver: SolverKind,
    pub spec: RegularizerSpec,
    pub alpha: f64,
    pub param: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub final_rel_change: f64,
    pub hinge_sum: f64,
    pub objective: f64,
    pub standardized: bool,
}

/// A trained model with its header.
#[derive(Clone, Debug, PartialEq)]
pub struct PersistedModel {
    pub meta: ModelMeta,
    pub model: ModelVector,
}

fn encode_blocks(spec: &RegularizerSpec) -> String {
    let Some(b) = &spec.blocks else {
        return "none".into();
    };
    let size = b.groups()[0].len();
    if BlockStructure::contiguous(b.features(), size, b.mode()).ok().as_ref() == Some(b) {
        return format!("contiguous {size}");
    }
    let groups: Vec<String> = b
        .groups()
        .iter()
        .map(|g| g.iter().map(|j| (j + 1).to_string()).collect::<Vec<_>>().join(","))
        .collect();
    format!("groups {}", groups.join(";"))
}

fn decode_blocks(path: &Path, text: &str, features: usize, mode: GroupMode) -> Result<Option<BlockStructure>> {
    let bad = |msg: &str| Error::parse(path, 0, format!("blocks: {msg}"));
    if text == "none" {
        return Ok(None);
    }
    if let Some(size) = text.strip_prefix("contiguous ") {
        let size = size.trim().parse().map_err(|_| bad("bad size"))?;
        return BlockStructure::contiguous(features, size, mode).map(Some);
    }
    if let Some(list) = text.strip_prefix("groups ") {
        let groups = list
            .split(';')
            .map(|g| {
                g.split(',')
                    .map(|j| match j.trim().parse::<usize>() {
                        Ok(j) if j >= 1 => Ok(j - 1),
                        _ => Err(bad("bad index")),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        return BlockStructure::from_groups(features, groups, mode).map(Some);
    }
    Err(bad("expected 'none', 'contiguous <size>' or 'groups <list>'"))
}

impl PersistedModel {
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mode = m.spec.blocks.as_ref().map(|b| b.mode()).unwrap_or(GroupMode::PerClass);
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_MAGIC}");
        let _ = writeln!(s, "classes {}", self.model.classes());
        let _ = writeln!(s, "features {}", self.model.features());
        let _ = writeln!(s, "solver {}", m.solver);
        let _ = writeln!(s, "regularizer {}", m.spec.kind);
        let _ = writeln!(s, "blocks {}", encode_blocks(&m.spec));
        let _ = writeln!(s, "group-mode {mode}");
        let _ = writeln!(s, "alpha {}", fmt_f64(m.alpha));
        let _ = writeln!(s, "param {}", fmt_f64(m.param));
        let _ = writeln!(s, "tol {}", fmt_f64(m.tol));
        let _ = writeln!(s, "max-iter {}", m.max_iter);
        let _ = writeln!(s, "seed {}", m.seed);
        let _ = writeln!(s, "iterations {}", m.iterations);
        let _ = writeln!(s, "converged {}", m.converged);
        let _ = writeln!(s, "final-rel-change {}", fmt_f64(m.final_rel_change));
        let _ = writeln!(s, "hinge-sum {}", fmt_f64(m.hinge_sum));
        let _ = writeln!(s, "objective {}", fmt_f64(m.objective));
        let _ = writeln!(s, "standardized {}", m.standardized);
        let _ = writeln!(s, "weights");
        for c in 0..self.model.classes() {
            let row: Vec<String> = self.model.block(c).iter().map(|v| fmt_f64(*v)).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MODEL_MAGIC => {}
            _ => return Err(Error::parse(path, 1, format!("missing '{MODEL_MAGIC}' header"))),
        }
        let mut header = std::collections::HashMap::new();
        for (i, line) in lines.by_ref() {
            let line = line.trim();
            if line == "weights" {
                break;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(path, i + 1, "expected '<key> <value>'"))?;
            header.insert(k.to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            header
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::parse(path, 0, format!("missing header '{k}'")))
        };
        fn num<T: std::str::FromStr>(path: &Path, k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::parse(path, 0, format!("bad value '{v}' for '{k}'")))
        }
        let classes: usize = num(path, "classes", get("classes")?)?;
        let features: usize = num(path, "features", get("features")?)?;
        let mode = match get("group-mode")? {
            "per-class" => GroupMode::PerClass,
            "cross-class" => GroupMode::CrossClass,
            other => return Err(Error::parse(path, 0, format!("unknown group mode '{other}'"))),
        };
        let spec = RegularizerSpec {
            kind: get("regularizer")?.parse()?,
            blocks: decode_blocks(path, get("blocks")?, features, mode)?,
        };
        spec.validate(features)?;
        let meta = ModelMeta {
            solver: get("solver")?.parse()?,
            spec,
            alpha: num(path, "alpha", get("alpha")?)?,
            param: num(path, "param", get("param")?)?,
            tol: num(path, "tol", get("tol")?)?,
            max_iter: num(path, "max-iter", get("max-iter")?)?,
            seed: num(path, "seed", get("seed")?)?,
            iterations: num(path, "iterations", get("iterations")?)?,
            converged: num(path, "converged", get("converged")?)?,
            final_rel_change: num(path, "final-rel-change", get("final-rel-change")?)?,
            hinge_sum: num(path, "hinge-sum", get("hinge-sum")?)?,
            objective: num(path, "objective", get("objective")?)?,
            standardized: num(path, "standardized", get("standardized")?)?,
        };
        let mut flat = Vec::with_capacity(classes * (features + 1));
        let mut rows = 0;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::parse(path, i + 1, format!("bad coefficient '{t}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != features + 1 {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("class row has {} values, expected {}", row.len(), features + 1),
                ));
            }
            flat.extend(row);
            rows += 1;
        }
        if rows != classes {
            return Err(Error::parse(
                path,
                0,
                format!("found {rows} class rows, expected {classes}"),
            ));
        }
        Ok(PersistedModel {
            meta,
            model: ModelVector::from_flat(classes, features, flat)?,
        })
    }
}

fn solve_summary(rep: &SolveReport) -> Vec<(&'static str, String)> {
    vec![
        ("solver", rep.solver.to_string()),
        ("iterations", rep.iterations.to_string()),
        ("converged", rep.converged.to_string()),
        ("final_rel_change", fmt_f64(rep.final_rel_change)),
        ("final_dual_change", opt_f64(rep.final_dual_change)),
        ("primal_objective", fmt_f64(rep.primal_objective)),
        ("regularizer_value", fmt_f64(rep.regularizer_value)),
        ("hinge_sum", fmt_f64(rep.hinge_sum)),
        ("constraint_violation", fmt_f64(rep.constraint_violation)),
        ("tau", fmt_f64(rep.tau)),
        ("sigma", opt_f64(rep.sigma)),
        ("operator_norm", opt_f64(rep.operator_norm.map(|n| n.raw))),
        ("duality_gap", opt_f64(rep.duality.map(|d| d.gap))),
        ("stationarity", opt_f64(rep.duality.map(|d| d.stationarity))),
    ]
}

fn eval_fields(r: &EvalReport) -> Vec<(&'static str, String)> {
    vec![
        ("error_count", r.error_count.to_string()),
        ("test_size", r.test_size.to_string()),
        ("error_rate", fmt_f64(r.error_rate)),
        ("nonzeros_total", r.total_nonzeros().to_string()),
        ("nonzeros_per_class", join_counts(&r.nonzeros_per_class)),
        (
            "nonzero_groups",
            r.nonzero_groups.map(|g| g.to_string()).unwrap_or_default(),
        ),
        ("regularizer_value", fmt_f64(r.objective.regularizer)),
        ("hinge_sum", fmt_f64(r.objective.hinge_sum)),
        ("objective", fmt_f64(r.objective.total)),
        ("constraint_violation", fmt_f64(r.objective.violation)),
    ]
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<i32> {
    check_alpha(args.alpha)?;
    check_problem(&args.problem)?;
    let full = load_data(&args.data.data, &args.data)?;
    let spec = build_spec(&args.problem, full.features())?;
    let (train, test) = match args.split.rule() {
        Some(rule) => split(&full, rule, args.seed)?,
        None => (full, Dataset::empty(0, 0)),
    };
    let has_test = !test.is_empty();
    let test = if has_test {
        test
    } else {
        Dataset::empty(train.features(), train.classes())
    };
    let (train, test, stats) = preprocess(args.problem.standardize, train, test)?;

    let cfg = solver_config(args.solver, args.alpha, &train, &args.problem);
    let start = Instant::now();
    let rep = args.solver.solve(&train, &spec, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();

    let persisted = PersistedModel {
        meta: ModelMeta {
            solver: args.solver,
            spec: spec.clone(),
            alpha: args.alpha,
            param: cfg.param,
            tol: args.problem.tol,
            max_iter: args.problem.max_iter,
            seed: args.seed,
            iterations: rep.iterations,
            converged: rep.converged,
            final_rel_change: rep.final_rel_change,
            hinge_sum: rep.hinge_sum,
            objective: rep.primal_objective,
            standardized: stats.is_some(),
        },
        model: rep.solution.clone(),
    };
    persisted.save(&args.out)?;
    if let Some(stats) = &stats {
        stats.save(sidecar(&args.out, ".stats"))?;
    }

    let mut fields = vec![
        ("alpha", fmt_f64(args.alpha)),
        ("param", fmt_f64(cfg.param)),
        ("train_size", train.len().to_string()),
    ];
    fields.extend(solve_summary(&rep));
    fields.push(("train_errors", count_errors(&rep.solution, &train)?.to_string()));
    fields.push((
        "nonzeros_per_class",
        join_counts(&crate::eval::count_nonzeros(&rep.solution, DEFAULT_NONZERO_THRESHOLD)),
    ));
    if has_test {
        let ev = evaluate(
            &rep.solution,
            &test,
            &spec,
            objective_mode(args.solver, cfg.param),
            DEFAULT_NONZERO_THRESHOLD,
        )?;
        fields.push(("test_size", ev.test_size.to_string()));
        fields.push(("test_errors", ev.error_count.to_string()));
    }
    let body = record(&fields);
    write_file(&sidecar(&args.out, ".report"), &body)?;
    emit(out, &body)?;
    eprintln!("trained in {elapsed:.3} s");
    Ok(if rep.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<i32> {
    if !(args.threshold >= 0.0) {
        return usage("--threshold must be non-negative");
    }
    let persisted = PersistedModel::load(&args.model)?;
    let mut data = load_data(&args.data.data, &args.data)?;
    if persisted.meta.standardized {
        data = Standardizer::load(sidecar(&args.model, ".stats"))?.apply(&data)?;
    }
    let meta = &persisted.meta;
    let report = evaluate(
        &persisted.model,
        &data,
        &meta.spec,
        objective_mode(meta.solver, meta.param),
        args.threshold,
    )?;
    let fields = eval_fields(&report);
    let body = match args.emit {
        Emit::Record => record(&fields),
        Emit::Csv => {
            let header: Vec<&str> = fields.iter().map(|(k, _)| *k).collect();
            let row: Vec<&str> = fields.iter().map(|(_, v)| v.as_str()).collect();
            format!("{}\n{}\n", header.join(","), row.join(","))
        }
    };
    match &args.out {
        Some(path) => write_file(path, &body)?,
        None => emit(out, &body)?,
    }
    Ok(EXIT_OK)
}

/// Result of one (alpha, repetition) job of a sweep.
#[derive(Clone, Debug)]
struct SweepRun {
    test_errors: usize,
    test_size: usize,
    nonzeros: usize,
    nonzero_groups: Option<usize>,
    train_hinge: f64,
    iterations: usize,
    converged: bool,
    seconds: f64,
}

pub const SWEEP_HEADER: &str = "alpha,param,runs,mean_test_errors,mean_error_rate,mean_nonzeros,mean_nonzero_groups,mean_train_hinge,mean_iterations,converged_runs";

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> CliResult<i32> {
    check_problem(&args.problem)?;
    let alphas = args.alphas.clone().unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
    if alphas.is_empty() {
        return usage("--alphas is empty");
    }
    for &a in &alphas {
        check_alpha(a)?;
    }
    if args.repeats == 0 {
        return usage("--repeats must be positive");
    }
    if !(args.threshold >= 0.0) {
        return usage("--threshold must be non-negative");
    }
    let full = load_data(&args.data.data, &args.data)?;
    let spec = build_spec(&args.problem, full.features())?;

    let mut splits = Vec::with_capacity(args.repeats);
    match &args.test {
        Some(test_path) => {
            if args.split.rule().is_some() {
                return usage("--test cannot be combined with --train-fraction or --per-class");
            }
            let test = load_data(test_path, &args.data)?;
            if test.features() != full.features() {
                return Err(Error::Dimension(format!(
                    "test set has {} features, training set {}",
                    test.features(),
                    full.features()
                ))
                .into());
            }
            for _ in 0..args.repeats {
                splits.push(preprocess(args.problem.standardize, full.clone(), test.clone())?);
            }
        }
        None => {
            let rule = args.split.rule().unwrap_or(SplitRule::Fraction(0.5));
            for r in 0..args.repeats {
                let (tr, te) = split_indices(&full, rule, args.seed.wrapping_add(r as u64))?;
                splits.push(preprocess(
                    args.problem.standardize,
                    full.subset(&tr),
                    full.subset(&te),
                )?);
            }
        }
    }

    let jobs: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|a| (0..args.repeats).map(move |r| (a, r)))
        .collect();
    let runs: Vec<Result<SweepRun>> = jobs
        .par_iter()
        .map(|&(a, r)| {
            let (train, test, _) = &splits[r];
            let cfg = solver_config(args.solver, alphas[a], train, &args.problem);
            let start = Instant::now();
            let rep = args.solver.solve(train, &spec, &cfg)?;
            let seconds = start.elapsed().as_secs_f64();
            let ev = evaluate(
                &rep.solution,
                test,
                &spec,
                objective_mode(args.solver, cfg.param),
                args.threshold,
            )?;
            Ok(SweepRun {
                test_errors: ev.error_count,
                test_size: ev.test_size,
                nonzeros: ev.total_nonzeros(),
                nonzero_groups: ev.nonzero_groups,
                train_hinge: rep.hinge_sum,
                iterations: rep.iterations,
                converged: rep.converged,
                seconds,
            })
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut timing = String::from("alpha,mean_seconds,total_seconds\n");
    let mut detail = String::from(
        "alpha,repetition,test_errors,test_size,nonzeros,nonzero_groups,train_hinge,iterations,converged\n",
    );
    let mut all_converged = true;
    for (a, &alpha) in alphas.iter().enumerate() {
        let group = &runs[a * args.repeats..(a + 1) * args.repeats];
        let n = group.len() as f64;
        let mean = |f: &dyn Fn(&SweepRun) -> f64| group.iter().map(f).sum::<f64>() / n;
        let converged = group.iter().filter(|r| r.converged).count();
        all_converged &= converged == group.len();
        let param = args.solver.param_from_alpha(alpha, splits[0].0.len());
        let groups = if group.iter().all(|r| r.nonzero_groups.is_some()) {
            fmt_f64(mean(&|r| r.nonzero_groups.unwrap_or(0) as f64))
        } else {
            String::new()
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(alpha),
            fmt_f64(param),
            group.len(),
            fmt_f64(mean(&|r| r.test_errors as f64)),
            fmt_f64(mean(&|r| if r.test_size == 0 {
                0.0
            } else {
                r.test_errors as f64 / r.test_size as f64
            })),
            fmt_f64(mean(&|r| r.nonzeros as f64)),
            groups,
            fmt_f64(mean(&|r| r.train_hinge)),
            fmt_f64(mean(&|r| r.iterations as f64)),
            converged
        );
        let total: f64 = group.iter().map(|r| r.seconds).sum();
        let _ = writeln!(timing, "{},{},{}", fmt_f64(alpha), fmt_f64(total / n), fmt_f64(total));
        for (r, run) in group.iter().enumerate() {
            let _ = writeln!(
                detail,
                "{},{},{},{},{},{},{},{},{}",
                fmt_f64(alpha),
                r,
                run.test_errors,
                run.test_size,
                run.nonzeros,
                run.nonzero_groups.map(|g| g.to_string()).unwrap_or_default(),
                fmt_f64(run.train_hinge),
                run.iterations,
                run.converged
            );
        }
    }
    write_file(&args.out, &csv)?;
    write_file(&timing_path(&args.out), &timing)?;
    if let Some(path) = &args.runs_out {
        write_file(path, &detail)?;
    }
    emit(out, &csv)?;
    Ok(if all_converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

pub const TRACE_HEADER: &str = "iteration,objective,rel_change,reference_distance";
pub const BENCH_HEADER: &str = "solver,iterations,converged,final_rel_change,initial_reference_distance,final_reference_distance,primal_objective,hinge_sum,reference_iterations,reference_converged";

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> CliResult<i32> {
    check_alpha(args.alpha)?;
    check_problem(&args.problem)?;
    let data = load_data(&args.data.data, &args.data)?;
    let spec = build_spec(&args.problem, data.features())?;
    let data = if args.problem.standardize {
        Standardizer::fit(&data)?.apply(&data)?
    } else {
        data
    };
    let solvers = args.solvers.clone().unwrap_or_else(|| SolverKind::ALL.to_vec());
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;

    let mut summary = format!("{BENCH_HEADER}\n");
    let mut timing = String::from("solver,seconds,reference_seconds\n");
    let mut all_converged = true;
    for kind in solvers {
        let base = solver_config(kind, args.alpha, &data, &args.problem);
        let ref_cfg = base
            .clone()
            .max_iter(args.reference_max_iter)
            .rel_tol(args.reference_tol);
        let start = Instant::now();
        let reference = kind.solve(&data, &spec, &ref_cfg)?;
        let ref_secs = start.elapsed().as_secs_f64();
        let ref_model = PersistedModel {
            meta: ModelMeta {
                solver: kind,
                spec: spec.clone(),
                alpha: args.alpha,
                param: base.param,
                tol: args.reference_tol,
                max_iter: args.reference_max_iter,
                seed: args.seed,
                iterations: reference.iterations,
                converged: reference.converged,
                final_rel_change: reference.final_rel_change,
                hinge_sum: reference.hinge_sum,
                objective: reference.primal_objective,
                standardized: args.problem.standardize,
            },
            model: reference.solution.clone(),
        };
        ref_model.save(&args.out_dir.join(format!("{kind}.reference.model")))?;

        let cfg = base.reference(reference.solution.clone());
        let start = Instant::now();
        let rep = kind.solve(&data, &spec, &cfg)?;
        let secs = start.elapsed().as_secs_f64();
        all_converged &= rep.converged;

        let mut trace = format!("{TRACE_HEADER}\n");
        let mut trace_timing = String::from("iteration,elapsed_seconds\n");
        for h in &rep.history {
            let _ = writeln!(
                trace,
                "{},{},{},{}",
                h.iteration,
                fmt_f64(h.objective),
                fmt_f64(h.rel_change),
                opt_f64(h.reference_distance)
            );
            let _ = writeln!(trace_timing, "{},{}", h.iteration, fmt_f64(h.elapsed_secs));
        }
        write_file(&args.out_dir.join(format!("{kind}.trace.csv")), &trace)?;
        write_file(&args.out_dir.join(format!("{kind}.trace.timing.csv")), &trace_timing)?;

        let ref_norm = reference.solution.norm().max(crate::solvers::REL_EPS);
        let initial = crate::model::norm2(reference.solution.as_slice()) / ref_norm;
        let last = crate::model::dist2(rep.solution.as_slice(), reference.solution.as_slice()) / ref_norm;
        let _ = writeln!(
            summary,
            "{kind},{},{},{},{},{},{},{},{},{}",
            rep.iterations,
            rep.converged,
            fmt_f64(rep.final_rel_change),
            fmt_f64(initial),
            fmt_f64(last),
            fmt_f64(rep.primal_objective),
            fmt_f64(rep.hinge_sum),
            reference.iterations,
            reference.converged
        );
        let _ = writeln!(timing, "{kind},{},{}", fmt_f64(secs), fmt_f64(ref_secs));
    }
    write_file(&args.out_dir.join("summary.csv"), &summary)?;
    write_file(&args.out_dir.join("summary.timing.csv"), &timing)?;
    emit(out, &summary)?;
    Ok(if all_converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<i32> {
    if !(args.separation >= 0.0 && args.separation.is_finite()) {
        return usage("--separation must be non-negative");
    }
    let ds = make_synthetic(args.classes, args.features, args.samples, args.separation, args.seed)?;
    match resolve_format(&args.out, args.format) {
        DataFormat::Csv => save_dense_csv(&args.out, &ds)?,
        DataFormat::Svmlight => save_svmlight(&args.out, &ds)?,
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(spec: RegularizerSpec) -> ModelMeta {
        ModelMeta {
            solver: SolverKind::FbpdConstrained,
            spec,
            alpha: 0.1,
            param: 3.8,
            tol: 1e-5,
            max_iter: 100,
            seed: 7,
            iterations: 42,
            converged: false,
            final_rel_change: 1.0 / 3.0,
            hinge_sum: 0.25,
            objective: std::f64::consts::PI,
            standardized: true,
        }
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let data: Vec<f64> = (0..15)
            .map(|i| (i as f64 * 0.7310585786300049).sin() / 3.0 + 1e-300)
            .collect();
        let blocks = BlockStructure::contiguous(4, 3, GroupMode::CrossClass).unwrap();
        for spec in [
            RegularizerSpec::l1(),
            RegularizerSpec::l1inf(blocks.clone()),
            RegularizerSpec::l12(
                BlockStructure::from_groups(4, vec![vec![0, 3], vec![1, 2]], GroupMode::PerClass).unwrap(),
            ),
        ] {
            let pm = PersistedModel {
                meta: meta(spec),
                model: ModelVector::from_flat(3, 4, data.clone()).unwrap(),
            };
            let back = PersistedModel::parse(Path::new("m"), &pm.to_text()).unwrap();
            assert_eq!(back, pm);
            for (a, b) in back.model.as_slice().iter().zip(pm.model.as_slice()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn model_parse_errors() {
        let pm = PersistedModel {
            meta: meta(RegularizerSpec::l1()),
            model: ModelVector::zeros(2, 2),
        };
        let text = pm.to_text();
        assert!(PersistedModel::parse(Path::new("m"), "nonsense\n").is_err());
        let truncated: String = text
            .lines()
            .take(text.lines().count() - 1)
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(PersistedModel::parse(Path::new("m"), &truncated).is_err());
        assert!(PersistedModel::parse(Path::new("m"), &text.replace("solver fbpd-con", "solver svm")).is_err());
    }

    #[test]
    fn usage_errors_map_to_exit_code() {
        let mut sink = Vec::new();
        let code = run(
            [
                "proxsvm", "train", "--data", "x.csv", "--solver", "svm", "--alpha", "1", "--out", "m",
            ],
            &mut sink,
        );
        assert_eq!(code, EXIT_USAGE);
        assert_eq!(run(["proxsvm", "frobnicate"], &mut sink), EXIT_USAGE);
        assert_eq!(run(["proxsvm", "--help"], &mut sink), EXIT_OK);
    }

    #[test]
    fn timing_paths() {
        assert_eq!(timing_path(Path::new("a/b.csv")), PathBuf::from("a/b.timing.csv"));
        assert_eq!(timing_path(Path::new("a/b")), PathBuf::from("a/b.timing.csv"));
    }
}
