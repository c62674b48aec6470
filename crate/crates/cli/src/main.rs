//! `ccme`: simulate data, fit CCME estimators, evaluate densities, run and
//! summarize benchmark sweeps.

use std::fmt;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccme::density::{eval_density_batch, outcome_range_grid, uniform_grid, write_curves_csv};
use ccme::estimators::{fit, CcmeModel, Method, Variant};
use ccme::io::{load_model, model_precision, read_dataset_csv, save_model, write_dataset_csv};
use ccme::linalg::Matrix;
use ccme::sweep::{read_records_csv, run_sweep, summarize, write_records_csv, write_summary_csv, SweepRecord};
use ccme::synth::{generate, DgpConfig, Scenario};
use ccme::Scalar;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "ccme", version, about = "Doubly robust conditional counterfactual mean embeddings")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed for data generation, splitting, and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Estimator: rr, df, or nk.
    #[arg(long, global = true)]
    method: Option<Method>,

    /// Pseudo-outcome: dr, ipw, pi, or one-step.
    #[arg(long, global = true)]
    variant: Option<Variant>,

    /// Nuisance wiring: a (both correct), b (propensity misspecified), c (outcome model misspecified).
    #[arg(long, global = true)]
    scenario: Option<Scenario>,

    /// Worker threads for sweeps; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, env = "CCME_THREADS")]
    threads: Option<usize>,

    /// Output file; written atomically. Data goes to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Restrict a sweep axis, e.g. `method=rr` or `n=500`. Repeatable.
    #[arg(long, global = true, value_name = "K=V")]
    filter: Vec<String>,

    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// More log output (info with -v, debug with -vv).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset as CSV (x1..x10,a,y).
    Simulate {
        /// Number of rows; overrides `n` in the config.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit an estimator on a dataset CSV and write the model file.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Evaluate density curves of a fitted model.
    Density {
        #[arg(long)]
        model: PathBuf,
        /// Conditioning point as comma-separated values. Repeatable.
        #[arg(long = "v", value_name = "V1,V2,..", allow_hyphen_values = true)]
        v: Vec<String>,
        /// CSV of conditioning points, one per row, with a header.
        #[arg(long)]
        v_file: Option<PathBuf>,
        /// Outcome grid `LO:HI:POINTS`; defaults to the model's outcome range.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
    },
    /// Run the synthetic benchmark over the configured grid.
    Sweep,
    /// Summarize a sweep CSV: median MSE per cell and log-log slopes.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self { code: 2, message: format!("{}: {e}", path.display()) }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ccme::Error> for CliError {
    fn from(e: ccme::Error) -> Self {
        use ccme::Error as E;
        let code = match &e {
            E::Io(_) => 2,
            E::Parse(_) | E::InvalidArgument(_) => 3,
            E::DegenerateData(_) | E::Config(_) | E::GridMismatch(_) => 4,
            E::NotPositiveDefinite { .. } | E::NonFiniteLoss { .. } => 5,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 3 } else { 0 });
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.method {
        cfg.set_method(m);
    }
    if let Some(v) = c.variant {
        cfg.set_variant(v);
    }
    if let Some(s) = c.scenario {
        cfg.set_scenario(s);
    }
    if let Command::Simulate { n: Some(n) } = &cli.command {
        cfg.n = *n;
    }
    let filters = c.filter.iter().map(|f| parse_filter(f)).collect::<Result<Vec<_>, _>>()?;
    for (k, v) in &filters {
        cfg.sweep.restrict(k, v)?;
    }
    if c.print_config {
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        return emit(None, |w| writeln!(w, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e)));
    }
    if let Some(t) = c.threads {
        if t == 0 {
            return Err(CliError::parse("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError { code: 4, message: e.to_string() })?;
    }
    let out = c.out.as_deref();
    match &cli.command {
        Command::Simulate { .. } => simulate(&cfg, out),
        Command::Fit { data, precision } => match precision {
            Precision::F64 => fit_cmd::<f64>(&cfg, data, out),
            Precision::F32 => fit_cmd::<f32>(&cfg, data, out),
        },
        Command::Density { model, v, v_file, grid } => density(&cfg, model, v, v_file.as_deref(), grid.as_deref(), out),
        Command::Sweep => sweep(&cfg, out),
        Command::Report { input } => report(input, &filters, out),
    }
}

fn parse_filter(text: &str) -> Result<(String, String), CliError> {
    match text.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() && !v.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(CliError::parse(format!("filter must look like KEY=VALUE, got {text:?}"))),
    }
}

/// Writes through a temporary file in the target directory, then renames it
/// over `path`. Without a path the bytes go to stdout.
fn emit(out: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> Result<(), CliError>) -> Result<(), CliError> {
    let Some(path) = out else {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        write(&mut lock)?;
        return lock.flush().map_err(|e| CliError::io(Path::new("<stdout>"), e));
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        write(&mut buf)?;
        buf.flush().map_err(|e| CliError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateMeta {
    seed: u64,
    n: usize,
    scenario: Option<Scenario>,
    beta: [f64; 10],
    gamma: [f64; 10],
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn simulate(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let scenario = cfg.scenario.unwrap_or(Scenario::BothCorrect);
    let dgp = DgpConfig { n: cfg.n, seed: cfg.seed, scenario, beta: cfg.beta, gamma: cfg.gamma };
    let (data, _) = generate(&dgp)?;
    emit(out, |w| Ok(write_dataset_csv(w, &data)?))?;
    if let Some(path) = out {
        let meta = SimulateMeta { seed: cfg.seed, n: cfg.n, scenario: cfg.scenario, beta: cfg.beta, gamma: cfg.gamma };
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        emit(Some(&sidecar(path)), |w| w.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e)))?;
    }
    log::info!("wrote {} rows", data.len());
    Ok(())
}

fn fit_cmd<T: Scalar>(cfg: &RunConfig, data_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let hp = cfg.effective_hyperparams();
    hp.validate()?;
    let file = std::fs::File::open(data_path).map_err(|e| CliError::io(data_path, e))?;
    let data = read_dataset_csv::<T, _>(std::io::BufReader::new(file))?;
    let started = std::time::Instant::now();
    let model: CcmeModel<T> = fit(&data, &hp, cfg.seed)?;
    log::info!("fitted {} {} on {} rows in {:.1}s", hp.method, hp.variant, data.len(), started.elapsed().as_secs_f64());
    emit(out, |w| Ok(save_model(w, &model)?))
}

fn parse_point(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::parse(format!("cannot parse {s:?} in point {text:?}"))))
        .collect()
}

fn read_points(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => CliError::io(path, e),
        _ => CliError::parse(e.to_string()),
    })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
        out.push(parse_point(&rec.iter().collect::<Vec<_>>().join(","))?);
    }
    Ok(out)
}

fn parse_grid(text: &str) -> Result<(f64, f64, usize), CliError> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || CliError::parse(format!("grid must look like LO:HI:POINTS, got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo = parts[0].trim().parse().map_err(|_| bad())?;
    let hi = parts[1].trim().parse().map_err(|_| bad())?;
    let n = parts[2].trim().parse().map_err(|_| bad())?;
    Ok((lo, hi, n))
}

fn density(
    cfg: &RunConfig,
    model_path: &Path,
    v: &[String],
    v_file: Option<&Path>,
    grid: Option<&str>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(model_path).map_err(|e| CliError::io(model_path, e))?;
    let mut points = v.iter().map(|s| parse_point(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(p) = v_file {
        points.extend(read_points(p)?);
    }
    if points.is_empty() {
        return Err(CliError::parse("give at least one conditioning point with --v or --v-file"));
    }
    let grid = match grid {
        Some(g) => Some(parse_grid(g)?),
        None => match (cfg.density_grid.lo, cfg.density_grid.hi) {
            (Some(lo), Some(hi)) => Some((lo, hi, cfg.density_grid.points)),
            _ => None,
        },
    };
    match model_precision(&text)?.as_str() {
        "f32" => density_for::<f32>(cfg, &text, &points, grid, out),
        _ => density_for::<f64>(cfg, &text, &points, grid, out),
    }
}

fn density_for<T: Scalar>(
    cfg: &RunConfig,
    text: &str,
    points: &[Vec<f64>],
    grid: Option<(f64, f64, usize)>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model: CcmeModel<T> = load_model(text.as_bytes())?;
    if let Some(p) = points.iter().find(|p| p.len() != model.v_dim()) {
        return Err(CliError::parse(format!("model expects {} values per point, got {}", model.v_dim(), p.len())));
    }
    let grid = match grid {
        Some((lo, hi, n)) => uniform_grid(T::lit(lo), T::lit(hi), n)?,
        None if model.y_dim() == 1 => outcome_range_grid(model.y.as_slice(), T::lit(cfg.density_grid.margin), cfg.density_grid.points)?,
        None => return Err(CliError::parse("multi-dimensional outcomes need an explicit grid")),
    };
    let vs = Matrix::from_rows(&points.iter().map(|p| p.iter().map(|&x| T::lit(x)).collect()).collect::<Vec<_>>())?;
    let curves = eval_density_batch(&model, &vs, &grid)?;
    for (i, c) in curves.iter().enumerate() {
        if c.has_negative_values() {
            log::warn!("curve {i} dips below zero (min {})", c.min_value);
        }
    }
    emit(out, |w| Ok(write_curves_csv(w, &curves)?))
}

fn sweep(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let sc = cfg.sweep_config();
    sc.hyperparams.validate()?;
    let cells = sc.grid.cells().len();
    if cells == 0 {
        return Err(CliError { code: 4, message: "sweep grid is empty".into() });
    }
    log::info!("running {cells} cells on {} threads", rayon::current_num_threads());
    let records = run_sweep(&sc);
    let failed = records.iter().filter(|r| !r.succeeded()).count();
    emit(out, |w| Ok(write_records_csv(w, &records)?))?;
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", records.len());
    }
    if failed == records.len() {
        return Err(CliError { code: 5, message: "every sweep cell failed".into() });
    }
    Ok(())
}

fn keep(record: &SweepRecord, filters: &[(String, String)]) -> Result<bool, CliError> {
    for (k, v) in filters {
        let ok = match k.to_ascii_lowercase().as_str() {
            "method" => record.method == v.parse::<Method>()?,
            "variant" => record.variant == v.parse::<Variant>()?,
            "scenario" => record.scenario == v.parse::<Scenario>()?,
            "n" => record.n.to_string() == *v,
            "seed" => record.seed.to_string() == *v,
            other => return Err(CliError::parse(format!("unknown filter key {other:?}"))),
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

fn report(input: &Path, filters: &[(String, String)], out: Option<&Path>) -> Result<(), CliError> {
    let file = std::fs::File::open(input).map_err(|e| CliError::io(input, e))?;
    let mut records = read_records_csv(std::io::BufReader::new(file))?;
    let mut kept = Vec::with_capacity(records.len());
    for r in records.drain(..) {
        if keep(&r, filters)? {
            kept.push(r);
        }
    }
    let summary = summarize(&kept);
    if summary.failed > 0 {
        eprintln!("{} failed rows excluded", summary.failed);
    }
    let table = render_table(&summary);
    match out {
        Some(_) => {
            print_text(&table)?;
            emit(out, |w| Ok(write_summary_csv(w, &summary)?))
        }
        None if std::io::stdout().is_terminal() => print_text(&table),
        None => emit(None, |w| Ok(write_summary_csv(w, &summary)?)),
    }
}

fn print_text(text: &str) -> Result<(), CliError> {
    emit(None, |w| w.write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e)))
}

fn render_table(s: &ccme::sweep::SweepSummary) -> String {
    let mut out = format!("{:<6} {:<8} {:<8} {:>7} {:>12} {:>5}\n", "method", "variant", "scenario", "n", "median_mse", "seeds");
    for c in &s.cells {
        out += &format!(
            "{:<6} {:<8} {:<8} {:>7} {:>12.4e} {:>5}\n",
            c.method.as_str(),
            c.variant.as_str(),
            c.scenario.as_str(),
            c.n,
            c.median_mse,
            c.seeds
        );
    }
    out += "\nlog-log slopes\n";
    for sl in &s.slopes {
        let slope = sl.slope.map_or("-".to_string(), |v| format!("{v:.3}"));
        out += &format!("{:<6} {:<8} {:<8} {:>8}\n", sl.method.as_str(), sl.variant.as_str(), sl.scenario.as_str(), slope);
    }
    out
}
