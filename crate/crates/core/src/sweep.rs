//! Benchmark sweeps over method × variant × scenario × n × seed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::outcome_range_grid;
use crate::error::{Error, Result};
use crate::estimators::{derive_seed, fit, Hyperparams, Method, Variant};
use crate::synth::{generate, loglog_slope, mse, sample_v, DgpConfig, GroundTruth, Scenario, DEFAULT_BETA, DEFAULT_GAMMA};

const DATA_STREAM: u64 = 100;
const FIT_STREAM: u64 = 101;
const TEST_STREAM: u64 = 102;

/// Test-point count and grid resolution used to score a fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProfile {
    pub test_points: usize,
    pub grid_points: usize,
    pub grid_margin: f64,
}

impl EvalProfile {
    pub fn desk() -> Self {
        Self { test_points: 500, grid_points: 200, grid_margin: 2.0 }
    }

    pub fn full() -> Self {
        Self { test_points: 10_000, grid_points: 1000, grid_margin: 2.0 }
    }
}

impl Default for EvalProfile {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub methods: Vec<Method>,
    pub variants: Vec<Variant>,
    pub scenarios: Vec<Scenario>,
    /// Size of each fold; every dataset has `2n` rows.
    pub ns: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self::desk()
    }
}

impl SweepGrid {
    pub fn desk() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            scenarios: Scenario::ALL.to_vec(),
            ns: vec![200, 500, 2000, 5000],
            seeds: (0..5).collect(),
        }
    }

    pub fn full() -> Self {
        Self { ns: vec![200, 500, 1000, 2000, 5000, 10_000, 20_000], seeds: (0..10).collect(), ..Self::desk() }
    }

    /// Restricts one axis to a single value, e.g. `("method", "rr")`.
    pub fn restrict(&mut self, key: &str, value: &str) -> Result<()> {
        match key.to_ascii_lowercase().as_str() {
            "method" => self.methods = vec![value.parse()?],
            "variant" => self.variants = vec![value.parse()?],
            "scenario" => self.scenarios = vec![value.parse()?],
            "n" => self.ns = vec![parse_num(value)?],
            "seed" => self.seeds = vec![parse_num(value)?],
            other => return Err(Error::Parse(format!("unknown filter key {other:?}"))),
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &variant in &self.variants {
                for &scenario in &self.scenarios {
                    for &n in &self.ns {
                        for &seed in &self.seeds {
                            out.push(Cell { method, variant, scenario, n, seed });
                        }
                    }
                }
            }
        }
        out
    }
}

fn parse_num<N: std::str::FromStr>(s: &str) -> Result<N> {
    s.trim().parse().map_err(|_| Error::Parse(format!("expected an integer, got {s:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub method: Method,
    pub variant: Variant,
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub grid: SweepGrid,
    /// Base hyperparameters; method, variant and scenario wiring are set per cell.
    pub hyperparams: Hyperparams,
    pub profile: EvalProfile,
    /// RR cells above this fold size are recorded as failed without fitting.
    pub rr_max_n: usize,
    pub beta: [f64; 10],
    pub gamma: [f64; 10],
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: SweepGrid::desk(),
            hyperparams: Hyperparams::default(),
            profile: EvalProfile::desk(),
            rr_max_n: 20_000,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: Method,
    pub variant: Variant,
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
    pub mse: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

impl SweepRecord {
    pub fn cell(&self) -> Cell {
        Cell { method: self.method, variant: self.variant, scenario: self.scenario, n: self.n, seed: self.seed }
    }

    pub fn succeeded(&self) -> bool {
        self.mse.is_some() && self.error.is_none()
    }
}

/// Data seed for replicate `seed` at fold size `n`. Shared by every method,
/// variant and scenario so that they are compared on the same draws.
pub fn data_seed(seed: u64, n: usize) -> u64 {
    derive_seed(derive_seed(seed, DATA_STREAM), n as u64)
}

/// Scores one cell. Errors and panics become failed records.
pub fn run_cell(cell: Cell, cfg: &SweepConfig) -> SweepRecord {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(|| score_cell(cell, cfg)));
    let (mse, error) = match outcome {
        Ok(Ok(v)) => (Some(v), None),
        Ok(Err(e)) => (None, Some(e.to_string())),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (None, Some(format!("panic: {msg}")))
        }
    };
    if let Some(e) = &error {
        log::warn!("cell {cell:?} failed: {e}");
    }
    SweepRecord {
        method: cell.method,
        variant: cell.variant,
        scenario: cell.scenario,
        n: cell.n,
        seed: cell.seed,
        mse,
        seconds: start.elapsed().as_secs_f64(),
        error,
    }
}

fn score_cell(cell: Cell, cfg: &SweepConfig) -> Result<f64> {
    if cell.method == Method::Rr && cell.n > cfg.rr_max_n {
        return Err(Error::invalid(format!("RR limited to n <= {}", cfg.rr_max_n)));
    }
    let dgp = DgpConfig { n: 2 * cell.n, seed: data_seed(cell.seed, cell.n), scenario: cell.scenario, beta: cfg.beta, gamma: cfg.gamma };
    let (data, _) = generate(&dgp)?;
    let mut hp = cell.scenario.configure(&cfg.hyperparams);
    hp.method = cell.method;
    hp.variant = cell.variant;
    hp.first_stage_method = None;
    let model = fit(&data, &hp, derive_seed(dgp.seed, FIT_STREAM))?;
    let test_v = sample_v(cfg.profile.test_points, derive_seed(cell.seed, TEST_STREAM));
    let ys = outcome_range_grid(data.y.as_slice(), cfg.profile.grid_margin, cfg.profile.grid_points)?.into_vec();
    mse(&model, &GroundTruth::new(&cfg.beta, &cfg.gamma), &test_v, &ys)
}

/// Runs every cell on the current rayon pool. Output order follows
/// [`SweepGrid::cells`] regardless of scheduling.
pub fn run_sweep(cfg: &SweepConfig) -> Vec<SweepRecord> {
    cfg.grid.cells().into_par_iter().map(|c| run_cell(c, cfg)).collect()
}

pub const CSV_HEADER: [&str; 8] = ["method", "variant", "scenario", "n", "seed", "mse", "seconds", "error"];

pub fn write_records_csv<W: Write>(out: W, records: &[SweepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.method.as_str().to_string(),
            r.variant.as_str().to_string(),
            r.scenario.as_str().to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            r.mse.map(|v| format!("{v:e}")).unwrap_or_default(),
            format!("{:.3}", r.seconds),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses sweep CSV. Columns are matched by name; `error` is optional.
pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Parse(format!("sweep CSV lacks column {name:?}")));
    let (im, iv, is, inn, ise, imse, isec) =
        (need("method")?, need("variant")?, need("scenario")?, need("n")?, need("seed")?, need("mse")?, need("seconds")?);
    let ierr = col("error");
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let ctx = |e: Error| Error::Parse(format!("row {}: {e}", line + 1));
        let mse_text = field(imse);
        let mse = if mse_text.is_empty() {
            None
        } else {
            Some(mse_text.parse::<f64>().map_err(|_| Error::Parse(format!("row {}: bad mse {mse_text:?}", line + 1)))?)
        };
        let error = ierr.map(field).filter(|s| !s.is_empty()).map(str::to_string);
        out.push(SweepRecord {
            method: field(im).parse().map_err(ctx)?,
            variant: field(iv).parse().map_err(ctx)?,
            scenario: field(is).parse().map_err(ctx)?,
            n: parse_num(field(inn)).map_err(ctx)?,
            seed: parse_num(field(ise)).map_err(ctx)?,
            mse,
            seconds: field(isec).parse().map_err(|_| Error::Parse(format!("row {}: bad seconds", line + 1)))?,
            error,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub method: Method,
    pub variant: Variant,
    pub scenario: Scenario,
    pub n: usize,
    pub median_mse: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveSlope {
    pub method: Method,
    pub variant: Variant,
    pub scenario: Scenario,
    /// `None` with fewer than three sample sizes.
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub cells: Vec<CellSummary>,
    pub slopes: Vec<CurveSlope>,
    pub failed: usize,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len();
    Some(if k % 2 == 1 { values[k / 2] } else { 0.5 * (values[k / 2 - 1] + values[k / 2]) })
}

/// Median over seeds per (method, variant, scenario, n) and the log-log slope
/// of each curve. Failed rows are counted and dropped.
pub fn summarize(records: &[SweepRecord]) -> SweepSummary {
    let mut groups: BTreeMap<(Method, Variant, Scenario, usize), Vec<f64>> = BTreeMap::new();
    let mut failed = 0;
    for r in records {
        match r.mse {
            Some(v) if r.error.is_none() && v.is_finite() => groups.entry((r.method, r.variant, r.scenario, r.n)).or_default().push(v),
            _ => failed += 1,
        }
    }
    let mut cells = Vec::new();
    let mut curves: BTreeMap<(Method, Variant, Scenario), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((method, variant, scenario, n), mut vals) in groups {
        let seeds = vals.len();
        let med = median(&mut vals).expect("groups are non-empty");
        cells.push(CellSummary { method, variant, scenario, n, median_mse: med, seeds });
        let curve = curves.entry((method, variant, scenario)).or_default();
        curve.0.push(n as f64);
        curve.1.push(med);
    }
    let slopes = curves
        .into_iter()
        .map(|((method, variant, scenario), (ns, ms))| CurveSlope { method, variant, scenario, slope: loglog_slope(&ns, &ms).ok() })
        .collect();
    SweepSummary { cells, slopes, failed }
}

/// Writes `method,variant,scenario,n,median_mse,seeds,slope`; the slope of a
/// curve is repeated on each of its rows.
pub fn write_summary_csv<W: Write>(out: W, summary: &SweepSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "variant", "scenario", "n", "median_mse", "seeds", "slope"])?;
    for c in &summary.cells {
        let slope = summary
            .slopes
            .iter()
            .find(|s| (s.method, s.variant, s.scenario) == (c.method, c.variant, c.scenario))
            .and_then(|s| s.slope)
            .map(|v| format!("{v:.4}"))
            .unwrap_or_default();
        w.write_record([
            c.method.to_string(),
            c.variant.to_string(),
            c.scenario.to_string(),
            c.n.to_string(),
            format!("{:e}", c.median_mse),
            c.seeds.to_string(),
            slope,
        ])?;
    }
    w.flush()?;
    Ok(())
}
