//! The `liar` command line.
//!
//! Every run writes into one output directory: `config.json` (the resolved
//! configuration), the requested artifacts, and `manifest.json` with input
//! and output hashes, timings, peak memory and any per-site errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LiarError, Result};
use crate::evaluate::{compare_methods, forecast, forecast_against, write_metrics_csv, CompareConfig, Method};
use crate::fit::{box_neighborhoods, fit_all_with, FitStrategy};
use crate::grid::{GridSeries, Shape};
use crate::gts::{read_csv_frames, read_gts, write_gts};
use crate::kernel::KernelField;
use crate::neighborhood::Neighborhood;
use crate::select::{default_d0, is_interior, select_all_with, Candidates, SelectionReport};
use crate::separable::fit_spliar;
use crate::simulate::{operator_norm, random_stable_box_kernels, simulate_liar, NoiseKind, NoiseSpec, DEFAULT_BURN_IN};

pub const FORMAT_VERSION: u32 = 1;
/// Largest acceptable fit-time ratio when the grid side doubles.
pub const BENCH_RATIO_LIMIT: f64 = 4.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Simulate a series from random stable kernels.
    Simulate,
    /// Select neighborhood sizes by BIC.
    Select,
    /// Fit kernels on box or selected neighborhoods.
    Fit,
    /// Fit rank-R separable kernels on a matrix grid.
    Spliar,
    /// Forecast from fitted kernels.
    Forecast,
    /// Compare methods on a train/test split.
    Eval,
    /// Time fits on a grid and on one with doubled sides.
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseArg {
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    Auto,
    Direct,
    SharedQr,
}

impl From<StrategyArg> for FitStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Auto => FitStrategy::Auto,
            StrategyArg::Direct => FitStrategy::Direct,
            StrategyArg::SharedQr => FitStrategy::SharedQr,
        }
    }
}

/// Local interaction autoregressive models for gridded time series.
#[derive(Debug, Clone, Parser)]
#[command(name = "liar", version, about)]
pub struct Cli {
    pub command: Command,

    /// Input series (.gts, or .csv with --shape giving the rows per frame).
    #[arg(long)]
    pub input: Option<PathBuf>,

    #[arg(long, default_value = "liar-run")]
    pub output_dir: PathBuf,

    /// Grid dimensions, e.g. 10,10 or 4x4x6.
    #[arg(long)]
    pub shape: Option<String>,

    /// Number of frames to simulate.
    #[arg(long = "T")]
    pub t_len: Option<usize>,

    /// Lag order.
    #[arg(long = "P", default_value_t = 1)]
    pub lags: usize,

    /// Box radius (all axes). For select, the true radius used to score success.
    #[arg(long = "K")]
    pub k: Option<usize>,

    /// Largest candidate radius for select.
    #[arg(long = "K0")]
    pub k0: Option<usize>,

    /// Per-axis box radius, e.g. 0,1,1; overrides --K.
    #[arg(long)]
    pub radii: Option<String>,

    /// Nested candidate radii for select, e.g. "0,0,0;0,0,1;0,1,1".
    #[arg(long)]
    pub candidates: Option<String>,

    /// Rank of the separable projection.
    #[arg(long = "R")]
    pub rank: Option<usize>,

    /// BIC penalty constant; defaults to ln ln T.
    #[arg(long = "D0")]
    pub d0: Option<f64>,

    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,

    #[arg(long, value_enum, default_value_t = NoiseArg::Gaussian)]
    pub noise: NoiseArg,

    /// Operator norm of simulated kernels.
    #[arg(long, default_value_t = 0.8)]
    pub target_norm: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value_t = DEFAULT_BURN_IN)]
    pub burn_in: usize,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, env = "LIAR_THREADS")]
    pub threads: Option<usize>,

    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,

    /// Comma-separated subset of liar, liar_p, spliar, mar.
    #[arg(long, default_value = "liar,liar_p,spliar,mar")]
    pub methods: String,

    /// Kernel JSON for forecast.
    #[arg(long)]
    pub kernels: Option<PathBuf>,

    /// Selection JSON whose chosen neighborhoods fit should use.
    #[arg(long)]
    pub selection: Option<PathBuf>,

    /// Forecast horizon.
    #[arg(long)]
    pub horizon: Option<usize>,

    /// Held-out frames to score a forecast against.
    #[arg(long)]
    pub truth: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = StrategyArg::Auto)]
    pub strategy: StrategyArg,

    /// Timing repetitions per bench size (the minimum is kept).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

/// The configuration actually used, with defaults filled in.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub format_version: u32,
    pub liar_version: &'static str,
    pub command: Command,
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub shape: Option<Vec<usize>>,
    #[serde(rename = "T")]
    pub t_len: Option<usize>,
    #[serde(rename = "P")]
    pub lags: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "K0")]
    pub k0: Option<usize>,
    pub radii: Option<Vec<usize>>,
    pub candidates: Option<Vec<Vec<usize>>>,
    #[serde(rename = "R")]
    pub rank: Option<usize>,
    #[serde(rename = "D0")]
    pub d0: Option<f64>,
    pub d0_source: Option<&'static str>,
    pub sigma: f64,
    pub noise: NoiseArg,
    pub target_norm: f64,
    pub seed: u64,
    pub burn_in: usize,
    pub threads: usize,
    pub train_fraction: f64,
    pub methods: Vec<&'static str>,
    pub kernels: Option<PathBuf>,
    pub selection: Option<PathBuf>,
    pub horizon: Option<usize>,
    pub truth: Option<PathBuf>,
    pub strategy: StrategyArg,
    pub repeats: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub class: &'static str,
    pub exit_code: i32,
    pub message: String,
}

/// What a run produced; also written as `manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub format_version: u32,
    pub command: Command,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub errors: Vec<ErrorRecord>,
    pub wall_seconds: f64,
    pub peak_rss_kb: Option<u64>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn exit_code(&self) -> i32 {
        self.errors.first().map_or(0, |e| e.exit_code)
    }
}

fn class_name(e: &LiarError) -> &'static str {
    match e {
        LiarError::Index(_) => "index",
        LiarError::Format { .. } => "format",
        LiarError::Config(_) => "config",
        LiarError::Underdetermined { .. } => "underdetermined",
        LiarError::Numerical(_) => "numerical",
        LiarError::Stability { .. } => "stability",
        LiarError::Structure(_) => "structure",
        LiarError::Size(_) => "size",
        LiarError::Io(_) => "io",
        LiarError::Json(_) => "json",
    }
}

fn error_record(e: &LiarError) -> ErrorRecord {
    ErrorRecord {
        class: class_name(e),
        exit_code: e.exit_code(),
        message: e.to_string(),
    }
}

/// Peak resident set size of this process (Linux only).
pub fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn file_record(path: &Path) -> Result<FileRecord> {
    let bytes = fs::read(path)?;
    Ok(FileRecord {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split([',', 'x', 'X'])
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| LiarError::Config(format!("cannot parse {what} {s:?}")))
        })
        .collect()
}

fn parse_candidates(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| parse_list(t, "candidate radii"))
        .collect()
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let methods: Vec<Method> = s.split(',').filter(|t| !t.trim().is_empty()).map(Method::parse).collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(LiarError::Config("no methods given".into()));
    }
    Ok(methods)
}

fn require<T: Copy>(v: Option<T>, flag: &str, cmd: Command) -> Result<T> {
    v.ok_or_else(|| LiarError::Config(format!("{} needs {flag}", format!("{cmd:?}").to_lowercase())))
}

impl Cli {
    /// Validates every flag the command uses, before any work is done.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let cmd = self.command;
        let shape = self.shape.as_deref().map(|s| parse_list(s, "shape")).transpose()?;
        if let Some(s) = &shape {
            Shape::new(s.clone())?;
        }
        let radii = self.radii.as_deref().map(|s| parse_list(s, "radii")).transpose()?;
        let candidates = self.candidates.as_deref().map(parse_candidates).transpose()?;
        let methods = parse_methods(&self.methods)?;
        if self.lags == 0 {
            return Err(LiarError::Config("--P must be at least 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(LiarError::Config(format!("--sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.target_norm > 0.0 && self.target_norm < 1.0) {
            return Err(LiarError::Config(format!(
                "--target-norm must lie in (0, 1), got {}",
                self.target_norm
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(LiarError::Config(format!(
                "--train-fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if let Some(d0) = self.d0 {
            if !(d0 >= 0.0 && d0.is_finite()) {
                return Err(LiarError::Config(format!("--D0 must be finite and >= 0, got {d0}")));
            }
        }
        if self.threads == Some(0) {
            return Err(LiarError::Config("--threads must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(LiarError::Config("--repeats must be at least 1".into()));
        }
        let needs_input = !matches!(cmd, Command::Simulate | Command::Bench);
        if needs_input && self.input.is_none() {
            return Err(LiarError::Config(format!("{} needs --input", format!("{cmd:?}").to_lowercase())));
        }
        let radius_given = radii.is_some() || self.k.is_some();
        match cmd {
            Command::Simulate | Command::Bench => {
                require(shape.as_ref().map(|_| ()), "--shape", cmd)?;
                require(self.t_len, "--T", cmd)?;
                if !radius_given {
                    return Err(LiarError::Config(format!("{} needs --K or --radii", format!("{cmd:?}").to_lowercase())));
                }
            }
            Command::Select => {
                if self.k0.is_none() && candidates.is_none() {
                    return Err(LiarError::Config("select needs --K0 or --candidates".into()));
                }
            }
            Command::Fit => {
                if !radius_given && self.selection.is_none() {
                    return Err(LiarError::Config("fit needs --K, --radii or --selection".into()));
                }
            }
            Command::Spliar => {
                if !radius_given {
                    return Err(LiarError::Config("spliar needs --K or --radii".into()));
                }
                require(self.rank, "--R", cmd)?;
            }
            Command::Forecast => {
                if self.kernels.is_none() {
                    return Err(LiarError::Config("forecast needs --kernels".into()));
                }
                if self.horizon.is_none() && self.truth.is_none() {
                    return Err(LiarError::Config("forecast needs --horizon or --truth".into()));
                }
                if self.horizon == Some(0) {
                    return Err(LiarError::Config("--horizon must be at least 1".into()));
                }
            }
            Command::Eval => {
                if !radius_given && methods.iter().any(|m| matches!(m, Method::Liar | Method::SpLiar)) {
                    return Err(LiarError::Config("eval of liar/spliar needs --K".into()));
                }
            }
        }
        if let (Some(r), Some(s)) = (&radii, &shape) {
            if r.len() != s.len() {
                return Err(LiarError::Config(format!("--radii has {} entries for a {}-d shape", r.len(), s.len())));
            }
        }
        let threads = self
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Ok(ResolvedConfig {
            format_version: FORMAT_VERSION,
            liar_version: env!("CARGO_PKG_VERSION"),
            command: cmd,
            input: self.input.clone(),
            output_dir: self.output_dir.clone(),
            shape,
            t_len: self.t_len,
            lags: self.lags,
            k: self.k,
            k0: self.k0,
            radii,
            candidates,
            rank: self.rank,
            d0: self.d0,
            d0_source: self.d0.map(|_| "explicit"),
            sigma: self.sigma,
            noise: self.noise,
            target_norm: self.target_norm,
            seed: self.seed,
            burn_in: self.burn_in,
            threads,
            train_fraction: self.train_fraction,
            methods: methods.iter().map(|m| m.name()).collect(),
            kernels: self.kernels.clone(),
            selection: self.selection.clone(),
            horizon: self.horizon,
            truth: self.truth.clone(),
            strategy: self.strategy,
            repeats: self.repeats,
        })
    }
}

impl ResolvedConfig {
    fn radii_for(&self, ndim: usize) -> Result<Vec<usize>> {
        match (&self.radii, self.k) {
            (Some(r), _) if r.len() == ndim => Ok(r.clone()),
            (Some(r), _) => Err(LiarError::Config(format!("--radii has {} entries for a {ndim}-d grid", r.len()))),
            (None, Some(k)) => Ok(vec![k; ndim]),
            (None, None) => Err(LiarError::Config("a radius (--K or --radii) is required".into())),
        }
    }

    fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            kind: match self.noise {
                NoiseArg::Gaussian => NoiseKind::IidGaussian,
                NoiseArg::Uniform => NoiseKind::IidUniform,
            },
            sigma: self.sigma,
            seed: self.seed,
        }
    }
}

/// Reads a `.gts` file, or a `.csv` of stacked frames whose row count per
/// frame is the first entry of `shape`.
pub fn read_series(path: &Path, shape: Option<&[usize]>) -> Result<GridSeries> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        return read_gts(path);
    }
    let rows = shape
        .and_then(|s| s.first().copied())
        .ok_or_else(|| LiarError::Config("CSV input needs --shape ROWS,COLS".into()))?;
    let series = read_csv_frames(path, rows)?;
    if let Some(s) = shape {
        if series.shape().dims() != s {
            return Err(LiarError::Config(format!(
                "CSV frames are {:?}, --shape says {s:?}",
                series.shape().dims()
            )));
        }
    }
    Ok(series)
}

struct Run {
    dir: PathBuf,
    inputs: Vec<FileRecord>,
    outputs: Vec<PathBuf>,
    errors: Vec<ErrorRecord>,
    summary: BTreeMap<String, serde_json::Value>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(file_record(path)?);
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.outputs.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write_gts(&mut self, name: &str, series: &GridSeries) -> Result<()> {
        let path = self.dir.join(name);
        write_gts(series, &path)?;
        self.outputs.push(path);
        Ok(())
    }

    fn note<T: Serialize>(&mut self, key: &str, value: T) {
        self.summary.insert(key.into(), serde_json::to_value(value).unwrap_or_default());
    }
}

/// Parses nothing; runs an already parsed command line.
pub fn run(cli: &Cli) -> Result<Manifest> {
    let start = Instant::now();
    let mut cfg = cli.resolve()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| LiarError::Config(format!("cannot start {} threads: {e}", cfg.threads)))?;
    let mut run = Run {
        dir: cfg.output_dir.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        errors: Vec::new(),
        summary: BTreeMap::new(),
    };
    let series = match &cfg.input {
        Some(p) if cfg.command != Command::Simulate && cfg.command != Command::Bench => {
            run.input(p)?;
            Some(read_series(p, cfg.shape.as_deref())?)
        }
        _ => None,
    };
    if cfg.command == Command::Select && cfg.d0.is_none() {
        let t = series.as_ref().map_or(0, GridSeries::t_len);
        cfg.d0 = Some(default_d0(t)?);
        cfg.d0_source = Some("ln ln T");
    }
    run.write_json("config.json", &cfg)?;

    let result = pool.install(|| match cfg.command {
        Command::Simulate => cmd_simulate(&cfg, &mut run),
        Command::Select => cmd_select(&cfg, series.as_ref().expect("input read"), &mut run),
        Command::Fit => cmd_fit(&cfg, series.as_ref().expect("input read"), &mut run),
        Command::Spliar => cmd_spliar(&cfg, series.as_ref().expect("input read"), &mut run),
        Command::Forecast => cmd_forecast(&cfg, series.as_ref().expect("input read"), &mut run),
        Command::Eval => cmd_eval(&cfg, series.as_ref().expect("input read"), &mut run),
        Command::Bench => cmd_bench(&cfg, &mut run),
    });
    if let Err(e) = result {
        run.errors.push(error_record(&e));
    }
    let outputs = run
        .outputs
        .iter()
        .map(|p| file_record(p))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        command: cfg.command,
        inputs: run.inputs,
        outputs,
        errors: run.errors,
        wall_seconds: start.elapsed().as_secs_f64(),
        peak_rss_kb: peak_rss_kb(),
        summary: run.summary,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(cfg.output_dir.join("manifest.json"), text)?;
    Ok(manifest)
}

fn cmd_simulate(cfg: &ResolvedConfig, run: &mut Run) -> Result<()> {
    let shape = Shape::new(cfg.shape.clone().expect("validated"))?;
    let radii = cfg.radii_for(shape.ndim())?;
    let kernels = random_stable_box_kernels(&shape, &radii, cfg.lags, cfg.target_norm, cfg.seed)?;
    let series = simulate_liar(&kernels, cfg.t_len.expect("validated"), cfg.burn_in, cfg.noise_spec())?;
    run.write_gts("series.gts", &series)?;
    run.write_json("kernels.json", &kernels.to_json())?;
    run.note("operator_norm", operator_norm(&kernels)?);
    Ok(())
}

fn site_header(ndim: usize) -> String {
    match ndim {
        2 => "row,col".into(),
        _ => (1..=ndim).map(|j| format!("i{j}")).collect::<Vec<_>>().join(","),
    }
}

/// One row per site (1-based coordinates) plus a success-rate row when the
/// true radius is known.
pub fn heatmap_csv(report: &SelectionReport, truth: Option<usize>) -> String {
    let ndim = report.shape.len();
    let mut out = format!("{},chosen_k", site_header(ndim));
    if truth.is_some() {
        out.push_str(",correct");
    }
    out.push('\n');
    for t in &report.traces {
        let coords: Vec<String> = t.site.iter().map(|c| (c + 1).to_string()).collect();
        let _ = write!(out, "{},{}", coords.join(","), t.chosen_k);
        if let Some(k) = truth {
            let _ = write!(out, ",{}", u8::from(t.chosen_k == k));
        }
        out.push('\n');
    }
    if let Some(k) = truth {
        let rate = report.success_rate(k, |_| true).unwrap_or(f64::NAN);
        let pad = ",".repeat(ndim);
        let _ = writeln!(out, "success_rate{pad},{rate}");
    }
    out
}

fn cmd_select(cfg: &ResolvedConfig, series: &GridSeries, run: &mut Run) -> Result<()> {
    let shape = series.shape();
    let candidates = match (&cfg.candidates, cfg.k0) {
        (Some(list), _) => Candidates::Radii(list.clone()),
        (None, Some(k0)) => Candidates::uniform(k0),
        (None, None) => unreachable!("validated"),
    };
    let report = select_all_with(series, &candidates, cfg.lags, cfg.d0, cfg.strategy.into())?;
    run.write_json("selection.json", &report)?;
    run.write("heatmap.csv", heatmap_csv(&report, cfg.k).as_bytes())?;
    run.note("D0", report.d0);
    if let Some(k) = cfg.k {
        let dims = shape.dims().to_vec();
        run.note("success_rate", report.success_rate(k, |_| true));
        run.note("success_rate_interior", report.success_rate(k, |s| is_interior(s, &dims, k)));
        run.note("success_rate_boundary", report.success_rate(k, |s| !is_interior(s, &dims, k)));
    }
    for f in &report.failures {
        run.errors.push(ErrorRecord {
            class: "underdetermined",
            exit_code: 6,
            message: format!("site {:?}: {}", f.site, f.message),
        });
    }
    Ok(())
}

fn cmd_fit(cfg: &ResolvedConfig, series: &GridSeries, run: &mut Run) -> Result<()> {
    let shape = series.shape();
    let nbs: Vec<Neighborhood> = match &cfg.selection {
        Some(path) => {
            run.input(path)?;
            let report: SelectionReport = serde_json::from_slice(&fs::read(path)?)?;
            if report.shape != shape.dims() || !report.failures.is_empty() {
                return Err(LiarError::Config(format!(
                    "selection {} does not cover every site of this {:?} grid",
                    path.display(),
                    shape.dims()
                )));
            }
            report.chosen_neighborhoods()?
        }
        None => box_neighborhoods(shape, &cfg.radii_for(shape.ndim())?)?,
    };
    let report = fit_all_with(series, &nbs, cfg.lags, cfg.strategy.into())?;
    run.write_json("fit.json", &report.to_json())?;
    run.note("sites_fitted", report.fits.len());
    run.note("sites_failed", report.failures.len());
    run.note("cond_flags", report.fits.iter().filter(|f| f.cond_flag).count());
    if report.is_complete() {
        run.write_json("kernels.json", &report.to_kernels()?.to_json())?;
    }
    for f in &report.failures {
        run.errors.push(ErrorRecord {
            class: "underdetermined",
            exit_code: 6,
            message: format!("site {:?}: {}", f.site, f.message),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct SpliarSummary<'a> {
    #[serde(rename = "R")]
    rank: usize,
    radii: [usize; 2],
    singular_values: &'a [Vec<f64>],
    notes: &'a [String],
    unprojected_distance: f64,
}

fn cmd_spliar(cfg: &ResolvedConfig, series: &GridSeries, run: &mut Run) -> Result<()> {
    let radii = cfg.radii_for(series.shape().ndim())?;
    if radii.len() != 2 {
        return Err(LiarError::Structure("spliar needs a matrix grid".into()));
    }
    let fit = fit_spliar(series, radii[0], radii[1], cfg.lags, cfg.rank.expect("validated"))?;
    run.write_json("kernels.json", &fit.kernels.to_json())?;
    run.write_json("unprojected_kernels.json", &fit.unprojected.to_json())?;
    for (p, b) in fit.blocks.iter().enumerate() {
        run.write_gts(&format!("block_lag{}.gts", p + 1), &b.to_series()?)?;
    }
    run.write_json(
        "spliar.json",
        &SpliarSummary {
            rank: fit.rank,
            radii: [radii[0], radii[1]],
            singular_values: &fit.singular_values,
            notes: &fit.notes,
            unprojected_distance: fit.kernels.frobenius_distance(&fit.unprojected)?,
        },
    )?;
    Ok(())
}

fn cmd_forecast(cfg: &ResolvedConfig, series: &GridSeries, run: &mut Run) -> Result<()> {
    let kpath = cfg.kernels.as_ref().expect("validated");
    run.input(kpath)?;
    let kernels = KernelField::read_json(kpath)?;
    let result = match &cfg.truth {
        Some(tpath) => {
            run.input(tpath)?;
            let truth = read_series(tpath, cfg.shape.as_deref())?;
            let truth = match cfg.horizon {
                Some(h) if h < truth.t_len() => truth.slice(0, h)?,
                _ => truth,
            };
            forecast_against(series, &kernels, &truth)?
        }
        None => forecast(series, &kernels, cfg.horizon.expect("validated"))?,
    };
    run.write_gts("forecast.gts", &result.predicted)?;
    run.note("horizon", result.horizon);
    if let Some(r) = result.rmse {
        run.note("rmse", r);
        run.note("frame_rmse", &result.frame_rmse);
    }
    Ok(())
}

fn cmd_eval(cfg: &ResolvedConfig, series: &GridSeries, run: &mut Run) -> Result<()> {
    let methods: Vec<Method> = cfg.methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?;
    let compare = CompareConfig {
        lags: cfg.lags,
        k: cfg.k.or(cfg.radii.as_ref().and_then(|r| r.first().copied())).unwrap_or(0),
        rank: cfg.rank.unwrap_or(1),
        train_fraction: cfg.train_fraction,
        seed: cfg.seed,
    };
    let (train, test) = series.split_prefix(cfg.train_fraction)?;
    run.note("train_frames", train.t_len());
    run.note("test_frames", test.t_len());
    let rows = compare_methods(series, &methods, &compare)?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &rows)?;
    run.write("metrics.csv", &csv)?;
    Ok(())
}

/// Wall-clock seconds of a full box fit, the minimum over `repeats` runs.
fn time_fit(series: &GridSeries, radii: &[usize], lags: usize, strategy: FitStrategy, repeats: usize) -> Result<f64> {
    let nbs = box_neighborhoods(series.shape(), radii)?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        let report = fit_all_with(series, &nbs, lags, strategy)?;
        best = best.min(start.elapsed().as_secs_f64());
        if !report.is_complete() {
            return Err(LiarError::Underdetermined {
                rows: series.t_len().saturating_sub(lags),
                cols: lags * nbs.iter().map(Neighborhood::len).max().unwrap_or(0),
                context: "bench fit".into(),
            });
        }
    }
    Ok(best)
}

fn cmd_bench(cfg: &ResolvedConfig, run: &mut Run) -> Result<()> {
    let base = cfg.shape.clone().expect("validated");
    let doubled: Vec<usize> = base.iter().map(|&d| 2 * d).collect();
    let radii = cfg.radii_for(base.len())?;
    // Scaling is measured per site, so the shared factorization (whose cost
    // grows with the square of the grid) is not used unless asked for.
    let strategy = match cfg.strategy {
        StrategyArg::Auto => FitStrategy::Direct,
        s => s.into(),
    };
    let mut csv = String::from("shape,sites,T,K,fit_seconds\n");
    let mut times = Vec::new();
    for dims in [&base, &doubled] {
        let shape = Shape::new(dims.clone())?;
        let kernels = random_stable_box_kernels(&shape, &radii, cfg.lags, cfg.target_norm, cfg.seed)?;
        let series = simulate_liar(&kernels, cfg.t_len.expect("validated"), cfg.burn_in, cfg.noise_spec())?;
        let secs = time_fit(&series, &radii, cfg.lags, strategy, cfg.repeats)?;
        let label: Vec<String> = dims.iter().map(usize::to_string).collect();
        let k: Vec<String> = radii.iter().map(usize::to_string).collect();
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            label.join("x"),
            shape.len(),
            series.t_len(),
            k.join("x"),
            secs
        );
        times.push(secs);
    }
    let ratio = times[1] / times[0];
    let _ = writeln!(csv, "# doubling ratio {ratio} (limit {BENCH_RATIO_LIMIT})");
    run.write("bench.csv", csv.as_bytes())?;
    run.note("doubling_ratio", ratio);
    run.note("ratio_within_limit", ratio <= BENCH_RATIO_LIMIT);
    Ok(())
}

/// Entry point used by the binary: returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(m) => {
            for e in &m.errors {
                eprintln!("liar: {}", e.message);
            }
            m.exit_code()
        }
        Err(e) => {
            eprintln!("liar: {e}");
            e.exit_code()
        }
    }
}
