//! Forecasts, error metrics, lag-0 auto-covariance, and baselines.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LiarError, Result};
use crate::fit::{box_neighborhoods, fit_all};
use crate::grid::{GridSeries, Shape};
use crate::kernel::{KernelField, SiteKernel};
use crate::linalg::RANK_TOL;
use crate::neighborhood::Neighborhood;

/// Dense auto-covariance requests above this many entries are refused.
pub const AUTOCOV_MAX_ENTRIES: usize = 4_000_000;

/// Anything that predicts the next frame from the recent past.
pub trait OneStepPredictor {
    fn shape(&self) -> &Shape;
    fn lags(&self) -> usize;
    /// `recent[p - 1]` is the frame `p` steps before the predicted one.
    fn predict(&self, recent: &[&[f64]], out: &mut [f64]);
}

impl OneStepPredictor for KernelField {
    fn shape(&self) -> &Shape {
        KernelField::shape(self)
    }

    fn lags(&self) -> usize {
        KernelField::lags(self)
    }

    fn predict(&self, recent: &[&[f64]], out: &mut [f64]) {
        let sites = self.sites();
        let f = |(x, k): (&mut f64, &SiteKernel)| {
            *x = recent
                .iter()
                .zip(&k.coeffs)
                .map(|(frame, m)| crate::kernel::dot_on(m, k.neighborhood.sites(), frame))
                .sum();
        };
        if out.len() >= 4096 {
            out.par_iter_mut().zip(sites.par_iter()).with_min_len(256).for_each(f);
        } else {
            out.iter_mut().zip(sites.iter()).for_each(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub horizon: usize,
    /// `horizon` predicted frames.
    pub predicted: GridSeries,
    pub frame_rmse: Option<Vec<f64>>,
    pub rmse: Option<f64>,
}

fn check_shape(model: &Shape, series: &Shape) -> Result<()> {
    if model != series {
        return Err(LiarError::Config(format!(
            "model shape {:?} does not match series shape {:?}",
            model.dims(),
            series.dims()
        )));
    }
    Ok(())
}

/// Iterated conditional-mean forecast of the `h` frames after the series.
pub fn forecast<M: OneStepPredictor + ?Sized>(
    series: &GridSeries,
    model: &M,
    h: usize,
) -> Result<ForecastResult> {
    check_shape(model.shape(), series.shape())?;
    if h == 0 {
        return Err(LiarError::Config("forecast horizon must be at least 1".into()));
    }
    let lags = model.lags();
    if series.t_len() < lags {
        return Err(LiarError::Config(format!(
            "forecasting needs at least P = {lags} frames, got {}",
            series.t_len()
        )));
    }
    let n = series.n_sites();
    // Last `lags` observed frames followed by the forecasts.
    let mut frames: Vec<Vec<f64>> = (series.t_len() - lags..series.t_len())
        .map(|t| series.frame(t).to_vec())
        .collect();
    for _ in 0..h {
        let len = frames.len();
        let recent: Vec<&[f64]> = (1..=lags).map(|p| frames[len - p].as_slice()).collect();
        let mut next = vec![0.0; n];
        model.predict(&recent, &mut next);
        frames.push(next);
    }
    let predicted = GridSeries::from_frames(series.shape().clone(), &frames[lags..])?;
    Ok(ForecastResult {
        horizon: h,
        predicted,
        frame_rmse: None,
        rmse: None,
    })
}

/// Forecasts `truth.t_len()` frames past `history` and scores them.
pub fn forecast_against<M: OneStepPredictor + ?Sized>(
    history: &GridSeries,
    model: &M,
    truth: &GridSeries,
) -> Result<ForecastResult> {
    let mut result = forecast(history, model, truth.t_len())?;
    let frame_rmse = (0..truth.t_len())
        .map(|t| rmse(result.predicted.frame(t), truth.frame(t)))
        .collect::<Result<Vec<_>>>()?;
    result.rmse = Some(rmse(result.predicted.values(), truth.values())?);
    result.frame_rmse = Some(frame_rmse);
    Ok(result)
}

/// RMSE of one-step-ahead predictions of every test frame, each made from
/// the observed frames before it (the tail of `train` for the first ones).
pub fn one_step_rmse<M: OneStepPredictor + ?Sized>(
    train: &GridSeries,
    test: &GridSeries,
    model: &M,
) -> Result<f64> {
    check_shape(model.shape(), train.shape())?;
    check_shape(model.shape(), test.shape())?;
    let lags = model.lags();
    if train.t_len() < lags {
        return Err(LiarError::Config(format!(
            "need at least P = {lags} training frames, got {}",
            train.t_len()
        )));
    }
    let frame = |t: usize| -> &[f64] {
        if t < train.t_len() {
            train.frame(t)
        } else {
            test.frame(t - train.t_len())
        }
    };
    let n = test.n_sites();
    let mut pred = vec![0.0; n];
    let mut sse = 0.0;
    for t in train.t_len()..train.t_len() + test.t_len() {
        let recent: Vec<&[f64]> = (1..=lags).map(|p| frame(t - p)).collect();
        model.predict(&recent, &mut pred);
        sse += pred.iter().zip(frame(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((sse / (n * test.t_len()).max(1) as f64).sqrt())
}

/// `sqrt(mean((pred - truth)^2))`.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(LiarError::Structure(format!(
            "rmse of {} predictions against {} values",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(LiarError::Structure("rmse of an empty set".into()));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoCovEstimate {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `values[(a, b)] = (1/T) sum_t X_t[rows[a]] X_t[cols[b]]`.
    pub values: DMatrix<f64>,
}

fn check_request(rows: &[usize], cols: &[usize], n: usize) -> Result<()> {
    let entries = rows.len().saturating_mul(cols.len());
    if entries > AUTOCOV_MAX_ENTRIES {
        return Err(LiarError::Size(format!(
            "{} x {} auto-covariance block exceeds {AUTOCOV_MAX_ENTRIES} entries; request sub-blocks",
            rows.len(),
            cols.len()
        )));
    }
    if let Some(&bad) = rows.iter().chain(cols).find(|&&s| s >= n) {
        return Err(LiarError::Index(format!("site {bad} outside a grid of {n} sites")));
    }
    Ok(())
}

/// Lag-0 sample second moments between two site lists.
pub fn autocov(series: &GridSeries, rows: &[usize], cols: &[usize]) -> Result<AutoCovEstimate> {
    let mut acc = AutoCovAccumulator::new(series.n_sites(), rows.to_vec(), cols.to_vec())?;
    for f in series.frames() {
        acc.push(f);
    }
    acc.finish()
}

/// Streaming form of [`autocov`] for series too long to hold in memory.
#[derive(Debug, Clone)]
pub struct AutoCovAccumulator {
    n: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    sums: DMatrix<f64>,
    count: usize,
}

impl AutoCovAccumulator {
    pub fn new(n_sites: usize, rows: Vec<usize>, cols: Vec<usize>) -> Result<Self> {
        check_request(&rows, &cols, n_sites)?;
        let sums = DMatrix::zeros(rows.len(), cols.len());
        Ok(AutoCovAccumulator {
            n: n_sites,
            rows,
            cols,
            sums,
            count: 0,
        })
    }

    pub fn push(&mut self, frame: &[f64]) {
        debug_assert_eq!(frame.len(), self.n);
        let (rows, cols) = (&self.rows, &self.cols);
        let xr: Vec<f64> = rows.iter().map(|&i| frame[i]).collect();
        let xc: Vec<f64> = cols.iter().map(|&j| frame[j]).collect();
        for (b, &c) in xc.iter().enumerate() {
            let col = self.sums.column_mut(b);
            for (s, &r) in col.into_iter().zip(&xr) {
                *s += r * c;
            }
        }
        self.count += 1;
    }

    pub fn finish(self) -> Result<AutoCovEstimate> {
        if self.count == 0 {
            return Err(LiarError::Config("auto-covariance of zero frames".into()));
        }
        Ok(AutoCovEstimate {
            values: self.sums / self.count as f64,
            rows: self.rows,
            cols: self.cols,
        })
    }
}

/// Pixel-wise AR(P): every neighborhood is the site itself.
pub fn baseline_pixel_ar(series: &GridSeries, lags: usize) -> Result<KernelField> {
    if series.t_len() <= 2 * lags {
        return Err(LiarError::Config(format!(
            "pixel AR needs T > 2P, got T = {}, P = {lags}",
            series.t_len()
        )));
    }
    let nbs = box_neighborhoods(series.shape(), &vec![0; series.shape().ndim()])?;
    fit_all(series, &nbs, lags)?.to_kernels()
}

pub const MAR_MAX_ITER: usize = 50;
pub const MAR_TOL: f64 = 1e-7;
const MAR_RIDGE: f64 = 1e-10;

/// `X_t = sum_p A_p X_{t-p} B_p^T`, fitted by alternating least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct MarFit {
    pub shape: Shape,
    pub a: Vec<DMatrix<f64>>,
    /// Each `B_p` has unit Frobenius norm.
    pub b: Vec<DMatrix<f64>>,
    /// Residual sum of squares after each iteration.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    /// Some subproblem was singular and solved with a small ridge.
    pub ridge_flag: bool,
}

/// Solves `min ||Y - Z C||_F` over `C` for tall `Z` by QR, falling back to a
/// tiny ridge when `Z` is numerically singular. Returns `(C, ridged)`.
fn solve_multi(z: &DMatrix<f64>, y: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let c = z.ncols();
    let qr = z.clone().qr();
    let r = qr.r();
    let (lo, hi) = (0..c).fold((f64::INFINITY, 0.0f64), |(lo, hi), j| {
        let d = r[(j, j)].abs();
        (lo.min(d), hi.max(d))
    });
    if hi > 0.0 && lo >= RANK_TOL * hi && z.nrows() >= c {
        let mut qty = y.clone();
        qr.q_tr_mul(&mut qty);
        let top = qty.rows(0, c).into_owned();
        let sol = r.solve_upper_triangular(&top).expect("nonzero diagonal");
        return (sol, false);
    }
    let mut gram = z.transpose() * z;
    let scale = gram.diagonal().max().max(1.0);
    for j in 0..c {
        gram[(j, j)] += MAR_RIDGE * scale;
    }
    let rhs = z.transpose() * y;
    let sol = gram
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| DMatrix::zeros(c, y.ncols()));
    (sol, true)
}

pub fn baseline_mar_als(series: &GridSeries, lags: usize, max_iter: usize, tol: f64) -> Result<MarFit> {
    let (m, n) = match series.shape().dims() {
        &[m, n] => (m, n),
        d => {
            return Err(LiarError::Structure(format!(
                "MAR needs a matrix grid, got shape {d:?}"
            )))
        }
    };
    if lags == 0 || max_iter == 0 || tol.is_nan() || tol <= 0.0 {
        return Err(LiarError::Config(format!(
            "MAR needs P >= 1, max_iter >= 1, tol > 0 (got {lags}, {max_iter}, {tol})"
        )));
    }
    let t_len = series.t_len();
    if t_len <= lags {
        return Err(LiarError::Underdetermined {
            rows: 0,
            cols: lags * m.max(n),
            context: format!("MAR with T = {t_len}, P = {lags}"),
        });
    }
    let frames: Vec<DMatrix<f64>> = series
        .frames()
        .map(|f| DMatrix::from_column_slice(m, n, f))
        .collect();
    let steps = t_len - lags;
    let mut a = vec![DMatrix::<f64>::zeros(m, m); lags];
    let mut b = vec![DMatrix::<f64>::identity(n, n) / (n as f64).sqrt(); lags];
    let mut ridge_flag = false;
    let mut loss_trace: Vec<f64> = Vec::new();
    let mut converged = false;

    let loss = |a: &[DMatrix<f64>], b: &[DMatrix<f64>]| -> f64 {
        (lags..t_len)
            .map(|t| {
                let mut r = frames[t].clone();
                for p in 0..lags {
                    r -= &a[p] * &frames[t - p - 1] * b[p].transpose();
                }
                r.norm_squared()
            })
            .sum()
    };

    for _ in 0..max_iter {
        // A-step: X_t^T = sum_p (X_{t-p} B_p^T)^T A_p^T, stacked over t.
        let mut z = DMatrix::zeros(steps * n, lags * m);
        let mut y = DMatrix::zeros(steps * n, m);
        for (s, t) in (lags..t_len).enumerate() {
            y.view_mut((s * n, 0), (n, m)).copy_from(&frames[t].transpose());
            for p in 0..lags {
                let w = (&frames[t - p - 1] * b[p].transpose()).transpose();
                z.view_mut((s * n, p * m), (n, m)).copy_from(&w);
            }
        }
        let (sol, ridged) = solve_multi(&z, &y);
        ridge_flag |= ridged;
        for (p, ap) in a.iter_mut().enumerate() {
            *ap = sol.rows(p * m, m).transpose();
        }
        // B-step: X_t = sum_p (A_p X_{t-p}) B_p^T, stacked over t.
        let mut z = DMatrix::zeros(steps * m, lags * n);
        let mut y = DMatrix::zeros(steps * m, n);
        for (s, t) in (lags..t_len).enumerate() {
            y.view_mut((s * m, 0), (m, n)).copy_from(&frames[t]);
            for p in 0..lags {
                let w = &a[p] * &frames[t - p - 1];
                z.view_mut((s * m, p * n), (m, n)).copy_from(&w);
            }
        }
        let (sol, ridged) = solve_multi(&z, &y);
        ridge_flag |= ridged;
        for p in 0..lags {
            b[p] = sol.rows(p * n, n).transpose();
            let s = b[p].norm();
            if s > 0.0 {
                b[p] /= s;
                a[p] *= s;
            }
        }
        let l = loss(&a, &b);
        let done = match loss_trace.last() {
            _ if l == 0.0 => true,
            Some(&prev) => (prev - l).abs() <= tol * prev,
            None => false,
        };
        loss_trace.push(l);
        if done {
            converged = true;
            break;
        }
    }
    Ok(MarFit {
        shape: series.shape().clone(),
        a,
        b,
        loss_trace,
        converged,
        ridge_flag,
    })
}

impl OneStepPredictor for MarFit {
    fn shape(&self) -> &Shape {
        &self.shape
    }

    fn lags(&self) -> usize {
        self.a.len()
    }

    fn predict(&self, recent: &[&[f64]], out: &mut [f64]) {
        let (m, n) = (self.a[0].nrows(), self.b[0].nrows());
        let mut acc = DMatrix::zeros(m, n);
        for ((a, b), x) in self.a.iter().zip(&self.b).zip(recent) {
            acc += a * DMatrix::from_column_slice(m, n, x) * b.transpose();
        }
        out.copy_from_slice(acc.as_slice());
    }
}

impl MarFit {
    /// The fit as a kernel field on full-grid neighborhoods.
    pub fn to_kernels(&self) -> Result<KernelField> {
        let shape = &self.shape;
        let sites = shape
            .sites()
            .map(|s| {
                let nb = Neighborhood::full(&s, shape)?;
                let c = s.coords();
                let coeffs = self
                    .a
                    .iter()
                    .zip(&self.b)
                    .map(|(a, b)| {
                        shape
                            .sites()
                            .map(|u| a[(c[0], u.coords()[0])] * b[(c[1], u.coords()[1])])
                            .collect()
                    })
                    .collect();
                Ok(SiteKernel { neighborhood: nb, coeffs })
            })
            .collect::<Result<Vec<_>>>()?;
        KernelField::new(shape.clone(), self.a.len(), sites)
    }
}

/// One line of a method comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    #[serde(rename = "T")]
    pub t_len: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub rmse: f64,
    pub fit_seconds: f64,
}

pub const METRICS_HEADER: &str = "method,seed,T,K,rmse,fit_seconds";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", r.method, r.seed, r.t_len, k, r.rmse, r.fit_seconds)?;
    }
    Ok(())
}

/// Methods compared by [`compare_methods`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Box neighborhoods of a fixed radius.
    Liar,
    /// Self-only neighborhoods.
    LiarP,
    /// Rank-`R` separable projection of the box fit.
    SpLiar,
    /// Global bilinear model by alternating least squares.
    Mar,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Liar => "liar",
            Method::LiarP => "liar_p",
            Method::SpLiar => "spliar",
            Method::Mar => "mar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "liar" => Ok(Method::Liar),
            "liar_p" | "liar-p" | "liarp" => Ok(Method::LiarP),
            "spliar" | "sp-liar" | "sp_liar" => Ok(Method::SpLiar),
            "mar" | "mar-als" | "mar_als" => Ok(Method::Mar),
            other => Err(LiarError::Config(format!(
                "unknown method {other:?}; expected liar, liar_p, spliar or mar"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub lags: usize,
    /// Box radius for `Liar` and `SpLiar`.
    pub k: usize,
    pub rank: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

/// Fits every method on the training prefix and scores one-step forecasts
/// on the rest.
pub fn compare_methods(series: &GridSeries, methods: &[Method], cfg: &CompareConfig) -> Result<Vec<MetricsRow>> {
    let (train, test) = series.split_prefix(cfg.train_fraction)?;
    if test.t_len() == 0 {
        return Err(LiarError::Config(format!(
            "train fraction {} leaves no test frames",
            cfg.train_fraction
        )));
    }
    let radii = |k| vec![k; series.shape().ndim()];
    methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let (model, k): (Box<dyn OneStepPredictor>, Option<usize>) = match method {
                Method::Liar => {
                    let nbs = box_neighborhoods(train.shape(), &radii(cfg.k))?;
                    (Box::new(fit_all(&train, &nbs, cfg.lags)?.to_kernels()?), Some(cfg.k))
                }
                Method::LiarP => (Box::new(baseline_pixel_ar(&train, cfg.lags)?), Some(0)),
                Method::SpLiar => {
                    let fit = crate::separable::fit_spliar(&train, cfg.k, cfg.k, cfg.lags, cfg.rank)?;
                    (Box::new(fit.kernels), Some(cfg.k))
                }
                Method::Mar => (
                    Box::new(baseline_mar_als(&train, cfg.lags, MAR_MAX_ITER, MAR_TOL)?),
                    None,
                ),
            };
            let fit_seconds = start.elapsed().as_secs_f64();
            Ok(MetricsRow {
                method: method.name().into(),
                seed: cfg.seed,
                t_len: series.t_len(),
                k,
                rmse: one_step_rmse(&train, &test, model.as_ref())?,
                fit_seconds,
            })
        })
        .collect()
}
