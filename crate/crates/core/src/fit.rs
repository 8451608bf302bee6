//! Per-site least squares over local neighborhoods.
//!
//! Each site regresses its value at time `t` on the lag `1..=P` values of its
//! neighborhood. Sites are independent and are fitted in parallel; results are
//! merged in linear site order and do not depend on the worker count.
//!
//! Two interchangeable backends produce the per-site problems. `Direct` builds
//! each `(T - P) x P|J|` design from the series. `SharedQr` factors the
//! matrix of all lagged and current frames once, `W = QR`; since every design
//! column and response is a column of `W`, each site's problem reduces to the
//! matching columns of `R`, which has at most `(P + 1) * n_sites` rows.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LiarError, Result};
use crate::grid::{GridSeries, Shape, SiteIndex};
use crate::kernel::{KernelField, SiteKernel};
use crate::linalg::{least_squares, LsSolution};
use crate::neighborhood::Neighborhood;

/// Above this many bytes the shared factorization is never attempted.
const SHARED_QR_MAX_BYTES: usize = 256 << 20;

/// Regression of one site: `z = Y m + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlock {
    /// Row `r` holds the lag-1..P patches of frames `t-1..t-P`, `t = P + r`.
    pub y: DMatrix<f64>,
    pub z: DVector<f64>,
    pub site: SiteIndex,
    pub neighborhood: Neighborhood,
    pub lags: usize,
}

pub fn assemble_design(
    series: &GridSeries,
    neighborhood: &Neighborhood,
    lags: usize,
) -> Result<DesignBlock> {
    check_identifiable(series.t_len(), lags, neighborhood.len(), neighborhood.center())?;
    let rows = series.t_len() - lags;
    let cols: Vec<(usize, usize)> = canonical_columns(neighborhood, lags);
    let (y, z) = direct_problem(series, lags, neighborhood.center_linear(), &cols);
    debug_assert_eq!(y.nrows(), rows);
    Ok(DesignBlock {
        y,
        z,
        site: neighborhood.center().clone(),
        neighborhood: neighborhood.clone(),
        lags,
    })
}

pub(crate) fn check_identifiable(
    t_len: usize,
    lags: usize,
    size: usize,
    site: &SiteIndex,
) -> Result<()> {
    if lags == 0 {
        return Err(LiarError::Config("lag order P must be at least 1".into()));
    }
    let rows = t_len.saturating_sub(lags);
    let cols = lags * size;
    if t_len <= lags || rows < cols {
        return Err(LiarError::Underdetermined {
            rows,
            cols,
            context: format!("site {:?}, T = {t_len}, P = {lags}", site.coords()),
        });
    }
    Ok(())
}

/// `(lag, site)` pairs in design order: lag-major, sites in linear order.
pub(crate) fn canonical_columns(nb: &Neighborhood, lags: usize) -> Vec<(usize, usize)> {
    (1..=lags)
        .flat_map(|p| nb.sites().iter().map(move |&j| (p, j)))
        .collect()
}

fn direct_problem(
    series: &GridSeries,
    lags: usize,
    site: usize,
    cols: &[(usize, usize)],
) -> (DMatrix<f64>, DVector<f64>) {
    let n = series.n_sites();
    let rows = series.t_len() - lags;
    let v = series.values();
    let mut y = DMatrix::zeros(rows, cols.len());
    for (c, &(p, j)) in cols.iter().enumerate() {
        let col = y.column_mut(c);
        for (r, out) in col.into_iter().enumerate() {
            *out = v[(r + lags - p) * n + j];
        }
    }
    let z = DVector::from_iterator(rows, (lags..series.t_len()).map(|t| v[t * n + site]));
    (y, z)
}

/// Estimated kernel of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFit {
    pub site: SiteIndex,
    pub neighborhood: Neighborhood,
    pub lags: usize,
    /// Stacked lag-1..P coefficient vectors, each aligned to the neighborhood.
    pub coeffs: Vec<f64>,
    pub rss: f64,
    /// `rss / (rows - cols)`; 0 when the design is square.
    pub sigma2_hat: f64,
    pub se: Option<Vec<f64>>,
    /// Near-singular design; coefficients are the minimum-norm solution.
    pub cond_flag: bool,
}

impl SiteFit {
    fn from_solution(
        nb: &Neighborhood,
        lags: usize,
        rows: usize,
        sol: LsSolution,
    ) -> Self {
        let cols = sol.coeffs.len();
        let sigma2_hat = if rows > cols {
            sol.rss / (rows - cols) as f64
        } else {
            0.0
        };
        let se = sol
            .gram_inv_diag
            .map(|d| d.iter().map(|g| (sigma2_hat * g).sqrt()).collect());
        SiteFit {
            site: nb.center().clone(),
            neighborhood: nb.clone(),
            lags,
            coeffs: sol.coeffs,
            rss: sol.rss,
            sigma2_hat,
            se,
            cond_flag: sol.rank_deficient,
        }
    }

    pub fn coeffs_by_lag(&self) -> Vec<Vec<f64>> {
        self.coeffs
            .chunks(self.neighborhood.len())
            .map(<[f64]>::to_vec)
            .collect()
    }
}

pub fn fit_site(design: &DesignBlock) -> SiteFit {
    let sol = least_squares(&design.y, &design.z, true);
    SiteFit::from_solution(&design.neighborhood, design.lags, design.y.nrows(), sol)
}

/// Plug-in standard errors `sqrt(sigma2_hat * [(Y^T Y)^-1]_jj)`.
pub fn standard_errors(fit: &SiteFit, design: &DesignBlock) -> Result<Vec<f64>> {
    if fit.cond_flag {
        return Err(LiarError::Numerical(format!(
            "standard errors omitted for site {:?}: rank-deficient design",
            fit.site.coords()
        )));
    }
    let sol = least_squares(&design.y, &design.z, true);
    let diag = sol.gram_inv_diag.ok_or_else(|| {
        LiarError::Numerical(format!(
            "standard errors omitted for site {:?}: rank-deficient design",
            fit.site.coords()
        ))
    })?;
    Ok(diag.iter().map(|g| (fit.sigma2_hat * g).sqrt()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStrategy {
    /// Pick the cheaper backend from a flop estimate.
    #[default]
    Auto,
    Direct,
    SharedQr,
}

/// Produces per-site least-squares problems from one series.
pub(crate) struct SiteProblems<'a> {
    series: &'a GridSeries,
    lags: usize,
    shared_r: Option<DMatrix<f64>>,
}

impl<'a> SiteProblems<'a> {
    /// `widths` are the design widths (columns) the caller will request.
    pub(crate) fn new(
        series: &'a GridSeries,
        lags: usize,
        strategy: FitStrategy,
        widths: impl Iterator<Item = usize>,
    ) -> Self {
        let n = series.n_sites();
        let rows = series.t_len().saturating_sub(lags);
        let w = (lags + 1) * n;
        let use_shared = match strategy {
            FitStrategy::Direct => false,
            FitStrategy::SharedQr => true,
            FitStrategy::Auto => {
                let fits_memory = rows
                    .checked_mul(w)
                    .and_then(|e| e.checked_mul(8))
                    .is_some_and(|b| b <= SHARED_QR_MAX_BYTES);
                let sq: f64 = widths.map(|c| (c * c) as f64).sum();
                let direct = rows as f64 * sq;
                let shared = rows as f64 * (w * w) as f64 + rows.min(w) as f64 * sq;
                fits_memory && rows > w && shared < 0.5 * direct
            }
        };
        let shared_r = (use_shared && rows > 0).then(|| {
            let v = series.values();
            let wmat = DMatrix::from_fn(rows, w, |r, c| {
                let (block, j) = (c / n, c % n);
                // Blocks 0..P are lags 1..P; block P is the response frame.
                let t = if block < lags { r + lags - 1 - block } else { r + lags };
                v[t * n + j]
            });
            wmat.qr().unpack_r()
        });
        SiteProblems {
            series,
            lags,
            shared_r,
        }
    }

    pub(crate) fn rows(&self) -> usize {
        self.series.t_len() - self.lags
    }

    /// Design and response for `site` with the given `(lag, site)` columns.
    pub(crate) fn problem(&self, site: usize, cols: &[(usize, usize)]) -> (DMatrix<f64>, DVector<f64>) {
        match &self.shared_r {
            None => direct_problem(self.series, self.lags, site, cols),
            Some(r) => {
                let n = self.series.n_sites();
                let idx = |p: usize, j: usize| (p - 1) * n + j;
                let zcol = self.lags * n + site;
                let last = cols.iter().map(|&(p, j)| idx(p, j)).max().unwrap_or(0).max(zcol);
                let used = (last + 1).min(r.nrows());
                let y = DMatrix::from_fn(used, cols.len(), |row, c| {
                    let (p, j) = cols[c];
                    r[(row, idx(p, j))]
                });
                let z = DVector::from_fn(used, |row, _| r[(row, zcol)]);
                (y, z)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFailure {
    pub site: Vec<usize>,
    pub message: String,
}

/// Fits of every site in linear order, plus the sites that failed.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub shape: Shape,
    pub lags: usize,
    pub t_len: usize,
    pub fits: Vec<SiteFit>,
    pub failures: Vec<SiteFailure>,
}

pub fn fit_all(series: &GridSeries, neighborhoods: &[Neighborhood], lags: usize) -> Result<FitReport> {
    fit_all_with(series, neighborhoods, lags, FitStrategy::Auto)
}

pub fn fit_all_with(
    series: &GridSeries,
    neighborhoods: &[Neighborhood],
    lags: usize,
    strategy: FitStrategy,
) -> Result<FitReport> {
    if lags == 0 {
        return Err(LiarError::Config("lag order P must be at least 1".into()));
    }
    if neighborhoods.len() != series.n_sites() {
        return Err(LiarError::Structure(format!(
            "{} neighborhoods for {} sites",
            neighborhoods.len(),
            series.n_sites()
        )));
    }
    for (i, nb) in neighborhoods.iter().enumerate() {
        if nb.center_linear() != i {
            return Err(LiarError::Structure(format!(
                "neighborhood {i} is centered at {:?}",
                nb.center().coords()
            )));
        }
        if nb.sites().last().is_some_and(|&s| s >= series.n_sites()) {
            return Err(LiarError::Index(format!("neighborhood {i} leaves the grid")));
        }
    }
    let problems = SiteProblems::new(
        series,
        lags,
        strategy,
        neighborhoods.iter().map(|nb| lags * nb.len()),
    );
    let results: Vec<Result<SiteFit>> = neighborhoods
        .par_iter()
        .map(|nb| {
            check_identifiable(series.t_len(), lags, nb.len(), nb.center())?;
            let cols = canonical_columns(nb, lags);
            let (y, z) = problems.problem(nb.center_linear(), &cols);
            let sol = least_squares(&y, &z, true);
            Ok(SiteFit::from_solution(nb, lags, problems.rows(), sol))
        })
        .collect();
    let mut fits = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (nb, r) in neighborhoods.iter().zip(results) {
        match r {
            Ok(f) => fits.push(f),
            Err(e) => failures.push(SiteFailure {
                site: nb.center().0.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(FitReport {
        shape: series.shape().clone(),
        lags,
        t_len: series.t_len(),
        fits,
        failures,
    })
}

/// Uniform clipped boxes of the given radii around every site.
pub fn box_neighborhoods(shape: &Shape, radii: &[usize]) -> Result<Vec<Neighborhood>> {
    shape
        .sites()
        .map(|s| Neighborhood::boxed(&s, shape, radii))
        .collect()
}

impl FitReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn to_kernels(&self) -> Result<KernelField> {
        if !self.failures.is_empty() {
            return Err(LiarError::Structure(format!(
                "{} sites failed to fit; first: {:?}",
                self.failures.len(),
                self.failures[0]
            )));
        }
        let sites = self
            .fits
            .iter()
            .map(|f| SiteKernel {
                neighborhood: f.neighborhood.clone(),
                coeffs: f.coeffs_by_lag(),
            })
            .collect();
        KernelField::new(self.shape.clone(), self.lags, sites)
    }

    pub fn to_json(&self) -> FitReportJson {
        FitReportJson {
            shape: self.shape.dims().to_vec(),
            lags: self.lags,
            t_len: self.t_len,
            sites: self
                .fits
                .iter()
                .map(|f| {
                    let radius = f.neighborhood.radius();
                    let uniform = radius.and_then(|r| r.iter().all(|&x| x == r[0]).then(|| r[0]));
                    SiteFitJson {
                        center: f.site.0.clone(),
                        k: uniform,
                        radius: if uniform.is_none() { radius.map(<[usize]>::to_vec) } else { None },
                        sites: radius.is_none().then(|| {
                            f.neighborhood
                                .site_indices(&self.shape)
                                .into_iter()
                                .map(|s| s.0)
                                .collect()
                        }),
                        coeffs: f.coeffs_by_lag(),
                        rss: f.rss,
                        sigma2: f.sigma2_hat,
                        se: f.se.as_ref().map(|se| {
                            se.chunks(f.neighborhood.len()).map(<[f64]>::to_vec).collect()
                        }),
                        cond_flag: f.cond_flag,
                    }
                })
                .collect(),
            failures: self.failures.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteFitJson {
    pub center: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub radius: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sites: Option<Vec<Vec<usize>>>,
    pub coeffs: Vec<Vec<f64>>,
    pub rss: f64,
    pub sigma2: f64,
    pub se: Option<Vec<Vec<f64>>>,
    pub cond_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReportJson {
    pub shape: Vec<usize>,
    #[serde(rename = "P")]
    pub lags: usize,
    #[serde(rename = "T")]
    pub t_len: usize,
    pub sites: Vec<SiteFitJson>,
    pub failures: Vec<SiteFailure>,
}
