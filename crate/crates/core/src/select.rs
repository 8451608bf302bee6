//! BIC selection of neighborhood size over nested candidate families.
//!
//! For every site, each candidate level is scored by
//! `log(rss) + D0 * |J| * P / T * log(max(dims, T))` and the minimizer is
//! kept, with ties going to the smaller level. All levels of one site are
//! solved from a single QR factorization: the design columns are laid out
//! ring by ring, so each level is a column prefix of the largest design.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LiarError, Result};
use crate::fit::{check_identifiable, FitStrategy, SiteFailure, SiteProblems};
use crate::grid::{GridSeries, Shape, SiteIndex};
use crate::linalg::nested_least_squares;
use crate::neighborhood::{Neighborhood, NeighborhoodFamily};

/// An RSS at or below this fraction of `||z||^2` counts as an exact fit.
pub const EXACT_FIT_REL: f64 = 1e-20;

/// `log(rss) + d0 * size * lags / t_len * log(max(dims, t_len))`.
///
/// Returns negative infinity when `rss <= 0`, where the log is undefined.
pub fn bic_score(rss: f64, size: usize, lags: usize, t_len: usize, dims: &[usize], d0: f64) -> f64 {
    if rss <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let scale = dims.iter().copied().chain([t_len]).max().unwrap_or(t_len) as f64;
    rss.ln() + d0 * (size * lags) as f64 / t_len as f64 * scale.ln()
}

/// `ln ln T`; defined for `T >= 16` so that the value exceeds one.
pub fn default_d0(t_len: usize) -> Result<f64> {
    if t_len < 16 {
        return Err(LiarError::Config(format!(
            "default D0 = ln ln T needs T >= 16 (got T = {t_len}); pass D0 explicitly"
        )));
    }
    Ok((t_len as f64).ln().ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicLevel {
    pub k: usize,
    pub size: usize,
    pub rss: f64,
    /// Serialized as `null` for exact fits.
    #[serde(deserialize_with = "null_as_neg_inf")]
    pub bic: f64,
    pub exact_fit: bool,
    pub cond_flag: bool,
}

fn null_as_neg_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicTrace {
    pub site: Vec<usize>,
    pub levels: Vec<BicLevel>,
    pub chosen_k: usize,
    pub saturated: bool,
    pub exact_fit: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl BicTrace {
    pub fn chosen(&self) -> &BicLevel {
        self.levels
            .iter()
            .find(|l| l.k == self.chosen_k)
            .expect("chosen level is in the trace")
    }
}

/// Smallest exact level if any, else the smallest minimizer of `bic`.
fn choose(levels: &[BicLevel]) -> usize {
    if let Some(l) = levels.iter().find(|l| l.exact_fit) {
        return l.k;
    }
    let mut best = &levels[0];
    for l in &levels[1..] {
        if l.bic < best.bic {
            best = l;
        }
    }
    best.k
}

pub fn select_site(
    series: &GridSeries,
    family: &NeighborhoodFamily,
    lags: usize,
    d0: f64,
) -> Result<BicTrace> {
    let top = family.levels().last().map_or(0, |l| l.neighborhood.len());
    let problems = SiteProblems::new(series, lags, FitStrategy::Direct, std::iter::once(lags * top));
    scan(series, &problems, family, lags, d0)
}

fn scan(
    series: &GridSeries,
    problems: &SiteProblems<'_>,
    family: &NeighborhoodFamily,
    lags: usize,
    d0: f64,
) -> Result<BicTrace> {
    if lags == 0 {
        return Err(LiarError::Config("lag order P must be at least 1".into()));
    }
    if !d0.is_finite() || d0 < 0.0 {
        return Err(LiarError::Config(format!("D0 must be finite and non-negative, got {d0}")));
    }
    let t_len = series.t_len();
    let center = family.center();
    let mut family = family.clone();
    let mut notes = Vec::new();
    let usable = family
        .levels()
        .iter()
        .take_while(|l| check_identifiable(t_len, lags, l.neighborhood.len(), center).is_ok())
        .count();
    if usable == 0 {
        let first = family.levels().first().map_or(0, |l| l.neighborhood.len());
        check_identifiable(t_len, lags, first, center)?;
    }
    if usable < family.levels().len() {
        notes.push(format!(
            "levels k > {} dropped: T - P = {} rows cannot identify P * |J| = {} columns",
            family.levels()[usable - 1].k,
            t_len - lags,
            lags * family.levels()[usable].neighborhood.len()
        ));
        family.truncate(usable);
    }

    let (order, counts) = family.ring_order();
    // Ring by ring, each ring's sites for every lag.
    let mut cols = Vec::with_capacity(lags * order.len());
    let mut start = 0;
    let mut prefixes = Vec::with_capacity(counts.len());
    for &end in &counts {
        for p in 1..=lags {
            cols.extend(order[start..end].iter().map(|&j| (p, j)));
        }
        prefixes.push(lags * end);
        start = end;
    }
    let site = family.levels()[0].neighborhood.center_linear();
    let (y, z) = problems.problem(site, &cols);
    let z2 = z.norm_squared();
    let sols = nested_least_squares(&y, &z, &prefixes, false);

    let dims = series.shape().dims();
    let levels: Vec<BicLevel> = family
        .levels()
        .iter()
        .zip(sols)
        .map(|(level, sol)| {
            let size = level.neighborhood.len();
            let exact = sol.rss <= EXACT_FIT_REL * z2;
            BicLevel {
                k: level.k,
                size,
                rss: sol.rss,
                bic: if exact {
                    f64::NEG_INFINITY
                } else {
                    bic_score(sol.rss, size, lags, t_len, dims, d0)
                },
                exact_fit: exact,
                cond_flag: sol.rank_deficient,
            }
        })
        .collect();
    let chosen_k = choose(&levels);
    Ok(BicTrace {
        site: center.0.clone(),
        exact_fit: levels.iter().any(|l| l.exact_fit),
        chosen_k,
        saturated: family.saturated(),
        levels,
        notes,
    })
}

/// Candidate levels shared by every site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidates {
    /// Cubic boxes of radius `0..=k0`, optionally capped per axis.
    Uniform { k0: usize, axis_caps: Option<Vec<usize>> },
    /// An explicit nested list of per-axis radii.
    Radii(Vec<Vec<usize>>),
}

impl Candidates {
    pub fn uniform(k0: usize) -> Self {
        Candidates::Uniform { k0, axis_caps: None }
    }

    pub fn family(&self, center: &SiteIndex, shape: &Shape) -> Result<NeighborhoodFamily> {
        match self {
            Candidates::Uniform { k0, axis_caps } => {
                NeighborhoodFamily::nested(center, shape, *k0, axis_caps.as_deref())
            }
            Candidates::Radii(r) => NeighborhoodFamily::from_radii(center, shape, r),
        }
    }

    /// Per-axis radii of level `k`.
    pub fn radii(&self, k: usize, ndim: usize) -> Vec<usize> {
        match self {
            Candidates::Uniform { axis_caps, .. } => (0..ndim)
                .map(|j| axis_caps.as_ref().map_or(k, |c| k.min(c[j])))
                .collect(),
            Candidates::Radii(r) => r[k].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub shape: Vec<usize>,
    #[serde(rename = "P")]
    pub lags: usize,
    #[serde(rename = "T")]
    pub t_len: usize,
    #[serde(rename = "D0")]
    pub d0: f64,
    pub candidates: Candidates,
    /// Traces of the sites that could be scored, in linear order.
    pub traces: Vec<BicTrace>,
    pub failures: Vec<SiteFailure>,
}

pub fn select_all(
    series: &GridSeries,
    candidates: &Candidates,
    lags: usize,
    d0: Option<f64>,
) -> Result<SelectionReport> {
    select_all_with(series, candidates, lags, d0, FitStrategy::Auto)
}

pub fn select_all_with(
    series: &GridSeries,
    candidates: &Candidates,
    lags: usize,
    d0: Option<f64>,
    strategy: FitStrategy,
) -> Result<SelectionReport> {
    let d0 = match d0 {
        Some(v) => v,
        None => default_d0(series.t_len())?,
    };
    let shape = series.shape();
    let families: Vec<NeighborhoodFamily> = shape
        .sites()
        .map(|s| candidates.family(&s, shape))
        .collect::<Result<_>>()?;
    let problems = SiteProblems::new(
        series,
        lags,
        strategy,
        families
            .iter()
            .map(|f| lags * f.levels().last().map_or(0, |l| l.neighborhood.len())),
    );
    let results: Vec<Result<BicTrace>> = families
        .par_iter()
        .map(|f| scan(series, &problems, f, lags, d0))
        .collect();
    let mut traces = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (f, r) in families.iter().zip(results) {
        match r {
            Ok(t) => traces.push(t),
            Err(e @ LiarError::Config(_)) => return Err(e),
            Err(e) => failures.push(SiteFailure {
                site: f.center().0.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(SelectionReport {
        shape: shape.dims().to_vec(),
        lags,
        t_len: series.t_len(),
        d0,
        candidates: candidates.clone(),
        traces,
        failures,
    })
}

impl SelectionReport {
    /// The selected box around every scored site.
    pub fn chosen_neighborhoods(&self) -> Result<Vec<Neighborhood>> {
        let shape = Shape::new(self.shape.clone())?;
        self.traces
            .iter()
            .map(|t| {
                let radii = self.candidates.radii(t.chosen_k, shape.ndim());
                Neighborhood::boxed(&SiteIndex(t.site.clone()), &shape, &radii)
            })
            .collect()
    }

    /// Fraction of scored sites whose choice equals `truth`, optionally
    /// restricted by a site predicate.
    pub fn success_rate(&self, truth: usize, include: impl Fn(&[usize]) -> bool) -> Option<f64> {
        let (hits, total) = self
            .traces
            .iter()
            .filter(|t| include(&t.site))
            .fold((0usize, 0usize), |(h, n), t| (h + usize::from(t.chosen_k == truth), n + 1));
        (total > 0).then(|| hits as f64 / total as f64)
    }
}

/// True when every coordinate is at least `margin` away from the grid edge.
pub fn is_interior(site: &[usize], dims: &[usize], margin: usize) -> bool {
    site.iter().zip(dims).all(|(&c, &n)| c >= margin && c + margin < n)
}
