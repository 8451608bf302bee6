//! Grid shapes, site indexing and the time-series container.
//!
//! Sites are flattened column-major: the first coordinate varies fastest.
//! A series stores `T` frames back to back, each frame in linear site order.

use serde::{Deserialize, Serialize};

use crate::error::{LiarError, Result};

/// Spatial extents `N_1 x ... x N_d` of a grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape {
    dims: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(LiarError::Config("shape needs at least one dimension".into()));
        }
        if let Some(j) = dims.iter().position(|&n| n == 0) {
            return Err(LiarError::Config(format!("dimension {j} has extent 0")));
        }
        let mut strides = Vec::with_capacity(dims.len());
        let mut len: usize = 1;
        for &n in &dims {
            strides.push(len);
            len = len
                .checked_mul(n)
                .ok_or_else(|| LiarError::Size(format!("site count of {dims:?} overflows")))?;
        }
        Ok(Shape { dims, strides, len })
    }

    pub fn matrix(rows: usize, cols: usize) -> Result<Self> {
        Self::new(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Total number of sites.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_dim(&self) -> usize {
        self.dims.iter().copied().max().unwrap_or(1)
    }

    pub fn contains(&self, coords: &[usize]) -> bool {
        coords.len() == self.dims.len() && coords.iter().zip(&self.dims).all(|(c, n)| c < n)
    }

    pub fn site_to_linear(&self, site: &SiteIndex) -> Result<usize> {
        self.linear(&site.0)
    }

    pub fn linear(&self, coords: &[usize]) -> Result<usize> {
        if !self.contains(coords) {
            return Err(LiarError::Index(format!(
                "site {coords:?} outside grid {:?}",
                self.dims
            )));
        }
        Ok(self.linear_unchecked(coords))
    }

    pub(crate) fn linear_unchecked(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    pub fn linear_to_site(&self, index: usize) -> Result<SiteIndex> {
        if index >= self.len {
            return Err(LiarError::Index(format!(
                "linear index {index} outside grid of {} sites",
                self.len
            )));
        }
        Ok(SiteIndex(self.coords_unchecked(index)))
    }

    pub(crate) fn coords_unchecked(&self, mut index: usize) -> Vec<usize> {
        self.dims
            .iter()
            .map(|&n| {
                let c = index % n;
                index /= n;
                c
            })
            .collect()
    }

    /// All sites in linear order.
    pub fn sites(&self) -> impl Iterator<Item = SiteIndex> + '_ {
        (0..self.len).map(|i| SiteIndex(self.coords_unchecked(i)))
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = LiarError;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.dims
    }
}

/// 0-based multi-index of a grid site.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteIndex(pub Vec<usize>);

impl SiteIndex {
    pub fn new(coords: impl Into<Vec<usize>>) -> Self {
        SiteIndex(coords.into())
    }

    pub fn coords(&self) -> &[usize] {
        &self.0
    }

    /// Coordinates shifted to 1-based, for human-facing output.
    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|c| c + 1).collect()
    }
}

impl From<Vec<usize>> for SiteIndex {
    fn from(v: Vec<usize>) -> Self {
        SiteIndex(v)
    }
}

/// A grid observed at `T` time points. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSeries {
    shape: Shape,
    t_len: usize,
    values: Vec<f64>,
}

impl GridSeries {
    pub fn new(shape: Shape, t_len: usize, values: Vec<f64>) -> Result<Self> {
        if t_len == 0 {
            return Err(LiarError::Config("series needs at least one frame".into()));
        }
        let expected = t_len
            .checked_mul(shape.len())
            .ok_or_else(|| LiarError::Size("series length overflows".into()))?;
        if values.len() != expected {
            return Err(LiarError::Size(format!(
                "expected {expected} values ({t_len} frames of {} sites), got {}",
                shape.len(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(LiarError::Numerical(format!(
                "non-finite value at frame {}, site {}",
                pos / shape.len(),
                pos % shape.len()
            )));
        }
        Ok(GridSeries {
            shape,
            t_len,
            values,
        })
    }

    pub fn zeros(shape: Shape, t_len: usize) -> Result<Self> {
        let n = shape.len() * t_len;
        Self::new(shape, t_len, vec![0.0; n])
    }

    /// Builds a series from frames given in linear site order.
    pub fn from_frames(shape: Shape, frames: &[Vec<f64>]) -> Result<Self> {
        let values = frames.iter().flatten().copied().collect();
        Self::new(shape, frames.len(), values)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn n_sites(&self) -> usize {
        self.shape.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.shape.len();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.shape.len())
    }

    pub fn get(&self, t: usize, site: usize) -> f64 {
        self.values[t * self.shape.len() + site]
    }

    /// Values at frame `t` on `sites`, in the order given.
    pub fn extract_patch(&self, t: usize, sites: &[SiteIndex]) -> Result<Vec<f64>> {
        if t >= self.t_len {
            return Err(LiarError::Index(format!(
                "time {t} outside series of length {}",
                self.t_len
            )));
        }
        let frame = self.frame(t);
        sites
            .iter()
            .map(|s| self.shape.site_to_linear(s).map(|i| frame[i]))
            .collect()
    }

    /// Frames `start..end` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t_len {
            return Err(LiarError::Index(format!(
                "frame range {start}..{end} invalid for series of length {}",
                self.t_len
            )));
        }
        let n = self.shape.len();
        Self::new(
            self.shape.clone(),
            end - start,
            self.values[start * n..end * n].to_vec(),
        )
    }

    /// Time-prefix split: the first `round(fraction * T)` frames train.
    pub fn split_prefix(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(LiarError::Config(format!(
                "train fraction {fraction} must lie in (0, 1)"
            )));
        }
        let cut = (fraction * self.t_len as f64).round() as usize;
        if cut == 0 || cut >= self.t_len {
            return Err(LiarError::Config(format!(
                "train fraction {fraction} leaves an empty split for T = {}",
                self.t_len
            )));
        }
        Ok((self.slice(0, cut)?, self.slice(cut, self.t_len)?))
    }
}
