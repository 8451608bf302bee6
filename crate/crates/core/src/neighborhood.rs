//! Box neighborhoods and nested candidate families.

use serde::{Deserialize, Serialize};

use crate::error::{LiarError, Result};
use crate::grid::{Shape, SiteIndex};

/// A set of sites influencing `center`, held as sorted linear indices.
///
/// Equality compares the site sets; the box radius is descriptive only.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    center: SiteIndex,
    center_linear: usize,
    sites: Vec<usize>,
    radius: Option<Vec<usize>>,
}

impl PartialEq for Neighborhood {
    fn eq(&self, other: &Self) -> bool {
        self.center_linear == other.center_linear && self.sites == other.sites
    }
}

impl Eq for Neighborhood {}

impl Neighborhood {
    /// The clipped Chebyshev box `{u : |u_j - c_j| <= r_j}` intersected with the grid.
    pub fn boxed(center: &SiteIndex, shape: &Shape, radii: &[usize]) -> Result<Self> {
        let center_linear = shape.site_to_linear(center)?;
        if radii.len() != shape.ndim() {
            return Err(LiarError::Config(format!(
                "{} radii given for a {}-d grid",
                radii.len(),
                shape.ndim()
            )));
        }
        let ranges: Vec<(usize, usize)> = center
            .coords()
            .iter()
            .zip(radii)
            .zip(shape.dims())
            .map(|((&c, &r), &n)| (c.saturating_sub(r), (c.saturating_add(r)).min(n - 1)))
            .collect();
        let count: usize = ranges.iter().map(|(lo, hi)| hi - lo + 1).product();
        let mut sites = Vec::with_capacity(count);
        let mut coords: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        'outer: loop {
            sites.push(shape.linear_unchecked(&coords));
            for j in 0..coords.len() {
                if coords[j] < ranges[j].1 {
                    coords[j] += 1;
                    continue 'outer;
                }
                coords[j] = ranges[j].0;
            }
            break;
        }
        Ok(Neighborhood {
            center: center.clone(),
            center_linear,
            sites,
            radius: Some(radii.to_vec()),
        })
    }

    /// An arbitrary site set; sorted and deduplicated, and must contain the center.
    pub fn custom(center: &SiteIndex, shape: &Shape, sites: &[SiteIndex]) -> Result<Self> {
        let center_linear = shape.site_to_linear(center)?;
        let mut linear = sites
            .iter()
            .map(|s| shape.site_to_linear(s))
            .collect::<Result<Vec<_>>>()?;
        linear.sort_unstable();
        linear.dedup();
        if linear.binary_search(&center_linear).is_err() {
            return Err(LiarError::Structure(format!(
                "neighborhood of {:?} does not contain its center",
                center.coords()
            )));
        }
        Ok(Neighborhood {
            center: center.clone(),
            center_linear,
            sites: linear,
            radius: None,
        })
    }

    /// Every site of the grid.
    pub fn full(center: &SiteIndex, shape: &Shape) -> Result<Self> {
        let radii: Vec<usize> = shape.dims().to_vec();
        Self::boxed(center, shape, &radii)
    }

    pub fn center(&self) -> &SiteIndex {
        &self.center
    }

    pub fn center_linear(&self) -> usize {
        self.center_linear
    }

    /// Linear indices in increasing (column-major) order.
    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn site_indices(&self, shape: &Shape) -> Vec<SiteIndex> {
        self.sites
            .iter()
            .map(|&i| SiteIndex(shape.coords_unchecked(i)))
            .collect()
    }

    pub fn radius(&self) -> Option<&[usize]> {
        self.radius.as_deref()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn contains(&self, linear: usize) -> bool {
        self.sites.binary_search(&linear).is_ok()
    }

    pub fn is_subset_of(&self, other: &Neighborhood) -> bool {
        self.sites.iter().all(|&s| other.contains(s))
    }

    pub fn to_json(&self, shape: &Shape, k: Option<usize>) -> NeighborhoodJson {
        NeighborhoodJson {
            center: self.center.0.clone(),
            k,
            sites: self.site_indices(shape).into_iter().map(|s| s.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodJson {
    pub center: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    pub sites: Vec<Vec<usize>>,
}

impl NeighborhoodJson {
    pub fn to_neighborhood(&self, shape: &Shape) -> Result<Neighborhood> {
        let sites: Vec<SiteIndex> = self.sites.iter().cloned().map(SiteIndex).collect();
        Neighborhood::custom(&SiteIndex(self.center.clone()), shape, &sites)
    }
}

/// One candidate level: its index `k` in the candidate list and the box.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub k: usize,
    pub neighborhood: Neighborhood,
}

/// Strictly nested candidate boxes around one site.
///
/// Candidates that clipping makes identical to their predecessor are dropped
/// and `saturated` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodFamily {
    center: SiteIndex,
    levels: Vec<Level>,
    saturated: bool,
}

impl NeighborhoodFamily {
    /// Levels `k = 0..=k0` with per-axis radius `min(k, cap_j)`.
    pub fn nested(
        center: &SiteIndex,
        shape: &Shape,
        k0: usize,
        axis_caps: Option<&[usize]>,
    ) -> Result<Self> {
        if let Some(caps) = axis_caps {
            if caps.len() != shape.ndim() {
                return Err(LiarError::Config(format!(
                    "{} axis caps given for a {}-d grid",
                    caps.len(),
                    shape.ndim()
                )));
            }
        }
        let radii: Vec<Vec<usize>> = (0..=k0)
            .map(|k| {
                (0..shape.ndim())
                    .map(|j| axis_caps.map_or(k, |c| k.min(c[j])))
                    .collect()
            })
            .collect();
        Self::build(center, shape, &radii)
    }

    /// Levels following an explicit list of per-axis radii, e.g.
    /// `[(0,0,0), (0,0,1), (0,1,1)]`. The list must be componentwise
    /// non-decreasing with no repeated entry.
    pub fn from_radii(center: &SiteIndex, shape: &Shape, radii: &[Vec<usize>]) -> Result<Self> {
        if radii.is_empty() {
            return Err(LiarError::Config("empty candidate radius list".into()));
        }
        for (k, w) in radii.windows(2).enumerate() {
            let grows = w[0].len() == w[1].len() && w[0].iter().zip(&w[1]).all(|(a, b)| a <= b);
            if !grows || w[0] == w[1] {
                return Err(LiarError::Config(format!(
                    "candidate radii {:?} -> {:?} (levels {k}, {}) are not nested",
                    w[0],
                    w[1],
                    k + 1
                )));
            }
        }
        Self::build(center, shape, radii)
    }

    fn build(center: &SiteIndex, shape: &Shape, radii: &[Vec<usize>]) -> Result<Self> {
        let mut levels: Vec<Level> = Vec::with_capacity(radii.len());
        let mut saturated = false;
        for (k, r) in radii.iter().enumerate() {
            let nb = Neighborhood::boxed(center, shape, r)?;
            if let Some(prev) = levels.last() {
                if prev.neighborhood.sites == nb.sites {
                    saturated = true;
                    continue;
                }
            }
            levels.push(Level { k, neighborhood: nb });
        }
        Ok(NeighborhoodFamily {
            center: center.clone(),
            levels,
            saturated,
        })
    }

    pub fn center(&self) -> &SiteIndex {
        &self.center
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// Keeps only the first `n` levels.
    pub(crate) fn truncate(&mut self, n: usize) {
        self.levels.truncate(n);
    }

    /// Sites in order of first appearance: level 0's sites, then the sites
    /// new at level 1, and so on, each ring in linear order. Also returns
    /// the cumulative site count after each level.
    pub fn ring_order(&self) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = Vec::new();
        let mut counts = Vec::with_capacity(self.levels.len());
        let mut prev: Option<&Neighborhood> = None;
        for level in &self.levels {
            let nb = &level.neighborhood;
            match prev {
                None => order.extend_from_slice(nb.sites()),
                Some(p) => order.extend(nb.sites().iter().filter(|&&s| !p.contains(s))),
            }
            counts.push(order.len());
            prev = Some(nb);
        }
        (order, counts)
    }
}
