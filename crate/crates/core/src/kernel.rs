//! Per-site, per-lag local kernels and their JSON form.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LiarError, Result};
use crate::grid::{Shape, SiteIndex};
use crate::neighborhood::Neighborhood;

/// The kernel of one site: a neighborhood shared by all lags and one
/// coefficient vector per lag aligned to the neighborhood's site order.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteKernel {
    pub neighborhood: Neighborhood,
    pub coeffs: Vec<Vec<f64>>,
}

/// Kernels for every site of a grid, indexed by linear site index.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    shape: Shape,
    lags: usize,
    sites: Vec<SiteKernel>,
}

impl KernelField {
    pub fn new(shape: Shape, lags: usize, sites: Vec<SiteKernel>) -> Result<Self> {
        if lags == 0 {
            return Err(LiarError::Config("lag order P must be at least 1".into()));
        }
        if sites.len() != shape.len() {
            return Err(LiarError::Structure(format!(
                "{} site kernels for a grid of {} sites",
                sites.len(),
                shape.len()
            )));
        }
        for (i, k) in sites.iter().enumerate() {
            if k.neighborhood.center_linear() != i {
                return Err(LiarError::Structure(format!(
                    "kernel {i} is centered at {:?}",
                    k.neighborhood.center().coords()
                )));
            }
            if k.coeffs.len() != lags {
                return Err(LiarError::Structure(format!(
                    "kernel {i} has {} lags, expected {lags}",
                    k.coeffs.len()
                )));
            }
            for c in &k.coeffs {
                if c.len() != k.neighborhood.len() {
                    return Err(LiarError::Structure(format!(
                        "kernel {i} has {} coefficients for {} neighbors",
                        c.len(),
                        k.neighborhood.len()
                    )));
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(LiarError::Numerical(format!("kernel {i} is not finite")));
                }
            }
        }
        Ok(KernelField { shape, lags, sites })
    }

    /// All-zero kernels on the given neighborhoods.
    pub fn zeros(shape: Shape, lags: usize, neighborhoods: Vec<Neighborhood>) -> Result<Self> {
        let sites = neighborhoods
            .into_iter()
            .map(|nb| SiteKernel {
                coeffs: vec![vec![0.0; nb.len()]; lags],
                neighborhood: nb,
            })
            .collect();
        Self::new(shape, lags, sites)
    }

    /// Every site depends only on its own lag-1 value with weight `a`.
    pub fn self_only(shape: Shape, a: f64) -> Result<Self> {
        let sites = shape
            .sites()
            .map(|s| {
                Ok(SiteKernel {
                    neighborhood: Neighborhood::boxed(&s, &shape, &vec![0; shape.ndim()])?,
                    coeffs: vec![vec![a]],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, 1, sites)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    pub fn sites(&self) -> &[SiteKernel] {
        &self.sites
    }

    pub fn site(&self, linear: usize) -> &SiteKernel {
        &self.sites[linear]
    }

    pub fn scale(&mut self, factor: f64) {
        for k in &mut self.sites {
            for c in &mut k.coeffs {
                c.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// `out = M_p x` for lag `p` (1-based).
    pub fn apply(&self, p: usize, x: &[f64], out: &mut [f64]) {
        for (o, k) in out.iter_mut().zip(&self.sites) {
            *o = dot_on(&k.coeffs[p - 1], k.neighborhood.sites(), x);
        }
    }

    /// `out = M_p^T u` for lag `p` (1-based).
    pub fn apply_transpose(&self, p: usize, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &ui) in self.sites.iter().zip(u) {
            for (&j, &m) in k.neighborhood.sites().iter().zip(&k.coeffs[p - 1]) {
                out[j] += m * ui;
            }
        }
    }

    /// The dense `n x n` lag-`p` operator of the vectorized model.
    pub fn dense(&self, p: usize) -> DMatrix<f64> {
        let n = self.shape.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, k) in self.sites.iter().enumerate() {
            for (&j, &c) in k.neighborhood.sites().iter().zip(&k.coeffs[p - 1]) {
                m[(i, j)] = c;
            }
        }
        m
    }

    /// Frobenius norm of the difference of all lag operators.
    pub fn frobenius_distance(&self, other: &KernelField) -> Result<f64> {
        if self.shape != other.shape || self.lags != other.lags {
            return Err(LiarError::Structure("kernel fields have different shapes".into()));
        }
        let mut acc = 0.0;
        for (a, b) in self.sites.iter().zip(&other.sites) {
            for p in 0..self.lags {
                acc += sparse_sq_diff(
                    a.neighborhood.sites(),
                    &a.coeffs[p],
                    b.neighborhood.sites(),
                    &b.coeffs[p],
                );
            }
        }
        Ok(acc.sqrt())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sites
            .iter()
            .flat_map(|k| k.coeffs.iter().flatten())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_json(&self) -> KernelFieldJson {
        KernelFieldJson {
            shape: self.shape.dims().to_vec(),
            lags: self.lags,
            sites: self
                .sites
                .iter()
                .map(|k| SiteKernelJson {
                    center: k.neighborhood.center().0.clone(),
                    neighborhood: k
                        .neighborhood
                        .site_indices(&self.shape)
                        .into_iter()
                        .map(|s| s.0)
                        .collect(),
                    coeffs: k.coeffs.clone(),
                })
                .collect(),
        }
    }

    pub fn from_json(json: &KernelFieldJson) -> Result<Self> {
        let shape = Shape::new(json.shape.clone())?;
        let mut slots: Vec<Option<SiteKernel>> = vec![None; shape.len()];
        for s in &json.sites {
            let center = SiteIndex(s.center.clone());
            let linear = shape.site_to_linear(&center)?;
            let sites: Vec<SiteIndex> = s.neighborhood.iter().cloned().map(SiteIndex).collect();
            let nb = Neighborhood::custom(&center, &shape, &sites)?;
            if nb.len() != s.neighborhood.len() {
                return Err(LiarError::Structure(format!(
                    "neighborhood of {:?} has duplicate sites",
                    s.center
                )));
            }
            // Coefficients follow the listed order; re-sort them alongside the sites.
            let listed: Vec<usize> = sites
                .iter()
                .map(|x| shape.site_to_linear(x))
                .collect::<Result<_>>()?;
            let coeffs = s
                .coeffs
                .iter()
                .map(|c| {
                    if c.len() != listed.len() {
                        return Err(LiarError::Structure(format!(
                            "site {:?}: {} coefficients for {} neighbors",
                            s.center,
                            c.len(),
                            listed.len()
                        )));
                    }
                    let mut out = vec![0.0; c.len()];
                    for (&lin, &v) in listed.iter().zip(c) {
                        let pos = nb.sites().binary_search(&lin).expect("site in neighborhood");
                        out[pos] = v;
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()?;
            if slots[linear].is_some() {
                return Err(LiarError::Structure(format!("site {:?} listed twice", s.center)));
            }
            slots[linear] = Some(SiteKernel {
                neighborhood: nb,
                coeffs,
            });
        }
        let sites = slots
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                k.ok_or_else(|| LiarError::Structure(format!("no kernel for linear site {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, json.lags, sites)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let json: KernelFieldJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_json(&json)
    }
}

#[inline]
pub(crate) fn dot_on(coeffs: &[f64], sites: &[usize], x: &[f64]) -> f64 {
    coeffs.iter().zip(sites).map(|(m, &j)| m * x[j]).sum()
}

fn sparse_sq_diff(ia: &[usize], va: &[f64], ib: &[usize], vb: &[f64]) -> f64 {
    let (mut a, mut b, mut acc) = (0, 0, 0.0);
    while a < ia.len() || b < ib.len() {
        let d = match (ia.get(a), ib.get(b)) {
            (Some(x), Some(y)) if x == y => {
                a += 1;
                b += 1;
                va[a - 1] - vb[b - 1]
            }
            (Some(x), Some(y)) if x < y => {
                a += 1;
                va[a - 1]
            }
            (Some(_), None) => {
                a += 1;
                va[a - 1]
            }
            _ => {
                b += 1;
                vb[b - 1]
            }
        };
        acc += d * d;
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteKernelJson {
    pub center: Vec<usize>,
    pub neighborhood: Vec<Vec<usize>>,
    pub coeffs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFieldJson {
    pub shape: Vec<usize>,
    #[serde(rename = "P")]
    pub lags: usize,
    pub sites: Vec<SiteKernelJson>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field() -> KernelField {
        let shape = Shape::matrix(3, 2).unwrap();
        let sites = shape
            .sites()
            .map(|s| {
                let nb = Neighborhood::boxed(&s, &shape, &[1, 0]).unwrap();
                let n = nb.len();
                let base = s.coords()[0] as f64 + 10.0 * s.coords()[1] as f64;
                SiteKernel {
                    neighborhood: nb,
                    coeffs: vec![
                        (0..n).map(|j| base + j as f64 * 0.1).collect(),
                        (0..n).map(|j| -base - j as f64).collect(),
                    ],
                }
            })
            .collect();
        KernelField::new(shape, 2, sites).unwrap()
    }

    #[test]
    fn json_roundtrip() {
        let f = field();
        let text = serde_json::to_string(&f.to_json()).unwrap();
        assert!(text.contains("\"P\":2"));
        let back = KernelField::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn json_reorders_listed_sites() {
        let json: KernelFieldJson = serde_json::from_str(
            r#"{"shape":[2],"P":1,"sites":[
                {"center":[0],"neighborhood":[[1],[0]],"coeffs":[[0.2,0.1]]},
                {"center":[1],"neighborhood":[[1]],"coeffs":[[0.5]]}]}"#,
        )
        .unwrap();
        let f = KernelField::from_json(&json).unwrap();
        assert_eq!(f.site(0).coeffs[0], vec![0.1, 0.2]);
    }

    #[test]
    fn apply_matches_dense() {
        let f = field();
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        for p in 1..=2 {
            let d = f.dense(p);
            let mut out = vec![0.0; 6];
            f.apply(p, &x, &mut out);
            let want = &d * nalgebra::DVector::from_column_slice(&x);
            for i in 0..6 {
                assert!((out[i] - want[i]).abs() < 1e-12);
            }
            f.apply_transpose(p, &x, &mut out);
            let want = d.transpose() * nalgebra::DVector::from_column_slice(&x);
            for i in 0..6 {
                assert!((out[i] - want[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_handles_different_supports() {
        let shape = Shape::matrix(3, 1).unwrap();
        let a = KernelField::self_only(shape.clone(), 0.5).unwrap();
        let nbs = shape
            .sites()
            .map(|s| Neighborhood::boxed(&s, &shape, &[1, 0]).unwrap())
            .collect();
        let b = KernelField::zeros(shape, 1, nbs).unwrap();
        let d = a.frobenius_distance(&b).unwrap();
        assert!((d - (3.0f64 * 0.25).sqrt()).abs() < 1e-15);
        assert!((a.dense(1) - b.dense(1)).norm() - d < 1e-15);
    }
}
