//! Separable (low-rank) kernels on matrix grids.
//!
//! The lag-`p` kernels of an `M x N` grid with box radius `(K1, K2)` are laid
//! out as an `M(2K1+1) x N(2K2+1)` block matrix: block `(i1, i2)` is the
//! `(2K1+1) x (2K2+1)` patch of site `(i1, i2)`, entry `(a, b)` weighting the
//! neighbor at offset `(a - K1, b - K2)`. Cells outside the grid are zero.
//! Separable kernels `sum_r A_r X B_r^T` make this matrix rank `R`, so a fit
//! is projected onto rank `R` by truncated SVD and scattered back.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{LiarError, Result};
use crate::fit::{box_neighborhoods, fit_all, FitReport};
use crate::grid::{GridSeries, Shape};
use crate::kernel::{KernelField, SiteKernel};
use crate::linalg::{truncated_svd_with, SvdMethod};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockKernelMatrix {
    pub shape: Shape,
    pub k1: usize,
    pub k2: usize,
    pub data: DMatrix<f64>,
}

impl BlockKernelMatrix {
    pub fn block_dims(&self) -> (usize, usize) {
        (2 * self.k1 + 1, 2 * self.k2 + 1)
    }

    pub fn block(&self, i1: usize, i2: usize) -> DMatrix<f64> {
        let (h, w) = self.block_dims();
        self.data.view((i1 * h, i2 * w), (h, w)).into_owned()
    }

    /// A one-frame matrix series for writing as GTS.
    pub fn to_series(&self) -> Result<GridSeries> {
        let shape = Shape::matrix(self.data.nrows(), self.data.ncols())?;
        GridSeries::new(shape, 1, self.data.as_slice().to_vec())
    }
}

fn matrix_shape(shape: &Shape) -> Result<(usize, usize)> {
    match shape.dims() {
        &[m, n] => Ok((m, n)),
        d => Err(LiarError::Structure(format!(
            "separable kernels need a matrix grid, got {}-d shape {d:?}",
            d.len()
        ))),
    }
}

/// Row/column of the block-matrix cell holding neighbor `u` of `center`.
fn cell(center: &[usize], u: &[usize], k1: usize, k2: usize) -> (usize, usize) {
    let (h, w) = (2 * k1 + 1, 2 * k2 + 1);
    (
        center[0] * h + u[0] + k1 - center[0],
        center[1] * w + u[1] + k2 - center[1],
    )
}

/// Places lag `p` (1-based) of every site kernel into the block matrix.
pub fn assemble_block(kernels: &KernelField, k1: usize, k2: usize, p: usize) -> Result<BlockKernelMatrix> {
    let shape = kernels.shape();
    let (m, n) = matrix_shape(shape)?;
    if p == 0 || p > kernels.lags() {
        return Err(LiarError::Config(format!("lag {p} outside 1..={}", kernels.lags())));
    }
    for sk in kernels.sites() {
        match sk.neighborhood.radius() {
            Some(r) if r[0] <= k1 && r[1] <= k2 => {}
            Some(r) => {
                return Err(LiarError::Structure(format!(
                    "site {:?} has box radius {r:?}, larger than ({k1}, {k2})",
                    sk.neighborhood.center().coords()
                )))
            }
            None => {
                return Err(LiarError::Structure(format!(
                    "site {:?} has a non-box neighborhood",
                    sk.neighborhood.center().coords()
                )))
            }
        }
    }
    let mut data = DMatrix::zeros(m * (2 * k1 + 1), n * (2 * k2 + 1));
    for sk in kernels.sites() {
        let c = sk.neighborhood.center().coords();
        for (&j, &v) in sk.neighborhood.sites().iter().zip(&sk.coeffs[p - 1]) {
            let u = shape.coords_unchecked(j);
            data[cell(c, &u, k1, k2)] = v;
        }
    }
    Ok(BlockKernelMatrix {
        shape: shape.clone(),
        k1,
        k2,
        data,
    })
}

/// Reads each site's clipped footprint back out of per-lag block matrices;
/// `template` supplies the neighborhoods.
pub fn scatter(blocks: &[BlockKernelMatrix], template: &KernelField) -> Result<KernelField> {
    if blocks.len() != template.lags() {
        return Err(LiarError::Structure(format!(
            "{} blocks for {} lags",
            blocks.len(),
            template.lags()
        )));
    }
    let shape = template.shape();
    for b in blocks {
        if &b.shape != shape {
            return Err(LiarError::Structure("block matrix and kernels disagree on shape".into()));
        }
    }
    let sites = template
        .sites()
        .iter()
        .map(|sk| {
            let c = sk.neighborhood.center().coords();
            let coeffs = blocks
                .iter()
                .map(|b| {
                    sk.neighborhood
                        .sites()
                        .iter()
                        .map(|&j| b.data[cell(c, &shape.coords_unchecked(j), b.k1, b.k2)])
                        .collect()
                })
                .collect();
            SiteKernel {
                neighborhood: sk.neighborhood.clone(),
                coeffs,
            }
        })
        .collect();
    KernelField::new(shape.clone(), template.lags(), sites)
}

/// Projected block matrix, singular values and an optional solver note.
type ProjectedLag = (BlockKernelMatrix, Vec<f64>, Option<String>);

#[derive(Debug, Clone)]
pub struct SpliarFit {
    pub rank: usize,
    /// Unprojected per-site fits.
    pub report: FitReport,
    pub unprojected: KernelField,
    /// Rank-projected block matrix per lag.
    pub blocks: Vec<BlockKernelMatrix>,
    pub kernels: KernelField,
    /// Singular values of each unprojected block matrix.
    pub singular_values: Vec<Vec<f64>>,
    pub notes: Vec<String>,
}

pub fn fit_spliar(series: &GridSeries, k1: usize, k2: usize, lags: usize, rank: usize) -> Result<SpliarFit> {
    fit_spliar_with(series, k1, k2, lags, rank, SvdMethod::Auto)
}

pub fn fit_spliar_with(
    series: &GridSeries,
    k1: usize,
    k2: usize,
    lags: usize,
    rank: usize,
    method: SvdMethod,
) -> Result<SpliarFit> {
    matrix_shape(series.shape())?;
    let max_rank = (2 * k1 + 1).min(2 * k2 + 1);
    if rank == 0 || rank > max_rank {
        return Err(LiarError::Config(format!(
            "rank R = {rank} must lie in 1..={max_rank} for radii ({k1}, {k2})"
        )));
    }
    let nbs = box_neighborhoods(series.shape(), &[k1, k2])?;
    let report = fit_all(series, &nbs, lags)?;
    if let Some(f) = report.failures.first() {
        return Err(LiarError::Underdetermined {
            rows: series.t_len().saturating_sub(lags),
            cols: lags * (2 * k1 + 1) * (2 * k2 + 1),
            context: format!("SP-LIAR fit at site {:?}: {}", f.site, f.message),
        });
    }
    let unprojected = report.to_kernels()?;
    let projected: Vec<Result<ProjectedLag>> = (1..=lags)
        .into_par_iter()
        .map(|p| {
            let raw = assemble_block(&unprojected, k1, k2, p)?;
            let svd = truncated_svd_with(&raw.data, rank, method)?;
            let note = svd.note.map(|n| format!("lag {p}: {n}"));
            Ok((BlockKernelMatrix { data: svd.matrix, ..raw }, svd.singular_values, note))
        })
        .collect();
    let mut blocks = Vec::with_capacity(lags);
    let mut singular_values = Vec::with_capacity(lags);
    let mut notes = Vec::new();
    for r in projected {
        let (b, sv, note) = r?;
        blocks.push(b);
        singular_values.push(sv);
        notes.extend(note);
    }
    let kernels = scatter(&blocks, &unprojected)?;
    Ok(SpliarFit {
        rank,
        report,
        unprojected,
        blocks,
        kernels,
        singular_values,
        notes,
    })
}

/// Kernels of `X_t = sum_r A_r X_{t-1} B_r^T` restricted to radius `(k1, k2)`
/// boxes: site `i` weights neighbor `u` by `sum_r A_r[i1, u1] B_r[i2, u2]`.
/// Entries of `A_r`, `B_r` outside the band are ignored.
pub fn separable_kernels(
    shape: &Shape,
    k1: usize,
    k2: usize,
    factors: &[(DMatrix<f64>, DMatrix<f64>)],
) -> Result<KernelField> {
    let (m, n) = matrix_shape(shape)?;
    for (a, b) in factors {
        if a.shape() != (m, m) || b.shape() != (n, n) {
            return Err(LiarError::Structure(format!(
                "factor shapes {:?}, {:?} do not match a {m} x {n} grid",
                a.shape(),
                b.shape()
            )));
        }
    }
    let sites = box_neighborhoods(shape, &[k1, k2])?
        .into_iter()
        .map(|nb| {
            let c = nb.center().coords().to_vec();
            let coeffs = nb
                .sites()
                .iter()
                .map(|&j| {
                    let u = shape.coords_unchecked(j);
                    factors.iter().map(|(a, b)| a[(c[0], u[0])] * b[(c[1], u[1])]).sum()
                })
                .collect();
            SiteKernel {
                neighborhood: nb,
                coeffs: vec![coeffs],
            }
        })
        .collect();
    KernelField::new(shape.clone(), 1, sites)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighborhood::Neighborhood;
    use crate::simulate::{random_stable_kernels, simulate_liar, NoiseSpec};

    #[test]
    fn scalar_grid() {
        let k = KernelField::self_only(Shape::matrix(1, 1).unwrap(), 0.7).unwrap();
        let b = assemble_block(&k, 0, 0, 1).unwrap();
        assert_eq!(b.data, DMatrix::from_element(1, 1, 0.7));
    }

    #[test]
    fn two_by_two_offsets() {
        let shape = Shape::matrix(2, 2).unwrap();
        // Site s weights neighbor j by 10 * s + j.
        let sites = box_neighborhoods(&shape, &[1, 1])
            .unwrap()
            .into_iter()
            .map(|nb| {
                let s = nb.center_linear();
                let c = nb.sites().iter().map(|&j| (10 * s + j) as f64).collect();
                SiteKernel { neighborhood: nb, coeffs: vec![c] }
            })
            .collect();
        let k = KernelField::new(shape, 1, sites).unwrap();
        let b = assemble_block(&k, 1, 1, 1).unwrap();
        assert_eq!(b.data.shape(), (6, 6));
        let mut expect = DMatrix::zeros(6, 6);
        for i1 in 0..2 {
            for i2 in 0..2 {
                for u1 in 0..2 {
                    for u2 in 0..2 {
                        let (s, j) = (i1 + 2 * i2, u1 + 2 * u2);
                        expect[(3 * i1 + 1 + u1 - i1, 3 * i2 + 1 + u2 - i2)] = (10 * s + j) as f64;
                    }
                }
            }
        }
        assert_eq!(b.data, expect);
        // Site (0,0): its patch sits in the lower-right of block (0,0).
        assert_eq!(b.block(0, 0).row(0).iter().sum::<f64>(), 0.0);
        assert_eq!(b.block(0, 0)[(1, 1)], 0.0);
        assert_eq!(b.block(0, 0)[(2, 2)], 3.0);
        assert_eq!(b.block(1, 1)[(0, 0)], 30.0);
        let back = scatter(&[b], &k).unwrap();
        assert_eq!(back, k);
    }

    #[test]
    fn assemble_scatter_identity_with_lags() {
        let shape = Shape::matrix(5, 4).unwrap();
        let k = crate::simulate::random_stable_box_kernels(&shape, &[1, 2], 2, 0.6, 3).unwrap();
        let blocks: Vec<_> = (1..=2).map(|p| assemble_block(&k, 1, 2, p).unwrap()).collect();
        assert_eq!(scatter(&blocks, &k).unwrap(), k);
        // Padded cells stay zero.
        let nnz = blocks[0].data.iter().filter(|v| **v != 0.0).count();
        let footprint: usize = k.sites().iter().map(|s| s.neighborhood.len()).sum();
        assert!(nnz <= footprint);
    }

    #[test]
    fn rejects_bad_inputs() {
        let shape = Shape::matrix(3, 3).unwrap();
        let sites: Vec<SiteKernel> = shape
            .sites()
            .map(|s| {
                let nb = Neighborhood::custom(&s, &shape, std::slice::from_ref(&s)).unwrap();
                SiteKernel { neighborhood: nb, coeffs: vec![vec![0.5]] }
            })
            .collect();
        let k = KernelField::new(shape.clone(), 1, sites).unwrap();
        assert!(matches!(assemble_block(&k, 1, 1, 1), Err(LiarError::Structure(_))));
        let wide = KernelField::self_only(shape.clone(), 0.5).unwrap();
        let boxed = scatter(&[assemble_block(&wide, 0, 0, 1).unwrap()], &wide).unwrap();
        assert_eq!(boxed, wide);
        let cube = Shape::new(vec![2, 2, 2]).unwrap();
        let s = GridSeries::zeros(cube, 50).unwrap();
        assert!(matches!(fit_spliar(&s, 1, 1, 1, 1), Err(LiarError::Structure(_))));
        let s = GridSeries::zeros(shape, 50).unwrap();
        assert!(matches!(fit_spliar(&s, 1, 1, 1, 4), Err(LiarError::Config(_))));
        assert!(matches!(fit_spliar(&s, 1, 1, 1, 0), Err(LiarError::Config(_))));
    }

    #[test]
    fn projection_has_rank_r() {
        let shape = Shape::matrix(6, 5).unwrap();
        let k = random_stable_kernels(&shape, 1, 1, 0.8, 8).unwrap();
        let s = simulate_liar(&k, 500, 50, NoiseSpec::gaussian(1.0, 9)).unwrap();
        let fit = fit_spliar(&s, 1, 1, 1, 2).unwrap();
        let sv = fit.blocks[0].data.clone().singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[2..].iter().all(|&x| x <= 1e-10 * sv[0]));
        // The projection is the Frobenius-closest rank-2 block matrix, so it is
        // no farther from the raw fit than the unprojected kernels' own rank-2 SVD.
        let raw = assemble_block(&fit.unprojected, 1, 1, 1).unwrap();
        let d = (&raw.data - &fit.blocks[0].data).norm();
        let tail: f64 = fit.singular_values[0][2..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((d - tail).abs() < 1e-10);
    }

    #[test]
    fn full_rank_is_identity() {
        // A single-row grid with K1 = 0 has one block row: rank 1 is already full.
        let shape = Shape::matrix(1, 6).unwrap();
        let k = random_stable_kernels(&shape, 1, 1, 0.8, 4).unwrap();
        let s = simulate_liar(&k, 400, 50, NoiseSpec::gaussian(1.0, 5)).unwrap();
        let fit = fit_spliar(&s, 0, 1, 1, 1).unwrap();
        assert_eq!(fit.notes.len(), 1);
        assert!(fit.kernels.frobenius_distance(&fit.unprojected).unwrap() < 1e-10);
    }

    #[test]
    fn separable_truth_is_rank_one() {
        let shape = Shape::matrix(6, 6).unwrap();
        let a = DMatrix::from_fn(6, 6, |i, j| if i.abs_diff(j) <= 1 { 0.3 + 0.05 * i as f64 } else { 0.0 });
        let b = DMatrix::from_fn(6, 6, |i, j| if i.abs_diff(j) <= 1 { 0.4 - 0.03 * j as f64 } else { 0.0 });
        let k = separable_kernels(&shape, 1, 1, &[(a.clone(), b.clone())]).unwrap();
        let blk = assemble_block(&k, 1, 1, 1).unwrap();
        let svd = crate::linalg::truncated_svd(&blk.data, 1).unwrap();
        assert!((&svd.matrix - &blk.data).norm() < 1e-12);
        // Applying the kernels equals A X B^T.
        let x = DMatrix::from_fn(6, 6, |i, j| (i * 7 + j * 3) as f64 % 5.0 - 2.0);
        let mut out = vec![0.0; 36];
        k.apply(1, x.as_slice(), &mut out);
        let expect = &a * &x * b.transpose();
        for (o, e) in out.iter().zip(expect.iter()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_series_gives_zero_kernels() {
        let s = GridSeries::zeros(Shape::matrix(4, 4).unwrap(), 100).unwrap();
        let fit = fit_spliar(&s, 1, 1, 1, 1).unwrap();
        assert!(fit.kernels.sites().iter().all(|k| k.coeffs[0].iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn subspace_path_agrees() {
        let shape = Shape::matrix(8, 7).unwrap();
        let k = random_stable_kernels(&shape, 1, 1, 0.8, 18).unwrap();
        let s = simulate_liar(&k, 400, 50, NoiseSpec::gaussian(1.0, 19)).unwrap();
        let dense = fit_spliar_with(&s, 1, 1, 1, 2, SvdMethod::Dense).unwrap();
        let sub = fit_spliar_with(&s, 1, 1, 1, 2, SvdMethod::Subspace).unwrap();
        assert!(dense.kernels.frobenius_distance(&sub.kernels).unwrap() < 1e-8);
    }
}
