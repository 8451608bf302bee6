//! Least squares by Householder QR and truncated SVD.

use nalgebra::{DMatrix, DVector};

use crate::error::{LiarError, Result};
use crate::rng::CounterRng;

/// Diagonal ratio of the triangular factor below which a design is treated
/// as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Dense matrices with more entries than this use subspace iteration.
pub const DENSE_SVD_LIMIT: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LsSolution {
    pub coeffs: Vec<f64>,
    pub rss: f64,
    pub rank_deficient: bool,
    /// Diagonal of `(Y^T Y)^{-1}` when full rank and requested.
    pub gram_inv_diag: Option<Vec<f64>>,
}

/// Solves `min ||z - Y[:, ..c] m||` for every column prefix `c` in `prefixes`
/// from one QR factorization of `y`.
///
/// Prefixes must be increasing and not exceed the column or row count. A
/// prefix whose triangular factor has `min |R_jj| / max |R_jj| < RANK_TOL`
/// is solved in the minimum-norm sense through an SVD instead.
pub fn nested_least_squares(
    y: &DMatrix<f64>,
    z: &DVector<f64>,
    prefixes: &[usize],
    want_gram_inv: bool,
) -> Vec<LsSolution> {
    let (m, n) = y.shape();
    debug_assert_eq!(z.len(), m);
    debug_assert!(prefixes.iter().all(|&c| c >= 1 && c <= n && c <= m));
    let qr = y.clone().qr();
    let mut qtz = z.clone();
    qr.q_tr_mul(&mut qtz);
    let r = qr.unpack_r();

    // Suffix sums of squared rotated residual components.
    let mut tail = vec![0.0; m + 1];
    for j in (0..m).rev() {
        tail[j] = tail[j + 1] + qtz[j] * qtz[j];
    }

    prefixes
        .iter()
        .map(|&c| {
            let diag = (0..c).map(|j| r[(j, j)].abs());
            let (lo, hi) = diag.fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
            if hi == 0.0 || lo < RANK_TOL * hi {
                return min_norm_solution(&y.columns(0, c).into_owned(), z);
            }
            let rk = r.view((0, 0), (c, c));
            let rhs = qtz.rows(0, c).into_owned();
            let coeffs = rk
                .solve_upper_triangular(&rhs)
                .expect("nonzero diagonal")
                .as_slice()
                .to_vec();
            let gram_inv_diag = want_gram_inv.then(|| {
                let inv = rk
                    .solve_upper_triangular(&DMatrix::identity(c, c))
                    .expect("nonzero diagonal");
                inv.row_iter().map(|row| row.norm_squared()).collect()
            });
            LsSolution {
                coeffs,
                rss: tail[c],
                rank_deficient: false,
                gram_inv_diag,
            }
        })
        .collect()
}

pub fn least_squares(y: &DMatrix<f64>, z: &DVector<f64>, want_gram_inv: bool) -> LsSolution {
    nested_least_squares(y, z, &[y.ncols()], want_gram_inv)
        .pop()
        .expect("one prefix")
}

fn min_norm_solution(y: &DMatrix<f64>, z: &DVector<f64>) -> LsSolution {
    let svd = y.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let coeffs = if smax > 0.0 {
        svd.solve(z, RANK_TOL * smax).expect("u and v computed")
    } else {
        DVector::zeros(y.ncols())
    };
    let resid = z - y * &coeffs;
    LsSolution {
        coeffs: coeffs.as_slice().to_vec(),
        rss: resid.norm_squared(),
        rank_deficient: true,
        gram_inv_diag: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMethod {
    Auto,
    Dense,
    Subspace,
}

#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub matrix: DMatrix<f64>,
    /// All singular values of the input in decreasing order (dense path) or
    /// the leading estimates (subspace path).
    pub singular_values: Vec<f64>,
    pub note: Option<String>,
}

/// Best rank-`rank` Frobenius approximation. Left singular vectors are
/// signed so their largest-magnitude entry is positive.
pub fn truncated_svd(m: &DMatrix<f64>, rank: usize) -> Result<TruncatedSvd> {
    truncated_svd_with(m, rank, SvdMethod::Auto)
}

pub fn truncated_svd_with(m: &DMatrix<f64>, rank: usize, method: SvdMethod) -> Result<TruncatedSvd> {
    if rank == 0 {
        return Err(LiarError::Config("rank R must be at least 1".into()));
    }
    let full = m.nrows().min(m.ncols());
    if rank >= full {
        return Ok(TruncatedSvd {
            matrix: m.clone(),
            singular_values: Vec::new(),
            note: Some(format!(
                "rank {rank} >= min dimension {full}; returned unchanged"
            )),
        });
    }
    let method = match method {
        SvdMethod::Auto if m.len() > DENSE_SVD_LIMIT => SvdMethod::Subspace,
        SvdMethod::Auto => SvdMethod::Dense,
        other => other,
    };
    match method {
        SvdMethod::Subspace => subspace_truncated(m, rank),
        _ => Ok(dense_truncated(m, rank)),
    }
}

fn dense_truncated(m: &DMatrix<f64>, rank: usize) -> TruncatedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u computed");
    let vt = svd.v_t.expect("v computed");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let matrix = rebuild(&u, &sv, &vt, &order, rank);
    TruncatedSvd {
        matrix,
        singular_values: sv,
        note: None,
    }
}

fn rebuild(
    u: &DMatrix<f64>,
    sv: &[f64],
    vt: &DMatrix<f64>,
    order: &[usize],
    rank: usize,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(u.nrows(), vt.ncols());
    for (&i, &s) in order.iter().zip(sv).take(rank) {
        let mut ui = u.column(i).into_owned();
        let mut vi = vt.row(i).into_owned();
        let lead = ui.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            ui.neg_mut();
            vi.neg_mut();
        }
        out += (ui * s) * vi;
    }
    out
}

/// Block power iteration with oversampling, then Rayleigh-Ritz.
fn subspace_truncated(m: &DMatrix<f64>, rank: usize) -> Result<TruncatedSvd> {
    const TOL: f64 = 1e-13;
    const MAX_ITER: usize = 2000;
    let (rows, cols) = m.shape();
    let k = (rank + 10).min(rows.min(cols));
    let mut rng = CounterRng::new(0x5eed, 0);
    let mut omega = DMatrix::from_fn(cols, k, |_, _| rng.gaussian());
    let mut prev: Vec<f64> = vec![0.0; rank];
    for _ in 0..MAX_ITER {
        let q = (m * &omega).qr().q();
        let z = m.transpose() * &q;
        let (qz, rz) = z.qr().unpack();
        omega = qz;
        let mut est: Vec<f64> = (0..k).map(|j| rz[(j, j)].abs()).collect();
        est.sort_by(|a, b| b.total_cmp(a));
        let top = est[0].max(f64::MIN_POSITIVE);
        let done = est
            .iter()
            .zip(&prev)
            .take(rank)
            .all(|(a, b)| (a - b).abs() <= TOL * top);
        prev = est[..rank].to_vec();
        if done {
            let q = (m * &omega).qr().q();
            let b = q.transpose() * m;
            let small = dense_truncated(&b, rank);
            return Ok(TruncatedSvd {
                matrix: &q * small.matrix,
                singular_values: small.singular_values[..k.min(small.singular_values.len())].to_vec(),
                note: Some("subspace iteration".into()),
            });
        }
    }
    Err(LiarError::Numerical(format!(
        "subspace iteration did not converge in {MAX_ITER} iterations (last estimates {prev:?})"
    )))
}
