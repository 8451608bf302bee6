//! Stability certificates and simulation of stationary LIAR processes.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LiarError, Result};
use crate::grid::{GridSeries, Shape};
use crate::kernel::{dot_on, KernelField, SiteKernel};
use crate::neighborhood::Neighborhood;
use crate::rng::{CounterRng, KERNEL_STREAM};

pub const DEFAULT_BURN_IN: usize = 500;
pub const NORM_TOL: f64 = 1e-8;
pub const NORM_MAX_ITER: usize = 10_000;

/// Grids with at least this many sites update frames in parallel.
const PAR_SITES: usize = 4096;

/// Largest singular value of the lag-`p` operator by power iteration on
/// `M^T M` with matrix-free products.
pub fn lag_operator_norm(kernels: &KernelField, p: usize) -> Result<f64> {
    let n = kernels.shape().len();
    let mut rng = CounterRng::new(0x6f70_6e6f_726d, p as u64);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
    normalize(&mut v);
    let mut w = vec![0.0; n];
    let mut u = vec![0.0; n];
    let (mut prev, mut last) = (f64::NAN, f64::NAN);
    for _ in 0..NORM_MAX_ITER {
        kernels.apply(p, &v, &mut w);
        let lambda: f64 = w.iter().map(|x| x * x).sum();
        if lambda == 0.0 {
            return Ok(0.0);
        }
        if (lambda - last).abs() <= NORM_TOL * lambda {
            return Ok(lambda.sqrt());
        }
        prev = last;
        last = lambda;
        kernels.apply_transpose(p, &w, &mut u);
        v.copy_from_slice(&u);
        if normalize(&mut v) == 0.0 {
            return Ok(0.0);
        }
    }
    Err(LiarError::Numerical(format!(
        "power iteration did not converge in {NORM_MAX_ITER} steps; last two estimates {} and {}",
        prev.sqrt(),
        last.sqrt()
    )))
}

/// Stability certificate of a kernel field: `sum_p ||M_p||_op`, which is the
/// operator norm of `M` for a single lag. A value below 1 guarantees a
/// stationary process.
pub fn operator_norm(kernels: &KernelField) -> Result<f64> {
    (1..=kernels.lags())
        .map(|p| lag_operator_norm(kernels, p))
        .sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Uniform(-1, 1) coefficients on clipped boxes of radius `radius`,
/// rescaled so the stability certificate equals `target_norm`.
pub fn random_stable_kernels(
    shape: &Shape,
    radius: usize,
    lags: usize,
    target_norm: f64,
    seed: u64,
) -> Result<KernelField> {
    let radii = vec![radius; shape.ndim()];
    random_stable_box_kernels(shape, &radii, lags, target_norm, seed)
}

/// As [`random_stable_kernels`] with per-axis radii.
pub fn random_stable_box_kernels(
    shape: &Shape,
    radii: &[usize],
    lags: usize,
    target_norm: f64,
    seed: u64,
) -> Result<KernelField> {
    if !(target_norm > 0.0 && target_norm < 1.0) {
        return Err(LiarError::Config(format!(
            "target norm {target_norm} must lie in (0, 1)"
        )));
    }
    let neighborhoods = shape
        .sites()
        .map(|s| Neighborhood::boxed(&s, shape, radii))
        .collect::<Result<Vec<_>>>()?;
    for attempt in 0..=5u64 {
        let mut rng = CounterRng::new(seed.wrapping_add(attempt), KERNEL_STREAM);
        let sites: Vec<SiteKernel> = neighborhoods
            .iter()
            .map(|nb| SiteKernel {
                coeffs: (0..lags)
                    .map(|_| (0..nb.len()).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
                    .collect(),
                neighborhood: nb.clone(),
            })
            .collect();
        let mut field = KernelField::new(shape.clone(), lags, sites)?;
        let norm = operator_norm(&field)?;
        if norm > 0.0 {
            field.scale(target_norm / norm);
            return Ok(field);
        }
    }
    Err(LiarError::Numerical(
        "kernel draws had zero norm after 5 retries".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    IidGaussian,
    IidUniform,
}

/// Innovation distribution: i.i.d. entries with standard deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::IidGaussian,
            sigma,
            seed,
        }
    }
}

/// Frame-by-frame generator. Starts from `P` zero frames; every site draws
/// its noise from its own stream so the output does not depend on how sites
/// are scheduled.
pub struct LiarSimulator<'a> {
    kernels: &'a KernelField,
    noise: NoiseSpec,
    rngs: Vec<CounterRng>,
    history: VecDeque<Vec<f64>>,
    scratch: Vec<f64>,
}

impl<'a> LiarSimulator<'a> {
    pub fn new(kernels: &'a KernelField, noise: NoiseSpec) -> Result<Self> {
        if !(noise.sigma >= 0.0 && noise.sigma.is_finite()) {
            return Err(LiarError::Config(format!(
                "noise sigma {} must be finite and >= 0",
                noise.sigma
            )));
        }
        let norm = operator_norm(kernels)?;
        if norm >= 1.0 {
            return Err(LiarError::Stability { norm });
        }
        let n = kernels.shape().len();
        Ok(LiarSimulator {
            kernels,
            noise,
            rngs: (0..n as u64).map(|i| CounterRng::new(noise.seed, i)).collect(),
            history: (0..kernels.lags()).map(|_| vec![0.0; n]).collect(),
            scratch: vec![0.0; n],
        })
    }

    /// Starts from the given frames, most recent first (`recent[p - 1]` is
    /// the frame `p` steps back). Missing older frames are zero.
    pub fn with_history(kernels: &'a KernelField, noise: NoiseSpec, recent: &[&[f64]]) -> Result<Self> {
        let mut sim = Self::new(kernels, noise)?;
        let n = kernels.shape().len();
        for (slot, frame) in sim.history.iter_mut().zip(recent) {
            if frame.len() != n {
                return Err(LiarError::Structure(format!(
                    "history frame has {} values for {n} sites",
                    frame.len()
                )));
            }
            slot.copy_from_slice(frame);
        }
        Ok(sim)
    }

    /// Advances one step and returns the new frame.
    pub fn step(&mut self) -> &[f64] {
        let mut next = std::mem::take(&mut self.scratch);
        let history = &self.history;
        let noise = self.noise;
        // history[p - 1] holds X_{t-p}.
        let update = |((x, rng), k): ((&mut f64, &mut CounterRng), &SiteKernel)| {
            let acc: f64 = history
                .iter()
                .zip(&k.coeffs)
                .map(|(prev, m)| dot_on(m, k.neighborhood.sites(), prev))
                .sum();
            *x = acc + draw(rng, &noise);
        };
        run_sites(&mut next, &mut self.rngs, self.kernels.sites(), update);
        self.scratch = self.history.pop_back().expect("at least one lag");
        self.history.push_front(next);
        &self.history[0]
    }
}

fn run_sites<F>(frame: &mut [f64], rngs: &mut [CounterRng], kernels: &[SiteKernel], f: F)
where
    F: Fn(((&mut f64, &mut CounterRng), &SiteKernel)) + Sync + Send,
{
    if frame.len() >= PAR_SITES {
        frame
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .zip(kernels.par_iter())
            .with_min_len(256)
            .for_each(f);
    } else {
        frame
            .iter_mut()
            .zip(rngs.iter_mut())
            .zip(kernels.iter())
            .for_each(f);
    }
}

#[inline]
fn draw(rng: &mut CounterRng, noise: &NoiseSpec) -> f64 {
    if noise.sigma == 0.0 {
        return 0.0;
    }
    match noise.kind {
        NoiseKind::IidGaussian => noise.sigma * rng.gaussian(),
        NoiseKind::IidUniform => noise.sigma * 3f64.sqrt() * (2.0 * rng.uniform() - 1.0),
    }
}

/// Iterates the recursion `burn_in + t_len` steps from zero and returns the
/// last `t_len` frames.
pub fn simulate_liar(
    kernels: &KernelField,
    t_len: usize,
    burn_in: usize,
    noise: NoiseSpec,
) -> Result<GridSeries> {
    if t_len == 0 {
        return Err(LiarError::Config("T must be positive".into()));
    }
    let mut sim = LiarSimulator::new(kernels, noise)?;
    for _ in 0..burn_in {
        sim.step();
    }
    let n = kernels.shape().len();
    let mut values = Vec::with_capacity(n * t_len);
    for _ in 0..t_len {
        values.extend_from_slice(sim.step());
    }
    GridSeries::new(kernels.shape().clone(), t_len, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(m: usize, n: usize) -> Shape {
        Shape::matrix(m, n).unwrap()
    }

    #[test]
    fn norm_examples() {
        let shape = grid(4, 3);
        let nbs = shape
            .sites()
            .map(|s| Neighborhood::boxed(&s, &shape, &[1, 1]).unwrap())
            .collect();
        let zero = KernelField::zeros(shape.clone(), 1, nbs).unwrap();
        assert_eq!(operator_norm(&zero).unwrap(), 0.0);
        let half = KernelField::self_only(shape, 0.5).unwrap();
        assert!((operator_norm(&half).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn norm_matches_dense_svd() {
        for seed in 0..5 {
            let k = random_stable_kernels(&grid(3, 3), 1, 1, 0.7, seed).unwrap();
            let mut raw = k.clone();
            raw.scale(3.7);
            let dense = raw.dense(1).svd(false, false).singular_values.max();
            let est = operator_norm(&raw).unwrap();
            assert!((dense - est).abs() < 1e-6, "{dense} vs {est}");
        }
    }

    #[test]
    fn random_kernels_hit_target() {
        let shape = grid(6, 5);
        let a = random_stable_kernels(&shape, 2, 1, 0.8, 42).unwrap();
        assert!((operator_norm(&a).unwrap() - 0.8).abs() <= 1e-6);
        let b = random_stable_kernels(&shape, 2, 1, 0.8, 42).unwrap();
        assert_eq!(a, b);
        let two = random_stable_kernels(&shape, 1, 2, 0.6, 1).unwrap();
        assert!((operator_norm(&two).unwrap() - 0.6).abs() <= 1e-6);
        let selfish = random_stable_kernels(&shape, 0, 1, 0.5, 3).unwrap();
        assert!(selfish.sites().iter().all(|k| k.neighborhood.len() == 1));
        assert!(random_stable_kernels(&shape, 1, 1, 1.0, 3).is_err());
    }

    #[test]
    fn zero_fixed_point() {
        let k = random_stable_kernels(&grid(4, 4), 1, 2, 0.8, 5).unwrap();
        let s = simulate_liar(&k, 50, 10, NoiseSpec::gaussian(0.0, 1)).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refuses_unstable() {
        let k = KernelField::self_only(grid(2, 2), 1.2).unwrap();
        match simulate_liar(&k, 10, 0, NoiseSpec::gaussian(1.0, 1)) {
            Err(LiarError::Stability { norm }) => assert!((norm - 1.2).abs() < 1e-9),
            other => panic!("expected stability error, got {other:?}"),
        }
    }

    #[test]
    fn scalar_ar1_autocorrelation() {
        let k = KernelField::self_only(grid(1, 1), 0.9).unwrap();
        let s = simulate_liar(&k, 10_000, DEFAULT_BURN_IN, NoiseSpec::gaussian(1.0, 11)).unwrap();
        let x = s.values();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let c0: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let c1: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        assert!((c1 / c0 - 0.9).abs() < 0.05, "{}", c1 / c0);
    }

    #[test]
    fn uniform_noise_has_requested_sd() {
        let k = KernelField::self_only(grid(2, 2), 0.0).unwrap();
        let noise = NoiseSpec {
            kind: NoiseKind::IidUniform,
            sigma: 2.0,
            seed: 4,
        };
        let s = simulate_liar(&k, 20_000, 0, noise).unwrap();
        let var = s.values().iter().map(|v| v * v).sum::<f64>() / s.values().len() as f64;
        assert!((var - 4.0).abs() < 0.1, "{var}");
        assert!(s.values().iter().all(|v| v.abs() <= 2.0 * 3f64.sqrt()));
    }

    #[test]
    fn stationary_means() {
        let k = random_stable_kernels(&grid(3, 3), 1, 1, 0.8, 8).unwrap();
        let t = 10_000;
        let s = simulate_liar(&k, t, DEFAULT_BURN_IN, NoiseSpec::gaussian(1.0, 9)).unwrap();
        for site in 0..9 {
            let xs: Vec<f64> = (0..t).map(|i| s.get(i, site)).collect();
            let mean = xs.iter().sum::<f64>() / t as f64;
            // Long-run variance via Bartlett-weighted autocovariances.
            let c = |lag: usize| {
                xs.iter().zip(&xs[lag..]).map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>() / t as f64
            };
            let bw = 50;
            let lrv = c(0) + 2.0 * (1..bw).map(|l| (1.0 - l as f64 / bw as f64) * c(l)).sum::<f64>();
            let se = (lrv / t as f64).sqrt();
            assert!(mean.abs() < 5.0 * se, "site {site}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let shape = grid(70, 60);
        let k = random_stable_kernels(&shape, 1, 1, 0.8, 2).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_liar(&k, 5, 3, NoiseSpec::gaussian(1.0, 3)).unwrap())
        };
        let a = run(1);
        let b = run(8);
        assert_eq!(a.values(), b.values());
    }
}
