//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints one PASS/FAIL line; exits non-zero if any fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use liar_core::evaluate::{compare_methods, AutoCovAccumulator, CompareConfig, Method};
use liar_core::fit::{assemble_design, box_neighborhoods, fit_all, fit_site, FitReport};
use liar_core::grid::{GridSeries, Shape};
use liar_core::gts::{decode_gts, encode_gts, write_gts};
use liar_core::linalg::truncated_svd;
use liar_core::neighborhood::{Neighborhood, NeighborhoodFamily};
use liar_core::rng::CounterRng;
use liar_core::select::{bic_score, is_interior, select_all, Candidates};
use liar_core::separable::{assemble_block, fit_spliar, scatter, separable_kernels};
use liar_core::simulate::{
    operator_norm, random_stable_box_kernels, random_stable_kernels, simulate_liar, LiarSimulator,
    NoiseSpec,
};
use nalgebra::{DMatrix, DVector};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

/// Least-squares slope of `ln y` on `ln x`.
fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims.to_vec()).unwrap()
}

// 1. Full-grid neighborhoods reproduce dense VAR(1) least squares.
fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let sh = shape(&[3, 3]);
    let k = random_stable_kernels(&sh, 1, 1, 0.8, 1).unwrap();
    let s = simulate_liar(&k, 200, 500, NoiseSpec::gaussian(1.0, 1)).unwrap();
    let nbs: Vec<Neighborhood> = sh.sites().map(|c| Neighborhood::full(&c, &sh).unwrap()).collect();
    let report = fit_all(&s, &nbs, 1).unwrap();

    let mut sxx = DMatrix::<f64>::zeros(9, 9);
    let mut syx = DMatrix::<f64>::zeros(9, 9);
    let frames: Vec<&[f64]> = s.frames().collect();
    for w in frames.windows(2) {
        let x = DVector::from_column_slice(w[0]);
        let y = DVector::from_column_slice(w[1]);
        sxx += &x * x.transpose();
        syx += &y * x.transpose();
    }
    let var = syx * sxx.lu().try_inverse().unwrap();
    let diff = report
        .fits
        .iter()
        .enumerate()
        .flat_map(|(i, f)| (0..9).map(move |j| (i, j, f.coeffs[j])))
        .map(|(i, j, c)| (c - var[(i, j)]).abs())
        .fold(0.0, f64::max);
    let t = start.elapsed();
    outcome(
        diff <= 1e-8 && within(t, 1),
        format!("max |coef - VAR OLS| = {diff:.2e}, {:.2}s", t.as_secs_f64()),
    )
}

// 2. Kernel error decays like T^(-1/2).
fn kernel_error_rate() -> Outcome {
    let start = Instant::now();
    let sh = shape(&[10, 10]);
    let ts = [500usize, 1000, 2000, 4000, 8000];
    let nbs = box_neighborhoods(&sh, &[3, 3]).unwrap();
    let mut errs = vec![Vec::new(); ts.len()];
    for seed in 0..20u64 {
        let truth = random_stable_kernels(&sh, 3, 1, 0.8, 1000 + seed).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let s = simulate_liar(&truth, t, 500, NoiseSpec::gaussian(1.0, seed)).unwrap();
            let est = fit_all(&s, &nbs, 1).unwrap().to_kernels().unwrap();
            errs[i].push(est.frobenius_distance(&truth).unwrap());
        }
    }
    let means: Vec<f64> = errs.iter().map(|e| mean(e)).collect();
    let x: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let slope = loglog_slope(&x, &means);
    let t = start.elapsed();
    outcome(
        (-0.65..=-0.35).contains(&slope) && within(t, 120),
        format!(
            "slope {slope:.3}, mean errors {:?}, {:.1}s",
            means.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>(),
            t.as_secs_f64()
        ),
    )
}

// 3. BIC picks the true radius, more often with more data.
fn selection_consistency() -> Outcome {
    let start = Instant::now();
    let sh = shape(&[10, 10]);
    let dims = sh.dims().to_vec();
    let cands = Candidates::uniform(5);
    let mut interior = [Vec::new(), Vec::new()];
    let mut boundary = [Vec::new(), Vec::new()];
    for seed in 0..20u64 {
        let truth = random_stable_kernels(&sh, 3, 1, 0.8, 2000 + seed).unwrap();
        for (i, t) in [1000usize, 6000].into_iter().enumerate() {
            let s = simulate_liar(&truth, t, 500, NoiseSpec::gaussian(1.0, seed)).unwrap();
            let r = select_all(&s, &cands, 1, None).unwrap();
            interior[i].push(r.success_rate(3, |c| is_interior(c, &dims, 3)).unwrap());
            boundary[i].push(r.success_rate(3, |c| !is_interior(c, &dims, 3)).unwrap());
        }
    }
    let (int_lo, int_hi) = (mean(&interior[0]), mean(&interior[1]));
    let bnd_hi = mean(&boundary[1]);
    let t = start.elapsed();
    outcome(
        int_hi >= 0.8 && int_lo <= int_hi && bnd_hi <= int_hi && within(t, 180),
        format!(
            "interior T=6000 {int_hi:.3}, interior T=1000 {int_lo:.3}, boundary T=6000 {bnd_hi:.3}, {:.1}s",
            t.as_secs_f64()
        ),
    )
}

// 4. Sample auto-covariance converges at the parametric rate.
fn autocov_rate() -> Outcome {
    let start = Instant::now();
    let sh = shape(&[10, 10]);
    let truth = random_stable_kernels(&sh, 1, 1, 0.8, 4000).unwrap();
    let block: Vec<usize> = (3..8)
        .flat_map(|j| (3..8).map(move |i| i + 10 * j))
        .collect();

    let mut sim = LiarSimulator::new(&truth, NoiseSpec::gaussian(1.0, u64::MAX / 2)).unwrap();
    for _ in 0..500 {
        sim.step();
    }
    let mut acc = AutoCovAccumulator::new(100, block.clone(), block.clone()).unwrap();
    for _ in 0..1_000_000 {
        acc.push(sim.step());
    }
    let population = acc.finish().unwrap().values;

    let ts = [500usize, 1000, 2000, 5000];
    let mut means = Vec::new();
    for &t in &ts {
        let errs: Vec<f64> = (0..20u64)
            .map(|seed| {
                let s = simulate_liar(&truth, t, 500, NoiseSpec::gaussian(1.0, seed)).unwrap();
                let est = liar_core::evaluate::autocov(&s, &block, &block).unwrap().values;
                (est - &population).amax()
            })
            .collect();
        means.push(mean(&errs));
    }
    let x: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let slope = loglog_slope(&x, &means);
    let t = start.elapsed();
    outcome(
        (-0.65..=-0.35).contains(&slope) && within(t, 120),
        format!(
            "slope {slope:.3}, mean sup errors {:?}, {:.1}s",
            means.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>(),
            t.as_secs_f64()
        ),
    )
}

// 5. Local neighborhoods beat the pixel-wise baseline and fit faster than
//    the bilinear baseline.
fn baseline_ordering() -> Outcome {
    let start = Instant::now();
    let sh = shape(&[20, 20]);
    let methods = [Method::Liar, Method::LiarP, Method::Mar];
    let (mut rmse, mut secs) = ([0.0f64; 3], [0.0f64; 3]);
    for seed in 0..20u64 {
        let truth = random_stable_kernels(&sh, 2, 1, 0.8, 5000 + seed).unwrap();
        let s = simulate_liar(&truth, 200, 500, NoiseSpec::gaussian(1.0, seed)).unwrap();
        let cfg = CompareConfig { lags: 1, k: 2, rank: 1, train_fraction: 0.9, seed };
        let rows = compare_methods(&s, &methods, &cfg).unwrap();
        for (i, r) in rows.iter().enumerate() {
            rmse[i] += r.rmse / 20.0;
            secs[i] += r.fit_seconds;
        }
    }
    let t = start.elapsed();
    outcome(
        rmse[0] < rmse[1] && secs[0] < secs[2] && within(t, 180),
        format!(
            "rmse liar {:.4} / liar_p {:.4} / mar {:.4}; fit seconds liar {:.3} / mar {:.3}; {:.1}s",
            rmse[0], rmse[1], rmse[2], secs[0], secs[2], t.as_secs_f64()
        ),
    )
}

fn random_band(n: usize, rng: &mut CounterRng) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) <= 1 {
            rng.uniform_range(-1.0, 1.0)
        } else {
            0.0
        }
    })
}

// 6. Rank projection does not hurt (and usually helps) under separability.
fn spliar_projection() -> Outcome {
    let start = Instant::now();
    let sh = shape(&[10, 10]);
    let (mut proj, mut raw) = (Vec::new(), Vec::new());
    for seed in 0..20u64 {
        let mut rng = CounterRng::new(6000 + seed, 0);
        let a = random_band(10, &mut rng);
        let b = random_band(10, &mut rng);
        let mut truth = separable_kernels(&sh, 1, 1, &[(a, b)]).unwrap();
        let norm = operator_norm(&truth).unwrap();
        truth.scale(0.8 / norm);
        let s = simulate_liar(&truth, 2000, 500, NoiseSpec::gaussian(1.0, seed)).unwrap();
        let fit = fit_spliar(&s, 1, 1, 1, 1).unwrap();
        proj.push(fit.kernels.frobenius_distance(&truth).unwrap());
        raw.push(fit.unprojected.frobenius_distance(&truth).unwrap());
    }
    let (p, r) = (mean(&proj), mean(&raw));
    let t = start.elapsed();
    outcome(
        p <= r && within(t, 60),
        format!("mean error projected {p:.4} vs unprojected {r:.4}, {:.1}s", t.as_secs_f64()),
    )
}

// 7. Structural properties, each checked on random instances.
fn property_suites() -> Outcome {
    let start = Instant::now();
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |name, ok: bool| {
        if !ok {
            failed.push(name);
        }
    };

    let sh = shape(&[8, 7]);
    let truth = random_stable_kernels(&sh, 1, 2, 0.8, 77).unwrap();
    let s = simulate_liar(&truth, 600, 500, NoiseSpec::gaussian(1.0, 77)).unwrap();

    // nesting
    let nested = sh.sites().all(|c| {
        let fam = NeighborhoodFamily::nested(&c, &sh, 5, None).unwrap();
        fam.levels().windows(2).all(|w| {
            w[0].neighborhood.is_subset_of(&w[1].neighborhood) && w[0].neighborhood.len() < w[1].neighborhood.len()
        })
    });
    check("nesting", nested);

    // residual orthogonality and RSS monotonicity
    let mut orthogonal = true;
    let mut monotone = true;
    for c in sh.sites() {
        let mut last = f64::INFINITY;
        for r in 0..=2 {
            let nb = Neighborhood::boxed(&c, &sh, &[r, r]).unwrap();
            let d = assemble_design(&s, &nb, 2).unwrap();
            let f = fit_site(&d);
            let resid = &d.z - &d.y * DVector::from_column_slice(&f.coeffs);
            orthogonal &= (d.y.transpose() * resid).amax() <= 1e-10 * d.y.norm() * d.z.norm();
            monotone &= f.rss <= last * (1.0 + 1e-9);
            last = f.rss;
        }
    }
    check("residual orthogonality", orthogonal);
    check("rss monotonicity", monotone);

    // Eckart-Young against random candidates
    let mut rng = CounterRng::new(7, 7);
    let mut optimal = true;
    for _ in 0..20 {
        let m = DMatrix::from_fn(10, 10, |_, _| rng.gaussian());
        for rank in [1usize, 2, 3] {
            let best = (&m - truncated_svd(&m, rank).unwrap().matrix).norm();
            for _ in 0..20 {
                let u = DMatrix::from_fn(10, rank, |_, _| rng.gaussian());
                let v = DMatrix::from_fn(rank, 10, |_, _| rng.gaussian());
                optimal &= best <= (&m - u * v).norm() + 1e-12;
            }
        }
    }
    check("eckart-young", optimal);

    // assemble / scatter identity
    let boxed = random_stable_box_kernels(&sh, &[1, 2], 2, 0.8, 78).unwrap();
    let blocks: Vec<_> = (1..=2).map(|p| assemble_block(&boxed, 1, 2, p).unwrap()).collect();
    check("assemble/scatter", scatter(&blocks, &boxed).unwrap() == boxed);

    // GTS round trip
    let bytes = encode_gts(&s).unwrap();
    let back = decode_gts(&bytes).unwrap();
    let bitwise = back.values().iter().zip(s.values()).all(|(a, b)| a.to_bits() == b.to_bits());
    check("gts round trip", back.shape() == s.shape() && back.t_len() == s.t_len() && bitwise);

    // thread-count determinism
    let nbs = box_neighborhoods(&sh, &[2, 2]).unwrap();
    let run = |n| -> FitReport {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| fit_all(&s, &nbs, 2).unwrap())
    };
    let (one, eight) = (run(1), run(8));
    let bits = |r: &FitReport| -> Vec<u64> {
        r.fits
            .iter()
            .flat_map(|f| f.coeffs.iter().chain([&f.rss]).map(|v| v.to_bits()))
            .collect()
    };
    check("thread determinism", one == eight && bits(&one) == bits(&eight));

    // BIC audit
    let report = select_all(&s, &Candidates::uniform(3), 2, None).unwrap();
    let audited = report.traces.iter().all(|t| {
        t.levels.iter().all(|l| {
            let b = bic_score(l.rss, l.size, report.lags, report.t_len, &report.shape, report.d0);
            (b - l.bic).abs() <= 1e-12 * l.bic.abs().max(1.0)
        })
    });
    check("bic audit", audited);

    let t = start.elapsed();
    let pass = failed.is_empty() && within(t, 60);
    let detail = if failed.is_empty() {
        format!("8 suites, {:.1}s", t.as_secs_f64())
    } else {
        format!("failed: {}, {:.1}s", failed.join(", "), t.as_secs_f64())
    };
    outcome(pass, detail)
}

// 8. Three-way grids: anisotropic box selection and consistent fitting.
fn tensor_path() -> Outcome {
    let start = Instant::now();
    let sh = shape(&[4, 4, 6]);
    let dims = sh.dims().to_vec();
    let true_radii = [0usize, 1, 1];
    let cands = Candidates::Radii(vec![
        vec![0, 0, 0],
        vec![0, 0, 1],
        vec![0, 1, 1],
        vec![1, 1, 1],
        vec![1, 2, 2],
    ]);
    let interior = |c: &[usize]| (0..3).all(|j| c[j] >= true_radii[j] && c[j] + true_radii[j] < dims[j]);
    let nbs = box_neighborhoods(&sh, &true_radii).unwrap();
    let mut rates = Vec::new();
    let (mut e1000, mut e4000) = (Vec::new(), Vec::new());
    for seed in 0..10u64 {
        let truth = random_stable_box_kernels(&sh, &true_radii, 1, 0.8, 8000 + seed).unwrap();
        let s = simulate_liar(&truth, 4000, 500, NoiseSpec::gaussian(1.0, seed)).unwrap();
        let r = select_all(&s, &cands, 1, None).unwrap();
        rates.push(r.success_rate(2, interior).unwrap());
        let err = |s: &GridSeries| {
            fit_all(s, &nbs, 1).unwrap().to_kernels().unwrap().frobenius_distance(&truth).unwrap()
        };
        e4000.push(err(&s));
        e1000.push(err(&s.slice(0, 1000).unwrap()));
    }
    let shrunk = e1000.iter().zip(&e4000).filter(|(a, b)| b < a).count();
    let (rate, m1, m4) = (mean(&rates), mean(&e1000), mean(&e4000));
    let t = start.elapsed();
    outcome(
        rate >= 0.7 && m4 < m1 && within(t, 180),
        format!(
            "interior recovery {rate:.3}; error T=1000 {m1:.4} -> T=4000 {m4:.4} (smaller in {shrunk}/10 pairs); {:.1}s",
            t.as_secs_f64()
        ),
    )
}

// Ingesting a 91 x 181 x 960 grid and fitting K=2 boxes stays under 2 GB.
fn large_grid_memory() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sh = shape(&[91, 181]);
    let truth = random_stable_kernels(&sh, 2, 1, 0.8, 9).unwrap();
    let s = simulate_liar(&truth, 960, 200, NoiseSpec::gaussian(1.0, 9)).unwrap();
    let input = dir.path().join("grid.gts");
    write_gts(&s, &input).unwrap();
    drop(s);
    let out_dir = dir.path().join("run");
    let status = Command::new(env!("CARGO_BIN_EXE_liar"))
        .args(["fit", "--K", "2", "--input"])
        .arg(&input)
        .arg("--output-dir")
        .arg(&out_dir)
        .status()
        .unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let peak_kb = manifest["peak_rss_kb"].as_u64();
    let fitted = manifest["summary"]["sites_fitted"].as_u64();
    let t = start.elapsed();
    let limit_kb = 2 * 1024 * 1024;
    outcome(
        status.success() && fitted == Some(91 * 181) && peak_kb.is_some_and(|k| k < limit_kb),
        format!(
            "exit {:?}, {} sites fitted, peak RSS {} MB, {:.1}s",
            status.code(),
            fitted.unwrap_or(0),
            peak_kb.map_or("unknown".into(), |k| (k / 1024).to_string()),
            t.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("1 oracle equivalence", oracle_equivalence),
        ("2 kernel error rate", kernel_error_rate),
        ("3 selection consistency", selection_consistency),
        ("4 auto-covariance rate", autocov_rate),
        ("5 baseline ordering", baseline_ordering),
        ("6 separable projection", spliar_projection),
        ("7 property suites", property_suites),
        ("8 tensor path", tensor_path),
        ("tec-scale memory", large_grid_memory),
    ];
    let mut failures = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let o = f();
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += usize::from(!o.pass);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
