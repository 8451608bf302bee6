use liar_core::error::LiarError;
use liar_core::grid::{GridSeries, Shape, SiteIndex};
use liar_core::kernel::KernelField;
use liar_core::rng::CounterRng;
use liar_core::select::{bic_score, select_all, select_site, Candidates};
use liar_core::simulate::{random_stable_kernels, simulate_liar, NoiseSpec};

fn center_choice(series: &GridSeries, k0: usize) -> usize {
    let shape = series.shape();
    let center = SiteIndex::new(shape.dims().iter().map(|d| d / 2).collect::<Vec<_>>());
    let family = Candidates::uniform(k0).family(&center, shape).unwrap();
    let d0 = (series.t_len() as f64).ln().ln();
    select_site(series, &family, 1, d0).unwrap().chosen_k
}

#[test]
fn self_only_truth_selects_radius_zero() {
    let shape = Shape::new(vec![5, 5]).unwrap();
    let k = KernelField::self_only(shape, 0.8).unwrap();
    let hits = (0..100)
        .filter(|&seed| {
            let s = simulate_liar(&k, 5000, 200, NoiseSpec::gaussian(1.0, seed)).unwrap();
            center_choice(&s, 2) == 0
        })
        .count();
    assert!(hits >= 95, "radius 0 chosen in {hits}/100 seeds");
}

#[test]
fn white_noise_selects_radius_zero() {
    let shape = Shape::new(vec![5, 5]).unwrap();
    let hits = (0..100u64)
        .filter(|&seed| {
            let values: Vec<f64> = (0..25 * 2000)
                .map({
                    let mut rng = CounterRng::new(seed, 0);
                    move |_| rng.gaussian()
                })
                .collect();
            let s = GridSeries::new(shape.clone(), 2000, values).unwrap();
            center_choice(&s, 2) == 0
        })
        .count();
    assert!(hits >= 90, "radius 0 chosen in {hits}/100 seeds");
}

#[test]
fn stored_scores_can_be_audited() {
    let shape = Shape::new(vec![8, 8]).unwrap();
    let k = random_stable_kernels(&shape, 1, 1, 0.8, 21).unwrap();
    let s = simulate_liar(&k, 800, 200, NoiseSpec::gaussian(1.0, 21)).unwrap();
    let report = select_all(&s, &Candidates::uniform(3), 1, None).unwrap();
    assert!(report.failures.is_empty());
    let json = serde_json::to_string(&report).unwrap();
    let back: liar_core::select::SelectionReport = serde_json::from_str(&json).unwrap();
    for t in &back.traces {
        for l in &t.levels {
            let recomputed = bic_score(l.rss, l.size, back.lags, back.t_len, &back.shape, back.d0);
            assert!((recomputed - l.bic).abs() <= 1e-12 * l.bic.abs().max(1.0), "{t:?}");
        }
        for w in t.levels.windows(2) {
            assert!(w[1].rss <= w[0].rss * (1.0 + 1e-9));
        }
        let best = t.levels.iter().map(|l| l.bic).fold(f64::INFINITY, f64::min);
        assert_eq!(t.chosen().bic, best);
        assert_eq!(t.levels.iter().find(|l| l.bic == best).unwrap().k, t.chosen_k);
    }
    // re-running changes nothing
    assert_eq!(select_all(&s, &Candidates::uniform(3), 1, None).unwrap(), report);
}

// Radii lists such as (1,0) then (0,1) are not nested: neither box contains
// the other, so "the smallest adequate neighborhood" has no meaning and the
// candidate list is refused rather than silently reordered.
#[test]
fn non_nested_candidates_are_refused() {
    let shape = Shape::new(vec![5, 5]).unwrap();
    let s = GridSeries::zeros(shape, 100).unwrap();
    let cands = Candidates::Radii(vec![vec![0, 0], vec![1, 0], vec![0, 1]]);
    let err = select_all(&s, &cands, 1, Some(1.0)).unwrap_err();
    assert!(matches!(err, LiarError::Config(_)), "{err}");
}

#[test]
fn boundary_sites_see_truncated_families() {
    let shape = Shape::new(vec![10, 10]).unwrap();
    let k = random_stable_kernels(&shape, 2, 1, 0.8, 8).unwrap();
    let s = simulate_liar(&k, 1500, 200, NoiseSpec::gaussian(1.0, 8)).unwrap();
    let report = select_all(&s, &Candidates::uniform(4), 1, None).unwrap();
    let corner = &report.traces[0];
    let center = &report.traces[55];
    assert_eq!(corner.levels.len(), 5);
    assert_eq!(corner.levels[1].size, 4);
    assert_eq!(center.levels[1].size, 9);
    assert_eq!(corner.levels[4].size, 25);
}
