use flowtrace_core::evaluate::{bootstrap_ci, did_estimate, BootstrapOptions, MetricSeries};
use flowtrace_core::stats::mean;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

#[test]
fn percentile_interval_for_a_mean_covers_nominally() {
    let n = 100;
    let mut covered = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // exponential with mean 2
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = Exp1.sample(&mut rng);
                2.0 * e
            })
            .collect();
        let opts = BootstrapOptions {
            replications: 2000,
            block_length: None,
            seed,
        };
        let ci = bootstrap_ci(&data, mean, &opts).unwrap();
        if ci.lower <= 2.0 && 2.0 <= ci.upper {
            covered += 1;
        }
    }
    assert!((93..=97).contains(&covered), "covered {covered}/100");
}

/// Weekly series sharing a seasonal cycle; the treated group drops by
/// `effect` from week `pre` on.
fn seasonal_pair(pre: usize, post: usize, effect: f64, seed: u64) -> (MetricSeries, MetricSeries) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut treated = Vec::new();
    let mut comparison = Vec::new();
    for k in 0..pre + post {
        let t = k as f64;
        let season = 3.0 * (2.0 * std::f64::consts::PI * t / 26.0).sin();
        let shift = if k >= pre { effect } else { 0.0 };
        let et: f64 = StandardNormal.sample(&mut rng);
        let ec: f64 = StandardNormal.sample(&mut rng);
        treated.push((t, 14.0 + season + shift + 0.5 * et));
        comparison.push((t, 11.0 + season + 0.5 * ec));
    }
    (
        MetricSeries::new("lead", treated, pre).unwrap(),
        MetricSeries::new("lead", comparison, pre).unwrap(),
    )
}

#[test]
fn did_removes_a_shared_seasonal_confound() {
    let (treated, comparison) = seasonal_pair(13, 13, -2.0, 9);
    let seg = |pts: &[(f64, f64)]| mean(&pts.iter().map(|p| p.1).collect::<Vec<_>>());
    let naive = seg(treated.post()) - seg(treated.pre());
    let did = did_estimate(&treated, &comparison, &BootstrapOptions { seed: 9, ..Default::default() }).unwrap();
    // the half-cycle split makes the naive contrast badly biased
    assert!((naive + 2.0).abs() > 2.0, "naive {naive}");
    assert!((did.effect + 2.0).abs() < 0.5, "did {}", did.effect);
    assert!(did.ci95.lower <= -2.0 && -2.0 <= did.ci95.upper);
}
