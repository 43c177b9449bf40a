mod common;

use chrono::TimeDelta;
use flowtrace_core::dora::compute_dora;
use flowtrace_core::simulate::{inject_intervention, run, ActivitySpec, ParameterPatch, ServiceDist};
use statrs::distribution::{Beta, ContinuousCDF};

/// Clopper-Pearson 95% interval for `k` successes in `n` trials.
fn clopper_pearson(k: usize, n: usize) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let lower = if k == 0.0 { 0.0 } else { Beta::new(k, n - k + 1.0).unwrap().inverse_cdf(0.025) };
    let upper = if k == n { 1.0 } else { Beta::new(k + 1.0, n - k).unwrap().inverse_cdf(0.975) };
    (lower, upper)
}

#[test]
fn change_failure_rate_at_a_thousand_deploys() {
    let mut s = common::mm1(20.0, 0.5, 1000, 182);
    s.deploy_failure_rate = 0.182;
    s.rollback_share = 0.4;
    let (log, truth) = run(&s).unwrap();
    let (start, end) = log.time_span().unwrap();
    let report = compute_dora(&log, start, end + TimeDelta::milliseconds(1), 48.0).unwrap();
    assert_eq!(report.deploys, 1000);
    assert_eq!(report.failed_deploys, truth.failed_deploys);
    let cfr = report.change_failure_rate.unwrap();
    assert_eq!(Some(cfr), truth.change_failure_rate);
    let (lo, hi) = clopper_pearson(report.failed_deploys, report.deploys);
    assert!(lo <= 0.182 && 0.182 <= hi, "cfr {cfr}, interval ({lo}, {hi})");
}

#[test]
fn noiseless_pipeline_gives_exact_lead_time() {
    let mut stage = ActivitySpec::new("release", ServiceDist::Deterministic { hours: 36.0 });
    stage.servers = None;
    let mut s = common::mm1(2.0, 1.0, 200, 5);
    s.activities = vec![stage];
    let (log, _) = run(&s).unwrap();
    let (start, end) = log.time_span().unwrap();
    let report = compute_dora(&log, start, end + TimeDelta::milliseconds(1), 48.0).unwrap();
    let lead = report.lead_time_days.unwrap();
    assert_eq!(lead.median, 1.5);
    assert_eq!(lead.p95, 1.5);
    assert_eq!(report.commits_paired, 200);
    assert!(report.mttr_hours.is_none());
}

#[test]
fn failure_rate_patch_moves_realized_rate() {
    let mut base = common::pipeline(31);
    base.deploy_failure_rate = 0.25;
    base.incidents = None;
    base.horizon_days = 1200.0;
    let patch = ParameterPatch {
        deploy_failure_rate: Some(0.05),
        ..Default::default()
    };
    let s = inject_intervention(&base, 600.0, patch).unwrap();
    let (log, truth) = run(&s).unwrap();
    let iv = &truth.interventions[0];
    assert_eq!(iv.configured_deploy_failure_rate_before, 0.25);
    assert_eq!(iv.configured_deploy_failure_rate_after, 0.05);

    let t0 = s.start + TimeDelta::days(600);
    let (start, end) = log.time_span().unwrap();
    let end = end + TimeDelta::milliseconds(1);
    for (a, b, rate) in [(start, t0, 0.25), (t0, end, 0.05)] {
        let r = compute_dora(&log, a, b, 48.0).unwrap();
        let (lo, hi) = clopper_pearson(r.failed_deploys, r.deploys);
        assert!(r.deploys > 500);
        assert!(lo <= rate && rate <= hi, "rate {rate}: ({lo}, {hi})");
    }
}
