mod common;

use chrono::TimeDelta;
use flowtrace_core::evaluate::{evaluate_log, EvaluationConfig};
use flowtrace_core::gqm::{Registry, EXAMPLE_REGISTRY_JSON};
use flowtrace_core::simulate::{inject_intervention, run, ActivitySpec, ParameterPatch, ServiceDist, SimScenario};

/// One unlimited-capacity stage whose median duration drops from 14.2 to
/// 7.4 days at day 196, with failure rate falling from 0.25 to 0.05.
fn lead_time_drop(seed: u64) -> SimScenario {
    let mut stage = ActivitySpec::new(
        "delivery",
        ServiceDist::Lognormal {
            mu: (14.2f64 * 24.0).ln(),
            sigma: 0.25,
        },
    );
    stage.servers = None;
    let mut s = common::mm1(10.0, 1.0, 1, seed);
    s.activities = vec![stage];
    s.max_items = None;
    s.horizon_days = 385.0;
    s.deploy_failure_rate = 0.25;
    let patch = ParameterPatch {
        processing_scale: Some(7.4 / 14.2),
        deploy_failure_rate: Some(0.05),
        ..Default::default()
    };
    inject_intervention(&s, 196.0, patch).unwrap()
}

fn config(s: &SimScenario, seed: u64) -> EvaluationConfig {
    let mut config = EvaluationConfig::new(s.start + TimeDelta::days(196), seed);
    config.baseline_start = Some(s.start + TimeDelta::days(28));
    config.stabilization_end = Some(s.start + TimeDelta::days(224));
    config.post_end = Some(s.start + TimeDelta::days(385));
    config
}

#[test]
fn lead_time_drop_is_recovered_from_the_log() {
    let registry = Registry::from_json(EXAMPLE_REGISTRY_JSON).unwrap();
    let (mut covered, mut total) = (0, 0.0);
    for seed in 100..120 {
        let s = lead_time_drop(seed);
        let (log, _) = run(&s).unwrap();
        let report = evaluate_log(&log, &registry, &config(&s, seed)).unwrap();
        let lead = &report.its["M1"];
        let (lo, hi) = lead.ci95[2];
        covered += usize::from(lo <= -6.8 && -6.8 <= hi);
        total += lead.level_change();

        let verdict = |id: &str| report.verdicts.iter().find(|v| v.metric_id == id).unwrap();
        assert!(verdict("M1").success, "seed {seed}");
        assert!(verdict("M2").success, "seed {seed}");
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].metric_id, "M3");
    }
    assert!(covered >= 17, "covered {covered}/20");
    assert!((total / 20.0 + 6.8).abs() <= 0.5, "mean {}", total / 20.0);
}

#[test]
fn transition_weeks_are_excluded() {
    let s = lead_time_drop(3);
    let (log, _) = run(&s).unwrap();
    let registry = Registry::from_json(EXAMPLE_REGISTRY_JSON).unwrap();
    let with_gap = evaluate_log(&log, &registry, &config(&s, 3)).unwrap();
    let mut no_gap = config(&s, 3);
    no_gap.stabilization_end = None;
    let without = evaluate_log(&log, &registry, &no_gap).unwrap();
    assert_eq!(with_gap.its["M1"].n + 4, without.its["M1"].n);

    let mut bad = config(&s, 3);
    bad.stabilization_end = Some(s.start + TimeDelta::days(190));
    assert!(evaluate_log(&log, &registry, &bad).is_err());
}
