mod common;

use flowtrace_core::telemetry::{audit, parse_log, write_log, EventLog, EventType, LogFormat};
use flowtrace_core::valuestream::{compute_activity_stats, compute_flow};
use flowtrace_core::simulate::run;

fn ten_thousand_records() -> EventLog {
    let mut s = common::pipeline(21);
    s.horizon_days = 400.0;
    let (log, _) = run(&s).unwrap();
    assert!(log.len() >= 10_000, "only {} records", log.len());
    log
}

#[test]
fn large_log_round_trips_through_both_formats() {
    let log = ten_thousand_records();
    for format in [LogFormat::Jsonl, LogFormat::Csv] {
        let mut buf = Vec::new();
        write_log(&log, format, &mut buf).unwrap();
        let back = parse_log(buf.as_slice(), format).unwrap();
        assert!(back.rejected.is_empty());
        assert_eq!(back.log, log);
    }
}

#[test]
fn clean_log_passes_gate_and_dropping_starts_fails_it() {
    let (log, _) = run(&common::pipeline(4)).unwrap();
    let clean = audit(&log, 0.80);
    assert_eq!(clean.observability_fraction, 1.0);
    assert!(clean.gate_passed);

    // drop every started event whose sequence number is 0, 1 or 2 mod 10
    let mut k = 0usize;
    let corrupted = log.without(|r| {
        if r.event_type != EventType::Started {
            return false;
        }
        k += 1;
        k % 10 < 3
    });
    let dirty = audit(&corrupted, 0.80);
    assert!(dirty.observability_fraction < 0.80, "{}", dirty.observability_fraction);
    assert!(!dirty.gate_passed);
}

#[test]
fn flow_decomposition_closes_and_matches_truth() {
    for seed in 0..5 {
        let s = common::pipeline(seed);
        let (log, truth) = run(&s).unwrap();
        let outcome = compute_flow(&log, &s.value_added_rule());
        assert!(outcome.open_items.is_empty());
        assert_eq!(outcome.flows.len(), truth.items.len());
        for (f, t) in outcome.flows.iter().zip(&truth.items) {
            assert_eq!(f.work_item_id, t.work_item_id);
            assert!((f.value_added_time + f.non_value_added_time - f.lead_time).abs() <= 1e-9);
            assert_eq!(f.flow_efficiency, t.flow_efficiency);
            assert!((f.lead_time * 3_600_000.0 - t.lead_ms as f64).abs() < 1e-3);
        }
    }
}

#[test]
fn realized_failure_rates_are_close_to_configured() {
    let mut s = common::pipeline(8);
    s.horizon_days = 8000.0;
    let (log, truth) = run(&s).unwrap();
    let stats = compute_activity_stats(&log);
    let build = stats.iter().find(|a| a.activity == "build").unwrap();
    let attempts = (build.finished_attempts + build.failed_attempts) as f64;
    assert!(attempts >= 20_000.0);
    let se = (0.1f64 * 0.9 / attempts).sqrt();
    assert!((build.failure_rate_f.unwrap() - 0.1).abs() <= 3.0 * se);
    let truth_build = truth.activities.iter().find(|a| a.activity == "build").unwrap();
    assert!(truth_build.utilization < 0.7);
    assert_eq!(truth_build.realized_failure_rate, build.failure_rate_f);
}

#[test]
fn mm1_mean_wait_matches_closed_form() {
    // rho = 0.5 with a 2 hour mean service: lambda = 0.25 per hour
    let s = common::mm1(6.0, 2.0, 50_000, 77);
    let (log, truth) = run(&s).unwrap();
    assert_eq!(truth.items.len(), 50_000);
    let stats = compute_activity_stats(&log);
    let measured = stats[0].queue_time_q.unwrap().mean;
    let (rho, mu) = (0.5, 0.5);
    let analytic = rho / (mu * (1.0 - rho));
    assert!((measured - analytic).abs() <= 0.1 * analytic, "measured {measured}, analytic {analytic}");
}
