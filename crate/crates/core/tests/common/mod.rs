#![allow(dead_code)]

use flowtrace_core::simulate::{ActivitySpec, IncidentSpec, ServiceDist, SimScenario};

/// Three-stage pipeline with failures, a rework loop, a non-value-added
/// approval delay, handoffs, deploy failures and incidents.
pub fn pipeline(seed: u64) -> SimScenario {
    let mut build = ActivitySpec::new("build", ServiceDist::Lognormal { mu: 0.0, sigma: 0.5 });
    build.failure_prob = 0.1;
    let mut test = ActivitySpec::new("test", ServiceDist::Lognormal { mu: 0.7, sigma: 0.6 });
    test.rework_prob = 0.2;
    test.rework_target = Some("build".into());
    let mut approval = ActivitySpec::new("approval", ServiceDist::Exponential { mean_hours: 20.0 });
    approval.value_added = false;
    approval.servers = None;
    SimScenario {
        platform: "A".into(),
        start: flowtrace_core::telemetry::parse_timestamp("2024-01-01T00:00:00Z").unwrap(),
        activities: vec![build, test, approval],
        arrival_rate_per_day: 3.0,
        handoff_rate: 4.0,
        deploy_failure_rate: 0.2,
        rollback_share: 0.3,
        incidents: Some(IncidentSpec { mttr_hours: 6.0 }),
        horizon_days: 120.0,
        max_items: None,
        seed,
        interventions: Vec::new(),
        require_steady_state: true,
    }
}

/// A single exponential-service FIFO station.
pub fn mm1(arrivals_per_day: f64, mean_service_hours: f64, items: usize, seed: u64) -> SimScenario {
    SimScenario {
        platform: "Q".into(),
        activities: vec![ActivitySpec::new(
            "serve",
            ServiceDist::Exponential {
                mean_hours: mean_service_hours,
            },
        )],
        arrival_rate_per_day: arrivals_per_day,
        handoff_rate: 0.0,
        deploy_failure_rate: 0.0,
        rollback_share: 0.0,
        incidents: None,
        horizon_days: 1e7,
        max_items: Some(items),
        interventions: Vec::new(),
        ..pipeline(seed)
    }
}
