//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p flowtrace-cli --test acceptance`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use chrono::TimeDelta;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ContinuousCDF};

use flowtrace_core::dora::compute_dora;
use flowtrace_core::evaluate::{
    adjust_multiplicity, evaluate_against_targets, its_fit, ItsOptions, MetricEstimate, Multiplicity, VerdictOptions,
};
use flowtrace_core::gqm::{traceability_coverage, AEdge, GEdge, Registry, TraceabilityGraph, EXAMPLE_REGISTRY_JSON};
use flowtrace_core::prioritize::{
    score, select_portfolio, AutomationCandidate, MaturityLevel, MaturityProfile, Pattern, SelectionConstraints,
    EXAMPLE_CANDIDATES_JSON,
};
use flowtrace_core::simulate::{run, ActivitySpec, IncidentSpec, SegmentedAr1, ServiceDist, SimScenario};
use flowtrace_core::telemetry::{audit, parse_timestamp, EventLog, EventType};
use flowtrace_core::valuestream::compute_activity_stats;
use flowtrace_core::valuestream::compute_flow;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn table_arithmetic() -> Outcome {
    let rows = [
        ("A", 14.2, 7.8, -6.4, -45.1, 22.1, 6.3, -15.8, -71.5),
        ("B", 16.8, 9.2, -7.6, -45.2, 28.9, 8.1, -20.8, -71.9),
        ("C", 12.5, 5.3, -7.2, -57.6, 18.2, 4.7, -13.5, -74.2),
        ("D", 18.3, 10.1, -8.2, -44.8, 31.4, 9.8, -21.6, -68.8),
    ];
    let registry = Registry::from_json(EXAMPLE_REGISTRY_JSON).map_err(|e| e.to_string())?;
    let mut estimates = Vec::new();
    let mut printed = Vec::new();
    for (p, lb, lp, la, lr, fb, fp, fa, fr) in rows {
        estimates.push(MetricEstimate::pre_post("M1", Some(p), lb, lp, 0.003));
        printed.push((p, "lead", la, lr));
        estimates.push(MetricEstimate::pre_post("M2", Some(p), fb, fp, 0.001));
        printed.push((p, "failure", fa, fr));
    }
    let verdicts = evaluate_against_targets(&registry, &estimates, &VerdictOptions::default()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (v, (p, m, abs, rel)) in verdicts.iter().zip(printed) {
        let rel_pp = v.effect_relative.unwrap_or(f64::NAN) * 100.0;
        if !close(v.effect_absolute, abs, 0.1) || !close(rel_pp, rel, 0.1) {
            return Err(format!("{p} {m}: got {:.3} / {rel_pp:.3}%", v.effect_absolute));
        }
        worst = worst.max((rel_pp - rel).abs());
    }
    Ok(format!("8 rows, max relative deviation {worst:.3} pp"))
}

fn its_design(level_change: f64) -> SegmentedAr1 {
    SegmentedAr1 {
        pre: 24,
        post: 24,
        level: 14.2,
        slope: 0.0,
        level_change,
        slope_change: 0.0,
        phi: 0.3,
        sigma: 1.5,
    }
}

fn its_recovery() -> Outcome {
    let d = its_design(-6.8);
    let (mut covered, mut sum) = (0, 0.0);
    for seed in 0..100 {
        let fit = its_fit(&d.sample("lead", seed), &ItsOptions::default()).map_err(|e| e.to_string())?;
        let (lo, hi) = fit.ci95[2];
        covered += usize::from(lo <= -6.8 && -6.8 <= hi);
        sum += fit.level_change();
    }
    let mean = sum / 100.0;
    check(
        covered >= 90 && close(mean, -6.8, 0.5),
        format!("coverage {covered}/100, mean level change {mean:.3}"),
    )
}

fn its_null() -> Outcome {
    let d = its_design(0.0);
    let mut rejections = 0;
    for seed in 0..100 {
        let fit = its_fit(&d.sample("lead", 1000 + seed), &ItsOptions::default()).map_err(|e| e.to_string())?;
        rejections += usize::from(fit.p_values[2] < 0.05);
    }
    check(rejections <= 10, format!("{rejections}/100 raw p < 0.05"))
}

fn random_candidates(rng: &mut ChaCha8Rng) -> (Vec<AutomationCandidate>, SelectionConstraints, MaturityProfile) {
    let m = rng.random_range(0..=12);
    let candidates = (0..m)
        .map(|i| AutomationCandidate {
            automation_id: format!("c{:04}", rng.random_range(0..100) * 100 + i),
            pattern: Pattern::ALL[rng.random_range(0..Pattern::ALL.len())],
            delta_g: rng.random_range(0..=6) as f64 * 0.1,
            impact: [0.5, 1.0][rng.random_range(0..2)],
            confidence: rng.random_range(4..=10) as f64 * 0.1,
            cost: rng.random_range(1..=30) as f64 * 0.1,
            required_maturity: None,
            addressed_wastes: BTreeSet::new(),
            risk: None,
        })
        .collect();
    let mut constraints = SelectionConstraints::new(rng.random_range(0..=80) as f64 * 0.1 + 0.05);
    constraints.min_confidence_gamma = [0.0, 0.6, 0.7][rng.random_range(0..3)];
    let level = MaturityLevel::try_from(rng.random_range(1..=4u8)).expect("valid level");
    (candidates, constraints, MaturityProfile::new(level, 0.9, true))
}

/// Every subset of the eligible candidates; ties go to the lower cost, then
/// to the lexicographically smaller sorted id list.
fn exhaustive(
    candidates: &[AutomationCandidate],
    constraints: &SelectionConstraints,
    profile: &MaturityProfile,
) -> (Vec<String>, f64) {
    let mut eligible: Vec<&AutomationCandidate> = candidates
        .iter()
        .filter(|c| c.required_maturity() <= profile.level && c.confidence >= constraints.min_confidence_gamma)
        .collect();
    eligible.sort_by(|a, b| a.automation_id.cmp(&b.automation_id));
    let mut best: (f64, f64, Vec<String>) = (0.0, 0.0, Vec::new());
    for mask in 1u32..(1 << eligible.len()) {
        let (mut s, mut c, mut ids) = (0.0, 0.0, Vec::new());
        for (i, cand) in eligible.iter().enumerate() {
            if mask & (1 << i) != 0 {
                s += cand.delta_g * cand.impact * cand.confidence / cand.cost;
                c += cand.cost;
                ids.push(cand.automation_id.clone());
            }
        }
        if c > constraints.budget {
            continue;
        }
        if s > best.0 || (s == best.0 && (c < best.1 || (c == best.1 && ids < best.2))) {
            best = (s, c, ids);
        }
    }
    (best.2, best.0)
}

fn knapsack_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..200 {
        let (cands, constraints, profile) = random_candidates(&mut rng);
        let got = select_portfolio(&cands, &constraints, &profile).map_err(|e| e.to_string())?;
        let (ids, s) = exhaustive(&cands, &constraints, &profile);
        if got.aggregate_score != s || got.selected != ids {
            return Err(format!("instance {k}: {:?} ({}) vs {ids:?} ({s})", got.selected, got.aggregate_score));
        }
    }
    Ok("200/200 instances identical".into())
}

fn prioritization_fixtures() -> Outcome {
    let cands: Vec<AutomationCandidate> = serde_json::from_str(EXAMPLE_CANDIDATES_JSON).map_err(|e| e.to_string())?;
    let profile = MaturityProfile::new(MaturityLevel::Defined, 0.9, true);
    let mut constraints = SelectionConstraints::new(20.0);
    constraints.min_confidence_gamma = 0.7;
    let strict = select_portfolio(&cands, &constraints, &profile).map_err(|e| e.to_string())?;
    let confs: Vec<f64> = strict
        .piloted
        .iter()
        .map(|id| cands.iter().find(|c| &c.automation_id == id).map_or(f64::NAN, |c| c.confidence))
        .collect();
    constraints.min_confidence_gamma = 0.6;
    let default = select_portfolio(&cands, &constraints, &profile).map_err(|e| e.to_string())?;
    let spot = AutomationCandidate {
        automation_id: "spot".into(),
        pattern: Pattern::AutomatedTest,
        delta_g: 0.3,
        impact: 0.8,
        confidence: 0.75,
        cost: 2.0,
        required_maturity: None,
        addressed_wastes: BTreeSet::new(),
        risk: None,
    };
    let s = score(&spot).map_err(|e| e.to_string())?;
    check(
        confs == [0.65, 0.60] && default.piloted.is_empty() && close(s, 0.09, 1e-15),
        format!("pilots at 0.7: {confs:?}; at 0.6: {}; spot score {s}", default.piloted.len()),
    )
}

fn pipeline_scenario(seed: u64) -> SimScenario {
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
        start: parse_timestamp("2024-01-01T00:00:00Z").expect("valid timestamp"),
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

fn single_station(arrivals_per_day: f64, mean_service_hours: f64, items: usize, seed: u64) -> SimScenario {
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
        ..pipeline_scenario(seed)
    }
}

fn flow_closure() -> Outcome {
    let mut items = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let s = pipeline_scenario(seed);
        let (log, truth) = run(&s).map_err(|e| e.to_string())?;
        let outcome = compute_flow(&log, &s.value_added_rule());
        if outcome.flows.len() != truth.items.len() {
            return Err(format!("seed {seed}: {} flows for {} items", outcome.flows.len(), truth.items.len()));
        }
        for (f, t) in outcome.flows.iter().zip(&truth.items) {
            let gap = (f.value_added_time + f.non_value_added_time - f.lead_time).abs();
            worst = worst.max(gap);
            if gap > 1e-9 || f.flow_efficiency != t.flow_efficiency || f.work_item_id != t.work_item_id {
                return Err(format!("seed {seed}: item {} disagrees with ground truth", f.work_item_id));
            }
        }
        items += outcome.flows.len();
    }
    Ok(format!("{items} items over 10 logs, max closure gap {worst:e} h, efficiencies exact"))
}

fn queueing_sanity() -> Outcome {
    // exponential service with a 2 hour mean, arrivals at 0.25 per hour
    let (log, _) = run(&single_station(6.0, 2.0, 50_000, 77)).map_err(|e| e.to_string())?;
    let stats = compute_activity_stats(&log);
    let measured = stats[0].queue_time_q.ok_or("no queue times")?.mean;
    let (rho, mu) = (0.5, 0.5);
    let analytic = rho / (mu * (1.0 - rho));
    check(
        (measured - analytic).abs() <= 0.1 * analytic,
        format!("mean wait {measured:.3} h vs {analytic:.3} h"),
    )
}

fn clopper_pearson(k: usize, n: usize) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let lower = if k == 0.0 { 0.0 } else { Beta::new(k, n - k + 1.0).expect("valid shape").inverse_cdf(0.025) };
    let upper = if k == n { 1.0 } else { Beta::new(k + 1.0, n - k).expect("valid shape").inverse_cdf(0.975) };
    (lower, upper)
}

fn full_span(log: &EventLog) -> Result<(chrono::DateTime<chrono::Utc>, chrono::DateTime<chrono::Utc>), String> {
    let (a, b) = log.time_span().ok_or("empty log")?;
    Ok((a, b + TimeDelta::milliseconds(1)))
}

fn dora_correctness() -> Outcome {
    let mut s = single_station(20.0, 0.5, 1000, 182);
    s.deploy_failure_rate = 0.182;
    s.rollback_share = 0.4;
    let (log, truth) = run(&s).map_err(|e| e.to_string())?;
    let (a, b) = full_span(&log)?;
    let r = compute_dora(&log, a, b, 48.0).map_err(|e| e.to_string())?;
    let cfr = r.change_failure_rate.ok_or("no deploys")?;
    let (lo, hi) = clopper_pearson(r.failed_deploys, r.deploys);

    let mut stage = ActivitySpec::new("release", ServiceDist::Deterministic { hours: 36.0 });
    stage.servers = None;
    let mut noiseless = single_station(2.0, 1.0, 200, 5);
    noiseless.activities = vec![stage];
    let (log2, _) = run(&noiseless).map_err(|e| e.to_string())?;
    let (a2, b2) = full_span(&log2)?;
    let lead = compute_dora(&log2, a2, b2, 48.0)
        .map_err(|e| e.to_string())?
        .lead_time_days
        .ok_or("no lead times")?;
    check(
        r.deploys == 1000
            && Some(cfr) == truth.change_failure_rate
            && lo <= 0.182
            && 0.182 <= hi
            && lead.median == 1.5,
        format!(
            "CFR {cfr:.3} over {} deploys, exact 95% CI ({lo:.3}, {hi:.3}); noiseless median lead {} d",
            r.deploys, lead.median
        ),
    )
}

fn multiplicity() -> Outcome {
    let holm = adjust_multiplicity(&[0.01, 0.04], Multiplicity::Holm);
    if !(close(holm[0], 0.02, 1e-15) && close(holm[1], 0.04, 1e-15)) {
        return Err(format!("Holm on (0.01, 0.04) gave {holm:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..1000 {
        let m = rng.random_range(1..=20);
        let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let h = adjust_multiplicity(&p, Multiplicity::Holm);
        let bh = adjust_multiplicity(&p, Multiplicity::BenjaminiHochberg);
        for i in 0..m {
            if bh[i] > h[i] + 1e-15 || h[i] < p[i] || bh[i] < p[i] {
                return Err(format!("vector {k}, index {i}: raw {} holm {} bh {}", p[i], h[i], bh[i]));
            }
        }
    }
    Ok(format!("Holm {holm:?}; 1000 random vectors ordered and bounded below by raw p"))
}

fn twelve_automations(chained: usize) -> TraceabilityGraph {
    let mut graph = TraceabilityGraph::default();
    for k in 0..12 {
        let (w, m, t) = (format!("w{k}"), format!("m{k}"), format!("t{k}"));
        graph.wastes.insert(w.clone());
        graph.automations.insert(t.clone());
        graph.a.insert(AEdge {
            waste: w.clone(),
            metric: m.clone(),
            automation: t,
        });
        if k < chained {
            graph.g.insert(GEdge {
                goal: "G1".into(),
                waste: w,
                question: format!("q{k}"),
                metric: m,
            });
        }
    }
    graph
}

fn traceability() -> Outcome {
    let mut graph = twelve_automations(11);
    let autos = graph.automations.clone();
    let partial = traceability_coverage(&graph, &autos);
    graph.g.insert(GEdge {
        goal: "G1".into(),
        waste: "w11".into(),
        question: "q11".into(),
        metric: "m11".into(),
    });
    let full = traceability_coverage(&graph, &autos);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = TraceabilityGraph::default();
    let autos: BTreeSet<String> = (0..12).map(|k| format!("t{k}")).collect();
    let mut last = traceability_coverage(&g, &autos);
    for step in 0..1000 {
        let (w, m) = (format!("w{}", rng.random_range(0..6)), format!("m{}", rng.random_range(0..6)));
        if rng.random_bool(0.5) {
            g.a.insert(AEdge {
                waste: w,
                metric: m,
                automation: format!("t{}", rng.random_range(0..12)),
            });
        } else {
            g.g.insert(GEdge {
                goal: "G1".into(),
                waste: w,
                question: "q".into(),
                metric: m,
            });
        }
        let now = traceability_coverage(&g, &autos);
        if now < last {
            return Err(format!("coverage fell from {last} to {now} at insertion {step}"));
        }
        last = now;
    }
    check(
        (partial * 100.0).round() == 92.0 && full == 1.0,
        format!("11/12 chains -> {:.0}%, completed -> {:.0}%, monotone over 1000 insertions", partial * 100.0, full * 100.0),
    )
}

fn audit_gating() -> Outcome {
    let (log, _) = run(&pipeline_scenario(4)).map_err(|e| e.to_string())?;
    let clean = audit(&log, 0.80);
    let mut k = 0usize;
    let corrupted = log.without(|r| {
        if r.event_type != EventType::Started {
            return false;
        }
        k += 1;
        k % 10 < 3
    });
    let dirty = audit(&corrupted, 0.80);
    check(
        clean.observability_fraction == 1.0 && clean.gate_passed && dirty.observability_fraction < 0.80 && !dirty.gate_passed,
        format!(
            "clean {:.3} passes; 30% of starts deleted -> {:.3} fails",
            clean.observability_fraction, dirty.observability_fraction
        ),
    )
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn cli_pipeline(out: &Path) -> Result<(), String> {
    let log = out.join("events.jsonl");
    let log = log.to_str().ok_or("non-utf8 path")?;
    let steps: [&[&str]; 7] = [
        &["simulate"],
        &["--log", log, "audit"],
        &["--log", log, "vsm"],
        &["--log", log, "dora"],
        &["--log", log, "prioritize"],
        &["--log", log, "evaluate"],
        &["report"],
    ];
    for args in steps {
        let o = Command::new(env!("CARGO_BIN_EXE_flowtrace"))
            .arg("--config")
            .arg(fixture("pipeline.json"))
            .arg("--out")
            .arg(out)
            .args(["--seed", "11"])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    Ok(())
}

fn tree(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).map_err(|e| e.to_string())?.to_path_buf();
                out.push((rel, fs::read(&path).map_err(|e| e.to_string())?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_pipeline(a.path())?;
    cli_pipeline(b.path())?;
    let (ta, tb) = (tree(a.path())?, tree(b.path())?);
    let bytes: usize = ta.iter().map(|f| f.1.len()).sum();
    check(ta == tb, format!("{} files, {bytes} bytes, identical across runs: {}", ta.len(), ta == tb))
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: 1, name: "results-table arithmetic", limit: secs(1), run: table_arithmetic },
        Criterion { id: 2, name: "ITS recovery", limit: secs(60), run: its_recovery },
        Criterion { id: 3, name: "ITS null safety", limit: None, run: its_null },
        Criterion { id: 4, name: "knapsack exactness", limit: secs(30), run: knapsack_exactness },
        Criterion { id: 5, name: "prioritization fixtures", limit: None, run: prioritization_fixtures },
        Criterion { id: 6, name: "flow accounting closure", limit: None, run: flow_closure },
        Criterion { id: 7, name: "queueing sanity", limit: secs(30), run: queueing_sanity },
        Criterion { id: 8, name: "DORA correctness", limit: None, run: dora_correctness },
        Criterion { id: 9, name: "multiplicity", limit: None, run: multiplicity },
        Criterion { id: 10, name: "traceability coverage", limit: None, run: traceability },
        Criterion { id: 11, name: "audit gating", limit: None, run: audit_gating },
        Criterion { id: 12, name: "CLI determinism", limit: None, run: determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) => match c.limit {
                Some(l) if elapsed > l => (false, format!("{d}; took {elapsed:.2?}, limit {l:?}")),
                _ => (true, d),
            },
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} [{:>2}] {}: {detail} ({elapsed:.2?})",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name
        );
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
