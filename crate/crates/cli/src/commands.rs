//! One function per subcommand. Each reads its inputs, runs the analysis,
//! and writes JSON (plus CSV where a table exists) into the output directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use chrono::TimeDelta;
use serde::{Deserialize, Serialize};

use flowtrace_core::dora::{compute_dora, DoraReport};
use flowtrace_core::evaluate::{
    evaluate_log, mde, BootstrapOptions, EvaluationConfig, EvaluationReport, ItsOptions, VerdictOptions,
};
use flowtrace_core::gqm::{render_template, traceability_coverage, validate_artifact, Registry, Violation};
use flowtrace_core::prioritize::{
    select_portfolio, AutomationCandidate, MaturityLevel, MaturityProfile, SelectionConstraints,
};
use flowtrace_core::simulate::{run, SimScenario};
use flowtrace_core::stats::variance;
use flowtrace_core::telemetry::{parse_log, write_log, AuditReport, EventLog, LogFormat, RecordError};
use flowtrace_core::valuestream::{build_vsm_report, flow_plot_csv, ActivityStats, ValueAddedRule};

use crate::config::Settings;
use crate::Failure;

pub const INGEST_JSON: &str = "ingest.json";
pub const AUDIT_JSON: &str = "audit.json";
pub const VSM_JSON: &str = "vsm.json";
pub const DORA_JSON: &str = "dora.json";
pub const GQM_JSON: &str = "gqm.json";
pub const PRIORITIZATION_JSON: &str = "prioritization.json";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const GROUND_TRUTH_JSON: &str = "ground_truth.json";

fn need<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| anyhow!("missing input: pass --{flag} or set `{flag}` in the config"))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
    text.push('\n');
    write_text(dir, name, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn log_file_name(format: LogFormat) -> &'static str {
    match format {
        LogFormat::Jsonl => "events.jsonl",
        LogFormat::Csv => "events.csv",
    }
}

/// Reads the configured log, reporting skipped records on stderr.
fn load_log(s: &Settings) -> Result<(EventLog, Vec<RecordError>, PathBuf)> {
    let path = need(&s.log, "log")?;
    let file = File::open(path).with_context(|| format!("opening event log {}", path.display()))?;
    let outcome =
        parse_log(BufReader::new(file), s.log_format(path)).with_context(|| format!("event log {}", path.display()))?;
    for r in &outcome.rejected {
        eprintln!("warning: {}:{}: skipped record: {}", path.display(), r.line, r.reason);
    }
    Ok((outcome.log, outcome.rejected, path.to_path_buf()))
}

fn load_registry(s: &Settings) -> Result<Registry> {
    let path = need(&s.registry, "registry")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading registry {}", path.display()))?;
    Registry::from_json(&text).with_context(|| format!("registry {}", path.display()))
}

fn value_added_rule(s: &Settings) -> ValueAddedRule {
    ValueAddedRule {
        non_value_added_activities: s.non_value_added_activities.clone(),
    }
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    source: String,
    records: usize,
    platforms: Vec<String>,
    rejected: Vec<RecordError>,
    output: String,
}

pub fn ingest(s: &Settings) -> Result<(), Failure> {
    let (log, rejected, path) = load_log(s)?;
    let format = s.output_format();
    let mut buf = Vec::new();
    write_log(&log, format, &mut buf).context("encoding event log")?;
    let name = log_file_name(format);
    write_text(&s.out, name, &String::from_utf8(buf).context("encoding event log")?)?;
    let summary = IngestSummary {
        source: file_name(&path),
        records: log.len(),
        platforms: log.platforms().iter().cloned().collect(),
        rejected,
        output: name.into(),
    };
    write_json(&s.out, INGEST_JSON, &summary)?;
    Ok(())
}

pub fn audit(s: &Settings) -> Result<(), Failure> {
    let (log, _, path) = load_log(s)?;
    let report: AuditReport = flowtrace_core::telemetry::audit(&log, s.gate_threshold);
    write_json(&s.out, AUDIT_JSON, &report)?;
    if !report.gate_passed {
        return Err(Failure::Validation(format!(
            "{}: observability {:.4} is below the gate threshold {}",
            path.display(),
            report.observability_fraction,
            report.gate_threshold
        )));
    }
    Ok(())
}

pub(crate) fn activities_csv(stats: &[ActivityStats]) -> String {
    let mut out = String::from(
        "activity,traversals,queue_mean_hours,queue_median_hours,processing_mean_hours,processing_median_hours,failure_rate,rework_probability\n",
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for a in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.activity,
            a.traversal_count,
            opt(a.queue_time_q.map(|q| q.mean)),
            opt(a.queue_time_q.map(|q| q.median)),
            opt(a.processing_time_p.map(|p| p.mean)),
            opt(a.processing_time_p.map(|p| p.median)),
            opt(a.failure_rate_f),
            opt(a.rework_probability_r),
        ));
    }
    out
}

pub fn vsm(s: &Settings) -> Result<(), Failure> {
    let (log, _, _) = load_log(s)?;
    let (report, flow) = build_vsm_report(&log, &value_added_rule(s), &s.waste_thresholds);
    if !flow.open_items.is_empty() {
        eprintln!("warning: {} work items have not exited and are excluded from flow metrics", flow.open_items.len());
    }
    write_json(&s.out, VSM_JSON, &report)?;
    write_text(&s.out, "vsm_platforms.csv", &report.platform_csv())?;
    write_text(&s.out, "vsm_activities.csv", &activities_csv(&report.activities))?;
    write_text(&s.out, "vsm_flows.csv", &flow_plot_csv(&flow.flows))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DoraArtifact {
    pub overall: DoraReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<DoraReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<DoraReport>,
}

pub fn dora(s: &Settings) -> Result<(), Failure> {
    let (log, _, path) = load_log(s)?;
    let (first, last) = log.time_span().ok_or_else(|| anyhow!("{}: empty event log", path.display()))?;
    let start = s.windows.baseline_start.unwrap_or(first);
    let end = s.windows.post_end.unwrap_or(last + TimeDelta::milliseconds(1));
    let window = |a, b| compute_dora(&log, a, b, s.linkage_hours).context("computing DORA metrics");
    let overall = window(start, end)?;
    let (baseline, post) = match s.windows.intervention {
        Some(t) if start < t && t < end => {
            let resume = s.windows.stabilization_end.unwrap_or(t);
            let post = if resume < end { Some(window(resume, end)?) } else { None };
            (Some(window(start, t)?), post)
        }
        _ => (None, None),
    };
    let mut csv = String::new();
    for (name, r) in [("overall", Some(&overall)), ("baseline", baseline.as_ref()), ("post", post.as_ref())] {
        let Some(r) = r else { continue };
        let body = r.to_csv();
        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default();
        if csv.is_empty() {
            csv.push_str(&format!("segment,{header}\n"));
        }
        for l in lines {
            csv.push_str(&format!("{name},{l}\n"));
        }
    }
    write_json(&s.out, DORA_JSON, &DoraArtifact { overall, baseline, post })?;
    write_text(&s.out, "dora.csv", &csv)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GqmArtifact {
    pub violations: Vec<Violation>,
    pub traceability_coverage: f64,
    pub automations: usize,
    pub active_metrics: Vec<String>,
}

pub fn gqm_validate(s: &Settings) -> Result<(), Failure> {
    let registry = load_registry(s)?;
    let violations = validate_artifact(&registry);
    let artifact = GqmArtifact {
        traceability_coverage: traceability_coverage(&registry.graph, &registry.graph.automations),
        automations: registry.graph.automations.len(),
        active_metrics: registry.active_metrics().map(|m| m.metric_id.clone()).collect(),
        violations,
    };
    write_json(&s.out, GQM_JSON, &artifact)?;
    if !artifact.violations.is_empty() {
        let path = need(&s.registry, "registry")?;
        for v in &artifact.violations {
            eprintln!("{}: {}", path.display(), serde_json::to_string(v).unwrap_or_default());
        }
        return Err(Failure::Validation(format!(
            "{}: {} registry violation(s)",
            path.display(),
            artifact.violations.len()
        )));
    }
    Ok(())
}

pub fn gqm_template(s: &Settings) -> Result<(), Failure> {
    let registry = load_registry(s)?;
    write_text(&s.out, "gqm_template.txt", &render_template(&registry))?;
    Ok(())
}

/// Observability for the maturity profile: audit of `--log` when given,
/// else an earlier audit artifact, else full observability.
fn observability(s: &Settings) -> Result<f64> {
    if s.log.is_some() {
        let (log, _, _) = load_log(s)?;
        return Ok(flowtrace_core::telemetry::audit(&log, s.gate_threshold).observability_fraction);
    }
    let prior = s.out.join(AUDIT_JSON);
    if prior.exists() {
        let report: AuditReport = read_json(&prior)?;
        return Ok(report.observability_fraction);
    }
    eprintln!("warning: no log or audit artifact; assuming full observability");
    Ok(1.0)
}

pub fn prioritize(s: &Settings) -> Result<(), Failure> {
    let path = need(&s.candidates, "candidates")?;
    let candidates: Vec<AutomationCandidate> = read_json(path)?;
    let budget = s
        .budget
        .ok_or_else(|| anyhow!("missing budget: pass --budget or set `budget` in the config"))?;
    let constraints = SelectionConstraints {
        budget,
        min_confidence_gamma: s.gamma,
        risk_cap: s.risk_cap,
    };
    let level = MaturityLevel::try_from(s.maturity).map_err(|e| anyhow!("{e}"))?;
    let profile = MaturityProfile::new(level, observability(s)?, true);
    let result =
        select_portfolio(&candidates, &constraints, &profile).with_context(|| format!("candidates {}", path.display()))?;
    if let Some(d) = &result.diagnostic {
        eprintln!("warning: {d}");
    }
    write_json(&s.out, PRIORITIZATION_JSON, &result)?;
    write_text(&s.out, "backlog.csv", &result.backlog_csv())?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    #[serde(flatten)]
    pub report: EvaluationReport,
    /// Minimum detectable level change per ITS metric at the configured
    /// alpha and power, from the baseline spread and segment size.
    pub minimum_detectable_effects: BTreeMap<String, f64>,
}

pub fn evaluation_config(s: &Settings) -> Result<EvaluationConfig> {
    let intervention = s
        .windows
        .intervention
        .ok_or_else(|| anyhow!("missing intervention: pass --intervention or set windows.intervention"))?;
    let mut config = EvaluationConfig::new(intervention, s.seed);
    config.baseline_start = s.windows.baseline_start;
    config.stabilization_end = s.windows.stabilization_end;
    config.post_end = s.windows.post_end;
    config.period_days = s.period_days;
    config.its = ItsOptions {
        covariance: s.covariance,
        ..ItsOptions::default()
    };
    config.bootstrap = BootstrapOptions {
        replications: s.replications,
        block_length: None,
        seed: s.seed,
    };
    config.verdict = VerdictOptions {
        alpha: s.alpha,
        multiplicity: s.multiplicity,
    };
    config.comparison_platform = s.comparison_platform.clone();
    config.linkage_hours = s.linkage_hours;
    config.value_added = value_added_rule(s);
    Ok(config)
}

pub fn evaluate(s: &Settings) -> Result<(), Failure> {
    let (log, _, path) = load_log(s)?;
    let registry = load_registry(s)?;
    let config = evaluation_config(s)?;
    let report = evaluate_log(&log, &registry, &config).with_context(|| format!("evaluating {}", path.display()))?;
    for skip in &report.skipped {
        eprintln!("warning: metric {} not estimated: {}", skip.metric_id, skip.reason);
    }
    let mut minimum_detectable_effects = BTreeMap::new();
    for (id, series) in &report.series {
        let pre: Vec<f64> = series.pre().iter().map(|p| p.1).collect();
        let n = pre.len().min(series.post().len());
        if pre.len() < 2 {
            continue;
        }
        let sigma = variance(&pre).sqrt();
        if let Ok(v) = mde(sigma, n, s.alpha, s.power) {
            minimum_detectable_effects.insert(id.clone(), v);
        }
    }
    write_text(&s.out, "verdicts.csv", &report.to_csv())?;
    write_json(
        &s.out,
        EVALUATION_JSON,
        &EvaluationArtifact {
            report,
            minimum_detectable_effects,
        },
    )?;
    Ok(())
}

pub fn simulate(s: &Settings) -> Result<(), Failure> {
    let path = need(&s.scenario, "scenario")?;
    let mut scenario: SimScenario = read_json(path)?;
    if let Some(seed) = s.seed_override {
        scenario.seed = seed;
    }
    let (log, truth) = run(&scenario).with_context(|| format!("scenario {}", path.display()))?;
    for w in &truth.warnings {
        eprintln!("warning: {w}");
    }
    let format = s.output_format();
    let mut buf = Vec::new();
    write_log(&log, format, &mut buf).context("encoding event log")?;
    write_text(&s.out, log_file_name(format), &String::from_utf8(buf).context("encoding event log")?)?;
    write_json(&s.out, GROUND_TRUTH_JSON, &truth)?;
    Ok(())
}
