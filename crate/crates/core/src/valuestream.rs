//! Quantified value-stream model: per-activity processing/queue/failure/rework
//! statistics, per-item flow decomposition, handoff intensity, and the ranked
//! waste inventory.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use crate::stats::{mean, median, Summary};
use crate::telemetry::{format_timestamp, traversals, AttemptOutcome, EventLog, EventType, Traversal};
use crate::HOURS_PER_DAY;

const NANOS_PER_HOUR: f64 = 3.6e12;

/// Converts a duration to fractional hours.
pub fn hours(d: TimeDelta) -> f64 {
    match d.num_nanoseconds() {
        Some(ns) => ns as f64 / NANOS_PER_HOUR,
        None => d.num_milliseconds() as f64 / 3.6e6,
    }
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs()
}

/// `num / den` for durations, computed on the reduced integer ratio so that
/// equal ratios of differently scaled durations give identical floats.
pub fn duration_ratio(num: TimeDelta, den: TimeDelta) -> Option<f64> {
    let to_ns = |d: TimeDelta| d.num_seconds() as i128 * 1_000_000_000 + d.subsec_nanos() as i128;
    let (n, d) = (to_ns(num), to_ns(den));
    if d == 0 {
        return None;
    }
    let g = gcd(n, d).max(1);
    Some((n / g) as f64 / (d / g) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityStats {
    pub activity: String,
    /// started→finished durations in hours; `None` when no such pair exists.
    pub processing_time_p: Option<Summary>,
    /// queued→started durations in hours.
    pub queue_time_q: Option<Summary>,
    /// failed / (failed + finished) attempts.
    pub failure_rate_f: Option<f64>,
    /// reworked traversals / all traversals.
    pub rework_probability_r: Option<f64>,
    pub traversal_count: usize,
    pub complete_traversals: usize,
    pub finished_attempts: usize,
    pub failed_attempts: usize,
    pub reworked_traversals: usize,
    pub total_processing_hours: f64,
    pub total_queue_hours: f64,
    pub handoff_events: usize,
}

impl ActivityStats {
    /// True when the activity has no complete traversal to measure.
    pub fn insufficient_data(&self) -> bool {
        self.complete_traversals == 0
    }
}

/// Per-activity p, q, f, r estimates, ordered by activity name.
pub fn compute_activity_stats(log: &EventLog) -> Vec<ActivityStats> {
    #[derive(Default)]
    struct Acc {
        p: Vec<f64>,
        q: Vec<f64>,
        traversals: usize,
        complete: usize,
        finished: usize,
        failed: usize,
        reworked: usize,
        handoffs: usize,
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for t in traversals(log) {
        let a = acc.entry(t.activity).or_default();
        a.traversals += 1;
        a.reworked += t.reworked as usize;
        if t.is_complete() && t.is_monotone() {
            a.complete += 1;
        }
        match t.terminal {
            Some((_, AttemptOutcome::Finished)) => {
                a.finished += 1;
                if let Some(p) = t.processing_time() {
                    a.p.push(hours(p));
                }
            }
            Some((_, AttemptOutcome::Failed)) => a.failed += 1,
            None => {}
        }
        if let Some(q) = t.queue_time() {
            a.q.push(hours(q));
        }
    }
    for r in log.records() {
        if r.event_type == EventType::Handoff {
            acc.entry(r.activity.as_str()).or_default().handoffs += 1;
        }
    }

    acc.into_iter()
        .map(|(activity, a)| {
            let attempts = a.finished + a.failed;
            ActivityStats {
                activity: activity.to_string(),
                processing_time_p: Summary::of(&a.p),
                queue_time_q: Summary::of(&a.q),
                failure_rate_f: (attempts > 0).then(|| a.failed as f64 / attempts as f64),
                rework_probability_r: (a.traversals > 0).then(|| a.reworked as f64 / a.traversals as f64),
                traversal_count: a.traversals,
                complete_traversals: a.complete,
                finished_attempts: a.finished,
                failed_attempts: a.failed,
                reworked_traversals: a.reworked,
                total_processing_hours: a.p.iter().sum(),
                total_queue_hours: a.q.iter().sum(),
                handoff_events: a.handoffs,
            }
        })
        .collect()
}

/// Which processing intervals count as value-added. By default all active
/// processing does; activities listed here contribute only waiting time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueAddedRule {
    #[serde(default)]
    pub non_value_added_activities: BTreeSet<String>,
}

impl ValueAddedRule {
    pub fn is_value_added(&self, activity: &str) -> bool {
        !self.non_value_added_activities.contains(activity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub work_item_id: String,
    pub platform: String,
    #[serde(with = "crate::telemetry::rfc3339")]
    pub entry: DateTime<Utc>,
    #[serde(with = "crate::telemetry::rfc3339")]
    pub exit: DateTime<Utc>,
    /// Hours from first queued to last finished.
    pub lead_time: f64,
    pub value_added_time: f64,
    pub non_value_added_time: f64,
    pub queue_time: f64,
    /// `value_added_time / lead_time`; `None` for a zero lead time.
    pub flow_efficiency: Option<f64>,
    pub handoff_count: usize,
    pub rework_loop_count: usize,
}

impl FlowMetrics {
    pub fn lead_time_days(&self) -> f64 {
        self.lead_time / HOURS_PER_DAY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowOutcome {
    pub flows: Vec<FlowMetrics>,
    /// Items excluded because a traversal never closed, a stamp is missing,
    /// the chain is out of order, or the last attempt failed.
    pub open_items: Vec<String>,
}

/// Per-item flow decomposition. Items without lifecycle events are ignored.
pub fn compute_flow(log: &EventLog, rule: &ValueAddedRule) -> FlowOutcome {
    let mut by_item: BTreeMap<&str, Vec<Traversal<'_>>> = BTreeMap::new();
    for t in traversals(log) {
        by_item.entry(t.work_item_id).or_default().push(t);
    }
    let mut handoffs: BTreeMap<&str, usize> = BTreeMap::new();
    let mut reworks: BTreeMap<&str, usize> = BTreeMap::new();
    for r in log.records() {
        match r.event_type {
            EventType::Handoff => *handoffs.entry(r.work_item_id.as_str()).or_default() += 1,
            EventType::Reworked => *reworks.entry(r.work_item_id.as_str()).or_default() += 1,
            _ => {}
        }
    }

    let mut flows = Vec::new();
    let mut open_items = Vec::new();
    for (item, ts) in by_item {
        let closed = ts.iter().all(|t| t.is_complete() && t.is_monotone());
        let exit = ts.iter().filter_map(|t| t.terminal).max_by_key(|t| t.0);
        let entry = ts.iter().filter_map(|t| t.queued).min();
        let (Some(entry), Some((exit, AttemptOutcome::Finished)), true) = (entry, exit, closed) else {
            open_items.push(item.to_string());
            continue;
        };
        let mut value_added = TimeDelta::zero();
        let mut queue = TimeDelta::zero();
        for t in &ts {
            queue += t.queue_time().unwrap_or_default();
            if t.is_finished() && rule.is_value_added(t.activity) {
                value_added += t.processing_time().unwrap_or_default();
            }
        }
        let lead = exit - entry;
        flows.push(FlowMetrics {
            work_item_id: item.to_string(),
            platform: ts[0].platform.to_string(),
            entry,
            exit,
            lead_time: hours(lead),
            value_added_time: hours(value_added),
            non_value_added_time: hours(lead - value_added),
            queue_time: hours(queue),
            flow_efficiency: duration_ratio(value_added, lead),
            handoff_count: handoffs.get(item).copied().unwrap_or(0),
            rework_loop_count: reworks.get(item).copied().unwrap_or(0),
        });
    }
    FlowOutcome { flows, open_items }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoffIntensity {
    pub per_item: BTreeMap<String, usize>,
    pub per_platform_mean: BTreeMap<String, f64>,
}

/// Handoff events per work item and the per-platform mean. Work items are
/// those with any non-incident event.
pub fn handoff_intensity(log: &EventLog) -> HandoffIntensity {
    let mut per_item: BTreeMap<String, usize> = BTreeMap::new();
    let mut platform_of: BTreeMap<String, String> = BTreeMap::new();
    for r in log.records() {
        if matches!(r.event_type, EventType::IncidentOpen | EventType::IncidentResolved) {
            continue;
        }
        let count = per_item.entry(r.work_item_id.clone()).or_default();
        if r.event_type == EventType::Handoff {
            *count += 1;
        }
        platform_of
            .entry(r.work_item_id.clone())
            .or_insert_with(|| r.platform.clone());
    }
    let mut sums: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (item, n) in &per_item {
        let s = sums.entry(platform_of[item].clone()).or_default();
        s.0 += n;
        s.1 += 1;
    }
    HandoffIntensity {
        per_platform_mean: sums
            .into_iter()
            .map(|(p, (total, items))| (p, total as f64 / items as f64))
            .collect(),
        per_item,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WasteType {
    DelayQueue,
    ReworkDefect,
    HandoffCoordination,
    UnstableEnvironment,
    ProductionFailure,
    InstrumentationGap,
    TaskSwitching,
}

impl WasteType {
    pub fn as_str(self) -> &'static str {
        match self {
            WasteType::DelayQueue => "delay_queue",
            WasteType::ReworkDefect => "rework_defect",
            WasteType::HandoffCoordination => "handoff_coordination",
            WasteType::UnstableEnvironment => "unstable_environment",
            WasteType::ProductionFailure => "production_failure",
            WasteType::InstrumentationGap => "instrumentation_gap",
            WasteType::TaskSwitching => "task_switching",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WasteRecord {
    pub waste_id: String,
    pub waste_type: WasteType,
    pub source_activities: BTreeSet<String>,
    /// Share in `[0, 1]` of the affected flow; comparable across types.
    pub magnitude: f64,
    pub evidence: Evidence,
}

/// When a measurement becomes a waste record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WasteThresholds {
    /// Queue time as a share of lead time.
    pub queue_share: f64,
    pub rework_probability: f64,
    pub handoffs_per_item: f64,
    pub failure_rate: f64,
    /// Share of an activity's traversals lacking a complete ordered chain.
    pub instrumentation_gap: f64,
    /// Failures here are production failures rather than unstable environments.
    pub production_activities: BTreeSet<String>,
}

impl Default for WasteThresholds {
    fn default() -> Self {
        Self {
            queue_share: 0.30,
            rework_probability: 0.10,
            handoffs_per_item: 4.0,
            failure_rate: 0.20,
            instrumentation_gap: 0.20,
            production_activities: ["deploy", "release", "production"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

/// Smallest set of keys, by descending weight, covering 80% of the total.
fn pareto_set<'a>(weights: impl IntoIterator<Item = (&'a str, f64)>) -> BTreeSet<String> {
    let mut w: Vec<_> = weights.into_iter().filter(|(_, v)| *v > 0.0).collect();
    w.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    let total: f64 = w.iter().map(|x| x.1).sum();
    let mut out = BTreeSet::new();
    let mut covered = 0.0;
    for (k, v) in w {
        if covered >= 0.8 * total {
            break;
        }
        covered += v;
        out.insert(k.to_string());
    }
    out
}

/// Emits one record per threshold exceedance, ranked by magnitude descending
/// with ties broken by `waste_id`.
///
/// Handoff magnitude is the excess share `1 - threshold / mean` so that every
/// magnitude is a fraction. Task switching has no detector over this schema.
pub fn build_waste_inventory(
    stats: &[ActivityStats],
    flows: &[FlowMetrics],
    thresholds: &WasteThresholds,
) -> Vec<WasteRecord> {
    let mut out = Vec::new();
    let all_activities = || stats.iter().map(|s| s.activity.clone()).collect::<BTreeSet<_>>();

    let lead: f64 = flows.iter().map(|f| f.lead_time).sum();
    if lead > 0.0 {
        let share = flows.iter().map(|f| f.queue_time).sum::<f64>() / lead;
        let sources = pareto_set(stats.iter().map(|s| (s.activity.as_str(), s.total_queue_hours)));
        if share > thresholds.queue_share && !sources.is_empty() {
            out.push(WasteRecord {
                waste_id: "W-delay_queue".into(),
                waste_type: WasteType::DelayQueue,
                source_activities: sources,
                magnitude: share,
                evidence: Evidence {
                    metric: "queue_share_of_lead_time".into(),
                    value: share,
                },
            });
        }
    }

    if !flows.is_empty() {
        let mean_handoffs = flows.iter().map(|f| f.handoff_count as f64).sum::<f64>() / flows.len() as f64;
        if mean_handoffs > thresholds.handoffs_per_item {
            let mut sources = pareto_set(stats.iter().map(|s| (s.activity.as_str(), s.handoff_events as f64)));
            if sources.is_empty() {
                sources = all_activities();
            }
            out.push(WasteRecord {
                waste_id: "W-handoff_coordination".into(),
                waste_type: WasteType::HandoffCoordination,
                source_activities: sources,
                magnitude: 1.0 - thresholds.handoffs_per_item / mean_handoffs,
                evidence: Evidence {
                    metric: "handoffs_per_item".into(),
                    value: mean_handoffs,
                },
            });
        }
    }

    for s in stats {
        let single = || BTreeSet::from([s.activity.clone()]);
        if let Some(r) = s.rework_probability_r.filter(|r| *r > thresholds.rework_probability) {
            out.push(WasteRecord {
                waste_id: format!("W-rework_defect-{}", s.activity),
                waste_type: WasteType::ReworkDefect,
                source_activities: single(),
                magnitude: r,
                evidence: Evidence {
                    metric: "rework_probability".into(),
                    value: r,
                },
            });
        }
        if let Some(f) = s.failure_rate_f.filter(|f| *f > thresholds.failure_rate) {
            let waste_type = if thresholds.production_activities.contains(&s.activity) {
                WasteType::ProductionFailure
            } else {
                WasteType::UnstableEnvironment
            };
            out.push(WasteRecord {
                waste_id: format!("W-{}-{}", waste_type.as_str(), s.activity),
                waste_type,
                source_activities: single(),
                magnitude: f,
                evidence: Evidence {
                    metric: "failure_rate".into(),
                    value: f,
                },
            });
        }
        if s.traversal_count > 0 {
            let gap = 1.0 - s.complete_traversals as f64 / s.traversal_count as f64;
            if gap > thresholds.instrumentation_gap {
                out.push(WasteRecord {
                    waste_id: format!("W-instrumentation_gap-{}", s.activity),
                    waste_type: WasteType::InstrumentationGap,
                    source_activities: single(),
                    magnitude: gap,
                    evidence: Evidence {
                        metric: "incomplete_traversal_share".into(),
                        value: gap,
                    },
                });
            }
        }
    }

    out.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then_with(|| a.waste_id.cmp(&b.waste_id)));
    out
}

/// One row of the baseline value-stream table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformSummary {
    pub platform: String,
    pub items: usize,
    pub lead_days: f64,
    pub flow_pct: f64,
    pub queue_pct: f64,
    pub rework_pct: f64,
    pub handoffs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowsSummary {
    pub items: usize,
    pub open_items: usize,
    pub mean_lead_days: Option<f64>,
    pub median_lead_days: Option<f64>,
    pub mean_flow_efficiency: Option<f64>,
    pub queue_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsmReport {
    pub activities: Vec<ActivityStats>,
    pub flows_summary: FlowsSummary,
    pub platforms: Vec<PlatformSummary>,
    pub waste_inventory: Vec<WasteRecord>,
}

fn summarize_flows(flows: &[&FlowMetrics]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    if flows.is_empty() {
        return (None, None, None, None);
    }
    let leads: Vec<f64> = flows.iter().map(|f| f.lead_time_days()).collect();
    let effs: Vec<f64> = flows.iter().filter_map(|f| f.flow_efficiency).collect();
    let lead_total: f64 = flows.iter().map(|f| f.lead_time).sum();
    let queue_total: f64 = flows.iter().map(|f| f.queue_time).sum();
    (
        Some(mean(&leads)),
        Some(median(&leads)),
        (!effs.is_empty()).then(|| mean(&effs)),
        (lead_total > 0.0).then(|| queue_total / lead_total),
    )
}

/// Per-platform table: mean lead (days), mean flow efficiency (%), queue share
/// (%), reworked traversals (%), and mean handoffs per item.
pub fn platform_summaries(log: &EventLog, flows: &[FlowMetrics]) -> Vec<PlatformSummary> {
    let mut travs: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for t in traversals(log) {
        let e = travs.entry(t.platform).or_default();
        e.0 += t.reworked as usize;
        e.1 += 1;
    }
    log.platforms()
        .iter()
        .filter_map(|p| {
            let fl: Vec<&FlowMetrics> = flows.iter().filter(|f| &f.platform == p).collect();
            let (lead, _, eff, queue) = summarize_flows(&fl);
            let (reworked, total) = travs.get(p.as_str()).copied().unwrap_or_default();
            Some(PlatformSummary {
                platform: p.clone(),
                items: fl.len(),
                lead_days: lead?,
                flow_pct: eff.unwrap_or(0.0) * 100.0,
                queue_pct: queue.unwrap_or(0.0) * 100.0,
                rework_pct: if total == 0 { 0.0 } else { reworked as f64 / total as f64 * 100.0 },
                handoffs: fl.iter().map(|f| f.handoff_count as f64).sum::<f64>() / fl.len() as f64,
            })
        })
        .collect()
}

/// Stats, flows, platform table, and waste inventory for one log.
pub fn build_vsm_report(log: &EventLog, rule: &ValueAddedRule, thresholds: &WasteThresholds) -> (VsmReport, FlowOutcome) {
    let activities = compute_activity_stats(log);
    let flow = compute_flow(log, rule);
    let refs: Vec<&FlowMetrics> = flow.flows.iter().collect();
    let (mean_lead_days, median_lead_days, mean_flow_efficiency, queue_share) = summarize_flows(&refs);
    let report = VsmReport {
        waste_inventory: build_waste_inventory(&activities, &flow.flows, thresholds),
        platforms: platform_summaries(log, &flow.flows),
        flows_summary: FlowsSummary {
            items: flow.flows.len(),
            open_items: flow.open_items.len(),
            mean_lead_days,
            median_lead_days,
            mean_flow_efficiency,
            queue_share,
        },
        activities,
    };
    (report, flow)
}

impl VsmReport {
    /// CSV with columns platform, lead_days, flow_pct, queue_pct, rework_pct, handoffs.
    pub fn platform_csv(&self) -> String {
        let mut s = String::from("platform,lead_days,flow_pct,queue_pct,rework_pct,handoffs\n");
        for p in &self.platforms {
            s.push_str(&format!(
                "{},{:.2},{:.1},{:.1},{:.1},{:.2}\n",
                p.platform, p.lead_days, p.flow_pct, p.queue_pct, p.rework_pct, p.handoffs
            ));
        }
        s
    }
}

/// Plot-data rows of per-item flow: id, platform, entry, lead days, flow efficiency.
pub fn flow_plot_csv(flows: &[FlowMetrics]) -> String {
    let mut s = String::from("work_item_id,platform,entry,lead_days,flow_efficiency\n");
    for f in flows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            f.work_item_id,
            f.platform,
            format_timestamp(&f.entry),
            f.lead_time_days(),
            f.flow_efficiency.map(|e| e.to_string()).unwrap_or_default()
        ));
    }
    s
}
