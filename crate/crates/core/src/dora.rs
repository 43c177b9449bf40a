//! The four DORA delivery-performance metrics over an event log window.

use std::collections::{BTreeMap, VecDeque};

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use crate::stats::{mean, median, quantile_sorted};
use crate::telemetry::{EventLog, EventRecord, EventType, TelemetryError};
use crate::valuestream::hours;
use crate::HOURS_PER_DAY;

pub const DEFAULT_LINKAGE_HOURS: f64 = 48.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeDays {
    pub median: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MttrHours {
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    #[serde(with = "crate::telemetry::rfc3339")]
    pub start: DateTime<Utc>,
    #[serde(with = "crate::telemetry::rfc3339")]
    pub end: DateTime<Utc>,
}

/// How a deploy was classified for the change failure rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployClass {
    Success,
    /// Outcome `failed` or `rolled_back`.
    FailedOutcome,
    /// Successful outcome, but an incident was linked to it.
    IncidentLinked,
}

impl DeployClass {
    pub fn is_failure(self) -> bool {
        self != DeployClass::Success
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoraReport {
    /// Successful deploys per week; `None` when the window holds no deploy.
    pub deployment_frequency: Option<f64>,
    pub lead_time_days: Option<LeadTimeDays>,
    pub mttr_hours: Option<MttrHours>,
    pub change_failure_rate: Option<f64>,
    pub window: Window,
    pub deploys: usize,
    pub failed_deploys: usize,
    pub commits_paired: usize,
    pub commits_unpaired: usize,
    pub incidents_resolved: usize,
    /// Incidents opened without a matching resolution (excluded from MTTR).
    pub unmatched_incidents: usize,
    pub linkage_hours: f64,
    pub classification: BTreeMap<String, DeployClass>,
}

fn in_window(r: &EventRecord, w: &Window) -> bool {
    r.timestamp >= w.start && r.timestamp < w.end
}

fn is_success(r: &EventRecord) -> bool {
    r.attr("outcome") == Some("success")
}

/// Latest deploy in `pool`. Among deploys sharing that timestamp an
/// already-failed one is preferred, so the result does not depend on how
/// simultaneous deploys are ordered.
fn latest_deploy(pool: &[&EventRecord], classes: &BTreeMap<String, DeployClass>) -> Option<String> {
    let latest = pool.iter().map(|d| d.timestamp).max()?;
    let tied: Vec<&&EventRecord> = pool.iter().filter(|d| d.timestamp == latest).collect();
    tied.iter()
        .find(|d| classes[&d.event_id].is_failure())
        .or_else(|| tied.first())
        .map(|d| d.event_id.clone())
}

/// Computes DORA metrics for deploys, commits, and incidents inside
/// `[start, end)`.
///
/// Lead time pairs each commit with the first successful deploy of the same
/// work item at or after it. An incident links to the deploy of its own work
/// item when one lies within `linkage_hours` before it on the same platform,
/// otherwise to the latest such deploy on the platform; any linked deploy
/// counts as a change failure. Incidents pair with resolutions by
/// `attrs.incident_id`, falling back to work item id, first-in first-out.
pub fn compute_dora(
    log: &EventLog,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    linkage_hours: f64,
) -> Result<DoraReport, TelemetryError> {
    if start >= end {
        return Err(TelemetryError::InvalidWindow { start, end });
    }
    let window = Window { start, end };
    let records = log.records();
    let linkage = TimeDelta::milliseconds((linkage_hours * 3.6e6).round() as i64);

    let deploys: Vec<&EventRecord> = records
        .iter()
        .filter(|r| r.event_type == EventType::Deploy && in_window(r, &window))
        .collect();

    let mut classification: BTreeMap<String, DeployClass> = deploys
        .iter()
        .map(|d| {
            let class = if is_success(d) {
                DeployClass::Success
            } else {
                DeployClass::FailedOutcome
            };
            (d.event_id.clone(), class)
        })
        .collect();

    let mut by_platform: BTreeMap<&str, Vec<&EventRecord>> = BTreeMap::new();
    for d in &deploys {
        by_platform.entry(d.platform.as_str()).or_default().push(d);
    }
    for inc in records.iter().filter(|r| r.event_type == EventType::IncidentOpen) {
        let Some(candidates) = by_platform.get(inc.platform.as_str()) else {
            continue;
        };
        let eligible: Vec<&EventRecord> = candidates
            .iter()
            .copied()
            .filter(|d| d.timestamp <= inc.timestamp && inc.timestamp - d.timestamp <= linkage)
            .collect();
        let own: Vec<&EventRecord> = eligible
            .iter()
            .copied()
            .filter(|d| d.work_item_id == inc.work_item_id)
            .collect();
        let pool = if own.is_empty() { &eligible } else { &own };
        if let Some(id) = latest_deploy(pool, &classification) {
            let class = classification.get_mut(&id).expect("deploy classified");
            if *class == DeployClass::Success {
                *class = DeployClass::IncidentLinked;
            }
        }
    }

    let weeks = hours(end - start) / (7.0 * HOURS_PER_DAY);
    let successes = deploys.iter().filter(|d| is_success(d)).count();
    let failed = classification.values().filter(|c| c.is_failure()).count();

    let mut success_by_item: BTreeMap<&str, Vec<DateTime<Utc>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.event_type == EventType::Deploy && is_success(r)) {
        success_by_item.entry(r.work_item_id.as_str()).or_default().push(r.timestamp);
    }
    let mut lead_days = Vec::new();
    let mut unpaired = 0;
    for c in records
        .iter()
        .filter(|r| r.event_type == EventType::Commit && in_window(r, &window))
    {
        let next = success_by_item
            .get(c.work_item_id.as_str())
            .and_then(|ts| ts.iter().find(|t| **t >= c.timestamp));
        match next {
            Some(t) => lead_days.push(hours(*t - c.timestamp) / HOURS_PER_DAY),
            None => unpaired += 1,
        }
    }
    lead_days.sort_by(f64::total_cmp);

    let mut open: BTreeMap<String, VecDeque<DateTime<Utc>>> = BTreeMap::new();
    let mut repair_hours = Vec::new();
    let incident_key = |r: &EventRecord| r.attr("incident_id").unwrap_or(&r.work_item_id).to_string();
    for r in records {
        match r.event_type {
            EventType::IncidentOpen if in_window(r, &window) => {
                open.entry(incident_key(r)).or_default().push_back(r.timestamp);
            }
            EventType::IncidentResolved => {
                if let Some(t) = open.get_mut(&incident_key(r)).and_then(VecDeque::pop_front) {
                    repair_hours.push(hours(r.timestamp - t));
                }
            }
            _ => {}
        }
    }
    let unmatched_incidents = open.values().map(VecDeque::len).sum();

    let any_deploy = !deploys.is_empty();
    Ok(DoraReport {
        deployment_frequency: any_deploy.then(|| successes as f64 / weeks),
        lead_time_days: (any_deploy && !lead_days.is_empty()).then(|| LeadTimeDays {
            median: quantile_sorted(&lead_days, 0.5),
            p95: quantile_sorted(&lead_days, 0.95),
        }),
        mttr_hours: (!repair_hours.is_empty()).then(|| MttrHours {
            mean: mean(&repair_hours),
            median: median(&repair_hours),
        }),
        change_failure_rate: any_deploy.then(|| failed as f64 / deploys.len() as f64),
        window,
        deploys: deploys.len(),
        failed_deploys: failed,
        commits_paired: lead_days.len(),
        commits_unpaired: unpaired,
        incidents_resolved: repair_hours.len(),
        unmatched_incidents,
        linkage_hours,
        classification,
    })
}

impl DoraReport {
    /// One-row CSV: deployment_frequency, lead_time_median_days,
    /// lead_time_p95_days, mttr_mean_hours, mttr_median_hours, change_failure_rate.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        format!(
            "window_start,window_end,deployment_frequency,lead_time_median_days,lead_time_p95_days,mttr_mean_hours,mttr_median_hours,change_failure_rate\n{},{},{},{},{},{},{},{}\n",
            crate::telemetry::format_timestamp(&self.window.start),
            crate::telemetry::format_timestamp(&self.window.end),
            opt(self.deployment_frequency),
            opt(self.lead_time_days.map(|l| l.median)),
            opt(self.lead_time_days.map(|l| l.p95)),
            opt(self.mttr_hours.map(|m| m.mean)),
            opt(self.mttr_hours.map(|m| m.median)),
            opt(self.change_failure_rate),
        )
    }
}
