use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{traversals, EventLog, EventType};

/// Minimum observability required before analysis or maturity advancement.
pub const DEFAULT_GATE_THRESHOLD: f64 = 0.80;

/// Data-quality audit of an event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Present lifecycle stamps over expected stamps (three per traversal).
    pub timestamp_completeness: f64,
    /// Work items whose traversals all carry every lifecycle stamp.
    pub timestamp_completeness_items: f64,
    /// Out-of-order traversals, keyed by work item (items with none omitted).
    pub monotonicity_violations: BTreeMap<String, usize>,
    /// Events whose work item has no entry (`queued` or `commit`) event.
    pub orphan_events: usize,
    pub duplicate_ids: usize,
    /// Work items whose every traversal is a complete, ordered
    /// queued→started→finished/failed chain.
    pub observability_fraction: f64,
    pub gate_threshold: f64,
    pub gate_passed: bool,
    pub work_items: usize,
    pub traversals: usize,
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Runs the audit. Pure: the same log always yields the same report.
///
/// Items without any lifecycle event are excluded from the completeness and
/// observability denominators; a log with no lifecycle events scores 0.
pub fn audit(log: &EventLog, gate_threshold: f64) -> AuditReport {
    let travs = traversals(log);

    let mut per_item: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    let mut violations: BTreeMap<String, usize> = BTreeMap::new();
    let mut stamps = 0usize;
    for t in &travs {
        let entry = per_item.entry(t.work_item_id).or_insert((true, true));
        entry.0 &= t.is_complete();
        entry.1 &= t.is_complete() && t.is_monotone();
        stamps += t.stamp_count();
        if !t.is_monotone() {
            *violations.entry(t.work_item_id.to_string()).or_default() += 1;
        }
    }

    let with_entry: BTreeSet<&str> = log
        .records()
        .iter()
        .filter(|r| matches!(r.event_type, EventType::Queued | EventType::Commit))
        .map(|r| r.work_item_id.as_str())
        .collect();
    let orphan_events = log
        .records()
        .iter()
        .filter(|r| !with_entry.contains(r.work_item_id.as_str()))
        .count();

    let mut ids = HashSet::with_capacity(log.len());
    let duplicate_ids = log
        .records()
        .iter()
        .filter(|r| !ids.insert(r.event_id.as_str()))
        .count();

    let items = per_item.len();
    let observability_fraction = fraction(per_item.values().filter(|v| v.1).count(), items);
    AuditReport {
        timestamp_completeness: fraction(stamps, 3 * travs.len()),
        timestamp_completeness_items: fraction(per_item.values().filter(|v| v.0).count(), items),
        monotonicity_violations: violations,
        orphan_events,
        duplicate_ids,
        observability_fraction,
        gate_threshold,
        gate_passed: observability_fraction >= gate_threshold,
        work_items: items,
        traversals: travs.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::EventRecord;
    use chrono::{DateTime, TimeZone, Utc};

    fn at(h: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, h, 0, 0).unwrap()
    }

    fn chain(item: &str, base: u32) -> Vec<EventRecord> {
        vec![
            EventRecord::new(format!("{item}-q"), item, "A", "build", EventType::Queued, at(base)),
            EventRecord::new(format!("{item}-s"), item, "A", "build", EventType::Started, at(base + 1)),
            EventRecord::new(format!("{item}-f"), item, "A", "build", EventType::Finished, at(base + 2)),
        ]
    }

    #[test]
    fn complete_log_passes() {
        let mut recs = chain("w1", 0);
        recs.extend(chain("w2", 3));
        let report = audit(&EventLog::from_records(recs).unwrap(), DEFAULT_GATE_THRESHOLD);
        assert_eq!(report.observability_fraction, 1.0);
        assert_eq!(report.timestamp_completeness, 1.0);
        assert!(report.gate_passed);
        assert!(report.monotonicity_violations.is_empty());
        assert_eq!(report.orphan_events, 0);
    }

    #[test]
    fn finished_before_started_is_a_violation() {
        let mut recs = chain("w1", 0);
        recs[1].timestamp = at(5);
        recs.extend(chain("w2", 3));
        let report = audit(&EventLog::from_records(recs).unwrap(), 0.8);
        assert_eq!(report.monotonicity_violations.get("w1"), Some(&1));
        assert_eq!(report.monotonicity_violations.len(), 1);
        assert_eq!(report.observability_fraction, 0.5);
        assert!(!report.gate_passed);
    }

    #[test]
    fn missing_entry_counts_orphans() {
        let mut recs = chain("w1", 0);
        recs.remove(0);
        recs.push(
            EventRecord::new("x", "w1", "A", "deploy", EventType::Deploy, at(4)).with_attr("outcome", "success"),
        );
        let report = audit(&EventLog::from_records(recs).unwrap(), 0.8);
        assert_eq!(report.orphan_events, 3);
        assert!((report.timestamp_completeness - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.observability_fraction, 0.0);
    }

    #[test]
    fn audit_is_deterministic() {
        let log = EventLog::from_records(chain("w1", 0)).unwrap();
        assert_eq!(audit(&log, 0.8), audit(&log, 0.8));
    }
}
