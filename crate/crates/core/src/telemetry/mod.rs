//! Canonical event-log model, parsing/serialization, windowing, and the
//! data-quality audit that gates downstream analysis.

mod audit;
mod parse;
mod traversal;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audit::{audit, AuditReport, DEFAULT_GATE_THRESHOLD};
pub use parse::{parse_log, write_log, LogFormat, ParseOutcome, RecordError};
pub use traversal::{traversals, AttemptOutcome, Traversal};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TelemetryError {
    #[error("line {line}: unparsable record: {reason}")]
    UnparsableRecord { line: usize, reason: String },
    #[error("event log is empty")]
    EmptyLog,
    #[error("duplicate event_id `{0}`")]
    DuplicateEventId(String),
    #[error("event `{event_id}`: {reason}")]
    InvalidRecord { event_id: String, reason: String },
    #[error("invalid window: start {start} is not before end {end}")]
    InvalidWindow {
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Closed event taxonomy covering lifecycle, collaboration, and release events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Queued,
    Started,
    Finished,
    Failed,
    Reworked,
    Handoff,
    Commit,
    Deploy,
    IncidentOpen,
    IncidentResolved,
}

impl EventType {
    pub const ALL: [EventType; 10] = [
        EventType::Queued,
        EventType::Started,
        EventType::Finished,
        EventType::Failed,
        EventType::Reworked,
        EventType::Handoff,
        EventType::Commit,
        EventType::Deploy,
        EventType::IncidentOpen,
        EventType::IncidentResolved,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Queued => "queued",
            EventType::Started => "started",
            EventType::Finished => "finished",
            EventType::Failed => "failed",
            EventType::Reworked => "reworked",
            EventType::Handoff => "handoff",
            EventType::Commit => "commit",
            EventType::Deploy => "deploy",
            EventType::IncidentOpen => "incident_open",
            EventType::IncidentResolved => "incident_resolved",
        }
    }

    /// Events that belong to a queued→started→finished/failed traversal.
    pub fn is_lifecycle(self) -> bool {
        matches!(
            self,
            EventType::Queued | EventType::Started | EventType::Finished | EventType::Failed
        )
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown event_type `{s}`"))
    }
}

/// Deploy outcomes accepted in `attrs.outcome`.
pub const DEPLOY_OUTCOMES: [&str; 3] = ["success", "failed", "rolled_back"];

/// One telemetry observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub work_item_id: String,
    pub platform: String,
    pub activity: String,
    pub event_type: EventType,
    #[serde(with = "rfc3339")]
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
}

impl EventRecord {
    pub fn new(
        event_id: impl Into<String>,
        work_item_id: impl Into<String>,
        platform: impl Into<String>,
        activity: impl Into<String>,
        event_type: EventType,
        timestamp: DateTime<Utc>,
    ) -> Self {
        Self {
            event_id: event_id.into(),
            work_item_id: work_item_id.into(),
            platform: platform.into(),
            activity: activity.into(),
            event_type,
            timestamp,
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attrs.insert(key.into(), value.into());
        self
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).map(String::as_str)
    }

    /// Checks the per-type attribute requirements.
    pub fn validate(&self) -> Result<(), String> {
        if self.event_id.is_empty() {
            return Err("empty event_id".into());
        }
        if self.work_item_id.is_empty() {
            return Err("empty work_item_id".into());
        }
        match self.event_type {
            EventType::Deploy => match self.attr("outcome") {
                Some(o) if DEPLOY_OUTCOMES.contains(&o) => Ok(()),
                Some(o) => Err(format!("deploy outcome `{o}` not in {DEPLOY_OUTCOMES:?}")),
                None => Err("deploy event without attrs.outcome".into()),
            },
            EventType::Handoff => {
                if self.attr("from_team").is_none() || self.attr("to_team").is_none() {
                    Err("handoff event without attrs.from_team/attrs.to_team".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn sort_key(&self) -> (DateTime<Utc>, &str) {
        (self.timestamp, self.event_id.as_str())
    }
}

/// An immutable, normalized, time-ordered event log.
///
/// Records are sorted by timestamp with ties broken by `event_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLog {
    records: Vec<EventRecord>,
    platforms: BTreeSet<String>,
    time_span: Option<(DateTime<Utc>, DateTime<Utc>)>,
}

impl EventLog {
    /// Builds a log from arbitrary-order records, validating every record.
    pub fn from_records(mut records: Vec<EventRecord>) -> Result<Self, TelemetryError> {
        if records.is_empty() {
            return Err(TelemetryError::EmptyLog);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.event_id.as_str()) {
                return Err(TelemetryError::DuplicateEventId(r.event_id.clone()));
            }
            r.validate().map_err(|reason| TelemetryError::InvalidRecord {
                event_id: r.event_id.clone(),
                reason,
            })?;
        }
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Ok(Self::from_sorted(records))
    }

    /// `records` must already be sorted, unique and valid.
    fn from_sorted(records: Vec<EventRecord>) -> Self {
        let platforms = records.iter().map(|r| r.platform.clone()).collect();
        let time_span = match (records.first(), records.last()) {
            (Some(a), Some(b)) => Some((a.timestamp, b.timestamp)),
            _ => None,
        };
        Self {
            records,
            platforms,
            time_span,
        }
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn platforms(&self) -> &BTreeSet<String> {
        &self.platforms
    }

    /// `(min, max)` timestamp; `None` only for an empty window slice.
    pub fn time_span(&self) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        self.time_span
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<EventRecord> {
        self.records
    }

    /// Records of one platform, order preserved.
    pub fn for_platform(&self, platform: &str) -> EventLog {
        Self::from_sorted(
            self.records
                .iter()
                .filter(|r| r.platform == platform)
                .cloned()
                .collect(),
        )
    }

    /// Drops records matching `pred`; the result may be empty.
    pub fn without(&self, mut pred: impl FnMut(&EventRecord) -> bool) -> EventLog {
        Self::from_sorted(self.records.iter().filter(|r| !pred(r)).cloned().collect())
    }
}

/// Result of [`filter_window`]. `warning` is set to [`TelemetryError::EmptyLog`]
/// when no record falls inside the window.
#[derive(Debug, Clone)]
pub struct WindowSlice {
    pub log: EventLog,
    pub warning: Option<TelemetryError>,
}

/// Records with `start <= timestamp < end`, in log order.
pub fn filter_window(
    log: &EventLog,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<WindowSlice, TelemetryError> {
    if start >= end {
        return Err(TelemetryError::InvalidWindow { start, end });
    }
    let lo = log.records.partition_point(|r| r.timestamp < start);
    let hi = log.records.partition_point(|r| r.timestamp < end);
    let slice = EventLog::from_sorted(log.records[lo..hi.max(lo)].to_vec());
    let warning = slice.is_empty().then_some(TelemetryError::EmptyLog);
    Ok(WindowSlice {
        log: slice,
        warning,
    })
}

pub(crate) mod rfc3339 {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn format(ts: &DateTime<Utc>) -> String {
        ts.to_rfc3339_opts(SecondsFormat::AutoSi, true)
    }

    pub fn parse(s: &str) -> Result<DateTime<Utc>, String> {
        DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| format!("timestamp `{s}` is not RFC 3339: {e}"))
    }

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        parse(&raw).map_err(serde::de::Error::custom)
    }
}

pub use rfc3339::{format as format_timestamp, parse as parse_timestamp};
