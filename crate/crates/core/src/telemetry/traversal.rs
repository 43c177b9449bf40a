use std::collections::BTreeMap;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};

use super::{EventLog, EventType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Finished,
    Failed,
}

/// One pass of a work item through an activity: queued, started, and a
/// terminal finished/failed stamp, any of which may be missing in dirty logs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Traversal<'a> {
    pub work_item_id: &'a str,
    pub platform: &'a str,
    pub activity: &'a str,
    /// Zero-based index among the item's traversals of this activity.
    pub ordinal: usize,
    pub queued: Option<DateTime<Utc>>,
    pub started: Option<DateTime<Utc>>,
    pub terminal: Option<(DateTime<Utc>, AttemptOutcome)>,
    /// Entered through a `reworked` event (a loop back into this activity).
    pub reworked: bool,
}

impl Traversal<'_> {
    pub fn is_complete(&self) -> bool {
        self.queued.is_some() && self.started.is_some() && self.terminal.is_some()
    }

    /// Present stamps appear in queued ≤ started ≤ terminal order.
    pub fn is_monotone(&self) -> bool {
        let stamps = [self.queued, self.started, self.terminal.map(|t| t.0)];
        let present: Vec<_> = stamps.into_iter().flatten().collect();
        present.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn stamp_count(&self) -> usize {
        self.queued.is_some() as usize + self.started.is_some() as usize + self.terminal.is_some() as usize
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.terminal, Some((_, AttemptOutcome::Finished)))
    }

    pub fn queue_time(&self) -> Option<TimeDelta> {
        self.valid_pair(self.queued, self.started)
    }

    pub fn processing_time(&self) -> Option<TimeDelta> {
        self.valid_pair(self.started, self.terminal.map(|t| t.0))
    }

    fn valid_pair(&self, a: Option<DateTime<Utc>>, b: Option<DateTime<Utc>>) -> Option<TimeDelta> {
        if !self.is_monotone() {
            return None;
        }
        Some(b? - a?)
    }

    fn first_stamp(&self) -> Option<DateTime<Utc>> {
        [self.queued, self.started, self.terminal.map(|t| t.0)]
            .into_iter()
            .flatten()
            .min()
    }
}

#[derive(Default)]
struct Lanes<'a> {
    platform: &'a str,
    queued: Vec<(DateTime<Utc>, bool)>,
    started: Vec<DateTime<Utc>>,
    terminal: Vec<(DateTime<Utc>, AttemptOutcome)>,
    pending_rework: bool,
}

/// Reconstructs traversals from lifecycle events.
///
/// Within one (work item, activity) pair the k-th queued, k-th started and
/// k-th terminal event form the k-th traversal. A `reworked` event flags the
/// next traversal queued on that activity. Output is ordered by work item,
/// then earliest stamp, then activity and ordinal.
pub fn traversals(log: &EventLog) -> Vec<Traversal<'_>> {
    let mut lanes: BTreeMap<(&str, &str), Lanes<'_>> = BTreeMap::new();
    for r in log.records() {
        let key = (r.work_item_id.as_str(), r.activity.as_str());
        match r.event_type {
            EventType::Queued | EventType::Started | EventType::Finished | EventType::Failed | EventType::Reworked => {}
            _ => continue,
        }
        let lane = lanes.entry(key).or_default();
        lane.platform = r.platform.as_str();
        match r.event_type {
            EventType::Queued => {
                let rework = std::mem::take(&mut lane.pending_rework);
                lane.queued.push((r.timestamp, rework));
            }
            EventType::Started => lane.started.push(r.timestamp),
            EventType::Finished => lane.terminal.push((r.timestamp, AttemptOutcome::Finished)),
            EventType::Failed => lane.terminal.push((r.timestamp, AttemptOutcome::Failed)),
            EventType::Reworked => lane.pending_rework = true,
            _ => unreachable!(),
        }
    }

    let mut out = Vec::new();
    for ((item, activity), lane) in lanes {
        let n = lane.queued.len().max(lane.started.len()).max(lane.terminal.len());
        for k in 0..n {
            out.push(Traversal {
                work_item_id: item,
                platform: lane.platform,
                activity,
                ordinal: k,
                queued: lane.queued.get(k).map(|q| q.0),
                started: lane.started.get(k).copied(),
                terminal: lane.terminal.get(k).copied(),
                reworked: lane.queued.get(k).is_some_and(|q| q.1),
            });
        }
    }
    out.sort_by(|a, b| {
        (a.work_item_id, a.first_stamp(), a.activity, a.ordinal)
            .cmp(&(b.work_item_id, b.first_stamp(), b.activity, b.ordinal))
    });
    out
}
