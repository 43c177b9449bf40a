//! Discrete-event simulator of a delivery value stream. Produces event logs
//! together with the exact quantities the analytic modules should recover.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use chrono::{DateTime, TimeDelta, Utc};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::MetricSeries;
use crate::stats::{mean, median};
use crate::telemetry::{EventLog, EventRecord, EventType, TelemetryError};
use crate::valuestream::{duration_ratio, ValueAddedRule};

const MS_PER_HOUR: f64 = 3_600_000.0;
const MS_PER_DAY: f64 = 86_400_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid patch: {0}")]
    InvalidPatch(String),
    #[error("activity {activity} is unstable (utilization {rho:.3} >= 1)")]
    UnstableSystem { activity: String, rho: f64 },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

/// Service-time distribution, in hours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServiceDist {
    /// `exp(mu + sigma * Z)` hours.
    Lognormal { mu: f64, sigma: f64 },
    Exponential { mean_hours: f64 },
    Deterministic { hours: f64 },
}

impl ServiceDist {
    pub fn mean_hours(self) -> f64 {
        match self {
            ServiceDist::Lognormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            ServiceDist::Exponential { mean_hours } => mean_hours,
            ServiceDist::Deterministic { hours } => hours,
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            ServiceDist::Lognormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
            ServiceDist::Exponential { mean_hours } => {
                let e: f64 = Exp1.sample(rng);
                e * mean_hours
            }
            ServiceDist::Deterministic { hours } => hours,
        }
    }

    fn validate(self) -> Result<(), String> {
        let ok = match self {
            ServiceDist::Lognormal { mu, sigma } => mu.is_finite() && sigma >= 0.0 && sigma.is_finite(),
            ServiceDist::Exponential { mean_hours } => mean_hours > 0.0 && mean_hours.is_finite(),
            ServiceDist::Deterministic { hours } => hours >= 0.0 && hours.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid service distribution {self:?}"))
        }
    }
}

fn one_server() -> Option<usize> {
    Some(1)
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivitySpec {
    pub name: String,
    pub processing: ServiceDist,
    /// Parallel servers sharing one FIFO queue; `null` means unlimited.
    #[serde(default = "one_server")]
    pub servers: Option<usize>,
    /// Chance an attempt ends `failed`; the item then rejoins this queue.
    #[serde(default)]
    pub failure_prob: f64,
    /// Chance a finished item loops back for rework.
    #[serde(default)]
    pub rework_prob: f64,
    /// Activity re-entered on rework; defaults to this activity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rework_target: Option<String>,
    #[serde(default = "yes")]
    pub value_added: bool,
    /// Owning team, used in handoff events; defaults to the activity name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub team: Option<String>,
}

impl ActivitySpec {
    pub fn new(name: &str, processing: ServiceDist) -> Self {
        Self {
            name: name.into(),
            processing,
            servers: Some(1),
            failure_prob: 0.0,
            rework_prob: 0.0,
            rework_target: None,
            value_added: true,
            team: None,
        }
    }

    fn team(&self) -> &str {
        self.team.as_deref().unwrap_or(&self.name)
    }
}

/// Parameter overrides that take effect from an intervention time on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterPatch {
    /// Restricts activity-level fields to one activity; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub processing_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rework_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deploy_failure_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    /// Days after the scenario start.
    pub at_day: f64,
    pub patch: ParameterPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentSpec {
    /// Mean hours from a failed deploy to incident resolution.
    pub mttr_hours: f64,
}

fn default_start() -> DateTime<Utc> {
    DateTime::from_timestamp(1_704_067_200, 0).expect("valid epoch")
}

fn default_platform() -> String {
    "sim".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    #[serde(default = "default_platform")]
    pub platform: String,
    #[serde(default = "default_start", with = "crate::telemetry::rfc3339")]
    pub start: DateTime<Utc>,
    pub activities: Vec<ActivitySpec>,
    /// Poisson arrival rate, items per day.
    pub arrival_rate_per_day: f64,
    /// Expected handoff events per item over its forward path.
    #[serde(default)]
    pub handoff_rate: f64,
    /// Fraction of deploys that fail.
    #[serde(default)]
    pub deploy_failure_rate: f64,
    /// Share of failed deploys reported as `rolled_back` rather than `failed`.
    #[serde(default)]
    pub rollback_share: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incidents: Option<IncidentSpec>,
    /// Arrivals stop after this many days; in-flight work still completes.
    pub horizon_days: f64,
    /// Arrivals also stop after this many items when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_items: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub interventions: Vec<Intervention>,
    /// Fail instead of warning when an activity's utilization reaches 1.
    #[serde(default)]
    pub require_steady_state: bool,
}

impl SimScenario {
    /// Marks activities with `value_added = false` as non-value-added.
    pub fn value_added_rule(&self) -> ValueAddedRule {
        ValueAddedRule {
            non_value_added_activities: self
                .activities
                .iter()
                .filter(|a| !a.value_added)
                .map(|a| a.name.clone())
                .collect(),
        }
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.activities.iter().position(|a| a.name == name)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.activities.is_empty() {
            return bad("at least one activity is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.activities {
            if a.name.is_empty() || !names.insert(a.name.as_str()) {
                return bad(format!("activity names must be non-empty and unique: `{}`", a.name));
            }
            a.processing.validate().map_err(SimError::InvalidScenario)?;
            for (what, p) in [("failure_prob", a.failure_prob), ("rework_prob", a.rework_prob)] {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("{what} of {} must lie in [0, 1), got {p}", a.name));
                }
            }
            if a.servers == Some(0) {
                return bad(format!("{} needs at least one server", a.name));
            }
            if let Some(t) = &a.rework_target {
                if self.index_of(t).is_none() {
                    return bad(format!("rework target `{t}` of {} is not an activity", a.name));
                }
            }
        }
        if !(self.arrival_rate_per_day > 0.0) || !self.arrival_rate_per_day.is_finite() {
            return bad(format!("arrival rate must be positive, got {}", self.arrival_rate_per_day));
        }
        if !(self.horizon_days > 0.0) || !self.horizon_days.is_finite() {
            return bad(format!("horizon must be positive, got {}", self.horizon_days));
        }
        if !(self.handoff_rate >= 0.0) || !self.handoff_rate.is_finite() {
            return bad(format!("handoff rate must be non-negative, got {}", self.handoff_rate));
        }
        for (what, p) in [
            ("deploy_failure_rate", self.deploy_failure_rate),
            ("rollback_share", self.rollback_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{what} must lie in [0, 1], got {p}"));
            }
        }
        if let Some(inc) = &self.incidents {
            if !(inc.mttr_hours > 0.0) {
                return bad(format!("mttr_hours must be positive, got {}", inc.mttr_hours));
            }
        }
        for iv in &self.interventions {
            self.check_patch(iv.at_day, &iv.patch)?;
        }
        Ok(())
    }

    fn check_patch(&self, at_day: f64, patch: &ParameterPatch) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidPatch(m));
        if !(0.0..=self.horizon_days).contains(&at_day) {
            return bad(format!("t0 = {at_day} days lies outside the horizon [0, {}]", self.horizon_days));
        }
        if let Some(a) = &patch.activity {
            if self.index_of(a).is_none() {
                return bad(format!("unknown activity `{a}`"));
            }
        }
        if let Some(s) = patch.processing_scale {
            if !(s > 0.0) || !s.is_finite() {
                return bad(format!("processing_scale must be positive, got {s}"));
            }
        }
        for p in [patch.failure_prob, patch.rework_prob].into_iter().flatten() {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("probability {p} must lie in [0, 1)"));
            }
        }
        if let Some(p) = patch.deploy_failure_rate {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("deploy_failure_rate {p} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Expected traversals of each activity per item, from the routing
    /// probabilities at the scenario's base parameters.
    pub fn expected_visits(&self) -> Vec<f64> {
        let n = self.activities.len();
        // routing[i][j]: chance a traversal of i is followed by one of j
        let mut routing = DMatrix::<f64>::zeros(n, n);
        for (i, a) in self.activities.iter().enumerate() {
            let f = a.failure_prob;
            routing[(i, i)] += f;
            let target = a.rework_target.as_deref().and_then(|t| self.index_of(t)).unwrap_or(i);
            routing[(i, target)] += (1.0 - f) * a.rework_prob;
            if i + 1 < n {
                routing[(i, i + 1)] += (1.0 - f) * (1.0 - a.rework_prob);
            }
        }
        let system = DMatrix::<f64>::identity(n, n) - routing.transpose();
        let mut entry = DVector::<f64>::zeros(n);
        entry[0] = 1.0;
        system
            .lu()
            .solve(&entry)
            .map(|v| v.iter().copied().collect())
            .unwrap_or_else(|| vec![f64::INFINITY; n])
    }

    /// Offered load per server for each activity at base parameters;
    /// unlimited-server activities report zero.
    pub fn utilization(&self) -> Vec<(String, f64)> {
        let lambda_per_hour = self.arrival_rate_per_day / 24.0;
        self.activities
            .iter()
            .zip(self.expected_visits())
            .map(|(a, visits)| {
                let rho = match a.servers {
                    Some(c) => lambda_per_hour * visits * a.processing.mean_hours() / c as f64,
                    None => 0.0,
                };
                (a.name.clone(), rho)
            })
            .collect()
    }
}

/// Returns a copy of `scenario` with `patch` applied from day `t0` on.
pub fn inject_intervention(scenario: &SimScenario, t0_days: f64, patch: ParameterPatch) -> Result<SimScenario, SimError> {
    scenario.check_patch(t0_days, &patch)?;
    let mut out = scenario.clone();
    out.interventions.push(Intervention { at_day: t0_days, patch });
    out.interventions.sort_by(|a, b| a.at_day.total_cmp(&b.at_day));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityTruth {
    pub activity: String,
    pub configured_mean_processing_hours: f64,
    pub configured_failure_prob: f64,
    pub configured_rework_prob: f64,
    pub utilization: f64,
    pub traversals: usize,
    pub finished: usize,
    pub failed: usize,
    /// Traversals entered through a rework loop.
    pub rework_entries: usize,
    /// Mean processing hours of finished attempts.
    pub mean_processing_hours: Option<f64>,
    pub mean_queue_hours: Option<f64>,
    pub realized_failure_rate: Option<f64>,
    pub realized_rework_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTruth {
    pub work_item_id: String,
    /// Milliseconds from the scenario start.
    pub arrival_ms: i64,
    pub exit_ms: i64,
    pub lead_ms: i64,
    /// Processing of finished attempts at value-added activities.
    pub value_added_ms: i64,
    /// Processing of every attempt, failed ones included.
    pub processing_ms: i64,
    pub queue_ms: i64,
    /// `value_added_ms / lead_ms` as an exact reduced ratio.
    pub flow_efficiency: Option<f64>,
    pub deploy_failed: bool,
}

impl ItemTruth {
    pub fn lead_days(&self) -> f64 {
        self.lead_ms as f64 / MS_PER_DAY
    }
}

/// Realized before/after values around one intervention. Items are split by
/// arrival time, deploys by deploy time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionTruth {
    pub at_day: f64,
    pub patch: ParameterPatch,
    pub items_before: usize,
    pub items_after: usize,
    pub mean_lead_days_before: Option<f64>,
    pub mean_lead_days_after: Option<f64>,
    pub median_lead_days_before: Option<f64>,
    pub median_lead_days_after: Option<f64>,
    pub mean_flow_efficiency_before: Option<f64>,
    pub mean_flow_efficiency_after: Option<f64>,
    pub change_failure_rate_before: Option<f64>,
    pub change_failure_rate_after: Option<f64>,
    pub configured_deploy_failure_rate_before: f64,
    pub configured_deploy_failure_rate_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub platform: String,
    pub seed: u64,
    pub activities: Vec<ActivityTruth>,
    pub items: Vec<ItemTruth>,
    pub mean_flow_efficiency: Option<f64>,
    pub deploys: usize,
    pub failed_deploys: usize,
    pub change_failure_rate: Option<f64>,
    pub interventions: Vec<InterventionTruth>,
    pub warnings: Vec<String>,
}

/// Random streams, one per purpose, derived from the scenario seed.
struct Streams {
    arrivals: ChaCha8Rng,
    service: Vec<ChaCha8Rng>,
    routing: Vec<ChaCha8Rng>,
    deploy: ChaCha8Rng,
    handoff: ChaCha8Rng,
    incident: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64, activities: usize) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self {
            arrivals: stream(0),
            deploy: stream(1),
            handoff: stream(2),
            incident: stream(3),
            service: (0..activities as u64).map(|i| stream(16 + 2 * i)).collect(),
            routing: (0..activities as u64).map(|i| stream(17 + 2 * i)).collect(),
        }
    }
}

/// Effective parameters at a simulated instant.
#[derive(Debug, Clone)]
struct Params {
    scale: Vec<f64>,
    failure: Vec<f64>,
    rework: Vec<f64>,
    deploy_failure: f64,
}

struct Schedule {
    /// `(effective from ms, parameters)`, ascending.
    epochs: Vec<(i64, Params)>,
}

impl Schedule {
    fn new(s: &SimScenario) -> Self {
        let mut current = Params {
            scale: vec![1.0; s.activities.len()],
            failure: s.activities.iter().map(|a| a.failure_prob).collect(),
            rework: s.activities.iter().map(|a| a.rework_prob).collect(),
            deploy_failure: s.deploy_failure_rate,
        };
        let mut epochs = vec![(i64::MIN, current.clone())];
        let mut ivs: Vec<&Intervention> = s.interventions.iter().collect();
        ivs.sort_by(|a, b| a.at_day.total_cmp(&b.at_day));
        for iv in ivs {
            let p = &iv.patch;
            for (i, a) in s.activities.iter().enumerate() {
                if p.activity.as_deref().is_some_and(|name| name != a.name) {
                    continue;
                }
                if let Some(x) = p.processing_scale {
                    current.scale[i] = x;
                }
                if let Some(x) = p.failure_prob {
                    current.failure[i] = x;
                }
                if let Some(x) = p.rework_prob {
                    current.rework[i] = x;
                }
            }
            if let Some(x) = p.deploy_failure_rate {
                current.deploy_failure = x;
            }
            epochs.push(((iv.at_day * MS_PER_DAY).round() as i64, current.clone()));
        }
        Self { epochs }
    }

    fn at(&self, t: i64) -> &Params {
        let idx = self.epochs.partition_point(|(from, _)| *from <= t);
        &self.epochs[idx - 1].1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Arrival,
    Completion { item: usize, activity: usize },
    IncidentResolved { item: usize, incident: usize },
}

#[derive(Default)]
struct ItemState {
    arrival: i64,
    value_added: i64,
    processing: i64,
    queue: i64,
    queued_at: i64,
    exit: Option<i64>,
    deploy_failed: bool,
}

struct Job {
    item: usize,
    started: i64,
    failed: bool,
    reworked: bool,
}

#[derive(Default)]
struct ActivityAcc {
    traversals: usize,
    finished: usize,
    failed: usize,
    rework_entries: usize,
    processing_finished_ms: i64,
    queue_ms: i64,
}

struct Sim<'a> {
    s: &'a SimScenario,
    schedule: Schedule,
    rng: Streams,
    heap: BinaryHeap<Reverse<(i64, u64, Event)>>,
    seq: u64,
    records: Vec<EventRecord>,
    items: Vec<ItemState>,
    queues: Vec<VecDeque<usize>>,
    busy: Vec<usize>,
    jobs: BTreeMap<(usize, usize), Job>,
    acc: Vec<ActivityAcc>,
    handoff_per_step: Option<Poisson<f64>>,
    deploys: Vec<(i64, bool)>,
    incidents: usize,
}

impl Sim<'_> {
    fn push(&mut self, t: i64, e: Event) {
        self.seq += 1;
        self.heap.push(Reverse((t, self.seq, e)));
    }

    fn ts(&self, t: i64) -> DateTime<Utc> {
        self.s.start + TimeDelta::milliseconds(t)
    }

    fn item_id(&self, item: usize) -> String {
        format!("{}-WI-{:06}", self.s.platform, item)
    }

    fn emit(&mut self, item: usize, activity: &str, kind: EventType, t: i64, attrs: &[(&str, String)]) {
        let id = format!("{}-ev{:09}", self.s.platform, self.records.len());
        let mut r = EventRecord::new(id, self.item_id(item), &self.s.platform, activity, kind, self.ts(t));
        for (k, v) in attrs {
            r = r.with_attr(*k, v.clone());
        }
        self.records.push(r);
    }

    fn enqueue(&mut self, item: usize, activity: usize, t: i64, via_rework: bool) {
        let name = self.s.activities[activity].name.clone();
        if via_rework {
            self.emit(item, &name, EventType::Reworked, t, &[]);
            self.acc[activity].rework_entries += 1;
        }
        self.emit(item, &name, EventType::Queued, t, &[]);
        self.acc[activity].traversals += 1;
        self.items[item].queued_at = t;
        self.queues[activity].push_back(item);
        self.try_start(activity, t);
    }

    fn try_start(&mut self, activity: usize, t: i64) {
        let cap = self.s.activities[activity].servers.unwrap_or(usize::MAX);
        while self.busy[activity] < cap {
            let Some(item) = self.queues[activity].pop_front() else {
                break;
            };
            self.busy[activity] += 1;
            let name = self.s.activities[activity].name.clone();
            self.emit(item, &name, EventType::Started, t, &[]);
            let waited = t - self.items[item].queued_at;
            self.items[item].queue += waited;
            self.acc[activity].queue_ms += waited;

            let params = self.schedule.at(t);
            let (scale, f, r) = (params.scale[activity], params.failure[activity], params.rework[activity]);
            let hours = self.s.activities[activity].processing.sample(&mut self.rng.service[activity]) * scale;
            let duration = (hours * MS_PER_HOUR).round().max(0.0) as i64;
            let u_fail: f64 = self.rng.routing[activity].random();
            let u_rework: f64 = self.rng.routing[activity].random();
            self.jobs.insert(
                (item, activity),
                Job {
                    item,
                    started: t,
                    failed: u_fail < f,
                    reworked: u_rework < r,
                },
            );
            self.push(t + duration, Event::Completion { item, activity });
        }
    }

    fn complete(&mut self, item: usize, activity: usize, t: i64) {
        let job = self.jobs.remove(&(item, activity)).expect("completion of a running job");
        let spec = &self.s.activities[activity];
        let name = spec.name.clone();
        let took = t - job.started;
        self.items[job.item].processing += took;
        self.busy[activity] -= 1;
        if job.failed {
            self.emit(item, &name, EventType::Failed, t, &[]);
            self.acc[activity].failed += 1;
            self.enqueue(item, activity, t, false);
        } else {
            self.emit(item, &name, EventType::Finished, t, &[]);
            self.acc[activity].finished += 1;
            self.acc[activity].processing_finished_ms += took;
            if spec.value_added {
                self.items[item].value_added += took;
            }
            if job.reworked {
                let target = spec
                    .rework_target
                    .as_deref()
                    .and_then(|n| self.s.index_of(n))
                    .unwrap_or(activity);
                self.enqueue(item, target, t, true);
            } else {
                let next = activity + 1;
                let to_team = match self.s.activities.get(next) {
                    Some(a) => a.team().to_string(),
                    None => "release".to_string(),
                };
                self.handoffs(item, activity, &to_team, t);
                if next < self.s.activities.len() {
                    self.enqueue(item, next, t, false);
                } else {
                    self.deploy(item, t);
                }
            }
        }
        self.try_start(activity, t);
    }

    fn handoffs(&mut self, item: usize, activity: usize, to_team: &str, t: i64) {
        let Some(dist) = self.handoff_per_step else {
            return;
        };
        let count = dist.sample(&mut self.rng.handoff) as usize;
        let spec = &self.s.activities[activity];
        let (name, from_team) = (spec.name.clone(), spec.team().to_string());
        for _ in 0..count {
            self.emit(
                item,
                &name,
                EventType::Handoff,
                t,
                &[("from_team", from_team.clone()), ("to_team", to_team.to_string())],
            );
        }
    }

    fn deploy(&mut self, item: usize, t: i64) {
        let rate = self.schedule.at(t).deploy_failure;
        let u: f64 = self.rng.deploy.random();
        let u_rollback: f64 = self.rng.deploy.random();
        let failed = u < rate;
        let outcome = match (failed, u_rollback < self.s.rollback_share) {
            (false, _) => "success",
            (true, true) => "rolled_back",
            (true, false) => "failed",
        };
        self.items[item].exit = Some(t);
        self.items[item].deploy_failed = failed;
        self.deploys.push((t, failed));
        self.emit(item, "deploy", EventType::Deploy, t, &[("outcome", outcome.to_string())]);
        if let Some(inc) = &self.s.incidents {
            let e: f64 = Exp1.sample(&mut self.rng.incident);
            if failed {
                let incident = self.incidents;
                self.incidents += 1;
                self.emit(
                    item,
                    "production",
                    EventType::IncidentOpen,
                    t,
                    &[("incident_id", format!("{}-INC-{incident:05}", self.s.platform))],
                );
                let dur = (e * inc.mttr_hours * MS_PER_HOUR).round() as i64;
                self.push(t + dur, Event::IncidentResolved { item, incident });
            }
        }
    }

    fn run(&mut self) {
        let horizon = (self.s.horizon_days * MS_PER_DAY).round() as i64;
        let rate_per_ms = self.s.arrival_rate_per_day / MS_PER_DAY;
        let next_arrival = |rng: &mut ChaCha8Rng, now: i64| -> i64 {
            let e: f64 = Exp1.sample(rng);
            now + (e / rate_per_ms).round() as i64
        };
        let first = next_arrival(&mut self.rng.arrivals, 0);
        if first <= horizon {
            self.push(first, Event::Arrival);
        }
        while let Some(Reverse((t, _, event))) = self.heap.pop() {
            match event {
                Event::Arrival => {
                    let item = self.items.len();
                    self.items.push(ItemState {
                        arrival: t,
                        ..Default::default()
                    });
                    let sha = format!("{:012x}", (self.s.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ item as u64) & 0xffff_ffff_ffff);
                    self.emit(item, "commit", EventType::Commit, t, &[("sha", sha)]);
                    self.enqueue(item, 0, t, false);
                    let more = self.s.max_items.is_none_or(|m| self.items.len() < m);
                    let next = next_arrival(&mut self.rng.arrivals, t);
                    if more && next <= horizon {
                        self.push(next, Event::Arrival);
                    }
                }
                Event::Completion { item, activity } => self.complete(item, activity, t),
                Event::IncidentResolved { item, incident } => {
                    let id = format!("{}-INC-{incident:05}", self.s.platform);
                    self.emit(item, "production", EventType::IncidentResolved, t, &[("incident_id", id)]);
                }
            }
        }
    }
}

/// Simulates `scenario` to completion: arrivals stop at the horizon (or
/// after `max_items`) and every admitted item runs through to deploy.
pub fn run(scenario: &SimScenario) -> Result<(EventLog, GroundTruth), SimError> {
    scenario.validate()?;
    let utilization = scenario.utilization();
    let mut warnings = Vec::new();
    for (name, rho) in &utilization {
        if *rho >= 1.0 {
            if scenario.require_steady_state {
                return Err(SimError::UnstableSystem {
                    activity: name.clone(),
                    rho: *rho,
                });
            }
            warnings.push(format!("activity {name} has utilization {rho:.3} >= 1; queues grow without bound"));
        }
    }
    let n = scenario.activities.len();
    let per_step = scenario.handoff_rate / n as f64;
    let mut sim = Sim {
        s: scenario,
        schedule: Schedule::new(scenario),
        rng: Streams::new(scenario.seed, n),
        heap: BinaryHeap::new(),
        seq: 0,
        records: Vec::new(),
        items: Vec::new(),
        queues: vec![VecDeque::new(); n],
        busy: vec![0; n],
        jobs: BTreeMap::new(),
        acc: (0..n).map(|_| ActivityAcc::default()).collect(),
        handoff_per_step: (per_step > 0.0).then(|| Poisson::new(per_step).expect("positive rate")),
        deploys: Vec::new(),
        incidents: 0,
    };
    sim.run();

    let items: Vec<ItemTruth> = sim
        .items
        .iter()
        .enumerate()
        .map(|(k, it)| {
            let exit = it.exit.expect("every admitted item deploys");
            let lead = exit - it.arrival;
            ItemTruth {
                work_item_id: sim.item_id(k),
                arrival_ms: it.arrival,
                exit_ms: exit,
                lead_ms: lead,
                value_added_ms: it.value_added,
                processing_ms: it.processing,
                queue_ms: it.queue,
                flow_efficiency: duration_ratio(TimeDelta::milliseconds(it.value_added), TimeDelta::milliseconds(lead)),
                deploy_failed: it.deploy_failed,
            }
        })
        .collect();

    let activities = scenario
        .activities
        .iter()
        .zip(&sim.acc)
        .zip(&utilization)
        .map(|((spec, a), (_, rho))| {
            let attempts = a.finished + a.failed;
            ActivityTruth {
                activity: spec.name.clone(),
                configured_mean_processing_hours: spec.processing.mean_hours(),
                configured_failure_prob: spec.failure_prob,
                configured_rework_prob: spec.rework_prob,
                utilization: *rho,
                traversals: a.traversals,
                finished: a.finished,
                failed: a.failed,
                rework_entries: a.rework_entries,
                mean_processing_hours: (a.finished > 0)
                    .then(|| a.processing_finished_ms as f64 / MS_PER_HOUR / a.finished as f64),
                mean_queue_hours: (a.traversals > 0).then(|| a.queue_ms as f64 / MS_PER_HOUR / a.traversals as f64),
                realized_failure_rate: (attempts > 0).then(|| a.failed as f64 / attempts as f64),
                realized_rework_rate: (a.traversals > 0).then(|| a.rework_entries as f64 / a.traversals as f64),
            }
        })
        .collect();

    let failed_deploys = sim.deploys.iter().filter(|d| d.1).count();
    let fes: Vec<f64> = items.iter().filter_map(|i| i.flow_efficiency).collect();
    let schedule = Schedule::new(scenario);
    let interventions = scenario
        .interventions
        .iter()
        .map(|iv| intervention_truth(iv, &items, &sim.deploys, &schedule))
        .collect();

    let truth = GroundTruth {
        platform: scenario.platform.clone(),
        seed: scenario.seed,
        activities,
        mean_flow_efficiency: (!fes.is_empty()).then(|| mean(&fes)),
        deploys: sim.deploys.len(),
        failed_deploys,
        change_failure_rate: (!sim.deploys.is_empty()).then(|| failed_deploys as f64 / sim.deploys.len() as f64),
        items,
        interventions,
        warnings,
    };
    let log = EventLog::from_records(sim.records)?;
    Ok((log, truth))
}

fn intervention_truth(iv: &Intervention, items: &[ItemTruth], deploys: &[(i64, bool)], schedule: &Schedule) -> InterventionTruth {
    let t0 = (iv.at_day * MS_PER_DAY).round() as i64;
    let (before, after): (Vec<&ItemTruth>, Vec<&ItemTruth>) = items.iter().partition(|i| i.arrival_ms < t0);
    let leads = |v: &[&ItemTruth]| v.iter().map(|i| i.lead_days()).collect::<Vec<_>>();
    let fe = |v: &[&ItemTruth]| v.iter().filter_map(|i| i.flow_efficiency).collect::<Vec<_>>();
    let opt = |v: Vec<f64>, f: fn(&[f64]) -> f64| (!v.is_empty()).then(|| f(&v));
    let cfr = |pred: &dyn Fn(i64) -> bool| {
        let sel: Vec<bool> = deploys.iter().filter(|d| pred(d.0)).map(|d| d.1).collect();
        (!sel.is_empty()).then(|| sel.iter().filter(|f| **f).count() as f64 / sel.len() as f64)
    };
    InterventionTruth {
        at_day: iv.at_day,
        patch: iv.patch.clone(),
        items_before: before.len(),
        items_after: after.len(),
        mean_lead_days_before: opt(leads(&before), mean),
        mean_lead_days_after: opt(leads(&after), mean),
        median_lead_days_before: opt(leads(&before), median),
        median_lead_days_after: opt(leads(&after), median),
        mean_flow_efficiency_before: opt(fe(&before), mean),
        mean_flow_efficiency_after: opt(fe(&after), mean),
        change_failure_rate_before: cfr(&|t| t < t0),
        change_failure_rate_after: cfr(&|t| t >= t0),
        configured_deploy_failure_rate_before: schedule.at(t0 - 1).deploy_failure,
        configured_deploy_failure_rate_after: schedule.at(t0).deploy_failure,
    }
}

/// Runs several scenarios (in parallel) and merges their logs. Platforms
/// should differ so that record ids stay unique.
pub fn run_all(scenarios: &[SimScenario]) -> Result<(EventLog, Vec<GroundTruth>), SimError> {
    let results: Vec<Result<(EventLog, GroundTruth), SimError>> = scenarios.par_iter().map(run).collect();
    let mut records = Vec::new();
    let mut truths = Vec::new();
    for r in results {
        let (log, truth) = r?;
        records.extend(log.into_records());
        truths.push(truth);
    }
    Ok((EventLog::from_records(records)?, truths))
}

/// Design of a segmented series with AR(1) noise, as used in
/// estimator-recovery studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedAr1 {
    pub pre: usize,
    pub post: usize,
    pub level: f64,
    pub slope: f64,
    pub level_change: f64,
    pub slope_change: f64,
    pub phi: f64,
    /// Innovation standard deviation.
    pub sigma: f64,
}

impl SegmentedAr1 {
    /// Draws one series; the noise starts from its stationary distribution.
    pub fn sample(&self, metric_id: &str, seed: u64) -> MetricSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.pre + self.post;
        let t0 = self.pre as f64;
        let z0: f64 = StandardNormal.sample(&mut rng);
        let mut e = z0 * self.sigma / (1.0 - self.phi * self.phi).sqrt();
        let mut points = Vec::with_capacity(n);
        for k in 0..n {
            if k > 0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                e = self.phi * e + self.sigma * z;
            }
            let t = k as f64;
            let d = if t >= t0 { 1.0 } else { 0.0 };
            let y = self.level + self.slope * t + self.level_change * d + self.slope_change * (t - t0) * d + e;
            points.push((t, y));
        }
        MetricSeries::new(metric_id, points, self.pre).expect("well-formed segmented design")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::audit;
    use crate::valuestream::compute_flow;

    fn pipeline(seed: u64) -> SimScenario {
        let mut build = ActivitySpec::new("build", ServiceDist::Lognormal { mu: 0.0, sigma: 0.5 });
        build.failure_prob = 0.1;
        let mut test = ActivitySpec::new("test", ServiceDist::Lognormal { mu: 0.5, sigma: 0.6 });
        test.rework_prob = 0.15;
        test.rework_target = Some("build".into());
        let mut approval = ActivitySpec::new("approval", ServiceDist::Exponential { mean_hours: 2.0 });
        approval.value_added = false;
        approval.servers = None;
        SimScenario {
            platform: "P".into(),
            start: default_start(),
            activities: vec![build, test, approval],
            arrival_rate_per_day: 4.0,
            handoff_rate: 3.0,
            deploy_failure_rate: 0.2,
            rollback_share: 0.5,
            incidents: Some(IncidentSpec { mttr_hours: 5.0 }),
            horizon_days: 60.0,
            max_items: None,
            seed,
            interventions: Vec::new(),
            require_steady_state: true,
        }
    }

    #[test]
    fn deterministic_single_activity() {
        let s = SimScenario {
            activities: vec![ActivitySpec::new("work", ServiceDist::Deterministic { hours: 3.0 })],
            arrival_rate_per_day: 0.01,
            horizon_days: 2000.0,
            ..pipeline(3)
        };
        let s = SimScenario {
            handoff_rate: 0.0,
            deploy_failure_rate: 0.0,
            incidents: None,
            ..s
        };
        let (log, truth) = run(&s).unwrap();
        assert!(!truth.items.is_empty());
        for item in &truth.items {
            assert_eq!(item.processing_ms, 3 * 3_600_000);
            assert_eq!(item.queue_ms, 0);
            assert_eq!(item.flow_efficiency, Some(1.0));
        }
        assert_eq!(audit(&log, 0.8).observability_fraction, 1.0);
    }

    #[test]
    fn same_seed_same_log() {
        let (a, ta) = run(&pipeline(11)).unwrap();
        let (b, tb) = run(&pipeline(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = run(&pipeline(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_patch_changes_nothing() {
        let base = pipeline(5);
        let patched = inject_intervention(
            &base,
            20.0,
            ParameterPatch {
                processing_scale: Some(1.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(run(&base).unwrap().0, run(&patched).unwrap().0);
        assert!(matches!(
            inject_intervention(&base, 61.0, ParameterPatch::default()),
            Err(SimError::InvalidPatch(_))
        ));
    }

    #[test]
    fn conservation_and_audit() {
        let s = pipeline(9);
        let (log, truth) = run(&s).unwrap();
        let report = audit(&log, 0.8);
        assert_eq!(report.observability_fraction, 1.0);
        assert!(report.gate_passed);
        for item in &truth.items {
            assert_eq!(item.queue_ms + item.processing_ms, item.lead_ms);
        }
        let flows = compute_flow(&log, &s.value_added_rule());
        assert!(flows.open_items.is_empty());
        assert_eq!(flows.flows.len(), truth.items.len());
        for (f, t) in flows.flows.iter().zip(&truth.items) {
            assert_eq!(f.work_item_id, t.work_item_id);
            assert_eq!(f.flow_efficiency, t.flow_efficiency);
        }
    }

    #[test]
    fn visits_solve_routing() {
        let s = pipeline(1);
        let v = s.expected_visits();
        // build: 1/(1-f) per pass, passes = 1/(1-r_test)
        let passes = 1.0 / (1.0 - 0.15);
        assert!((v[0] - passes / 0.9).abs() < 1e-12);
        assert!((v[1] - passes).abs() < 1e-12);
        assert!((v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unstable_systems_are_flagged() {
        let mut s = pipeline(1);
        s.arrival_rate_per_day = 40.0;
        assert!(matches!(run(&s), Err(SimError::UnstableSystem { .. })));
        s.require_steady_state = false;
        s.horizon_days = 5.0;
        let (_, truth) = run(&s).unwrap();
        assert!(!truth.warnings.is_empty());
    }

    #[test]
    fn ar1_series_shape() {
        let design = SegmentedAr1 {
            pre: 24,
            post: 24,
            level: 14.0,
            slope: 0.0,
            level_change: -6.8,
            slope_change: 0.0,
            phi: 0.3,
            sigma: 1.5,
        };
        let a = design.sample("m", 1);
        assert_eq!(a.points.len(), 48);
        assert_eq!(a.intervention_index, 24);
        assert_eq!(a, design.sample("m", 1));
    }
}
