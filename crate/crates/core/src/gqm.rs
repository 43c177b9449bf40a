//! Goal-question-metric registry and the traceability graph linking
//! activities, wastes, goals, questions, metrics, and automations.
//!
//! Three typed edge families realize the mappings: `v` (activity → waste),
//! `g` ((goal, waste) → (question, metric)), and `a` ((waste, metric) →
//! automation).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The case-study registry: three goals with baselines, plus diagnostic
/// questions and metrics chained to four automations.
pub const EXAMPLE_REGISTRY_JSON: &str = include_str!("../fixtures/case_study_registry.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Activity,
    Waste,
    Goal,
    Question,
    Metric,
    Automation,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GqmError {
    #[error("{kind:?} `{id}` referenced but not registered")]
    DanglingReference { kind: NodeKind, id: String },
    #[error("{kind:?} `{id}` already registered with different content")]
    DuplicateId { kind: NodeKind, id: String },
    #[error("active metric `{metric_id}` is missing {missing:?}")]
    IncompleteTuple { metric_id: String, missing: Vec<String> },
    #[error("metric `{metric_id}` has non-positive minimum detectable effect {value}")]
    InvalidMde { metric_id: String, value: f64 },
    #[error("registry JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalTarget {
    pub metric_id: String,
    pub direction: Direction,
    /// Signed relative change sought, e.g. `-0.30` for a 30% reduction.
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub goal_id: String,
    pub statement: String,
    pub object: String,
    pub purpose: String,
    pub quality_focus: String,
    pub perspective: String,
    pub target: GoalTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub goal_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    CiCd,
    VersionControl,
    IssueTracker,
    Incidents,
    ProjectManagement,
    Survey,
}

impl DataSource {
    pub fn describe(self) -> &'static str {
        match self {
            DataSource::CiCd => "CI/CD logs",
            DataSource::VersionControl => "version control",
            DataSource::IssueTracker => "ticket timestamps",
            DataSource::Incidents => "incident records",
            DataSource::ProjectManagement => "project-management data",
            DataSource::Survey => "team surveys",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    PerEvent,
    Daily,
    Weekly,
    PerRelease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticalTest {
    Its,
    Did,
    MedianTest,
}

/// Multiplicity family a metric belongs to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricRole {
    #[default]
    Primary,
    Secondary,
}

/// Quantities the toolkit can compute from an event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    LeadTimeDays,
    FlowEfficiency,
    QueueTimeHours,
    ChangeFailureRate,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub metric_id: String,
    pub question_id: String,
    pub definition: String,
    pub data_source: Option<DataSource>,
    pub collection_frequency: Option<Cadence>,
    pub baseline: Option<Quantity>,
    pub target: Option<Quantity>,
    pub statistical_test: Option<StatisticalTest>,
    pub minimum_detectable_effect: Option<f64>,
    #[serde(default = "yes")]
    pub active: bool,
    #[serde(default)]
    pub role: MetricRole,
    #[serde(default)]
    pub measure: Option<Measure>,
}

impl MetricSpec {
    /// Tuple fields an active metric still lacks.
    pub fn missing_fields(&self) -> Vec<String> {
        let mut missing = Vec::new();
        if self.definition.trim().is_empty() {
            missing.push("definition");
        }
        if self.data_source.is_none() {
            missing.push("data_source");
        }
        if self.baseline.is_none() {
            missing.push("baseline");
        }
        if self.target.is_none() {
            missing.push("target");
        }
        if self.statistical_test.is_none() {
            missing.push("statistical_test");
        }
        missing.into_iter().map(String::from).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VEdge {
    pub activity: String,
    pub waste: String,
}

/// `g`: a (goal, waste) pair translated into a (question, metric) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GEdge {
    pub goal: String,
    pub waste: String,
    pub question: String,
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AEdge {
    pub waste: String,
    pub metric: String,
    pub automation: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceabilityGraph {
    #[serde(default)]
    pub activities: BTreeSet<String>,
    #[serde(default)]
    pub wastes: BTreeSet<String>,
    #[serde(default)]
    pub automations: BTreeSet<String>,
    #[serde(default)]
    pub v: BTreeSet<VEdge>,
    #[serde(default)]
    pub g: BTreeSet<GEdge>,
    #[serde(default)]
    pub a: BTreeSet<AEdge>,
}

/// Anything that can be registered.
#[derive(Debug, Clone, PartialEq)]
pub enum Entity {
    Goal(Goal),
    Question(Question),
    Metric(MetricSpec),
    Activity(String),
    Waste(String),
    Automation(String),
    V(VEdge),
    G(GEdge),
    A(AEdge),
}

/// The registry persisted as one JSON document with top-level keys
/// `goals`, `questions`, `metrics`, `graph`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "RegistryFile", into = "RegistryFile")]
pub struct Registry {
    pub goals: BTreeMap<String, Goal>,
    pub questions: BTreeMap<String, Question>,
    pub metrics: BTreeMap<String, MetricSpec>,
    pub graph: TraceabilityGraph,
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    #[serde(default)]
    goals: Vec<Goal>,
    #[serde(default)]
    questions: Vec<Question>,
    #[serde(default)]
    metrics: Vec<MetricSpec>,
    #[serde(default)]
    graph: TraceabilityGraph,
}

impl From<RegistryFile> for Registry {
    fn from(f: RegistryFile) -> Self {
        Self {
            goals: f.goals.into_iter().map(|g| (g.goal_id.clone(), g)).collect(),
            questions: f.questions.into_iter().map(|q| (q.question_id.clone(), q)).collect(),
            metrics: f.metrics.into_iter().map(|m| (m.metric_id.clone(), m)).collect(),
            graph: f.graph,
        }
    }
}

impl From<Registry> for RegistryFile {
    fn from(r: Registry) -> Self {
        Self {
            goals: r.goals.into_values().collect(),
            questions: r.questions.into_values().collect(),
            metrics: r.metrics.into_values().collect(),
            graph: r.graph,
        }
    }
}

fn insert_unique<T: PartialEq>(
    map: &mut BTreeMap<String, T>,
    kind: NodeKind,
    id: &str,
    value: T,
) -> Result<(), GqmError> {
    match map.get(id) {
        Some(existing) if *existing == value => Ok(()),
        Some(_) => Err(GqmError::DuplicateId {
            kind,
            id: id.to_string(),
        }),
        None => {
            map.insert(id.to_string(), value);
            Ok(())
        }
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a registry document without validating it; see
    /// [`validate_artifact`].
    pub fn from_json(text: &str) -> Result<Self, GqmError> {
        serde_json::from_str(text).map_err(|e| GqmError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    /// Number of goals, questions, and metrics.
    pub fn size(&self) -> usize {
        self.goals.len() + self.questions.len() + self.metrics.len()
    }

    pub fn active_metrics(&self) -> impl Iterator<Item = &MetricSpec> {
        self.metrics.values().filter(|m| m.active)
    }

    fn has(&self, kind: NodeKind, id: &str) -> bool {
        match kind {
            NodeKind::Activity => self.graph.activities.contains(id),
            NodeKind::Waste => self.graph.wastes.contains(id),
            NodeKind::Automation => self.graph.automations.contains(id),
            NodeKind::Goal => self.goals.contains_key(id),
            NodeKind::Question => self.questions.contains_key(id),
            NodeKind::Metric => self.metrics.contains_key(id),
        }
    }

    fn require(&self, kind: NodeKind, id: &str) -> Result<(), GqmError> {
        if self.has(kind, id) {
            Ok(())
        } else {
            Err(GqmError::DanglingReference {
                kind,
                id: id.to_string(),
            })
        }
    }

    /// Inserts an entity after checking its references and invariants.
    /// Re-inserting an identical entity is a no-op.
    ///
    /// A goal's target metric is checked by [`validate_artifact`] rather
    /// than here, since metrics hang off questions that hang off the goal.
    pub fn register(&mut self, entity: Entity) -> Result<&mut Self, GqmError> {
        match entity {
            Entity::Goal(g) => {
                let id = g.goal_id.clone();
                insert_unique(&mut self.goals, NodeKind::Goal, &id, g)?;
            }
            Entity::Question(q) => {
                self.require(NodeKind::Goal, &q.goal_id)?;
                let id = q.question_id.clone();
                insert_unique(&mut self.questions, NodeKind::Question, &id, q)?;
            }
            Entity::Metric(m) => {
                self.require(NodeKind::Question, &m.question_id)?;
                if let Some(v) = m.minimum_detectable_effect.filter(|v| *v <= 0.0) {
                    return Err(GqmError::InvalidMde {
                        metric_id: m.metric_id,
                        value: v,
                    });
                }
                let missing = m.missing_fields();
                if m.active && !missing.is_empty() {
                    return Err(GqmError::IncompleteTuple {
                        metric_id: m.metric_id,
                        missing,
                    });
                }
                let id = m.metric_id.clone();
                insert_unique(&mut self.metrics, NodeKind::Metric, &id, m)?;
            }
            Entity::Activity(id) => {
                self.graph.activities.insert(id);
            }
            Entity::Waste(id) => {
                self.graph.wastes.insert(id);
            }
            Entity::Automation(id) => {
                self.graph.automations.insert(id);
            }
            Entity::V(e) => {
                self.require(NodeKind::Activity, &e.activity)?;
                self.require(NodeKind::Waste, &e.waste)?;
                self.graph.v.insert(e);
            }
            Entity::G(e) => {
                self.require(NodeKind::Goal, &e.goal)?;
                self.require(NodeKind::Waste, &e.waste)?;
                self.require(NodeKind::Question, &e.question)?;
                self.require(NodeKind::Metric, &e.metric)?;
                self.graph.g.insert(e);
            }
            Entity::A(e) => {
                self.require(NodeKind::Waste, &e.waste)?;
                self.require(NodeKind::Metric, &e.metric)?;
                self.require(NodeKind::Automation, &e.automation)?;
                self.graph.a.insert(e);
            }
        }
        Ok(self)
    }
}

/// A registry defect. Dangling references are reported once per missing
/// node, listing everything that points at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    DanglingReference {
        kind: NodeKind,
        id: String,
        referenced_by: Vec<String>,
    },
    IncompleteTuple {
        metric_id: String,
        missing: Vec<String>,
    },
    InvalidMde {
        metric_id: String,
        value: f64,
    },
}

/// Empty iff every active metric has a complete tuple and no reference dangles.
pub fn validate_artifact(registry: &Registry) -> Vec<Violation> {
    let mut dangling: BTreeMap<(NodeKind, String), Vec<String>> = BTreeMap::new();
    let mut check = |kind: NodeKind, id: &str, from: String| {
        if !registry.has(kind, id) {
            dangling.entry((kind, id.to_string())).or_default().push(from);
        }
    };

    for g in registry.goals.values() {
        check(NodeKind::Metric, &g.target.metric_id, format!("goal:{}", g.goal_id));
    }
    for q in registry.questions.values() {
        check(NodeKind::Goal, &q.goal_id, format!("question:{}", q.question_id));
    }
    for m in registry.metrics.values() {
        check(NodeKind::Question, &m.question_id, format!("metric:{}", m.metric_id));
    }
    let graph = &registry.graph;
    for e in &graph.v {
        let from = format!("v:{}->{}", e.activity, e.waste);
        check(NodeKind::Activity, &e.activity, from.clone());
        check(NodeKind::Waste, &e.waste, from);
    }
    for e in &graph.g {
        let from = format!("g:({},{})->({},{})", e.goal, e.waste, e.question, e.metric);
        check(NodeKind::Goal, &e.goal, from.clone());
        check(NodeKind::Waste, &e.waste, from.clone());
        check(NodeKind::Question, &e.question, from.clone());
        check(NodeKind::Metric, &e.metric, from);
    }
    for e in &graph.a {
        let from = format!("a:({},{})->{}", e.waste, e.metric, e.automation);
        check(NodeKind::Waste, &e.waste, from.clone());
        check(NodeKind::Metric, &e.metric, from.clone());
        check(NodeKind::Automation, &e.automation, from);
    }

    let mut out: Vec<Violation> = dangling
        .into_iter()
        .map(|((kind, id), referenced_by)| Violation::DanglingReference { kind, id, referenced_by })
        .collect();
    for m in registry.metrics.values() {
        if let Some(v) = m.minimum_detectable_effect.filter(|v| *v <= 0.0) {
            out.push(Violation::InvalidMde {
                metric_id: m.metric_id.clone(),
                value: v,
            });
        }
        let missing = m.missing_fields();
        if m.active && !missing.is_empty() {
            out.push(Violation::IncompleteTuple {
                metric_id: m.metric_id.clone(),
                missing,
            });
        }
    }
    out
}

/// Fraction of `automations` with a full chain: an `a` edge from some
/// (waste, metric) pair that is itself the image of a `g` edge. The empty set
/// has coverage 1.
pub fn traceability_coverage(graph: &TraceabilityGraph, automations: &BTreeSet<String>) -> f64 {
    if automations.is_empty() {
        return 1.0;
    }
    let translated: BTreeSet<(&str, &str)> = graph
        .g
        .iter()
        .map(|e| (e.waste.as_str(), e.metric.as_str()))
        .collect();
    let chained: BTreeSet<&str> = graph
        .a
        .iter()
        .filter(|e| translated.contains(&(e.waste.as_str(), e.metric.as_str())))
        .map(|e| e.automation.as_str())
        .collect();
    let covered = automations.iter().filter(|t| chained.contains(t.as_str())).count();
    covered as f64 / automations.len() as f64
}

/// Plain-text GQM form for workshop use, one block per goal.
pub fn render_template(registry: &Registry) -> String {
    let mut out = String::new();
    for (gi, goal) in registry.goals.values().enumerate() {
        if gi > 0 {
            out.push('\n');
        }
        let questions: Vec<&Question> = registry.questions.values().filter(|q| q.goal_id == goal.goal_id).collect();
        let metrics: Vec<&MetricSpec> = registry
            .metrics
            .values()
            .filter(|m| questions.iter().any(|q| q.question_id == m.question_id))
            .collect();
        let _ = writeln!(out, "Goal: {}", goal.statement);
        out.push_str("Questions:\n");
        for (k, q) in questions.iter().enumerate() {
            let _ = writeln!(out, "  Q{}: {}", k + 1, q.text);
        }
        out.push_str("Metrics:\n");
        for (k, m) in metrics.iter().enumerate() {
            let _ = writeln!(out, "  M{}: {}", k + 1, m.definition);
        }
        out.push_str("Collection:\n");
        let mut sources: Vec<String> = Vec::new();
        for m in &metrics {
            let line = match (m.data_source, m.collection_frequency) {
                (Some(s), Some(f)) => format!("Automated from {} ({})", s.describe(), cadence_name(f)),
                (Some(s), None) => format!("Automated from {}", s.describe()),
                _ => "Source to be agreed".to_string(),
            };
            if !sources.contains(&line) {
                sources.push(line);
            }
        }
        for s in sources {
            let _ = writeln!(out, "  {s}");
        }
    }
    out
}

fn cadence_name(c: Cadence) -> &'static str {
    match c {
        Cadence::PerEvent => "per event",
        Cadence::Daily => "daily",
        Cadence::Weekly => "weekly",
        Cadence::PerRelease => "per release",
    }
}
