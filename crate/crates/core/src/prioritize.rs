//! Automation candidate scoring, maturity gating, pilot routing and
//! budget-constrained portfolio selection.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Candidate counts up to this size are solved exactly by branch and bound.
pub const EXACT_LIMIT: usize = 20;
/// Cost quantum of the dynamic-programming solver used above [`EXACT_LIMIT`].
pub const DP_COST_STEP: f64 = 0.01;
pub const DEFAULT_GAMMA: f64 = 0.6;
/// Observability fraction required before a team may advance a maturity level.
pub const OBSERVABILITY_PREREQUISITE: f64 = 0.80;

/// The case-study backlog. Impact is fixed at 1 and ΔG set so each score
/// reproduces the published ranking value.
pub const EXAMPLE_CANDIDATES_JSON: &str = include_str!("../fixtures/case_study_candidates.json");

const FEASIBILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrioritizeError {
    #[error("candidate {automation_id} has non-positive cost {cost}")]
    NonPositiveCost { automation_id: String, cost: f64 },
    #[error("candidate {automation_id}: {reason}")]
    InvalidCandidate { automation_id: String, reason: String },
    #[error("duplicate candidate id {0}")]
    DuplicateCandidate(String),
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
    #[error("invalid maturity profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    AutomatedBuild,
    AutomatedTest,
    Iac,
    AutomatedRollback,
    Canary,
    Chatops,
    PipelineParallelism,
    TelemetryInstrumentation,
    PredictiveTestSelection,
    AdaptivePipeline,
}

impl Pattern {
    pub const ALL: [Pattern; 10] = [
        Pattern::AutomatedBuild,
        Pattern::AutomatedTest,
        Pattern::Iac,
        Pattern::AutomatedRollback,
        Pattern::Canary,
        Pattern::Chatops,
        Pattern::PipelineParallelism,
        Pattern::TelemetryInstrumentation,
        Pattern::PredictiveTestSelection,
        Pattern::AdaptivePipeline,
    ];

    /// Catalog maturity level at which the pattern becomes appropriate.
    pub fn catalog_maturity(self) -> MaturityLevel {
        use MaturityLevel::*;
        match self {
            Pattern::TelemetryInstrumentation => Initial,
            Pattern::AutomatedBuild | Pattern::AutomatedTest | Pattern::Iac | Pattern::Chatops => Repeatable,
            Pattern::AutomatedRollback | Pattern::Canary | Pattern::PipelineParallelism => Defined,
            Pattern::PredictiveTestSelection | Pattern::AdaptivePipeline => Optimized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum MaturityLevel {
    Initial = 1,
    Repeatable = 2,
    Defined = 3,
    Optimized = 4,
}

impl TryFrom<u8> for MaturityLevel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Self::Initial),
            2 => Ok(Self::Repeatable),
            3 => Ok(Self::Defined),
            4 => Ok(Self::Optimized),
            _ => Err(format!("maturity level must be 1-4, got {v}")),
        }
    }
}

impl From<MaturityLevel> for u8 {
    fn from(l: MaturityLevel) -> u8 {
        l as u8
    }
}

impl fmt::Display for MaturityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Initial => "initial",
            Self::Repeatable => "repeatable",
            Self::Defined => "defined",
            Self::Optimized => "optimized",
        };
        write!(f, "{} ({name})", *self as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutomationCandidate {
    pub automation_id: String,
    pub pattern: Pattern,
    pub delta_g: f64,
    pub impact: f64,
    pub confidence: f64,
    pub cost: f64,
    /// Overrides the catalog level of `pattern` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_maturity: Option<MaturityLevel>,
    #[serde(default)]
    pub addressed_wastes: BTreeSet<String>,
    /// Only consulted when a risk cap is configured; missing counts as zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
}

impl AutomationCandidate {
    pub fn required_maturity(&self) -> MaturityLevel {
        self.required_maturity.unwrap_or_else(|| self.pattern.catalog_maturity())
    }

    pub fn validate(&self) -> Result<(), PrioritizeError> {
        let bad = |reason: String| {
            Err(PrioritizeError::InvalidCandidate {
                automation_id: self.automation_id.clone(),
                reason,
            })
        };
        if !(self.cost > 0.0) || !self.cost.is_finite() {
            return Err(PrioritizeError::NonPositiveCost {
                automation_id: self.automation_id.clone(),
                cost: self.cost,
            });
        }
        if !(self.delta_g >= 0.0) || !self.delta_g.is_finite() {
            return bad(format!("delta_g must be a finite non-negative number, got {}", self.delta_g));
        }
        for (name, v) in [("impact", self.impact), ("confidence", self.confidence)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if let Some(r) = self.risk {
            if !(r >= 0.0) || !r.is_finite() {
                return bad(format!("risk must be finite and non-negative, got {r}"));
            }
        }
        Ok(())
    }
}

/// `delta_g * impact * confidence / cost`.
pub fn score(candidate: &AutomationCandidate) -> Result<f64, PrioritizeError> {
    if !(candidate.cost > 0.0) {
        return Err(PrioritizeError::NonPositiveCost {
            automation_id: candidate.automation_id.clone(),
            cost: candidate.cost,
        });
    }
    Ok(candidate.delta_g * candidate.impact * candidate.confidence / candidate.cost)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityProfile {
    pub level: MaturityLevel,
    pub observability_fraction: f64,
    pub prerequisites_met: bool,
}

impl MaturityProfile {
    /// Builds a profile; prerequisites hold only when `other_prerequisites`
    /// are satisfied and observability reaches the 80% threshold.
    pub fn new(level: MaturityLevel, observability_fraction: f64, other_prerequisites: bool) -> Self {
        Self {
            level,
            observability_fraction,
            prerequisites_met: other_prerequisites && observability_fraction >= OBSERVABILITY_PREREQUISITE,
        }
    }

    pub fn validate(&self) -> Result<(), PrioritizeError> {
        if !(0.0..=1.0).contains(&self.observability_fraction) {
            return Err(PrioritizeError::InvalidProfile(format!(
                "observability_fraction must lie in [0, 1], got {}",
                self.observability_fraction
            )));
        }
        if self.prerequisites_met && self.observability_fraction < OBSERVABILITY_PREREQUISITE {
            return Err(PrioritizeError::InvalidProfile(format!(
                "prerequisites_met requires observability >= {OBSERVABILITY_PREREQUISITE}, got {}",
                self.observability_fraction
            )));
        }
        Ok(())
    }

    /// The level the team may move to next, if any.
    pub fn next_level(&self) -> Option<MaturityLevel> {
        if !self.prerequisites_met {
            return None;
        }
        MaturityLevel::try_from(self.level as u8 + 1).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConstraints {
    pub budget: f64,
    #[serde(default = "default_gamma")]
    pub min_confidence_gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_cap: Option<f64>,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl SelectionConstraints {
    pub fn new(budget: f64) -> Self {
        Self {
            budget,
            min_confidence_gamma: DEFAULT_GAMMA,
            risk_cap: None,
        }
    }

    pub fn validate(&self) -> Result<(), PrioritizeError> {
        if !(self.budget > 0.0) || !self.budget.is_finite() {
            return Err(PrioritizeError::InvalidConstraints(format!(
                "budget must be positive and finite, got {}",
                self.budget
            )));
        }
        if !(0.0..=1.0).contains(&self.min_confidence_gamma) {
            return Err(PrioritizeError::InvalidConstraints(format!(
                "gamma must lie in [0, 1], got {}",
                self.min_confidence_gamma
            )));
        }
        if let Some(cap) = self.risk_cap {
            if !(cap > 0.0) {
                return Err(PrioritizeError::InvalidConstraints(format!("risk_cap must be positive, got {cap}")));
            }
        }
        Ok(())
    }
}

/// Splits candidates into those the profile can adopt and those it cannot yet.
pub fn gate_by_maturity(
    candidates: &[AutomationCandidate],
    profile: &MaturityProfile,
) -> (Vec<AutomationCandidate>, Vec<AutomationCandidate>) {
    candidates
        .iter()
        .cloned()
        .partition(|c| c.required_maturity() <= profile.level)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    BranchAndBound,
    DynamicProgramming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: AutomationCandidate,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrioritizationResult {
    /// Every candidate, by descending score then id.
    pub scored: Vec<ScoredCandidate>,
    pub selected: Vec<String>,
    pub piloted: Vec<String>,
    pub gated_out: Vec<String>,
    pub aggregate_score: f64,
    pub total_cost: f64,
    pub total_risk: f64,
    pub solver: Solver,
    pub constraints: SelectionConstraints,
    pub maturity: MaturityProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl PrioritizationResult {
    pub fn status(&self, automation_id: &str) -> &'static str {
        let has = |set: &[String]| set.iter().any(|s| s == automation_id);
        if has(&self.selected) {
            "selected"
        } else if has(&self.piloted) {
            "pilot"
        } else if has(&self.gated_out) {
            "gated_out"
        } else {
            "deferred"
        }
    }

    /// Backlog table in score order: intervention, waste, score, confidence,
    /// cost, plus the routing status of each candidate.
    pub fn backlog_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["intervention", "waste", "score", "confidence", "cost", "status"])
            .expect("in-memory csv");
        for s in &self.scored {
            let c = &s.candidate;
            let wastes = c.addressed_wastes.iter().cloned().collect::<Vec<_>>().join(";");
            w.write_record([
                c.automation_id.clone(),
                wastes,
                format!("{:.4}", s.score),
                c.confidence.to_string(),
                c.cost.to_string(),
                self.status(&c.automation_id).to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv output is utf-8")
    }
}

#[derive(Debug, Clone, Copy)]
struct Item {
    score: f64,
    cost: f64,
    risk: f64,
}

/// A feasible subset, as indices into the id-sorted item list.
#[derive(Debug, Clone)]
struct Portfolio {
    members: Vec<usize>,
    score: f64,
    cost: f64,
    risk: f64,
}

impl Portfolio {
    /// Sums are accumulated in id order so equal subsets give equal totals.
    fn of(items: &[Item], mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        let (mut score, mut cost, mut risk) = (0.0, 0.0, 0.0);
        for &i in &members {
            score += items[i].score;
            cost += items[i].cost;
            risk += items[i].risk;
        }
        Self {
            members,
            score,
            cost,
            risk,
        }
    }

    /// `Less` when `self` is preferred: higher score, then lower cost, then
    /// the lexicographically smaller id set.
    fn preference(&self, other: &Self, ids: &[&str]) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.cost.total_cmp(&other.cost))
            .then_with(|| {
                let a = self.members.iter().map(|&i| ids[i]);
                let b = other.members.iter().map(|&i| ids[i]);
                a.cmp(b)
            })
    }
}

fn within(total: f64, cap: f64) -> bool {
    total <= cap + FEASIBILITY_TOLERANCE * cap.abs().max(1.0)
}

struct BranchAndBound<'a> {
    items: &'a [Item],
    ids: &'a [&'a str],
    order: Vec<usize>,
    budget: f64,
    risk_cap: Option<f64>,
    chosen: Vec<usize>,
    best: Option<Portfolio>,
}

impl BranchAndBound<'_> {
    /// Fractional-knapsack relaxation over the items not yet decided.
    fn bound(&self, depth: usize, score: f64, cost: f64) -> f64 {
        let mut room = self.budget - cost;
        let mut bound = score;
        for &i in &self.order[depth..] {
            let it = self.items[i];
            if it.cost <= room {
                room -= it.cost;
                bound += it.score;
            } else {
                bound += it.score * (room / it.cost).max(0.0);
                break;
            }
        }
        bound
    }

    fn search(&mut self, depth: usize, score: f64, cost: f64, risk: f64) {
        if let Some(best) = &self.best {
            let slack = 1e-9 * best.score.abs().max(1.0);
            if self.bound(depth, score, cost) < best.score - slack {
                return;
            }
        }
        if depth == self.order.len() {
            let candidate = Portfolio::of(self.items, self.chosen.clone());
            if !within(candidate.cost, self.budget) || !self.risk_cap.is_none_or(|cap| within(candidate.risk, cap)) {
                return;
            }
            let better = match &self.best {
                None => true,
                Some(best) => candidate.preference(best, self.ids) == Ordering::Less,
            };
            if better {
                self.best = Some(candidate);
            }
            return;
        }
        let i = self.order[depth];
        let it = self.items[i];
        let slack = 2.0 * FEASIBILITY_TOLERANCE;
        if within(cost + it.cost, self.budget + slack)
            && self.risk_cap.is_none_or(|cap| within(risk + it.risk, cap + slack))
        {
            self.chosen.push(i);
            self.search(depth + 1, score + it.score, cost + it.cost, risk + it.risk);
            self.chosen.pop();
        }
        self.search(depth + 1, score, cost, risk);
    }
}

fn branch_and_bound(items: &[Item], ids: &[&str], budget: f64, risk_cap: Option<f64>) -> Portfolio {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (items[a].score / items[a].cost, items[b].score / items[b].cost);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut solver = BranchAndBound {
        items,
        ids,
        order,
        budget,
        risk_cap,
        chosen: Vec::new(),
        best: None,
    };
    solver.search(0, 0.0, 0.0, 0.0);
    solver.best.unwrap_or_else(|| Portfolio::of(items, Vec::new()))
}

/// Costs rounded up to multiples of [`DP_COST_STEP`], so any subset the DP
/// accepts is also feasible at the true costs.
fn dynamic_program(items: &[Item], budget: f64) -> Portfolio {
    let units = |c: f64| (c / DP_COST_STEP - 1e-9).ceil().max(0.0) as usize;
    let weights: Vec<usize> = items.iter().map(|it| units(it.cost)).collect();
    let capacity = ((budget / DP_COST_STEP + 1e-9).floor() as usize).min(weights.iter().sum());
    // best[w] = (score, cost units) using capacity w
    let mut best = vec![(0.0f64, 0usize); capacity + 1];
    let mut take = vec![vec![false; capacity + 1]; items.len()];
    for (i, it) in items.iter().enumerate() {
        let wi = weights[i];
        if wi > capacity {
            continue;
        }
        for w in (wi..=capacity).rev() {
            let (s, c) = best[w - wi];
            let cand = (s + it.score, c + wi);
            let cur = best[w];
            if cand.0 > cur.0 || (cand.0 == cur.0 && cand.1 < cur.1) {
                best[w] = cand;
                take[i][w] = true;
            }
        }
    }
    let mut w = (0..=capacity)
        .max_by(|&a, &b| best[a].0.total_cmp(&best[b].0).then(best[b].1.cmp(&best[a].1)).then(b.cmp(&a)))
        .unwrap_or(0);
    let mut members = Vec::new();
    for i in (0..items.len()).rev() {
        if take[i][w] {
            members.push(i);
            w -= weights[i];
        }
    }
    Portfolio::of(items, members)
}

/// Gates by maturity, routes low-confidence candidates to pilots, and picks
/// the score-maximizing subset of the rest within budget (and risk cap).
pub fn select_portfolio(
    candidates: &[AutomationCandidate],
    constraints: &SelectionConstraints,
    profile: &MaturityProfile,
) -> Result<PrioritizationResult, PrioritizeError> {
    constraints.validate()?;
    profile.validate()?;
    let mut seen = BTreeSet::new();
    for c in candidates {
        c.validate()?;
        if !seen.insert(c.automation_id.as_str()) {
            return Err(PrioritizeError::DuplicateCandidate(c.automation_id.clone()));
        }
    }

    let mut scored = candidates
        .iter()
        .map(|c| Ok(ScoredCandidate { candidate: c.clone(), score: score(c)? }))
        .collect::<Result<Vec<_>, PrioritizeError>>()?;
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.candidate.automation_id.cmp(&b.candidate.automation_id))
    });

    let (feasible, gated) = gate_by_maturity(candidates, profile);
    let (mut eligible, piloted): (Vec<_>, Vec<_>) = feasible
        .into_iter()
        .partition(|c| c.confidence >= constraints.min_confidence_gamma);
    eligible.sort_by(|a, b| a.automation_id.cmp(&b.automation_id));

    let ids: Vec<&str> = eligible.iter().map(|c| c.automation_id.as_str()).collect();
    let items: Vec<Item> = eligible
        .iter()
        .map(|c| Item {
            score: c.delta_g * c.impact * c.confidence / c.cost,
            cost: c.cost,
            risk: c.risk.unwrap_or(0.0),
        })
        .collect();

    let solver = if items.len() <= EXACT_LIMIT || constraints.risk_cap.is_some() {
        Solver::BranchAndBound
    } else {
        Solver::DynamicProgramming
    };
    let best = match solver {
        Solver::BranchAndBound => branch_and_bound(&items, &ids, constraints.budget, constraints.risk_cap),
        Solver::DynamicProgramming => dynamic_program(&items, constraints.budget),
    };

    let diagnostic = if !items.is_empty() && best.members.is_empty() {
        let fits = eligible.iter().any(|c| within(c.cost, constraints.budget));
        (!fits).then(|| {
            let cheapest = items.iter().map(|it| it.cost).fold(f64::INFINITY, f64::min);
            format!(
                "infeasible budget: cheapest eligible candidate costs {cheapest}, budget is {}",
                constraints.budget
            )
        })
    } else {
        None
    };

    let sorted_ids = |set: Vec<AutomationCandidate>| {
        let mut v: Vec<String> = set.into_iter().map(|c| c.automation_id).collect();
        v.sort();
        v
    };
    Ok(PrioritizationResult {
        scored,
        selected: best.members.iter().map(|&i| ids[i].to_string()).collect(),
        piloted: sorted_ids(piloted),
        gated_out: sorted_ids(gated),
        aggregate_score: best.score,
        total_cost: best.cost,
        total_risk: best.risk,
        solver,
        constraints: constraints.clone(),
        maturity: profile.clone(),
        diagnostic,
    })
}
