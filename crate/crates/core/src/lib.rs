//! Delivery analytics over event logs: value-stream measurement, DORA
//! metrics, goal-question-metric registries with traceability, maturity-aware
//! automation prioritization, intervention evaluation, and a discrete-event
//! pipeline simulator that produces logs with known ground truth.
//!
//! The modules map onto one improvement cycle:
//!
//! - [`telemetry`]: event-log model, parsing, and the data-quality audit.
//! - [`valuestream`]: per-activity statistics, flow efficiency, waste inventory.
//! - [`dora`]: deployment frequency, lead time for changes, MTTR, CFR.
//! - [`gqm`]: goals, questions, metric specifications, traceability graph.
//! - [`prioritize`]: candidate scoring, maturity gating, budgeted selection.
//! - [`evaluate`]: ITS, difference-in-differences, median tests, bootstrap,
//!   multiplicity correction, MDE, and verdicts against targets.
//! - [`simulate`]: seeded delivery-pipeline simulator.

pub mod dora;
pub mod evaluate;
pub mod gqm;
pub mod prioritize;
pub mod simulate;
pub mod stats;
pub mod telemetry;
pub mod valuestream;

/// Hours per day; reports use days, computations use hours.
pub const HOURS_PER_DAY: f64 = 24.0;
