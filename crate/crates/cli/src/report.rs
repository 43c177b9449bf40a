//! Summary report composed from the artifacts earlier subcommands left in
//! the output directory. Nothing here re-runs an analysis.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Result};
use serde::Serialize;
use serde_json::Value;

use flowtrace_core::evaluate::{ItsResult, MetricSeries};
use flowtrace_core::simulate::GroundTruth;
use flowtrace_core::valuestream::VsmReport;

use crate::commands::{
    activities_csv, read_json, write_json, write_text, EvaluationArtifact, AUDIT_JSON, DORA_JSON, EVALUATION_JSON,
    GQM_JSON, GROUND_TRUTH_JSON, PRIORITIZATION_JSON, VSM_JSON,
};
use crate::config::Settings;
use crate::Failure;

pub const REPORT_JSON: &str = "report.json";
pub const PLOTS_DIR: &str = "plots";

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    /// Artifacts found and composed, by file name.
    artifacts: Vec<&'static str>,
    parameters: &'a Settings,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    audit: Value,
    vsm: Value,
    dora: Value,
    gqm: Value,
    prioritization: Value,
    evaluation: Value,
    provenance: Provenance<'a>,
}

fn artifact(dir: &Path, name: &'static str, found: &mut Vec<&'static str>) -> Result<Value> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(Value::Null);
    }
    found.push(name);
    read_json(&path)
}

/// Observed series with the fitted segmented line and the pre-trend
/// counterfactual.
fn its_plot_csv(series: &MetricSeries, fit: &ItsResult) -> String {
    let [b0, b1, b2, b3] = fit.beta;
    let t0 = series.points[series.intervention_index].0;
    let mut out = String::from("t,segment,observed,fitted,counterfactual\n");
    for (i, &(t, y)) in series.points.iter().enumerate() {
        let post = i >= series.intervention_index;
        let counterfactual = b0 + b1 * t;
        let fitted = if post { counterfactual + b2 + b3 * (t - t0) } else { counterfactual };
        out.push_str(&format!(
            "{t},{},{y},{fitted},{counterfactual}\n",
            if post { "post" } else { "pre" }
        ));
    }
    out
}

pub fn report(s: &Settings) -> Result<(), Failure> {
    let dir = s.out.as_path();
    let mut found = Vec::new();
    let audit = artifact(dir, AUDIT_JSON, &mut found)?;
    let vsm = artifact(dir, VSM_JSON, &mut found)?;
    let dora = artifact(dir, DORA_JSON, &mut found)?;
    let gqm = artifact(dir, GQM_JSON, &mut found)?;
    let prioritization = artifact(dir, PRIORITIZATION_JSON, &mut found)?;
    let evaluation = artifact(dir, EVALUATION_JSON, &mut found)?;
    if found.is_empty() {
        return Err(anyhow!("{}: no analysis artifacts to report on", dir.display()).into());
    }

    let plots = dir.join(PLOTS_DIR);
    if !vsm.is_null() {
        let v: VsmReport = serde_json::from_value(vsm.clone()).map_err(|e| anyhow!("{VSM_JSON}: {e}"))?;
        write_text(&plots, "vsm_activities.csv", &activities_csv(&v.activities))?;
        write_text(&plots, "vsm_platforms.csv", &v.platform_csv())?;
    }
    if !evaluation.is_null() {
        let e: EvaluationArtifact =
            serde_json::from_value(evaluation.clone()).map_err(|e| anyhow!("{EVALUATION_JSON}: {e}"))?;
        for (id, fit) in &e.report.its {
            if let Some(series) = e.report.series.get(id) {
                write_text(&plots, &format!("its_{id}.csv"), &its_plot_csv(series, fit))?;
            }
        }
    }

    let truth_path = dir.join(GROUND_TRUTH_JSON);
    let seed = match s.seed_override {
        Some(seed) => seed,
        None if truth_path.exists() => read_json::<GroundTruth>(&truth_path)?.seed,
        None => s.seed,
    };
    let report = Report {
        audit,
        vsm,
        dora,
        gqm,
        prioritization,
        evaluation,
        provenance: Provenance {
            seed,
            versions: BTreeMap::from([
                ("flowtrace", env!("CARGO_PKG_VERSION")),
                ("report_schema", "1"),
            ]),
            artifacts: found,
            parameters: s,
        },
    };
    write_json(dir, REPORT_JSON, &report)?;
    Ok(())
}
