//! Run configuration: one JSON file, overridden by command-line flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use flowtrace_core::evaluate::{Covariance, Multiplicity, DEFAULT_ALPHA, DEFAULT_REPLICATIONS};
use flowtrace_core::telemetry::{parse_timestamp, LogFormat, DEFAULT_GATE_THRESHOLD};
use flowtrace_core::valuestream::WasteThresholds;

/// Baseline runs shorter than this draw a warning.
const MIN_BASELINE_DAYS: i64 = 56;

/// Analysis windows as ISO dates (`2024-03-01`) or RFC 3339 instants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowsFile {
    pub baseline_start: Option<String>,
    pub intervention: Option<String>,
    /// End of the post-intervention transition that analyses skip.
    pub stabilization_end: Option<String>,
    pub post_end: Option<String>,
}

/// The on-disk configuration. Every key is optional; relative paths are
/// resolved against the directory holding the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub log: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub format: Option<LogFormat>,
    pub gate_threshold: Option<f64>,
    pub gamma: Option<f64>,
    pub budget: Option<f64>,
    pub risk_cap: Option<f64>,
    pub maturity: Option<u8>,
    #[serde(default)]
    pub windows: WindowsFile,
    pub period_days: Option<f64>,
    pub replications: Option<usize>,
    pub alpha: Option<f64>,
    pub power: Option<f64>,
    pub multiplicity: Option<Multiplicity>,
    pub covariance: Option<Covariance>,
    pub linkage_hours: Option<f64>,
    pub comparison_platform: Option<String>,
    #[serde(default)]
    pub non_value_added_activities: BTreeSet<String>,
    pub waste_thresholds: Option<WasteThresholds>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.log,
            &mut cfg.registry,
            &mut cfg.candidates,
            &mut cfg.scenario,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Windows {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_start: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervention: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stabilization_end: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_end: Option<DateTime<Utc>>,
}

/// Accepts a calendar date (midnight UTC) or an RFC 3339 instant.
pub fn parse_instant(s: &str) -> Result<DateTime<Utc>> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc());
    }
    parse_timestamp(s).map_err(|e| anyhow::anyhow!("invalid date or timestamp {s:?}: {e}"))
}

impl Windows {
    fn resolve(file: &WindowsFile) -> Result<Self> {
        let get = |name: &str, v: &Option<String>| -> Result<Option<DateTime<Utc>>> {
            v.as_deref()
                .map(parse_instant)
                .transpose()
                .with_context(|| format!("window {name}"))
        };
        let w = Windows {
            baseline_start: get("baseline_start", &file.baseline_start)?,
            intervention: get("intervention", &file.intervention)?,
            stabilization_end: get("stabilization_end", &file.stabilization_end)?,
            post_end: get("post_end", &file.post_end)?,
        };
        let ordered: Vec<(&str, DateTime<Utc>)> = [
            ("baseline_start", w.baseline_start),
            ("intervention", w.intervention),
            ("stabilization_end", w.stabilization_end),
            ("post_end", w.post_end),
        ]
        .into_iter()
        .filter_map(|(n, v)| Some((n, v?)))
        .collect();
        for pair in ordered.windows(2) {
            let ((a, ta), (b, tb)) = (pair[0], pair[1]);
            // an empty stabilization period is allowed
            let ok = if a == "intervention" && b == "stabilization_end" { ta <= tb } else { ta < tb };
            if !ok {
                bail!("windows out of order: {a} ({ta}) must precede {b} ({tb})");
            }
        }
        Ok(w)
    }

    /// Advisory messages about window lengths.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let (Some(a), Some(b)) = (self.baseline_start, self.intervention) {
            let days = (b - a).num_days();
            if days < MIN_BASELINE_DAYS {
                out.push(format!("baseline window is {days} days; at least 8 weeks is recommended"));
            }
        }
        out
    }
}

/// Effective settings after merging the config file and flags.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    #[serde(skip)]
    pub log: Option<PathBuf>,
    #[serde(skip)]
    pub registry: Option<PathBuf>,
    #[serde(skip)]
    pub candidates: Option<PathBuf>,
    #[serde(skip)]
    pub scenario: Option<PathBuf>,
    #[serde(skip)]
    pub out: PathBuf,
    /// Seed given by flag or config, if any; `seed` falls back to 0.
    #[serde(rename = "seed", skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<LogFormat>,
    pub gate_threshold: f64,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk_cap: Option<f64>,
    pub maturity: u8,
    pub windows: Windows,
    pub period_days: f64,
    pub replications: usize,
    pub alpha: f64,
    pub power: f64,
    pub multiplicity: Multiplicity,
    pub covariance: Covariance,
    pub linkage_hours: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison_platform: Option<String>,
    pub non_value_added_activities: BTreeSet<String>,
    pub waste_thresholds: WasteThresholds,
}

/// Flag values; each one set replaces the matching config key.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub log: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub format: Option<LogFormat>,
    pub gate_threshold: Option<f64>,
    pub gamma: Option<f64>,
    pub budget: Option<f64>,
    pub maturity: Option<u8>,
    pub intervention: Option<String>,
}

impl Settings {
    pub fn resolve(cfg: RunConfig, flags: Overrides) -> Result<Self> {
        let mut windows = cfg.windows;
        if flags.intervention.is_some() {
            windows.intervention = flags.intervention;
        }
        let s = Settings {
            log: flags.log.or(cfg.log),
            registry: flags.registry.or(cfg.registry),
            candidates: flags.candidates.or(cfg.candidates),
            scenario: flags.scenario.or(cfg.scenario),
            out: flags.out.or(cfg.out).unwrap_or_else(|| PathBuf::from("out")),
            seed_override: flags.seed.or(cfg.seed),
            seed: flags.seed.or(cfg.seed).unwrap_or(0),
            format: flags.format.or(cfg.format),
            gate_threshold: flags.gate_threshold.or(cfg.gate_threshold).unwrap_or(DEFAULT_GATE_THRESHOLD),
            gamma: flags.gamma.or(cfg.gamma).unwrap_or(flowtrace_core::prioritize::DEFAULT_GAMMA),
            budget: flags.budget.or(cfg.budget),
            risk_cap: cfg.risk_cap,
            maturity: flags.maturity.or(cfg.maturity).unwrap_or(2),
            windows: Windows::resolve(&windows)?,
            period_days: cfg.period_days.unwrap_or(7.0),
            replications: cfg.replications.unwrap_or(DEFAULT_REPLICATIONS),
            alpha: cfg.alpha.unwrap_or(DEFAULT_ALPHA),
            power: cfg.power.unwrap_or(0.8),
            multiplicity: cfg.multiplicity.unwrap_or_default(),
            covariance: cfg.covariance.unwrap_or_default(),
            linkage_hours: cfg.linkage_hours.unwrap_or(flowtrace_core::dora::DEFAULT_LINKAGE_HOURS),
            comparison_platform: cfg.comparison_platform,
            non_value_added_activities: cfg.non_value_added_activities,
            waste_thresholds: cfg.waste_thresholds.unwrap_or_default(),
        };
        if !(0.0..=1.0).contains(&s.gate_threshold) {
            bail!("gate threshold must lie in [0, 1], got {}", s.gate_threshold);
        }
        if !(0.0..=1.0).contains(&s.gamma) {
            bail!("gamma must lie in [0, 1], got {}", s.gamma);
        }
        if !(1..=4).contains(&s.maturity) {
            bail!("maturity must be a level from 1 to 4, got {}", s.maturity);
        }
        if !(s.alpha > 0.0 && s.alpha < 1.0) || !(s.power > 0.0 && s.power < 1.0) {
            bail!("alpha and power must lie strictly between 0 and 1");
        }
        Ok(s)
    }

    /// Input format of `path`: `.csv` means CSV, anything else JSON Lines.
    pub fn log_format(&self, path: &Path) -> LogFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => LogFormat::Csv,
            _ => LogFormat::Jsonl,
        }
    }

    /// Format for logs this tool writes.
    pub fn output_format(&self) -> LogFormat {
        self.format.unwrap_or(LogFormat::Jsonl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cfg = RunConfig {
            seed: Some(3),
            gamma: Some(0.5),
            budget: Some(4.0),
            ..Default::default()
        };
        let flags = Overrides {
            seed: Some(9),
            ..Default::default()
        };
        let s = Settings::resolve(cfg, flags).unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.gamma, 0.5);
        assert_eq!(s.budget, Some(4.0));
        assert_eq!(s.maturity, 2);
    }

    #[test]
    fn windows_must_be_ordered() {
        let mut cfg = RunConfig::default();
        cfg.windows.baseline_start = Some("2024-03-01".into());
        cfg.windows.intervention = Some("2024-02-01".into());
        assert!(Settings::resolve(cfg.clone(), Overrides::default()).is_err());
        cfg.windows.intervention = Some("2024-04-01T12:00:00Z".into());
        let s = Settings::resolve(cfg, Overrides::default()).unwrap();
        assert_eq!(s.windows.warnings().len(), 1);
    }

    #[test]
    fn dates_and_instants() {
        assert_eq!(parse_instant("2024-01-02").unwrap(), parse_instant("2024-01-02T00:00:00Z").unwrap());
        assert!(parse_instant("yesterday").is_err());
    }
}
