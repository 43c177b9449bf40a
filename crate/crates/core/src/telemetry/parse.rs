use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{rfc3339, EventLog, EventRecord, EventType, TelemetryError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Jsonl,
    Csv,
}

/// A malformed input record that was skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub log: EventLog,
    pub rejected: Vec<RecordError>,
}

const CSV_HEADER: [&str; 7] = [
    "event_id",
    "work_item_id",
    "platform",
    "activity",
    "event_type",
    "timestamp",
    "attrs",
];

/// Parses and normalizes a telemetry export.
///
/// Malformed records are collected in [`ParseOutcome::rejected`]. The parse
/// fails only on duplicate ids or when no valid record remains.
pub fn parse_log<R: Read>(mut source: R, format: LogFormat) -> Result<ParseOutcome, TelemetryError> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| TelemetryError::Io(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|e| {
        let valid = &e.as_bytes()[..e.utf8_error().valid_up_to()];
        TelemetryError::UnparsableRecord {
            line: valid.iter().filter(|b| **b == b'\n').count() + 1,
            reason: "input is not valid UTF-8".into(),
        }
    })?;

    let (records, rejected) = match format {
        LogFormat::Jsonl => parse_jsonl(&text),
        LogFormat::Csv => parse_csv(&text)?,
    };
    if records.is_empty() {
        return Err(match rejected.first() {
            Some(e) => TelemetryError::UnparsableRecord {
                line: e.line,
                reason: e.reason.clone(),
            },
            None => TelemetryError::EmptyLog,
        });
    }
    let log = EventLog::from_records(records)?;
    Ok(ParseOutcome { log, rejected })
}

#[derive(Deserialize)]
struct RawRecord {
    event_id: String,
    work_item_id: String,
    platform: String,
    activity: String,
    event_type: EventType,
    timestamp: String,
    #[serde(default)]
    attrs: BTreeMap<String, String>,
}

fn finish_record(raw: RawRecord) -> Result<EventRecord, String> {
    let record = EventRecord {
        timestamp: rfc3339::parse(&raw.timestamp)?,
        event_id: raw.event_id,
        work_item_id: raw.work_item_id,
        platform: raw.platform,
        activity: raw.activity,
        event_type: raw.event_type,
        attrs: raw.attrs,
    };
    record.validate()?;
    Ok(record)
}

fn parse_jsonl(text: &str) -> (Vec<EventRecord>, Vec<RecordError>) {
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(finish_record);
        match parsed {
            Ok(r) => records.push(r),
            Err(reason) => rejected.push(RecordError {
                line: idx + 1,
                reason,
            }),
        }
    }
    (records, rejected)
}

fn parse_attrs(raw: &str) -> Result<BTreeMap<String, String>, String> {
    let mut attrs = BTreeMap::new();
    for pair in raw.split(';').filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("attr `{pair}` is not k=v"))?;
        attrs.insert(k.to_string(), v.to_string());
    }
    Ok(attrs)
}

fn parse_csv(text: &str) -> Result<(Vec<EventRecord>, Vec<RecordError>), TelemetryError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| TelemetryError::UnparsableRecord {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    if header.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(TelemetryError::UnparsableRecord {
            line: 1,
            reason: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for row in reader.records() {
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                rejected.push(RecordError {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line() as usize);
        let parsed = (|| {
            if row.len() != CSV_HEADER.len() {
                return Err(format!("expected 7 fields, found {}", row.len()));
            }
            finish_record(RawRecord {
                event_id: row[0].to_string(),
                work_item_id: row[1].to_string(),
                platform: row[2].to_string(),
                activity: row[3].to_string(),
                event_type: row[4].parse()?,
                timestamp: row[5].to_string(),
                attrs: parse_attrs(&row[6])?,
            })
        })();
        match parsed {
            Ok(r) => records.push(r),
            Err(reason) => rejected.push(RecordError { line, reason }),
        }
    }
    Ok((records, rejected))
}

/// Serializes a log in either supported format; `parse_log` inverts it.
pub fn write_log<W: Write>(log: &EventLog, format: LogFormat, mut out: W) -> Result<(), TelemetryError> {
    let io = |e: std::io::Error| TelemetryError::Io(e.to_string());
    match format {
        LogFormat::Jsonl => {
            for r in log.records() {
                let line = serde_json::to_string(r).map_err(|e| TelemetryError::Io(e.to_string()))?;
                writeln!(out, "{line}").map_err(io)?;
            }
            Ok(())
        }
        LogFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let csv_err = |e: csv::Error| TelemetryError::Io(e.to_string());
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for r in log.records() {
                let mut attrs = Vec::with_capacity(r.attrs.len());
                for (k, v) in &r.attrs {
                    if [k, v].iter().any(|s| s.contains(';') || s.contains('=')) {
                        return Err(TelemetryError::InvalidRecord {
                            event_id: r.event_id.clone(),
                            reason: format!("attr `{k}={v}` cannot be encoded in CSV"),
                        });
                    }
                    attrs.push(format!("{k}={v}"));
                }
                w.write_record([
                    r.event_id.as_str(),
                    r.work_item_id.as_str(),
                    r.platform.as_str(),
                    r.activity.as_str(),
                    r.event_type.as_str(),
                    &rfc3339::format(&r.timestamp),
                    &attrs.join(";"),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(io)
        }
    }
}
