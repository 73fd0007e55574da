//! Persistence of logs, reports, sweep tables and Pareto points.
//!
//! Logs are JSON lines, one flat record per step in [`AuditLogEntry`] field
//! order. Tables are CSV with fixed headers; undefined values are written as
//! `NA`.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use super::config::Policy;
use super::metrics::MetricsReport;
use super::sweep::SweepRow;
use super::AuditLogEntry;
use crate::error::{Error, Result};

pub const LOG_CSV_HEADER: &str = "t,action,cost,k,upper,safe,risk_oracle";
pub const METRICS_CSV_HEADER: &str = "policy,seed,total_cost,violations,detection_delay,recovery_time,\
min_worst_group_accuracy,fir,heavy_fir,labels_used,heavy_actions,fallback_steps";
pub const SWEEP_CSV_HEADER: &str = "delay,budget,label_cost,monitor_noise,pattern,replicas,cost_mean,cost_sd,\
violations_mean,violations_sd,recovery_mean,recovery_sd,detection_mean,detection_sd,fir_mean,fir_sd";
pub const PARETO_CSV_HEADER: &str = "policy,seed,total_cost,violations";

/// Sentinel for undefined values.
pub const NA: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    JsonLines,
    Csv,
}

impl LogFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(LogFormat::JsonLines),
            "csv" => Ok(LogFormat::Csv),
            _ => Err(Error::invalid("format", format!("unknown log format {s:?}, expected jsonl or csv"))),
        }
    }
}

fn opt<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| NA.to_owned(), |v| v.to_string())
}

#[must_use]
pub fn log_to_jsonl(log: &[AuditLogEntry]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("log entries hold finite numbers") + "\n")
        .collect()
}

pub fn log_from_jsonl(text: &str) -> Result<Vec<AuditLogEntry>> {
    let mut out: Vec<AuditLogEntry> = Vec::new();
    for (no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let entry: AuditLogEntry =
            serde_json::from_str(line).map_err(|e| Error::parse("audit log", format!("line {}: {e}", no + 1)))?;
        if out.last().is_some_and(|prev| prev.t >= entry.t) {
            return Err(Error::parse("audit log", format!("line {}: steps must strictly increase", no + 1)));
        }
        out.push(entry);
    }
    Ok(out)
}

#[must_use]
pub fn log_to_csv(log: &[AuditLogEntry]) -> String {
    let mut out = format!("{LOG_CSV_HEADER}\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.t,
            e.action.code(),
            e.cost,
            e.k,
            opt(e.upper),
            opt(e.safe.map(u8::from)),
            opt(e.risk_oracle)
        ));
    }
    out
}

/// Oracle risk column of a CSV log export.
pub fn risk_trace_from_csv(text: &str) -> Result<Vec<Option<f64>>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_CSV_HEADER) {
        return Err(Error::parse("log csv", "unexpected header"));
    }
    lines
        .map(|l| {
            let field = l.rsplit(',').next().unwrap_or(NA);
            if field == NA {
                Ok(None)
            } else {
                field
                    .parse()
                    .map(Some)
                    .map_err(|e| Error::parse("log csv", format!("{field:?}: {e}")))
            }
        })
        .collect()
}

#[must_use]
pub fn metrics_row(policy: Policy, seed: u64, r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        policy.name(),
        seed,
        r.total_cost,
        r.violations,
        opt(r.mean_detection_delay),
        opt(r.mean_recovery_time),
        opt(r.min_worst_group_accuracy),
        opt(r.fir),
        opt(r.heavy_fir),
        r.labels_used,
        r.heavy_actions,
        r.fallback_steps
    )
}

#[must_use]
pub fn metrics_to_csv(rows: &[(Policy, u64, &MetricsReport)]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for (p, seed, r) in rows {
        out.push_str(&metrics_row(*p, *seed, r));
        out.push('\n');
    }
    out
}

#[must_use]
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.delay,
            r.budget,
            r.label_cost,
            r.monitor_noise,
            r.pattern.name(),
            r.replicas,
            r.cost.0,
            r.cost.1,
            r.violations.0,
            r.violations.1,
            r.recovery.0,
            r.recovery.1,
            r.detection.0,
            r.detection.1,
            opt(r.fir.map(|f| f.0)),
            opt(r.fir.map(|f| f.1))
        ));
    }
    out
}

/// `(C_tot, V)` per policy run, the axes of a cost/safety frontier.
#[must_use]
pub fn pareto_to_csv(points: &[(Policy, u64, f64, u64)]) -> String {
    let mut out = format!("{PARETO_CSV_HEADER}\n");
    for (p, seed, cost, v) in points {
        out.push_str(&format!("{},{seed},{cost},{v}\n", p.name()));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `log` to `path` in `format`.
pub fn export_log(log: &[AuditLogEntry], path: &Path, format: LogFormat) -> Result<()> {
    let text = match format {
        LogFormat::JsonLines => log_to_jsonl(log),
        LogFormat::Csv => log_to_csv(log),
    };
    write_text(path, &text)
}

pub fn import_log(path: &Path) -> Result<Vec<AuditLogEntry>> {
    log_from_jsonl(&read_text(path)?)
}

pub fn export_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::parse("report", e.to_string()))?;
    write_text(path, &(text + "\n"))
}
