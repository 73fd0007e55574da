//! Run metrics computed from the oracle risk trace of an audit log.
//!
//! Traces are indexed by position; callers align position `i` with step
//! `i + 1`. `None` trace entries are steps without a deployed prediction
//! (full abstention) or with an empty window; they never count as violations
//! or as safe steps.

use serde::{Deserialize, Serialize};

use super::AuditLogEntry;
use crate::controller::Action;

/// `min{t >= t0 : alarm_t} - t0`.
#[must_use]
pub fn detection_delay(alarms: &[bool], t0: usize) -> Option<u64> {
    alarms.iter().skip(t0).position(|&a| a).map(|p| p as u64)
}

/// `min{t >= t0 : R_t <= tau} - t0`, the literal definition.
#[must_use]
pub fn recovery_time(trace: &[Option<f64>], t0: usize, tau: f64) -> Option<u64> {
    trace
        .iter()
        .skip(t0)
        .position(|r| r.is_some_and(|r| r <= tau))
        .map(|p| p as u64)
}

/// Recovery measured from the first exceedance at or after `t0`.
///
/// Zero when the trace never exceeds `tau` in `[t0, end)`; otherwise the
/// first later step back at or below `tau`, minus `t0`. Stops at `end`.
#[must_use]
pub fn recovery_after_exceedance(trace: &[Option<f64>], t0: usize, end: usize, tau: f64) -> Option<u64> {
    let end = end.min(trace.len());
    if t0 >= end {
        return Some(0);
    }
    let segment = &trace[t0..end];
    let Some(exceed) = segment.iter().position(|r| r.is_some_and(|r| r > tau)) else {
        return Some(0);
    };
    segment[exceed..]
        .iter()
        .position(|r| r.is_some_and(|r| r <= tau))
        .map(|p| (exceed + p) as u64)
}

/// Steps with `R_t > tau`; the boundary is not a violation.
#[must_use]
pub fn violations(trace: &[Option<f64>], tau: f64) -> u64 {
    trace.iter().filter(|r| r.is_some_and(|r| r > tau)).count() as u64
}

/// Minimum accuracy over groups with at least one example, from
/// `(correct, total)` counts.
#[must_use]
pub fn worst_group_accuracy(groups: &[(u64, u64)]) -> Option<f64> {
    groups
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|&(c, n)| c as f64 / n as f64)
        .fold(None, |best: Option<f64>, a| Some(best.map_or(a, |b| b.min(a))))
}

/// Share of safe steps (`R_t <= tau`) on which the policy intervened.
#[must_use]
pub fn fir(intervened: &[bool], trace: &[Option<f64>], tau: f64) -> Option<f64> {
    let mut safe = 0u64;
    let mut hits = 0u64;
    for (i, r) in intervened.iter().zip(trace) {
        if r.is_some_and(|r| r <= tau) {
            safe += 1;
            hits += u64::from(*i);
        }
    }
    (safe > 0).then(|| hits as f64 / safe as f64)
}

/// Mean of per-event values, undefined if any event is.
#[must_use]
pub fn event_mean(values: &[Option<u64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let sum: Option<u64> = values.iter().copied().sum();
    sum.map(|s| s as f64 / values.len() as f64)
}

/// `[onset_i, onset_{i+1})` segments over positions, the last ending at `len`.
#[must_use]
pub fn event_segments(onsets: &[u64], len: usize) -> Vec<(usize, usize)> {
    let starts: Vec<usize> = onsets
        .iter()
        .map(|&t| (t.max(1) - 1) as usize)
        .filter(|&p| p < len)
        .collect();
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, starts.get(i + 1).copied().unwrap_or(len)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total_cost: f64,
    pub violations: u64,
    /// One entry per drift event; `None` when no alarm fired in the event.
    pub detection_delay: Vec<Option<u64>>,
    /// One entry per drift event on the deployed model's risk, measured
    /// from the first exceedance.
    pub recovery_time: Vec<Option<u64>>,
    pub mean_detection_delay: Option<f64>,
    pub mean_recovery_time: Option<f64>,
    /// Minimum per-step worst-group accuracy from the first onset on.
    pub min_worst_group_accuracy: Option<f64>,
    pub fir: Option<f64>,
    /// FIR restricted to executed retrain and rollback.
    pub heavy_fir: Option<f64>,
    pub labels_used: u64,
    pub heavy_actions: u64,
    pub fallback_steps: u64,
    pub risk_trace: Vec<Option<f64>>,
}

impl MetricsReport {
    /// Metrics of `log` for drift events starting at `onsets`.
    #[must_use]
    pub fn from_log(log: &[AuditLogEntry], onsets: &[u64], tau: f64) -> Self {
        let trace: Vec<Option<f64>> = log.iter().map(|e| e.risk_oracle).collect();
        let model_trace: Vec<Option<f64>> = log.iter().map(|e| e.risk_model).collect();
        let alarms: Vec<bool> = log.iter().map(|e| e.alarm).collect();
        let intervened: Vec<bool> = log
            .iter()
            .map(|e| e.action != Action::Noop || e.heavy.is_some())
            .collect();
        let heavy: Vec<bool> = log.iter().map(|e| e.heavy.is_some()).collect();
        let segments = event_segments(onsets, log.len());
        let detection: Vec<Option<u64>> = segments
            .iter()
            .map(|&(s, e)| detection_delay(&alarms[..e], s))
            .collect();
        let recovery: Vec<Option<u64>> = segments
            .iter()
            .map(|&(s, e)| recovery_after_exceedance(&model_trace, s, e, tau))
            .collect();
        let first = segments.first().map_or(log.len(), |&(s, _)| s);
        let min_wga = log[first..]
            .iter()
            .filter_map(|e| e.worst_group)
            .fold(None, |best: Option<f64>, a| Some(best.map_or(a, |b| b.min(a))));
        Self {
            total_cost: log.iter().map(|e| e.cost).sum(),
            violations: violations(&trace, tau),
            mean_detection_delay: event_mean(&detection),
            mean_recovery_time: event_mean(&recovery),
            detection_delay: detection,
            recovery_time: recovery,
            min_worst_group_accuracy: min_wga,
            fir: fir(&intervened, &trace, tau),
            heavy_fir: fir(&heavy, &trace, tau),
            labels_used: log.iter().map(|e| e.labels).sum(),
            heavy_actions: heavy.iter().filter(|&&h| h).count() as u64,
            fallback_steps: log.iter().filter(|e| e.fallback).count() as u64,
            risk_trace: trace,
        }
    }

    /// Recovery per event with undefined values censored at the event length.
    #[must_use]
    pub fn censored_recovery(&self, onsets: &[u64]) -> Vec<u64> {
        censor(&self.recovery_time, &event_segments(onsets, self.risk_trace.len()))
    }

    #[must_use]
    pub fn censored_detection(&self, onsets: &[u64]) -> Vec<u64> {
        censor(&self.detection_delay, &event_segments(onsets, self.risk_trace.len()))
    }
}

fn censor(values: &[Option<u64>], segments: &[(usize, usize)]) -> Vec<u64> {
    values
        .iter()
        .zip(segments)
        .map(|(v, &(s, e))| v.unwrap_or((e - s) as u64))
        .collect()
}
