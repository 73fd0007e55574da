//! Grid sweeps with per-cell mean and standard deviation over replicas.
//!
//! Replica `r` of every cell uses the same stream seed, so cells differ only
//! in the swept setting. Results are stored by replica index before
//! aggregation, so execution order cannot change them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{run_stream, Artifacts};
use crate::error::{Error, Result};
use crate::simenv::{derive_rng, DriftPattern, RngPurpose};

/// Swept values; an empty list keeps the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub delays: Vec<u64>,
    pub budgets: Vec<u64>,
    pub label_costs: Vec<f64>,
    pub monitor_noise: Vec<f64>,
    pub patterns: Vec<DriftPattern>,
}

fn or_base<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    /// Cell configurations in row-major order over the grid axes.
    #[must_use]
    pub fn cells(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for delay in or_base(&self.delays, base.stream.delay) {
            for budget in or_base(&self.budgets, base.controller.label_budget) {
                for label_cost in or_base(&self.label_costs, base.label_cost) {
                    for noise in or_base(&self.monitor_noise, base.monitor_noise) {
                        for pattern in or_base(&self.patterns, base.stream.pattern) {
                            let mut cfg = base.clone();
                            cfg.stream.delay = delay;
                            cfg.controller.label_budget = budget;
                            cfg.label_cost = label_cost;
                            cfg.monitor_noise = noise;
                            cfg.stream.pattern = pattern;
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Per-replica outcome; event metrics are censored means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaResult {
    pub seed: u64,
    pub cost: f64,
    pub violations: f64,
    pub recovery: f64,
    pub detection: f64,
    pub fir: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delay: u64,
    pub budget: u64,
    pub label_cost: f64,
    pub monitor_noise: f64,
    pub pattern: DriftPattern,
    pub replicas: usize,
    /// `(mean, standard deviation)` pairs.
    pub cost: (f64, f64),
    pub violations: (f64, f64),
    pub recovery: (f64, f64),
    pub detection: (f64, f64),
    /// Over replicas with at least one safe step.
    pub fir: Option<(f64, f64)>,
}

/// Stream seed of replica `r`.
#[must_use]
pub fn replica_seed(seed: u64, r: usize) -> u64 {
    derive_rng(seed, RngPurpose::Replica, r as u64).random()
}

/// Sample mean and standard deviation (zero for one value).
#[must_use]
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn censored_mean(values: &[u64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<u64>() as f64 / values.len() as f64
    }
}

/// Runs the replicas of one cell in `order`, storing results by index.
pub fn run_replicas(
    cfg: &RunConfig,
    artifacts: &Artifacts,
    seeds: &[u64],
    order: &[usize],
) -> Result<Vec<ReplicaResult>> {
    let mut slots: Vec<Option<ReplicaResult>> = vec![None; seeds.len()];
    for &r in order {
        let seed = *seeds
            .get(r)
            .ok_or_else(|| Error::invalid("order", format!("replica {r} out of range")))?;
        let out = run_stream(cfg, artifacts, seed)?;
        let onsets = cfg.stream.onsets();
        slots[r] = Some(ReplicaResult {
            seed,
            cost: out.report.total_cost,
            violations: out.report.violations as f64,
            recovery: censored_mean(&out.report.censored_recovery(&onsets)),
            detection: censored_mean(&out.report.censored_detection(&onsets)),
            fir: out.report.fir,
        });
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(r, s)| s.ok_or_else(|| Error::invalid("order", format!("replica {r} never ran"))))
        .collect()
}

/// Aggregates replica results of one cell.
#[must_use]
pub fn summarize(cfg: &RunConfig, results: &[ReplicaResult]) -> SweepRow {
    let col = |f: fn(&ReplicaResult) -> f64| mean_sd(&results.iter().map(f).collect::<Vec<_>>());
    let firs: Vec<f64> = results.iter().filter_map(|r| r.fir).collect();
    SweepRow {
        delay: cfg.stream.delay,
        budget: cfg.controller.label_budget,
        label_cost: cfg.label_cost,
        monitor_noise: cfg.monitor_noise,
        pattern: cfg.stream.pattern,
        replicas: results.len(),
        cost: col(|r| r.cost),
        violations: col(|r| r.violations),
        recovery: col(|r| r.recovery),
        detection: col(|r| r.detection),
        fir: (!firs.is_empty()).then(|| mean_sd(&firs)),
    }
}

/// One row per grid cell.
pub fn run_sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    artifacts: &Artifacts,
    replicas: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if replicas == 0 {
        return Err(Error::invalid("replicas", "need at least one replica"));
    }
    let seeds: Vec<u64> = (0..replicas).map(|r| replica_seed(seed, r)).collect();
    let order: Vec<usize> = (0..replicas).collect();
    grid.cells(base)
        .into_iter()
        .map(|cfg| {
            cfg.validate()?;
            let results = run_replicas(&cfg, artifacts, &seeds, &order)?;
            Ok(summarize(&cfg, &results))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expands_row_major() {
        let base = RunConfig::default();
        let grid = SweepGrid {
            delays: vec![0, 10],
            budgets: vec![100, 200, 400],
            ..SweepGrid::default()
        };
        let cells = grid.cells(&base);
        assert_eq!(cells.len(), 6);
        assert_eq!((cells[1].stream.delay, cells[1].controller.label_budget), (0, 200));
        assert_eq!((cells[3].stream.delay, cells[3].controller.label_budget), (10, 100));
        assert!(cells.iter().all(|c| c.label_cost == base.label_cost));
    }

    #[test]
    fn mean_sd_values() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.2909944487358056).abs() < 1e-15);
    }
}
