#![allow(dead_code)]

use std::sync::OnceLock;

use drift2act::controller::Action;
use drift2act::harness::{episode_config, AuditLogEntry, Artifacts, RunConfig};

/// Short stream with the desk controller; about a second per run.
pub fn short_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.stream.length = 800;
    cfg.stream.onset = 250;
    cfg
}

/// Belief model fitted once per test binary on the default episode set.
pub fn artifacts() -> &'static Artifacts {
    static CELL: OnceLock<Artifacts> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::default();
        Artifacts::fit(&cfg, &episode_config(&cfg), 7).expect("artifact fit").0
    })
}

/// Budget never overspent, heavy actions spaced by their cooldowns.
pub fn check_budget_and_cooldowns(cfg: &RunConfig, log: &[AuditLogEntry]) -> Result<(), String> {
    let spent: u64 = log.iter().map(|e| e.labels).sum();
    if spent > cfg.controller.label_budget {
        return Err(format!("{spent} labels exceed budget {}", cfg.controller.label_budget));
    }
    for (action, cooldown) in [
        (Action::Retrain, cfg.controller.cooldown_retrain),
        (Action::Rollback, cfg.controller.cooldown_rollback),
    ] {
        let times: Vec<u64> = log.iter().filter(|e| e.heavy == Some(action)).map(|e| e.t).collect();
        if let Some(w) = times.windows(2).find(|w| w[1] - w[0] < cooldown) {
            return Err(format!("{action} at {} and {} within cooldown {cooldown}", w[0], w[1]));
        }
    }
    Ok(())
}
