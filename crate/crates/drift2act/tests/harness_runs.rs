mod common;

use std::process::Command;

use drift2act::belief::{serialize_model, DriftType};
use drift2act::controller::Action;
use drift2act::harness::export::{log_from_jsonl, log_to_csv, log_to_jsonl, risk_trace_from_csv};
use drift2act::harness::metrics::violations;
use drift2act::harness::sweep::{replica_seed, run_replicas};
use drift2act::harness::{run_stream, MetricsReport, Policy, RunConfig};

use common::{artifacts, check_budget_and_cooldowns, short_config};

fn with_policy(policy: Policy) -> RunConfig {
    RunConfig {
        policy,
        ..short_config()
    }
}

#[test]
fn same_seed_gives_identical_exports() {
    let cfg = short_config();
    let a = run_stream(&cfg, artifacts(), 11).unwrap();
    let b = run_stream(&cfg, artifacts(), 11).unwrap();
    assert_eq!(log_to_jsonl(&a.log), log_to_jsonl(&b.log));
    assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
    check_budget_and_cooldowns(&cfg, &a.log).unwrap();
    let c = run_stream(&cfg, artifacts(), 12).unwrap();
    assert_ne!(log_to_jsonl(&a.log), log_to_jsonl(&c.log));
}

#[test]
fn exported_trace_reproduces_report() {
    let cfg = short_config();
    let out = run_stream(&cfg, artifacts(), 3).unwrap();
    let trace = risk_trace_from_csv(&log_to_csv(&out.log)).unwrap();
    assert_eq!(violations(&trace, cfg.controller.tau), out.report.violations);
    let total: f64 = out.log.iter().map(|e| e.cost).sum();
    assert!((total - out.report.total_cost).abs() < 1e-9);
    let restored = log_from_jsonl(&log_to_jsonl(&out.log)).unwrap();
    assert_eq!(restored, out.log);
    let rescored = MetricsReport::from_log(&restored, &cfg.stream.onsets(), cfg.controller.tau);
    assert_eq!(rescored, out.report);
}

#[test]
fn cost_is_decision_plus_labels_plus_heavy() {
    let cfg = short_config();
    let out = run_stream(&cfg, artifacts(), 5).unwrap();
    for e in &out.log {
        let decision = match e.action {
            Action::QueryLabels | Action::Retrain | Action::Rollback => 0.0,
            a => a.cost(0),
        };
        let expected = decision + cfg.label_cost * e.labels as f64 + e.heavy.map_or(0.0, |h| h.cost(0));
        assert!((e.cost - expected).abs() < 1e-12, "t={} cost {} expected {expected}", e.t, e.cost);
    }
}

#[test]
fn alarm_only_never_touches_the_model() {
    let cfg = with_policy(Policy::AlarmOnly);
    let out = run_stream(&cfg, artifacts(), 4).unwrap();
    assert!(out.log.iter().all(|e| e.model_version == 0 && e.heavy.is_none() && e.labels == 0));
    assert!(out.log.iter().all(|e| e.action == Action::Noop && e.cost == 0.0));
    assert_eq!(out.model.version(), 0);
}

#[test]
fn scheduled_retrains_land_on_period_multiples() {
    let mut cfg = with_policy(Policy::RetrainSchedule);
    cfg.params.retrain_period = 300;
    let out = run_stream(&cfg, artifacts(), 6).unwrap();
    let times: Vec<u64> = out.log.iter().filter(|e| e.heavy.is_some()).map(|e| e.t).collect();
    assert_eq!(times, vec![300, 600]);
    assert!(out.log.iter().filter(|e| e.labels > 0).all(|e| e.t % 300 == 0));
    check_budget_and_cooldowns(&cfg, &out.log).unwrap();
}

#[test]
fn replica_results_do_not_depend_on_order() {
    let mut cfg = short_config();
    cfg.stream.length = 400;
    cfg.stream.onset = 150;
    let seeds: Vec<u64> = (0..3).map(|r| replica_seed(9, r)).collect();
    let forward = run_replicas(&cfg, artifacts(), &seeds, &[0, 1, 2]).unwrap();
    let shuffled = run_replicas(&cfg, artifacts(), &seeds, &[2, 0, 1]).unwrap();
    assert_eq!(forward, shuffled);
    assert!(run_replicas(&cfg, artifacts(), &seeds, &[0, 1]).is_err());
}

#[test]
fn monitor_noise_only_perturbs_evidence() {
    let cfg = short_config();
    let clean = run_stream(&cfg, artifacts(), 8).unwrap();
    let noisy_cfg = RunConfig {
        monitor_noise: 0.5,
        ..cfg.clone()
    };
    let noisy = run_stream(&noisy_cfg, artifacts(), 8).unwrap();
    let first = (cfg.monitor_window - 1) as usize;
    assert_ne!(clean.log[first].evidence, noisy.log[first].evidence);
    // Before any decision can differ the audits are identical.
    assert_eq!(clean.log[0].labels, noisy.log[0].labels);
    let explicit = RunConfig {
        monitor_noise: 0.0,
        ..cfg
    };
    assert_eq!(run_stream(&explicit, artifacts(), 8).unwrap().log, clean.log);
}

#[test]
fn drift_free_certified_run_is_quiet() {
    let mut cfg = short_config();
    cfg.stream.drift_type = DriftType::None;
    let out = run_stream(&cfg, artifacts(), 2).unwrap();
    assert_eq!(out.report.violations, 0);
    assert_eq!(out.report.heavy_actions, 0);
    check_budget_and_cooldowns(&cfg, &out.log).unwrap();
}

#[test]
fn every_policy_respects_budget_and_cooldowns() {
    for policy in Policy::ALL {
        let cfg = with_policy(policy);
        let out = run_stream(&cfg, artifacts(), 10).unwrap();
        check_budget_and_cooldowns(&cfg, &out.log).unwrap_or_else(|e| panic!("{policy}: {e}"));
        assert_eq!(out.log.len() as u64, cfg.stream.length);
    }
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_drift2act"));
    c.env("DRIFT2ACT_SEED", "4");
    c
}

#[test]
fn cli_runs_are_byte_identical_and_rescorable() {
    let dir = tempfile::tempdir().unwrap();
    let belief = dir.path().join("belief.txt");
    std::fs::write(&belief, serialize_model(&artifacts().emission, &artifacts().transition)).unwrap();
    let sets = ["--set", "stream.length=500", "--set", "stream.onset=200"];
    let mut logs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let log = dir.path().join(name);
        let status = cli()
            .args(["run", "--belief"])
            .arg(&belief)
            .arg("--log")
            .arg(&log)
            .arg("--report")
            .arg(dir.path().join("report.json"))
            .args(sets)
            .status()
            .unwrap();
        assert!(status.success());
        logs.push(std::fs::read(&log).unwrap());
    }
    assert_eq!(logs[0], logs[1]);

    let rescored = dir.path().join("rescored.json");
    let status = cli()
        .args(["report", "--log"])
        .arg(dir.path().join("a.jsonl"))
        .arg("--out")
        .arg(&rescored)
        .args(sets)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read_to_string(&rescored).unwrap(),
        std::fs::read_to_string(dir.path().join("report.json")).unwrap()
    );
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |c: &mut Command| c.output().unwrap().status.code();
    assert_eq!(code(cli().args(["report", "--log"]).arg(dir.path().join("missing.jsonl"))), Some(2));
    assert_eq!(code(cli().args(["report", "--log", "x", "--set", "no.such=1"])), Some(1));
    assert_eq!(code(cli().args(["report", "--log", "x", "--set", "stream.length=0"])), Some(1));
    assert_eq!(code(cli().arg("frobnicate")), Some(1));
    assert_eq!(code(cli().env("DRIFT2ACT_SEED", "seven").args(["report", "--log", "x"])), Some(1));
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json}\n").unwrap();
    assert_eq!(code(cli().args(["report", "--log"]).arg(&bad)), Some(1));
    assert_eq!(code(cli().arg("--help")), Some(0));
}
