use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drift2act::belief::{
    deserialize_model, emission_potential, serialize_model, update, update_with_potential, Belief, EmissionModel,
    TransitionMatrix, TYPE_COUNT,
};
use drift2act::controller::{Action, ControllerConfig, ControllerState, GainTable, feasible_actions, query_size};
use drift2act::harness::export::{log_from_jsonl, log_to_csv, log_to_jsonl, risk_trace_from_csv};
use drift2act::harness::metrics::{recovery_after_exceedance, recovery_time, violations};
use drift2act::harness::{AuditLogEntry, AuditPool, RunConfig};
use drift2act::monitors::MONITOR_COUNT;
use drift2act::riskcert::{
    compute_certificate, hoeffding_radius, selective_certificate, serfling_radius, with_unauditable, AuditSample,
    CertConfig, SamplingMode,
};

fn prob_vector() -> impl Strategy<Value = [f64; TYPE_COUNT]> {
    prop::array::uniform4(0.001f64..1.0).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.map(|p| p / s)
    })
}

fn emission() -> impl Strategy<Value = EmissionModel> {
    (
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, MONITOR_COUNT), TYPE_COUNT),
        prop::array::uniform4(-2.0f64..2.0),
        0.2f64..3.0,
    )
        .prop_map(|(weights, biases, beta)| EmissionModel {
            weights,
            biases,
            beta,
            gaussian: None,
        })
}

proptest! {
    #[test]
    fn belief_update_stays_on_the_simplex(
        prior in prob_vector(),
        stay in 0.5f64..0.999,
        model in emission(),
        z in prop::collection::vec(-8.0f64..8.0, MONITOR_COUNT),
    ) {
        let prev = Belief::new(prior).unwrap();
        let out = update(&prev, &z, &TransitionMatrix::sticky(stay).unwrap(), &model).unwrap();
        let p = out.belief.probs();
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn belief_ignores_potential_scale(
        prior in prob_vector(),
        potential in prop::array::uniform4(1e-6f64..10.0),
        scale in 1e-6f64..1e6,
    ) {
        let prev = Belief::new(prior).unwrap();
        let tm = TransitionMatrix::sticky(0.95).unwrap();
        let a = update_with_potential(&prev, &potential, &tm).unwrap().belief.probs();
        let b = update_with_potential(&prev, &potential.map(|p| p * scale), &tm).unwrap().belief.probs();
        for d in 0..TYPE_COUNT {
            prop_assert!((a[d] - b[d]).abs() <= 1e-12);
        }
    }

    #[test]
    fn emission_potential_is_finite_and_nonnegative(
        model in emission(),
        z in prop::collection::vec(-50.0f64..50.0, MONITOR_COUNT),
    ) {
        let psi = emission_potential(&z, &model).unwrap();
        prop_assert!(psi.iter().all(|p| p.is_finite() && *p >= 0.0));
        prop_assert!(psi.iter().any(|&p| p > 0.0));
    }

    #[test]
    fn belief_model_text_round_trips(model in emission(), stay in 0.5f64..0.999) {
        let tm = TransitionMatrix::sticky(stay).unwrap();
        let (m, t) = deserialize_model(&serialize_model(&model, &tm)).unwrap();
        prop_assert_eq!(m, model);
        prop_assert_eq!(t, tm);
    }

    #[test]
    fn certificate_bounds(
        losses in prop::collection::vec(0.0f64..=1.0, 0..300),
        t in 1u64..100_000,
        tau in 0.01f64..0.99,
    ) {
        let window = losses.len().max(1) as u64;
        let samples: Vec<AuditSample> = losses.iter().enumerate().map(|(i, &l)| AuditSample::new(i as u64, l, true)).collect();
        let with = compute_certificate(&samples, t, &CertConfig::new(0.05, tau, window, SamplingMode::WithReplacement, 0.5).unwrap()).unwrap();
        let without = compute_certificate(&samples, t, &CertConfig::new(0.05, tau, window, SamplingMode::WithoutReplacement, 0.5).unwrap()).unwrap();
        for c in [&with, &without] {
            prop_assert!((0.0..=1.0).contains(&c.upper));
            prop_assert!(c.upper >= c.r_hat.min(1.0));
            prop_assert_eq!(c.safe, c.upper <= tau);
        }
        prop_assert!(without.upper <= with.upper);
        let charged = with_unauditable(&with, window, 7, tau);
        prop_assert!(charged.upper >= with.upper.min(charged.upper));
        prop_assert!((0.0..=1.0).contains(&charged.upper));
        prop_assert_eq!(charged.safe, charged.upper <= tau);
    }

    #[test]
    fn selective_certificate_bounds(
        samples in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 0..200),
        t in 1u64..10_000,
    ) {
        let samples: Vec<AuditSample> = samples.iter().enumerate().map(|(i, &(l, a))| AuditSample::new(i as u64, l, a)).collect();
        let cfg = CertConfig::new(0.05, 0.2, 1024, SamplingMode::WithReplacement, 0.5).unwrap();
        let sel = selective_certificate(&samples, t, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&sel.upper));
        prop_assert!(sel.upper >= sel.mass_upper.min(1.0) - 1e-15);
    }

    #[test]
    fn finite_population_radius_never_exceeds_plain(n in 1u64..5000, extra in 0u64..5000, delta in 0.001f64..0.5) {
        let window = n + extra;
        let fp = serfling_radius(n, window, delta).unwrap();
        let plain = hoeffding_radius(n, delta).unwrap();
        if n == 1 { prop_assert_eq!(fp, plain); } else { prop_assert!(fp < plain); }
    }

    #[test]
    fn audit_pool_stays_inside_window_and_budget(
        window_len in 8u64..80,
        budget in 0u64..120,
        draws in prop::collection::vec(0u64..10, 1..150),
        seed in any::<u64>(),
    ) {
        let horizon = draws.len() as u64;
        let mut pool = AuditPool::new(window_len, horizon);
        let mut labeled = vec![false; horizon as usize + 1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut remaining = budget;
        for (i, &k) in draws.iter().enumerate() {
            let hi = i as u64 + 1;
            let mut spent = pool.advance(hi, &mut labeled, remaining, &mut rng);
            spent += pool.draw(k, &mut labeled, remaining - spent, &mut rng);
            prop_assert!(spent <= remaining);
            remaining -= spent;
            let (lo, whi) = pool.window().unwrap();
            prop_assert_eq!(whi, hi);
            prop_assert!(whi - lo + 1 <= window_len);
            let mut members = pool.members().to_vec();
            members.sort_unstable();
            members.dedup();
            prop_assert_eq!(members.len(), pool.members().len());
            prop_assert!(members.iter().all(|&m| (lo..=whi).contains(&m) && labeled[m as usize]));
            prop_assert!(members.len() as u64 <= pool.population());
            prop_assert_eq!(pool.population() + pool.excluded(), whi - lo + 1);
        }
        prop_assert_eq!(labeled.iter().filter(|&&l| l).count() as u64, budget - remaining);
    }

    #[test]
    fn query_size_never_exceeds_budget(upper in 0.0f64..=1.0, z in -5.0f64..5.0, remaining in 0u64..100) {
        let cfg = ControllerConfig::long_stream_defaults();
        let mut cert = drift2act::riskcert::Certificate::vacuous(1);
        cert.upper = upper;
        cert.safe = upper <= cfg.tau;
        let k = query_size(&cert, z, &cfg, remaining);
        prop_assert!(k <= remaining);
        prop_assert!([cfg.k_max, cfg.k_high, cfg.k_low, remaining].contains(&k));
    }

    #[test]
    fn feasibility_follows_cooldowns(last_rt in prop::option::of(0u64..2000), last_rb in prop::option::of(0u64..2000), t in 0u64..4000, budget in 0u64..5) {
        let cfg = ControllerConfig::long_stream_defaults();
        let mut s = ControllerState::new(budget);
        s.last_retrain = last_rt;
        s.last_rollback = last_rb;
        let f = feasible_actions(&s, t, &cfg);
        let open = |last: Option<u64>, cd: u64| last.is_none_or(|l| t >= l && t - l >= cd);
        prop_assert_eq!(f.contains(Action::Retrain), open(last_rt, cfg.cooldown_retrain));
        prop_assert_eq!(f.contains(Action::Rollback), open(last_rb, cfg.cooldown_rollback));
        prop_assert_eq!(f.contains(Action::QueryLabels), budget > 0);
        for a in [Action::Noop, Action::Recalibrate, Action::Tta, Action::Abstain] {
            prop_assert!(f.contains(a));
        }
    }

    #[test]
    fn gain_table_text_round_trips(scale in 0.0f64..1.0) {
        let g = GainTable::default().scaled(scale);
        prop_assert_eq!(GainTable::from_text(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn config_text_round_trips(
        length in 300u64..9000,
        delay in 0u64..100,
        budget in 0u64..5000,
        tau in 0.01f64..0.99,
        noise in 0.0f64..2.0,
        policy in 0usize..6,
    ) {
        let mut cfg = RunConfig::default();
        cfg.stream.length = length;
        cfg.stream.delay = delay;
        cfg.controller.label_budget = budget;
        cfg.controller.tau = tau;
        cfg.monitor_noise = noise;
        cfg.policy = drift2act::harness::Policy::ALL[policy];
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn log_exports_round_trip(entries in prop::collection::vec(entry(), 1..40)) {
        let log: Vec<AuditLogEntry> = entries
            .into_iter()
            .enumerate()
            .map(|(i, mut e)| { e.t = i as u64 + 1; e })
            .collect();
        prop_assert_eq!(log_from_jsonl(&log_to_jsonl(&log)).unwrap(), log.clone());
        let trace = risk_trace_from_csv(&log_to_csv(&log)).unwrap();
        let expected: Vec<Option<f64>> = log.iter().map(|e| e.risk_oracle).collect();
        prop_assert_eq!(trace, expected);
    }

    #[test]
    fn trace_metrics_agree(
        trace in prop::collection::vec(prop::option::of(0.0f64..1.0), 1..300),
        t0 in 0usize..300,
        tau in 0.05f64..0.95,
    ) {
        let v = violations(&trace, tau);
        prop_assert_eq!(v, trace.iter().flatten().filter(|&&r| r > tau).count() as u64);
        if let Some(rec) = recovery_time(&trace, t0, tau) {
            prop_assert!(trace[t0 + rec as usize].is_some_and(|r| r <= tau));
        }
        match recovery_after_exceedance(&trace, t0, trace.len(), tau) {
            Some(0) => {}
            Some(r) => prop_assert!(trace[t0 + r as usize].is_some_and(|x| x <= tau)),
            None => prop_assert!(trace[t0.min(trace.len())..].iter().any(|r| r.is_some_and(|r| r > tau))),
        }
    }
}

fn entry() -> impl Strategy<Value = AuditLogEntry> {
    (
        prop::collection::vec(-10.0f64..10.0, MONITOR_COUNT),
        prob_vector(),
        prop::option::of(0.0f64..=1.0),
        0usize..7,
        prop::option::of(prop_oneof![Just(Action::Retrain), Just(Action::Rollback)]),
        (0.0f64..20.0, 0u64..64, 0u64..64),
        prop::option::of(0.0f64..=1.0),
        prop::option::of(0.0f64..=1.0),
        any::<bool>(),
    )
        .prop_map(|(evidence, belief, upper, a, heavy, (cost, k, labels), risk, worst, flag)| AuditLogEntry {
            t: 0,
            evidence,
            belief,
            upper,
            r_hat: upper.map(|u| u / 2.0),
            audited: k,
            safe: upper.map(|u| u <= 0.2),
            action: Action::ALL[a],
            heavy,
            cost,
            k,
            labels,
            risk_oracle: risk,
            risk_recent: risk.map(|r| r * 0.5),
            risk_model: risk,
            worst_group: worst,
            alarm: flag,
            fallback: !flag,
            model_version: labels,
        })
}
