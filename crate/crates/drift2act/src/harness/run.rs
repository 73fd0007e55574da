//! The per-step loop for every policy.
//!
//! Order within step `t`: execute the heavy action scheduled at `t - 1`;
//! observe example `t` and, every `monitor_stride` steps, refresh evidence and
//! belief; slide the audit window and buy the audits requested at `t - 1`;
//! certify and decide; record the oracle risk of the deployed model; apply the
//! light action.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::audit::AuditPool;
use super::config::{Policy, RunConfig};
use super::metrics::{worst_group_accuracy, MetricsReport};
use crate::belief::{self, Belief, EmissionModel, EpisodeDataset, FitConfig, TransitionMatrix, TYPE_COUNT};
use crate::controller::{
    feasible_actions, query_size, utility, Action, Controller, ControllerConfig, ControllerState, EscalationContext,
    GainTable, HeavyAction, StepInputs,
};
use crate::error::{Error, Result};
use crate::monitors::MONITOR_COUNT;
use crate::riskcert::{self, AuditSample, Certificate};
use crate::simenv::episodes::launch_model;
use crate::simenv::evidence::confidence_pairs;
use crate::simenv::model::{act_recalibrate, act_retrain, act_rollback, act_tta, SurrogateModel, TrainConfig};
use crate::simenv::{
    abstain_rule, derive_rng, generate_episodes, EpisodeConfig, EvidencePipeline, RngPurpose, Stream, StreamConfig,
    SyntheticExample,
};

/// One logged step. Field order is the export order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLogEntry {
    pub t: u64,
    /// Standardized evidence in monitor order, as seen by the filter.
    pub evidence: Vec<f64>,
    pub belief: [f64; TYPE_COUNT],
    /// Certificate upper bound; `None` for policies that do not certify.
    pub upper: Option<f64>,
    pub r_hat: Option<f64>,
    pub audited: u64,
    pub safe: Option<bool>,
    pub action: Action,
    /// Retrain or rollback executed at this step.
    pub heavy: Option<Action>,
    pub cost: f64,
    pub k: u64,
    /// Labels bought at this step.
    pub labels: u64,
    /// Oracle risk of the deployed model on the certificate window; selective
    /// risk for abstaining policies; `None` under full abstention.
    pub risk_oracle: Option<f64>,
    /// Same quantity on the `N` most recent steps.
    pub risk_recent: Option<f64>,
    /// Risk of the deployed model on the certificate window whether or not it
    /// serves predictions; recovery is measured on this trace.
    pub risk_model: Option<f64>,
    pub worst_group: Option<f64>,
    pub alarm: bool,
    pub fallback: bool,
    pub model_version: u64,
}

/// Fitted belief model and gain table shared by runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub emission: EmissionModel,
    pub transition: TransitionMatrix,
    pub gains: GainTable,
}

/// Episode settings matching the monitors of `cfg`.
#[must_use]
pub fn episode_config(cfg: &RunConfig) -> EpisodeConfig {
    EpisodeConfig {
        stride: cfg.monitor_stride,
        stream: cfg.stream.clone(),
        evidence: cfg.evidence_config(),
        ..EpisodeConfig::default()
    }
}

impl Artifacts {
    /// Fits the belief model on synthetic episodes; gains default to the
    /// reference table.
    pub fn fit(cfg: &RunConfig, episodes: &EpisodeConfig, seed: u64) -> Result<(Self, EpisodeDataset)> {
        cfg.validate()?;
        let data = generate_episodes(episodes, seed)?;
        let emission = belief::fit_emission(&data, &FitConfig { seed, ..FitConfig::default() })?;
        let transition = belief::fit_transitions(&data)?;
        Ok((
            Self {
                emission,
                transition,
                gains: GainTable::default(),
            },
            data,
        ))
    }

    fn check(&self) -> Result<()> {
        if self.emission.dim() != MONITOR_COUNT {
            return Err(Error::invalid(
                "belief model",
                format!("expects {} evidence components, monitors produce {MONITOR_COUNT}", self.emission.dim()),
            ));
        }
        self.transition.validate()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: Vec<AuditLogEntry>,
    pub report: MetricsReport,
    pub model: SurrogateModel,
}

/// Runs `cfg.policy` on the stream of `seed` and scores it.
pub fn run_stream(cfg: &RunConfig, artifacts: &Artifacts, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    artifacts.check()?;
    let stream_cfg = StreamConfig {
        seed,
        ..cfg.stream.clone()
    };
    let stream = Stream::generate(&stream_cfg)?;
    let mut sim = Simulation::new(cfg, artifacts, &stream, seed)?;
    for t in 1..=stream_cfg.length {
        sim.step(t)?;
    }
    let report = MetricsReport::from_log(&sim.log, &stream_cfg.onsets(), cfg.controller.tau);
    Ok(RunOutput {
        log: sim.log,
        report,
        model: sim.model,
    })
}

struct Simulation<'a> {
    cfg: &'a RunConfig,
    artifacts: &'a Artifacts,
    stream: &'a Stream,
    seed: u64,
    controller: Controller,
    /// Utility weights of the uncertified baseline: no violation term.
    ungated: ControllerConfig,
    model: SurrogateModel,
    pipeline: EvidencePipeline,
    reference_stale: bool,
    state: ControllerState,
    pool: AuditPool,
    labeled: Vec<bool>,
    audit_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    belief: Belief,
    evidence: Vec<f64>,
    pending_draws: u64,
    safe_run: u64,
    /// A rollback already ran in the current fallback episode.
    rolled_back: bool,
    log: Vec<AuditLogEntry>,
}

/// Counts of `(wrong, counted)` and per-group `(correct, total)` on a span.
struct SpanRisk {
    wrong: u64,
    counted: u64,
    groups: Vec<(u64, u64)>,
}

impl SpanRisk {
    fn risk(&self) -> Option<f64> {
        (self.counted > 0).then(|| self.wrong as f64 / self.counted as f64)
    }
}

fn zero_one(model: &SurrogateModel, e: &SyntheticExample) -> f64 {
    if model.params().predict(&e.x) == e.y {
        0.0
    } else {
        1.0
    }
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a RunConfig, artifacts: &'a Artifacts, stream: &'a Stream, seed: u64) -> Result<Self> {
        let model = SurrogateModel::launch(launch_model(stream)?);
        let pipeline = EvidencePipeline::build(stream, model.params(), &cfg.evidence_config())?;
        let controller = Controller::new(cfg.controller, artifacts.gains.clone())?;
        let horizon = stream.cfg.length;
        Ok(Self {
            cfg,
            artifacts,
            stream,
            seed,
            controller,
            ungated: ControllerConfig {
                gamma: 0.0,
                ..cfg.controller
            },
            model,
            pipeline,
            reference_stale: false,
            state: ControllerState::new(cfg.controller.label_budget),
            pool: AuditPool::new(cfg.window, horizon),
            labeled: vec![false; horizon as usize + 1],
            audit_rng: derive_rng(seed, RngPurpose::Audit, 0),
            noise_rng: derive_rng(seed, RngPurpose::Noise, 0),
            belief: Belief::initial(),
            evidence: vec![0.0; MONITOR_COUNT],
            pending_draws: 0,
            safe_run: 0,
            rolled_back: false,
            log: Vec::with_capacity(horizon as usize),
        })
    }

    /// Certificate window `[t - d - N + 1, t - d]` clipped at 1.
    fn cert_window(&self, t: u64) -> Option<(u64, u64)> {
        let hi = t.checked_sub(self.stream.cfg.delay).filter(|&h| h >= 1)?;
        Some(((hi + 1).saturating_sub(self.cfg.window).max(1), hi))
    }

    fn labeled_in(&self, span: Option<(u64, u64)>) -> Vec<(&'a [f64], usize)> {
        let stream = self.stream;
        span.map_or_else(Vec::new, |(lo, hi)| {
            (lo..=hi)
                .filter(|&j| self.labeled[j as usize])
                .map(|j| (stream.at(j).x.as_slice(), stream.at(j).y))
                .collect()
        })
    }

    fn span_risk(&self, span: Option<(u64, u64)>, selective: bool) -> SpanRisk {
        let mut out = SpanRisk {
            wrong: 0,
            counted: 0,
            groups: vec![(0, 0); 2],
        };
        let Some((lo, hi)) = span else { return out };
        let params = self.model.params();
        for j in lo..=hi {
            let e = self.stream.at(j);
            if selective && !abstain_rule(&params.probs(&e.x), self.cfg.params.selective_threshold) {
                continue;
            }
            let pred = params.predict(&e.x);
            let g = e.group as usize;
            if g >= out.groups.len() {
                out.groups.resize(g + 1, (0, 0));
            }
            out.counted += 1;
            out.groups[g].1 += 1;
            if pred == e.y {
                out.groups[g].0 += 1;
            } else {
                out.wrong += 1;
            }
        }
        out
    }

    fn execute_heavy(&mut self, heavy: HeavyAction, t: u64) -> Result<()> {
        match heavy {
            HeavyAction::Retrain => {
                let data = self.labeled_in(self.cert_window(t));
                if !data.is_empty() {
                    let mut rng = derive_rng(self.seed, RngPurpose::Retrain, t);
                    act_retrain(&mut self.model, &data, &TrainConfig::default(), &mut rng)?;
                }
            }
            HeavyAction::Rollback => {
                act_rollback(&mut self.model);
                self.rolled_back = true;
            }
        }
        self.reference_stale = true;
        Ok(())
    }

    fn observe(&mut self, t: u64) -> Result<()> {
        if self.reference_stale {
            self.pipeline.refresh_reference_levels(self.model.params(), self.stream)?;
            self.reference_stale = false;
        }
        let n = self.cfg.monitor_window as u64;
        let stream = self.stream;
        let recent: Vec<&SyntheticExample> = (t + 1 - n..=t).map(|j| stream.at(j)).collect();
        let d = stream.cfg.delay;
        let labeled_examples: Vec<&SyntheticExample> = match t.checked_sub(d).filter(|&h| h >= 1) {
            Some(hi) => ((hi + 1).saturating_sub(n).max(1)..=hi)
                .filter(|&j| self.labeled[j as usize])
                .map(|j| stream.at(j))
                .collect(),
            None => Vec::new(),
        };
        let pairs = confidence_pairs(self.model.params(), labeled_examples);
        let monitor_seed: u64 = derive_rng(self.seed, RngPurpose::Monitors, t).random();
        let mut z = self.pipeline.evaluate(&recent, &pairs, self.model.params(), monitor_seed)?.standardized;
        if self.cfg.monitor_noise > 0.0 {
            for v in &mut z {
                let eps: f64 = self.noise_rng.sample(StandardNormal);
                *v += self.cfg.monitor_noise * eps;
            }
        }
        let out = belief::update(&self.belief, &z, &self.artifacts.transition, &self.artifacts.emission)?;
        self.belief = out.belief;
        self.evidence = z;
        Ok(())
    }

    fn label_window(&mut self, t: u64) -> u64 {
        let Some((lo, hi)) = self.cert_window(t) else { return 0 };
        let mut spent = 0;
        for j in lo..=hi {
            if self.state.remaining_budget == 0 {
                break;
            }
            if !self.labeled[j as usize] {
                self.labeled[j as usize] = true;
                self.state.spend(1);
                spent += 1;
            }
        }
        spent
    }

    fn certify(&self, samples: &[AuditSample], t: u64) -> Result<Certificate> {
        let population = self.pool.population();
        let cert = if population == 0 {
            Certificate::vacuous(t)
        } else {
            riskcert::compute_certificate(samples, t, &self.cfg.controller.cert_config(population))?
        };
        Ok(riskcert::with_unauditable(&cert, population, self.pool.excluded(), self.cfg.controller.tau))
    }

    fn escalation(&self, samples: &[AuditSample], t: u64) -> EscalationContext {
        // One rollback per fallback episode, so it cannot undo a later retrain.
        let rollback_available = self.model.safe_checkpoint().version != self.model.version() && !self.rolled_back;
        let data = self.labeled_in(self.cert_window(t));
        let mut seen = vec![false; self.stream.cfg.classes];
        for (_, y) in &data {
            seen[*y] = true;
        }
        let audited_risk = if samples.is_empty() {
            0.0
        } else {
            samples.iter().map(|s| s.loss).sum::<f64>() / samples.len() as f64
        };
        EscalationContext {
            rollback_available,
            retrain_ready: data.len() >= self.cfg.retrain_min_labels
                && seen.iter().filter(|&&s| s).count() >= 2
                && audited_risk >= self.cfg.controller.tau / 2.0,
        }
    }

    fn ungated_choice(&self, cert: &Certificate, t: u64) -> (Action, u64) {
        let cfg = &self.ungated;
        let feasible = feasible_actions(&self.state, t, cfg);
        let z_max = self.evidence.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let k = query_size(cert, z_max, cfg, self.state.remaining_budget);
        let mut best = (Action::Noop, f64::NEG_INFINITY);
        for a in Action::ALL.into_iter().filter(|&a| a != Action::Abstain && feasible.contains(a)) {
            let u = utility(&self.belief, a, cert.upper, k, cfg, &self.controller.gains);
            if u > best.1 {
                best = (a, u);
            }
        }
        (best.0, k)
    }

    fn step(&mut self, t: u64) -> Result<()> {
        let cfg = self.cfg;
        let policy = cfg.policy;
        let mut heavy = None;
        let mut cost = 0.0;
        let mut labels = 0;

        if policy.audits() {
            if let Some(h) = self.controller.take_scheduled(&mut self.state, t) {
                self.execute_heavy(h, t)?;
                heavy = Some(h.action());
                cost += h.action().cost(0);
            }
        }
        if policy == Policy::RetrainSchedule && t % cfg.params.retrain_period == 0 {
            labels += self.label_window(t);
            if feasible_actions(&self.state, t, &cfg.controller).contains(Action::Retrain) {
                self.state.last_retrain = Some(t);
                self.execute_heavy(HeavyAction::Retrain, t)?;
                heavy = Some(Action::Retrain);
                cost += Action::Retrain.cost(0);
            }
        }

        let n = cfg.monitor_window as u64;
        if t >= n && (t - n) % cfg.monitor_stride == 0 {
            self.observe(t)?;
        }

        let mut cert = None;
        let mut samples = Vec::new();
        if policy.audits() {
            let hi = self.cert_window(t).map_or(0, |(_, hi)| hi);
            let budget = self.state.remaining_budget;
            let mut spent = self.pool.advance(hi, &mut self.labeled, budget, &mut self.audit_rng);
            spent += self
                .pool
                .draw(self.pending_draws, &mut self.labeled, budget - spent, &mut self.audit_rng);
            labels += spent;
            samples = self
                .pool
                .members()
                .iter()
                .map(|&j| AuditSample::new(j, zero_one(&self.model, self.stream.at(j)), true))
                .collect();
        }

        let z_max = self.evidence.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (action, k) = match policy {
            Policy::CertifiedController => {
                let escalation = self.escalation(&samples, t);
                let inputs = StepInputs {
                    belief: &self.belief,
                    z_std_max: z_max,
                    samples: &samples,
                    audited_population: self.pool.population(),
                    excluded: self.pool.excluded(),
                    new_labels: labels,
                    escalation,
                };
                let out = self.controller.step(&inputs, &mut self.state, t)?;
                if !self.state.fallback_active {
                    self.rolled_back = false;
                }
                cert = Some(out.cert);
                (out.decision.action, out.decision.k)
            }
            Policy::NoCertificate => {
                let c = self.certify(&samples, t)?;
                self.state.spend(labels);
                let (a, k) = self.ungated_choice(&c, t);
                match a {
                    Action::Retrain => self.state.scheduled_heavy = Some(HeavyAction::Retrain),
                    Action::Rollback => self.state.scheduled_heavy = Some(HeavyAction::Rollback),
                    _ => {}
                }
                cert = Some(c);
                (a, k)
            }
            Policy::AlarmOnly | Policy::RetrainSchedule => (Action::Noop, 0),
            Policy::AdaptAlways => (Action::Tta, 0),
            Policy::SelectiveOnly => {
                let probs = self.model.params().probs(&self.stream.at(t).x);
                if abstain_rule(&probs, cfg.params.selective_threshold) {
                    (Action::Noop, 0)
                } else {
                    (Action::Abstain, 0)
                }
            }
        };

        if let Some(c) = &cert {
            if c.safe {
                self.safe_run += 1;
                if self.safe_run >= cfg.safe_streak {
                    self.model.mark_safe();
                }
            } else {
                self.safe_run = 0;
            }
        }

        cost += match action {
            Action::QueryLabels | Action::Retrain | Action::Rollback => 0.0,
            a => a.cost(0),
        };
        cost += cfg.label_cost * labels as f64;

        let fallback = policy == Policy::CertifiedController && self.state.fallback_active;
        let window = self.cert_window(t);
        let recent = Some(((t + 1).saturating_sub(cfg.window).max(1), t));
        let served = self.span_risk(window, policy.selective());
        let risk_model = served.risk();
        let (risk_oracle, risk_recent, worst_group) = if fallback {
            (None, None, None)
        } else {
            let r = self.span_risk(recent, policy.selective());
            (risk_model, r.risk(), worst_group_accuracy(&served.groups))
        };
        let norm = self.evidence.iter().map(|z| z * z).sum::<f64>().sqrt();
        self.log.push(AuditLogEntry {
            t,
            evidence: self.evidence.clone(),
            belief: self.belief.probs(),
            upper: cert.map(|c| c.upper),
            r_hat: cert.map(|c| c.r_hat),
            audited: cert.map_or(0, |c| c.n),
            safe: cert.map(|c| c.safe),
            action,
            heavy,
            cost,
            k,
            labels,
            risk_oracle,
            risk_recent,
            risk_model,
            worst_group,
            alarm: norm > cfg.params.alarm_threshold || fallback,
            fallback,
            model_version: self.model.version(),
        });

        let mut extra = 0;
        match action {
            Action::Recalibrate => {
                let data = self.labeled_in(window);
                self.reference_stale |= act_recalibrate(&mut self.model, &data);
            }
            Action::Tta => {
                let stream = self.stream;
                let inputs: Vec<&[f64]> = ((t + 1).saturating_sub(n).max(1)..=t)
                    .map(|j| stream.at(j).x.as_slice())
                    .collect();
                act_tta(&mut self.model, &inputs, cfg.tta_steps, cfg.params.tta_learning_rate)?;
                self.reference_stale = true;
            }
            Action::QueryLabels => extra = k,
            _ => {}
        }
        self.pending_draws = if policy.audits() { k + extra } else { 0 };
        Ok(())
    }
}
