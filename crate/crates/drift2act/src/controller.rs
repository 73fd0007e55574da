//! Receding-horizon action selection under a label budget and cooldowns.
//!
//! An uncertified step always falls back to abstention and may schedule one
//! heavy intervention for the next step. A certified step picks the feasible
//! light action with the largest
//!
//! ```text
//! utility(a) = gain(a) - lambda * cost(a) - gamma * max(0, U - sigma_U * gain(a) - tau)
//! ```

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::belief::{Belief, DriftType, TYPE_COUNT};
use crate::error::{Error, Result};
use crate::riskcert::{self, AuditSample, CertConfig, Certificate, SamplingMode};

pub const ACTION_COUNT: usize = 7;

/// Cost of one requested label.
pub const LABEL_COST: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Noop,
    Recalibrate,
    Tta,
    QueryLabels,
    Retrain,
    Rollback,
    Abstain,
}

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [
        Action::Noop,
        Action::Recalibrate,
        Action::Tta,
        Action::QueryLabels,
        Action::Retrain,
        Action::Rollback,
        Action::Abstain,
    ];

    /// Candidates of the certified branch, in tie-break order.
    pub const LIGHT: [Action; 4] = [Action::Noop, Action::Recalibrate, Action::Tta, Action::QueryLabels];

    #[must_use]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Short code `A0` .. `A6`.
    #[must_use]
    pub fn code(self) -> &'static str {
        ["A0", "A1", "A2", "A3", "A4", "A5", "A6"][self.index()]
    }

    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            Action::Noop => "noop",
            Action::Recalibrate => "recalibrate",
            Action::Tta => "tta",
            Action::QueryLabels => "query_labels",
            Action::Retrain => "retrain",
            Action::Rollback => "rollback",
            Action::Abstain => "abstain",
        }
    }

    /// Accepts either the code or the name.
    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.code() == s || a.name() == s)
            .ok_or_else(|| Error::invalid("action", format!("unknown action {s:?}")))
    }

    /// Normalized operational cost; only label queries depend on `k`.
    #[must_use]
    pub fn cost(self, k: u64) -> f64 {
        match self {
            Action::Noop => 0.0,
            Action::Recalibrate => 0.2,
            Action::Tta => 1.0,
            Action::QueryLabels => LABEL_COST * k as f64,
            Action::Retrain => 12.0,
            Action::Rollback => 1.5,
            Action::Abstain => 0.3,
        }
    }

    #[must_use]
    pub fn is_heavy(self) -> bool {
        matches!(self, Action::Retrain | Action::Rollback)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Expected benefit `G(d, a)` of each action under each drift type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    rows: [[f64; ACTION_COUNT]; TYPE_COUNT],
}

impl Default for GainTable {
    /// Reference table used by all experiments unless a calibrated one is loaded.
    fn default() -> Self {
        Self {
            rows: [
                [0.0, 0.10, 0.05, 0.08, 0.12, 0.10, 0.15],
                [0.0, 0.35, 0.70, 0.25, 0.85, 0.40, 0.55],
                [0.0, 0.20, 0.30, 0.75, 1.05, 0.60, 0.65],
                [0.0, 0.25, 0.35, 0.85, 0.95, 0.55, 0.80],
            ],
        }
    }
}

impl GainTable {
    pub fn new(rows: [[f64; ACTION_COUNT]; TYPE_COUNT]) -> Result<Self> {
        for (d, row) in rows.iter().enumerate() {
            if row[0] != 0.0 {
                return Err(Error::invalid("gain table", format!("no-op gain for type {d} is {}", row[0])));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("gain table", format!("row {d} has a non-finite entry")));
            }
        }
        Ok(Self { rows })
    }

    #[must_use]
    pub fn gain(&self, d: DriftType, a: Action) -> f64 {
        self.rows[d.index()][a.index()]
    }

    #[must_use]
    pub fn rows(&self) -> &[[f64; ACTION_COUNT]; TYPE_COUNT] {
        &self.rows
    }

    /// Every entry multiplied by `c`.
    #[must_use]
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows.map(|r| r.map(|v| v * c)),
        }
    }

    /// Flat text, one `type g_A0 .. g_A6` line per drift type.
    #[must_use]
    pub fn to_text(&self) -> String {
        let mut out = String::from("drift2act-gains v1\n");
        for d in DriftType::ALL {
            out.push_str(d.name());
            for v in &self.rows[d.index()] {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |detail: String| Error::parse("gain table", detail);
        let mut lines = text.lines();
        if lines.next() != Some("drift2act-gains v1") {
            return Err(err("missing or unknown header".into()));
        }
        let mut rows: [Option<[f64; ACTION_COUNT]>; TYPE_COUNT] = [None; TYPE_COUNT];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let d = DriftType::parse(parts.next().unwrap_or("")).map_err(|e| err(e.to_string()))?;
            let values = parts
                .map(|p| p.parse::<f64>().map_err(|e| err(format!("{}: {e}", d.name()))))
                .collect::<Result<Vec<f64>>>()?;
            let row: [f64; ACTION_COUNT] = values
                .try_into()
                .map_err(|_| err(format!("row {} needs {ACTION_COUNT} values", d.name())))?;
            rows[d.index()] = Some(row);
        }
        let mut out = [[0.0; ACTION_COUNT]; TYPE_COUNT];
        for (o, r) in out.iter_mut().zip(rows) {
            *o = r.ok_or_else(|| err("missing row".into()))?;
        }
        Self::new(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub delta: f64,
    /// Certificate improvement per unit of gain.
    pub sigma_u: f64,
    pub label_budget: u64,
    pub cooldown_retrain: u64,
    pub cooldown_rollback: u64,
    pub k_max: u64,
    pub k_high: u64,
    pub k_low: u64,
    /// Safety margin at or below which audits intensify.
    pub m_low: f64,
    /// Standardized evidence level at or above which audits intensify.
    pub zeta: f64,
    pub kappa_min: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self::long_stream_defaults()
    }
}

impl ControllerConfig {
    /// Values for long streams.
    #[must_use]
    pub fn long_stream_defaults() -> Self {
        Self {
            lambda: 1.0,
            gamma: 50.0,
            tau: 0.20,
            delta: 0.05,
            sigma_u: 0.10,
            label_budget: 3000,
            cooldown_retrain: 800,
            cooldown_rollback: 400,
            k_max: 64,
            k_high: 32,
            k_low: 8,
            m_low: 0.02,
            zeta: 2.0,
            kappa_min: 0.5,
        }
    }

    /// Proportionally rescaled values for streams of a few thousand steps.
    #[must_use]
    pub fn desk_defaults() -> Self {
        Self {
            label_budget: 400,
            cooldown_retrain: 200,
            cooldown_rollback: 100,
            k_max: 16,
            k_high: 8,
            k_low: 2,
            ..Self::long_stream_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.sigma_u >= 0.0) {
            return Err(Error::invalid("controller", "lambda, gamma and sigma_u must be nonnegative"));
        }
        if !(self.k_max >= self.k_high && self.k_high >= self.k_low) {
            return Err(Error::invalid(
                "controller",
                format!("query sizes {}/{}/{} are not ordered", self.k_max, self.k_high, self.k_low),
            ));
        }
        if !self.zeta.is_finite() || !self.m_low.is_finite() {
            return Err(Error::invalid("controller", "thresholds must be finite"));
        }
        self.cert_config(1).validate()
    }

    /// Certificate settings for a window of `window_len` indices.
    #[must_use]
    pub fn cert_config(&self, window_len: u64) -> CertConfig {
        CertConfig {
            delta: self.delta,
            tau: self.tau,
            window_len: window_len.max(1),
            sampling_mode: SamplingMode::WithoutReplacement,
            kappa_min: self.kappa_min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeavyAction {
    Retrain,
    Rollback,
}

impl HeavyAction {
    #[must_use]
    pub fn action(self) -> Action {
        match self {
            HeavyAction::Retrain => Action::Retrain,
            HeavyAction::Rollback => Action::Rollback,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerState {
    pub remaining_budget: u64,
    /// `None` until the first retrain.
    pub last_retrain: Option<u64>,
    pub last_rollback: Option<u64>,
    pub fallback_active: bool,
    pub scheduled_heavy: Option<HeavyAction>,
}

impl ControllerState {
    #[must_use]
    pub fn new(label_budget: u64) -> Self {
        Self {
            remaining_budget: label_budget,
            last_retrain: None,
            last_rollback: None,
            fallback_active: false,
            scheduled_heavy: None,
        }
    }

    /// Charges `labels` against the budget, saturating at zero.
    pub fn spend(&mut self, labels: u64) {
        self.remaining_budget = self.remaining_budget.saturating_sub(labels);
    }

    fn cooled(last: Option<u64>, t: u64, cooldown: u64) -> bool {
        last.is_none_or(|l| t.saturating_sub(l) >= cooldown)
    }
}

/// Subset of actions allowed at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleSet([bool; ACTION_COUNT]);

impl FeasibleSet {
    #[must_use]
    pub fn contains(&self, a: Action) -> bool {
        self.0[a.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = Action> + '_ {
        Action::ALL.into_iter().filter(|a| self.contains(*a))
    }
}

/// Cooldown and budget constraints; A0, A1, A2 and A6 are always allowed.
#[must_use]
pub fn feasible_actions(state: &ControllerState, t: u64, cfg: &ControllerConfig) -> FeasibleSet {
    let mut ok = [true; ACTION_COUNT];
    ok[Action::QueryLabels.index()] = state.remaining_budget > 0;
    ok[Action::Retrain.index()] = ControllerState::cooled(state.last_retrain, t, cfg.cooldown_retrain);
    ok[Action::Rollback.index()] = ControllerState::cooled(state.last_rollback, t, cfg.cooldown_rollback);
    FeasibleSet(ok)
}

/// Belief-weighted gain `sum_d b(d) G(d, a)`.
#[must_use]
pub fn expected_gain(belief: &Belief, a: Action, gains: &GainTable) -> f64 {
    DriftType::ALL
        .iter()
        .map(|&d| belief.prob(d) * gains.gain(d, a))
        .sum()
}

/// Excess of the predicted post-action certificate over `tau`.
#[must_use]
pub fn violation_penalty(cert_upper: f64, gain: f64, cfg: &ControllerConfig) -> f64 {
    (cert_upper - cfg.sigma_u * gain - cfg.tau).max(0.0)
}

/// Gain minus weighted cost minus weighted predicted violation; `k` prices A3.
#[must_use]
pub fn utility(belief: &Belief, a: Action, cert_upper: f64, k: u64, cfg: &ControllerConfig, gains: &GainTable) -> f64 {
    let gain = expected_gain(belief, a, gains);
    gain - cfg.lambda * a.cost(k) - cfg.gamma * violation_penalty(cert_upper, gain, cfg)
}

/// Piecewise audit size: `k_max` when uncertified, `k_high` near the
/// threshold or under strong evidence, `k_low` otherwise, capped by budget.
#[must_use]
pub fn query_size(cert: &Certificate, z_std_max: f64, cfg: &ControllerConfig, remaining_budget: u64) -> u64 {
    let k = if !riskcert::is_safe(cert, cfg.tau) {
        cfg.k_max
    } else if cert.safety_margin(cfg.tau) <= cfg.m_low || z_std_max >= cfg.zeta {
        cfg.k_high
    } else {
        cfg.k_low
    };
    k.min(remaining_budget)
}

/// Whether each heavy intervention would currently do anything useful.
///
/// Both default to `true`, which reduces escalation to cooldown checks alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscalationContext {
    pub rollback_available: bool,
    pub retrain_ready: bool,
}

impl Default for EscalationContext {
    fn default() -> Self {
        Self {
            rollback_available: true,
            retrain_ready: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    /// Audit size requested for the next step.
    pub k: u64,
    /// Heavy intervention queued for the next step.
    pub scheduled: Option<HeavyAction>,
    /// Utility of each candidate considered; `None` when not evaluated.
    pub utility_trace: [Option<f64>; ACTION_COUNT],
}

/// Everything a single decision looks at besides the controller state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<'a> {
    pub belief: &'a Belief,
    pub cert: &'a Certificate,
    /// Largest standardized monitor value.
    pub z_std_max: f64,
    pub escalation: EscalationContext,
}

/// Policy configuration plus its gain table.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub cfg: ControllerConfig,
    pub gains: GainTable,
}

impl Controller {
    pub fn new(cfg: ControllerConfig, gains: GainTable) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, gains })
    }

    /// Hard gate first; otherwise the best certified light action.
    #[must_use]
    pub fn select_action(&self, obs: &Observation<'_>, state: &ControllerState, t: u64) -> Decision {
        let cfg = &self.cfg;
        let feasible = feasible_actions(state, t, cfg);
        let k = query_size(obs.cert, obs.z_std_max, cfg, state.remaining_budget);
        let mut trace = [None; ACTION_COUNT];
        if !riskcert::is_safe(obs.cert, cfg.tau) {
            let scheduled = if feasible.contains(Action::Rollback) && obs.escalation.rollback_available {
                Some(HeavyAction::Rollback)
            } else if feasible.contains(Action::Retrain) && obs.escalation.retrain_ready {
                Some(HeavyAction::Retrain)
            } else {
                None
            };
            return Decision {
                action: Action::Abstain,
                k: cfg.k_max.min(state.remaining_budget),
                scheduled,
                utility_trace: trace,
            };
        }
        let mut best = Action::Noop;
        let mut best_u = f64::NEG_INFINITY;
        for a in Action::LIGHT.into_iter().filter(|a| feasible.contains(*a)) {
            let u = utility(obs.belief, a, obs.cert.upper, k, cfg, &self.gains);
            trace[a.index()] = Some(u);
            if u > best_u {
                best = a;
                best_u = u;
            }
        }
        Decision {
            action: best,
            k,
            scheduled: None,
            utility_trace: trace,
        }
    }

    /// Runs a queued heavy intervention if its cooldown allows, recording it.
    pub fn take_scheduled(&self, state: &mut ControllerState, t: u64) -> Option<HeavyAction> {
        let heavy = state.scheduled_heavy.take()?;
        if !feasible_actions(state, t, &self.cfg).contains(heavy.action()) {
            return None;
        }
        match heavy {
            HeavyAction::Retrain => state.last_retrain = Some(t),
            HeavyAction::Rollback => state.last_rollback = Some(t),
        }
        Some(heavy)
    }

    /// Certificate, decision and state update for one step.
    ///
    /// `audited_population` is the number of window members eligible for audit
    /// and `excluded` the members that can no longer be audited. `new_labels`
    /// were acquired for this step's audits and are charged to the budget.
    pub fn step(&self, inputs: &StepInputs<'_>, state: &mut ControllerState, t: u64) -> Result<StepOutcome> {
        let cert_cfg = self.cfg.cert_config(inputs.audited_population);
        let cert = if inputs.audited_population == 0 {
            Certificate::vacuous(t)
        } else {
            riskcert::compute_certificate(inputs.samples, t, &cert_cfg)?
        };
        let cert = riskcert::with_unauditable(&cert, inputs.audited_population, inputs.excluded, self.cfg.tau);
        state.spend(inputs.new_labels);
        let obs = Observation {
            belief: inputs.belief,
            cert: &cert,
            z_std_max: inputs.z_std_max,
            escalation: inputs.escalation,
        };
        let decision = self.select_action(&obs, state, t);
        state.fallback_active = decision.action == Action::Abstain;
        state.scheduled_heavy = decision.scheduled;
        Ok(StepOutcome { decision, cert })
    }
}

/// Inputs of [`Controller::step`].
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub belief: &'a Belief,
    pub z_std_max: f64,
    pub samples: &'a [AuditSample],
    pub audited_population: u64,
    pub excluded: u64,
    pub new_labels: u64,
    pub escalation: EscalationContext,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub decision: Decision,
    pub cert: Certificate,
}
