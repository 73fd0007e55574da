//! Flat `key = value` run configuration.
//!
//! Every key has a default; a file only lists overrides. `#` starts a comment.
//! [`RunConfig::to_text`] writes the full key set in a fixed order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::belief::DriftType;
use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::monitors::MonitorMask;
use crate::simenv::evidence::EvidenceConfig;
use crate::simenv::{DriftPattern, StreamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    CertifiedController,
    NoCertificate,
    AlarmOnly,
    AdaptAlways,
    RetrainSchedule,
    SelectiveOnly,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::CertifiedController,
        Policy::NoCertificate,
        Policy::AlarmOnly,
        Policy::AdaptAlways,
        Policy::RetrainSchedule,
        Policy::SelectiveOnly,
    ];

    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            Policy::CertifiedController => "certified_controller",
            Policy::NoCertificate => "no_certificate",
            Policy::AlarmOnly => "alarm_only",
            Policy::AdaptAlways => "adapt_always",
            Policy::RetrainSchedule => "retrain_schedule",
            Policy::SelectiveOnly => "selective_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid("policy", format!("unknown policy {s:?}")))
    }

    /// Whether the policy buys audit labels and computes a certificate.
    #[must_use]
    pub fn audits(self) -> bool {
        matches!(self, Policy::CertifiedController | Policy::NoCertificate)
    }

    /// Whether risk is measured on accepted predictions only.
    #[must_use]
    pub fn selective(self) -> bool {
        self == Policy::SelectiveOnly
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Baseline parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Alarm when the standardized evidence norm exceeds this.
    pub alarm_threshold: f64,
    /// Step size of entropy-minimizing adaptation.
    pub tta_learning_rate: f64,
    /// Retrain period of the scheduled baseline.
    pub retrain_period: u64,
    /// Top-probability acceptance threshold of the selective baseline.
    pub selective_threshold: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            alarm_threshold: 2.5,
            tta_learning_rate: 1e-4,
            retrain_period: 1200,
            selective_threshold: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub policy: Policy,
    pub params: PolicyParams,
    pub stream: StreamConfig,
    pub controller: ControllerConfig,
    /// Certificate window length `N`.
    pub window: u64,
    /// Monitor window length `n`.
    pub monitor_window: usize,
    /// Monitors and the belief filter run every `monitor_stride` steps.
    pub monitor_stride: u64,
    /// Nominal windows used to standardize monitor outputs.
    pub calibration_windows: usize,
    /// Standard deviation of Gaussian noise added to standardized evidence.
    pub monitor_noise: f64,
    /// Cost charged per purchased label.
    pub label_cost: f64,
    /// Consecutive certified-safe steps before the deployed model becomes the
    /// rollback target.
    pub safe_streak: u64,
    pub tta_steps: usize,
    /// Labeled window members required before a retrain is scheduled.
    pub retrain_min_labels: usize,
    pub monitor_mask: MonitorMask,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policy: Policy::CertifiedController,
            params: PolicyParams::default(),
            stream: StreamConfig::default(),
            controller: ControllerConfig::desk_defaults(),
            window: 256,
            monitor_window: 64,
            monitor_stride: 8,
            calibration_windows: 24,
            monitor_noise: 0.0,
            label_cost: 0.05,
            safe_streak: 100,
            tta_steps: 1,
            retrain_min_labels: 64,
            monitor_mask: MonitorMask::default(),
        }
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! numeric_value {
    ($($ty:ty),*) => {$(
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|e| Error::parse("config value", format!("{s:?}: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

numeric_value!(u64, usize, f64);

impl ConfigValue for Policy {
    fn parse_value(s: &str) -> Result<Self> {
        Policy::parse(s)
    }
    fn render(&self) -> String {
        self.name().to_owned()
    }
}

impl ConfigValue for DriftPattern {
    fn parse_value(s: &str) -> Result<Self> {
        DriftPattern::parse(s)
    }
    fn render(&self) -> String {
        self.name().to_owned()
    }
}

impl ConfigValue for DriftType {
    fn parse_value(s: &str) -> Result<Self> {
        DriftType::parse(s)
    }
    fn render(&self) -> String {
        self.name().to_owned()
    }
}

/// Enabled monitors as a comma list of indices, e.g. `0,1,2,3,4`.
impl ConfigValue for MonitorMask {
    fn parse_value(s: &str) -> Result<Self> {
        let mut mask = [false; crate::monitors::MONITOR_COUNT];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let i: usize = part
                .parse()
                .map_err(|e| Error::parse("monitor mask", format!("{part:?}: {e}")))?;
            *mask
                .get_mut(i)
                .ok_or_else(|| Error::parse("monitor mask", format!("index {i} out of range")))? = true;
        }
        Ok(MonitorMask(mask))
    }
    fn render(&self) -> String {
        let on: Vec<String> = (0..self.0.len()).filter(|&i| self.0[i]).map(|i| i.to_string()).collect();
        on.join(",")
    }
}

macro_rules! config_fields {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every configuration key in file order.
        pub const CONFIG_KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = ConfigValue::parse_value(value)?,)*
                    _ => return Err(Error::parse("config", format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

config_fields! {
    "policy" => policy;
    "policy.alarm_threshold" => params.alarm_threshold;
    "policy.tta_learning_rate" => params.tta_learning_rate;
    "policy.retrain_period" => params.retrain_period;
    "policy.selective_threshold" => params.selective_threshold;
    "stream.length" => stream.length;
    "stream.dim" => stream.dim;
    "stream.classes" => stream.classes;
    "stream.pattern" => stream.pattern;
    "stream.onset" => stream.onset;
    "stream.ramp" => stream.ramp;
    "stream.period" => stream.period;
    "stream.delay" => stream.delay;
    "stream.p_sub" => stream.p_sub;
    "stream.drift_type" => stream.drift_type;
    "stream.seed" => stream.seed;
    "stream.cluster_scale" => stream.cluster_scale;
    "stream.shift_norm" => stream.shift_norm;
    "stream.subgroup_shift_norm" => stream.subgroup_shift_norm;
    "stream.reference_size" => stream.reference_size;
    "stream.train_size" => stream.train_size;
    "controller.lambda" => controller.lambda;
    "controller.gamma" => controller.gamma;
    "controller.tau" => controller.tau;
    "controller.delta" => controller.delta;
    "controller.sigma_u" => controller.sigma_u;
    "controller.label_budget" => controller.label_budget;
    "controller.cooldown_retrain" => controller.cooldown_retrain;
    "controller.cooldown_rollback" => controller.cooldown_rollback;
    "controller.k_max" => controller.k_max;
    "controller.k_high" => controller.k_high;
    "controller.k_low" => controller.k_low;
    "controller.m_low" => controller.m_low;
    "controller.zeta" => controller.zeta;
    "controller.kappa_min" => controller.kappa_min;
    "run.window" => window;
    "run.monitor_window" => monitor_window;
    "run.monitor_stride" => monitor_stride;
    "run.calibration_windows" => calibration_windows;
    "run.monitor_noise" => monitor_noise;
    "run.label_cost" => label_cost;
    "run.safe_streak" => safe_streak;
    "run.tta_steps" => tta_steps;
    "run.retrain_min_labels" => retrain_min_labels;
    "run.monitor_mask" => monitor_mask;
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::parse("config", format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    #[must_use]
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::parse("override", format!("{assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.controller.validate()?;
        let p = &self.params;
        if !(p.alarm_threshold >= 0.0) || !(p.tta_learning_rate >= 0.0) || p.retrain_period == 0 {
            return Err(Error::invalid("policy", "thresholds and rates must be nonnegative, period positive"));
        }
        if !(p.selective_threshold > 0.0 && p.selective_threshold <= 1.0) {
            return Err(Error::invalid("policy.selective_threshold", "must lie in (0, 1]"));
        }
        if self.window == 0 || self.monitor_stride == 0 || self.calibration_windows == 0 {
            return Err(Error::invalid("run", "window, stride and calibration windows must be positive"));
        }
        if self.monitor_window < 2 || self.monitor_window as u64 > self.stream.length {
            return Err(Error::invalid("run.monitor_window", "needs at least 2 steps and must fit in the stream"));
        }
        if !(self.monitor_noise >= 0.0 && self.monitor_noise.is_finite()) || !(self.label_cost >= 0.0) {
            return Err(Error::invalid("run", "noise and label cost must be finite and nonnegative"));
        }
        Ok(())
    }

    #[must_use]
    pub fn evidence_config(&self) -> EvidenceConfig {
        EvidenceConfig {
            window: self.monitor_window,
            calibration_windows: self.calibration_windows,
            mask: self.monitor_mask,
            ..EvidenceConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.policy = Policy::SelectiveOnly;
        cfg.stream.delay = 25;
        cfg.controller.tau = 0.15;
        cfg.monitor_noise = 0.5;
        cfg.monitor_mask.0[3] = false;
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), CONFIG_KEYS.len());
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::from_text("# header\nstream.delay = 10  # short\n\npolicy=alarm_only\n").unwrap();
        assert_eq!(cfg.stream.delay, 10);
        assert_eq!(cfg.policy, Policy::AlarmOnly);
        assert_eq!(cfg.window, 256);
        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("stream.delay").is_err());
        assert!(RunConfig::from_text("stream.delay = x").is_err());
    }

    #[test]
    fn defaults_match_baseline_table() {
        let p = PolicyParams::default();
        assert_eq!((p.alarm_threshold, p.tta_learning_rate, p.retrain_period, p.selective_threshold), (2.5, 1e-4, 1200, 0.6));
        assert!(RunConfig::default().validate().is_ok());
    }
}
