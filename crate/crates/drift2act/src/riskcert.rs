//! Anytime-valid upper confidence sequences for bounded windowed risk.
//!
//! The failure budget is spread over audit sizes with the summable schedule
//!
//! ```text
//! delta_n = 6 delta / (pi^2 n^2),      sum_{n >= 1} delta_n = delta
//! ```
//!
//! and the same schedule spreads it over time. A per-window radius is the
//! Hoeffding (or Serfling, for sampling without replacement from a finite
//! window) deviation at the stitched budget, so the certificate at step `t`
//! with `n` audits spends `36 delta / (pi^4 t^2 n^2)`. A union bound over all
//! `(t, n)` keeps the simultaneous failure probability below `delta`, which is
//! what makes the bound valid under data-dependent audit sizes and stopping.

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One audited label inside the certifiable window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    /// Stream index of the audited example.
    pub index: u64,
    /// Bounded loss in `[0, 1]`.
    pub loss: f64,
    /// Whether the acceptance function allowed a prediction on this example.
    pub accepted: bool,
}

impl AuditSample {
    #[must_use]
    pub fn new(index: u64, loss: f64, accepted: bool) -> Self {
        Self {
            index,
            loss,
            accepted,
        }
    }
}

/// How audit indices are drawn from the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Independent uniform draws; duplicates allowed and averaged.
    WithReplacement,
    /// Distinct indices; enables the finite-population correction.
    WithoutReplacement,
}

/// Parameters of the certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertConfig {
    /// Overall failure budget, in `(0, 1)`.
    pub delta: f64,
    /// Risk target, in `(0, 1)`.
    pub tau: f64,
    /// Size of the certifiable window.
    pub window_len: u64,
    pub sampling_mode: SamplingMode,
    /// Floor on the coverage lower bound used by the selective certificate.
    pub kappa_min: f64,
}

impl CertConfig {
    pub fn new(
        delta: f64,
        tau: f64,
        window_len: u64,
        sampling_mode: SamplingMode,
        kappa_min: f64,
    ) -> Result<Self> {
        let cfg = Self {
            delta,
            tau,
            window_len,
            sampling_mode,
            kappa_min,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_unit_open("delta", self.delta)?;
        check_unit_open("tau", self.tau)?;
        if self.window_len == 0 {
            return Err(Error::invalid("window_len", "must be at least 1"));
        }
        if !(self.kappa_min > 0.0 && self.kappa_min <= 1.0) {
            return Err(Error::invalid(
                "kappa_min",
                format!("{} not in (0, 1]", self.kappa_min),
            ));
        }
        Ok(())
    }

    fn radius(&self, n: u64, budget: f64) -> Result<f64> {
        match self.sampling_mode {
            SamplingMode::WithReplacement => hoeffding_radius(n, budget),
            SamplingMode::WithoutReplacement => serfling_radius(n, self.window_len, budget),
        }
    }
}

/// Audited risk estimate with its anytime-valid upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub t: u64,
    pub n: u64,
    pub r_hat: f64,
    pub radius: f64,
    /// `min(1, r_hat + radius)`; exactly 1 when `n = 0`.
    pub upper: f64,
    pub safe: bool,
}

impl Certificate {
    /// The certificate carried by an empty audit set.
    #[must_use]
    pub fn vacuous(t: u64) -> Self {
        Self {
            t,
            n: 0,
            r_hat: 0.0,
            radius: f64::INFINITY,
            upper: 1.0,
            safe: false,
        }
    }

    /// Distance to the risk target, positive when certified.
    #[must_use]
    pub fn safety_margin(&self, tau: f64) -> f64 {
        tau - self.upper
    }
}

fn check_unit_open(what: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(what, format!("{value} not in (0, 1)")))
    }
}

/// `ln(pi^2 k^2 / (6 budget))`, the log of the inverse stitched budget.
fn log_inverse_stitched(k: u64, budget: f64) -> f64 {
    2.0 * (PI * k as f64).ln() - (6.0 * budget).ln()
}

/// Share of `delta` assigned to audit size `n`: `6 delta / (pi^2 n^2)`.
pub fn stitched_delta_n(n: u64, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "audit size must be at least 1"));
    }
    check_unit_open("delta", delta)?;
    Ok(6.0 * delta / (PI * PI * (n as f64).powi(2)))
}

/// Share of `delta` assigned to step `t`: `6 delta / (pi^2 t^2)`.
pub fn time_delta(t: u64, delta: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::invalid("t", "time index must be at least 1"));
    }
    check_unit_open("delta", delta)?;
    Ok(6.0 * delta / (PI * PI * (t as f64).powi(2)))
}

/// Stitched Hoeffding radius `sqrt(ln(pi^2 n^2 / (6 budget)) / (2n))`.
pub fn hoeffding_radius(n: u64, delta_budget: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "audit size must be at least 1"));
    }
    check_unit_open("delta_budget", delta_budget)?;
    Ok((log_inverse_stitched(n, delta_budget) / (2.0 * n as f64)).sqrt())
}

/// Stitched radius with the finite-population factor `1 - (n - 1) / N`.
pub fn serfling_radius(n: u64, window_len: u64, delta_budget: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("n", "audit size must be at least 1"));
    }
    if n > window_len {
        return Err(Error::invalid(
            "n",
            format!("{n} audits exceed window length {window_len}"),
        ));
    }
    check_unit_open("delta_budget", delta_budget)?;
    let correction = 1.0 - (n - 1) as f64 / window_len as f64;
    Ok((correction * log_inverse_stitched(n, delta_budget) / (2.0 * n as f64)).sqrt())
}

fn validate_samples(samples: &[AuditSample], cfg: &CertConfig) -> Result<()> {
    for s in samples {
        if !(0.0..=1.0).contains(&s.loss) {
            return Err(Error::invalid(
                "loss",
                format!("{} at index {} not in [0, 1]", s.loss, s.index),
            ));
        }
    }
    if cfg.sampling_mode == SamplingMode::WithoutReplacement {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in samples {
            if !seen.insert(s.index) {
                return Err(Error::invalid(
                    "samples",
                    format!("duplicate index {} under sampling without replacement", s.index),
                ));
            }
        }
    }
    Ok(())
}

/// Certificate for the window risk at step `t` from uniformly drawn audits.
pub fn compute_certificate(
    samples: &[AuditSample],
    t: u64,
    cfg: &CertConfig,
) -> Result<Certificate> {
    cfg.validate()?;
    let budget = time_delta(t, cfg.delta)?;
    validate_samples(samples, cfg)?;
    if samples.is_empty() {
        return Ok(Certificate::vacuous(t));
    }
    let n = samples.len() as u64;
    let r_hat = samples.iter().map(|s| s.loss).sum::<f64>() / n as f64;
    let radius = cfg.radius(n, budget)?;
    let upper = (r_hat + radius).min(1.0);
    Ok(Certificate {
        t,
        n,
        r_hat,
        radius,
        upper,
        safe: is_safe_upper(upper, cfg.tau),
    })
}

fn is_safe_upper(upper: f64, tau: f64) -> bool {
    upper <= tau
}

/// Safety gate: the boundary `upper = tau` is safe.
#[must_use]
pub fn is_safe(cert: &Certificate, tau: f64) -> bool {
    is_safe_upper(cert.upper, tau)
}

/// Certificate for a window part of which can never be audited.
///
/// `cert` bounds the risk over the `audited_population` members that were
/// eligible for audit; each of the `excluded` members is charged loss 1, so
/// the result bounds the risk over the whole window with the same validity.
#[must_use]
pub fn with_unauditable(cert: &Certificate, audited_population: u64, excluded: u64, tau: f64) -> Certificate {
    if excluded == 0 {
        return *cert;
    }
    if audited_population == 0 || cert.n == 0 {
        return Certificate::vacuous(cert.t);
    }
    let total = (audited_population + excluded) as f64;
    let share = audited_population as f64 / total;
    let r_hat = share * cert.r_hat + excluded as f64 / total;
    let radius = share * cert.radius;
    let upper = (r_hat + radius).min(1.0);
    Certificate {
        t: cert.t,
        n: cert.n,
        r_hat,
        radius,
        upper,
        safe: is_safe_upper(upper, tau),
    }
}

/// Bound on risk conditional on acceptance, built from a mass upper bound and
/// a coverage lower bound that each spend half of the step budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectiveCertificate {
    pub t: u64,
    pub n: u64,
    /// Mean of `loss * accepted`.
    pub mass_hat: f64,
    /// Mean of `accepted`.
    pub coverage_hat: f64,
    pub mass_upper: f64,
    pub coverage_lower: f64,
    /// `min(1, mass_upper / max(coverage_lower, kappa_min))`.
    pub upper: f64,
}

/// Anytime-valid upper bound on selective risk.
pub fn selective_certificate(
    samples: &[AuditSample],
    t: u64,
    cfg: &CertConfig,
) -> Result<SelectiveCertificate> {
    cfg.validate()?;
    let side_budget = time_delta(t, cfg.delta)? / 2.0;
    validate_samples(samples, cfg)?;
    if samples.is_empty() {
        return Ok(SelectiveCertificate {
            t,
            n: 0,
            mass_hat: 0.0,
            coverage_hat: 0.0,
            mass_upper: 1.0,
            coverage_lower: 0.0,
            upper: 1.0,
        });
    }
    let n = samples.len() as u64;
    let (mass_sum, accepted_sum) = samples.iter().fold((0.0, 0.0), |(m, k), s| {
        let a = if s.accepted { 1.0 } else { 0.0 };
        (m + s.loss * a, k + a)
    });
    let mass_hat = mass_sum / n as f64;
    let coverage_hat = accepted_sum / n as f64;
    let radius = cfg.radius(n, side_budget)?;
    let mass_upper = mass_hat + radius;
    let coverage_lower = coverage_hat - radius;
    let upper = (mass_upper / coverage_lower.max(cfg.kappa_min)).min(1.0);
    Ok(SelectiveCertificate {
        t,
        n,
        mass_hat,
        coverage_hat,
        mass_upper,
        coverage_lower,
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(mode: SamplingMode) -> CertConfig {
        CertConfig::new(0.05, 0.2, 1024, mode, 0.5).unwrap()
    }

    #[test]
    fn stitched_share_closed_form() {
        assert_abs_diff_eq!(stitched_delta_n(1, 0.05).unwrap(), 0.030_396_355_092_701_33, epsilon = 1e-15);
        let one = stitched_delta_n(1, 0.05).unwrap();
        assert_abs_diff_eq!(stitched_delta_n(2, 0.05).unwrap(), one / 4.0, epsilon = 1e-17);
        assert!(stitched_delta_n(0, 0.05).is_err());
        assert!(stitched_delta_n(1, 1.0).is_err());
        assert!(stitched_delta_n(1, 0.0).is_err());
        assert!(time_delta(0, 0.05).is_err());
    }

    #[test]
    fn radii_match_closed_form() {
        assert_abs_diff_eq!(hoeffding_radius(1, 0.05).unwrap(), 1.321_633_946_299_945_9, epsilon = 1e-12);
        assert_abs_diff_eq!(hoeffding_radius(100, 0.05).unwrap(), 0.252_029_491_806_027_7, epsilon = 1e-12);
        assert_abs_diff_eq!(hoeffding_radius(1000, 0.05).unwrap(), 0.093_029_412_375_842_2, epsilon = 1e-12);
        assert_abs_diff_eq!(serfling_radius(512, 1024, 0.05).unwrap(), 0.088_391_864_860_521_4, epsilon = 1e-12);
        assert_abs_diff_eq!(hoeffding_radius(512, 0.05).unwrap(), 0.124_883_077_449_686_7, epsilon = 1e-12);
        assert_eq!(serfling_radius(1, 37, 0.05).unwrap(), hoeffding_radius(1, 0.05).unwrap());
        assert!(serfling_radius(65, 64, 0.05).is_err());
        assert!(hoeffding_radius(0, 0.05).is_err());
    }

    #[test]
    fn full_window_correction_is_inverse_window() {
        let n = 64;
        let full = serfling_radius(n, n, 0.05).unwrap();
        let plain = hoeffding_radius(n, 0.05).unwrap();
        assert_abs_diff_eq!(full * full, plain * plain / n as f64, epsilon = 1e-15);
    }

    #[test]
    fn zero_loss_certificate_uses_double_stitching() {
        let samples: Vec<_> = (0..100).map(|i| AuditSample::new(i, 0.0, true)).collect();
        let cert = compute_certificate(&samples, 1, &cfg(SamplingMode::WithReplacement)).unwrap();
        assert_eq!(cert.n, 100);
        assert_eq!(cert.r_hat, 0.0);
        assert_abs_diff_eq!(cert.radius, 0.256_918_987_722_508_2, epsilon = 1e-12);
        assert_abs_diff_eq!(cert.upper, 0.256_918_987_722_508_2, epsilon = 1e-12);
        assert!(!cert.safe);
    }

    #[test]
    fn empty_audit_set_is_vacuous() {
        let cert = compute_certificate(&[], 5, &cfg(SamplingMode::WithReplacement)).unwrap();
        assert_eq!(cert.upper, 1.0);
        assert!(!cert.safe);
        assert_eq!(cert.n, 0);
    }

    #[test]
    fn certificate_rejects_bad_inputs() {
        let c = cfg(SamplingMode::WithReplacement);
        assert!(compute_certificate(&[AuditSample::new(0, 1.5, true)], 1, &c).is_err());
        assert!(compute_certificate(&[AuditSample::new(0, -0.1, true)], 1, &c).is_err());
        assert!(compute_certificate(&[AuditSample::new(0, 0.1, true)], 0, &c).is_err());
    }

    #[test]
    fn duplicates_depend_on_sampling_mode() {
        let dup = [AuditSample::new(3, 1.0, true), AuditSample::new(3, 1.0, true)];
        let with = compute_certificate(&dup, 2, &cfg(SamplingMode::WithReplacement)).unwrap();
        assert_eq!(with.n, 2);
        assert_eq!(with.r_hat, 1.0);
        assert!(compute_certificate(&dup, 2, &cfg(SamplingMode::WithoutReplacement)).is_err());
    }

    #[test]
    fn upper_is_clipped_at_one() {
        let samples = [AuditSample::new(0, 1.0, true)];
        let cert = compute_certificate(&samples, 3, &cfg(SamplingMode::WithReplacement)).unwrap();
        assert_eq!(cert.upper, 1.0);
    }

    #[test]
    fn gate_boundary_is_safe() {
        let mut cert = Certificate::vacuous(1);
        cert.upper = 0.15;
        assert!(is_safe(&cert, 0.20));
        cert.upper = 0.20;
        assert!(is_safe(&cert, 0.20));
        cert.upper = 1.0;
        assert!(!is_safe(&cert, 0.20));
    }

    #[test]
    fn selective_bound_worked_example() {
        let samples: Vec<_> = (0..100).map(|i| AuditSample::new(i, 0.0, true)).collect();
        let sel = selective_certificate(&samples, 1, &cfg(SamplingMode::WithReplacement)).unwrap();
        assert_abs_diff_eq!(sel.mass_upper, 0.263_577_506_921_888_25, epsilon = 1e-12);
        assert_abs_diff_eq!(sel.coverage_lower, 0.736_422_493_078_111_7, epsilon = 1e-12);
        assert_abs_diff_eq!(sel.upper, 0.357_916_154_652_178_4, epsilon = 1e-12);
    }

    #[test]
    fn selective_denominator_clamps_to_kappa_min() {
        let samples: Vec<_> = (0..10).map(|i| AuditSample::new(i, 0.0, true)).collect();
        let sel = selective_certificate(&samples, 1, &cfg(SamplingMode::WithReplacement)).unwrap();
        assert!(sel.coverage_lower < 0.5);
        assert_abs_diff_eq!(sel.upper, (sel.mass_upper / 0.5).min(1.0), epsilon = 1e-15);
        let empty = selective_certificate(&[], 1, &cfg(SamplingMode::WithReplacement)).unwrap();
        assert_eq!(empty.upper, 1.0);
    }

    #[test]
    fn selective_budget_halves_sum_to_step_budget() {
        for t in 1..50 {
            let step = time_delta(t, 0.05).unwrap();
            let half = 3.0 * 0.05 / (PI * PI * (t as f64).powi(2));
            assert_abs_diff_eq!(2.0 * half, step, epsilon = 1e-17);
        }
    }

    #[test]
    fn unauditable_members_are_charged_full_loss() {
        let cert = Certificate {
            t: 3,
            n: 10,
            r_hat: 0.1,
            radius: 0.05,
            upper: 0.15,
            safe: true,
        };
        assert_eq!(with_unauditable(&cert, 30, 0, 0.2), cert);
        let out = with_unauditable(&cert, 30, 10, 0.2);
        assert_abs_diff_eq!(out.r_hat, 0.75 * 0.1 + 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(out.radius, 0.75 * 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(out.upper, 0.3625, epsilon = 1e-15);
        assert!(!out.safe);
        assert_eq!(with_unauditable(&cert, 0, 5, 0.2).upper, 1.0);
    }
}
