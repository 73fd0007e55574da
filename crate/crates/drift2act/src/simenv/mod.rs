//! Deterministic synthetic stream with drift schedules and delayed labels.
//!
//! Nominal data are `C` equiprobable unit-covariance Gaussian clusters whose
//! means sit on a scaled simplex in the first `C` coordinates. At step `t` an
//! example comes from the drifted generator with probability `alpha_t`.
//! Every random draw is made regardless of `alpha_t`, so two configurations
//! that differ only in schedule or drift type share one realization.

pub mod calibrate;
pub mod episodes;
pub mod evidence;
pub mod model;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::belief::DriftType;
use crate::error::{Error, Result};

pub use calibrate::{calibrate_gain_table, CalibrationConfig};
pub use episodes::{generate_episodes, EpisodeConfig};
pub use evidence::EvidencePipeline;
pub use model::{
    act_recalibrate, act_retrain, act_rollback, act_tta, model_predict, Checkpoint, ModelParams, SurrogateModel,
    TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriftPattern {
    Sudden,
    Gradual,
    Recurring,
}

impl DriftPattern {
    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            DriftPattern::Sudden => "sudden",
            DriftPattern::Gradual => "gradual",
            DriftPattern::Recurring => "recurring",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [DriftPattern::Sudden, DriftPattern::Gradual, DriftPattern::Recurring]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid("pattern", format!("unknown pattern {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Number of steps `T`.
    pub length: u64,
    pub dim: usize,
    pub classes: usize,
    pub pattern: DriftPattern,
    /// Onset `t0` for sudden drift, ramp midpoint for gradual drift.
    pub onset: u64,
    /// Sigmoid slope of the gradual ramp.
    pub ramp: f64,
    /// Period of the recurring schedule.
    pub period: u64,
    /// Label delay `d`: the label of example `i` arrives at `i + d`.
    pub delay: u64,
    pub p_sub: f64,
    pub drift_type: DriftType,
    pub seed: u64,
    /// Distance scale of the cluster means.
    pub cluster_scale: f64,
    /// Norm of the covariate offset vector.
    pub shift_norm: f64,
    /// Norm of the offset applied to the subgroup only.
    pub subgroup_shift_norm: f64,
    /// Nominal examples collected before the first step.
    pub reference_size: usize,
    /// Nominal examples used to train the launch model.
    pub train_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            length: 4000,
            dim: 16,
            classes: 4,
            pattern: DriftPattern::Sudden,
            onset: 200,
            ramp: 0.05,
            period: 1000,
            delay: 50,
            p_sub: 0.15,
            drift_type: DriftType::Covariate,
            seed: 0,
            cluster_scale: 2.9,
            shift_norm: 2.5,
            subgroup_shift_norm: 4.0,
            reference_size: 512,
            train_size: 2000,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("stream", detail));
        if self.length == 0 {
            return bad("length must be at least 1".into());
        }
        if self.classes < 2 || self.dim < self.classes {
            return bad(format!("need 2 <= classes <= dim, got {} and {}", self.classes, self.dim));
        }
        if matches!(self.pattern, DriftPattern::Sudden | DriftPattern::Gradual)
            && !(1..=self.length).contains(&self.onset)
        {
            return bad(format!("onset {} outside 1..={}", self.onset, self.length));
        }
        if self.period < 2 {
            return bad(format!("period {} must be at least 2", self.period));
        }
        if !(self.p_sub > 0.0 && self.p_sub < 1.0) {
            return bad(format!("p_sub {} not in (0, 1)", self.p_sub));
        }
        if !(self.ramp > 0.0) || !(self.cluster_scale > 0.0) {
            return bad("ramp and cluster_scale must be positive".into());
        }
        if !(self.shift_norm >= 0.0) || !(self.subgroup_shift_norm >= 0.0) {
            return bad("shift norms must be nonnegative".into());
        }
        if self.reference_size < 4 || self.train_size < self.classes {
            return bad("reference and training sets are too small".into());
        }
        Ok(())
    }

    /// Steps at which a drift event begins.
    #[must_use]
    pub fn onsets(&self) -> Vec<u64> {
        match self.pattern {
            DriftPattern::Sudden | DriftPattern::Gradual => vec![self.onset],
            DriftPattern::Recurring => (1..).map(|k| k * self.period).take_while(|&t| t <= self.length).collect(),
        }
    }
}

/// Mixture weight of the drifted generator at step `t`.
#[must_use]
pub fn alpha_at(t: u64, cfg: &StreamConfig) -> f64 {
    match cfg.pattern {
        DriftPattern::Sudden => {
            if t >= cfg.onset {
                1.0
            } else {
                0.0
            }
        }
        DriftPattern::Gradual => 1.0 / (1.0 + (-cfg.ramp * (t as f64 - cfg.onset as f64)).exp()),
        DriftPattern::Recurring => 0.5 * (1.0 + (2.0 * PI * t as f64 / cfg.period as f64).sin()),
    }
}

/// Seeded generator for one `(seed, purpose, index)` triple.
#[must_use]
pub fn derive_rng(seed: u64, purpose: RngPurpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngPurpose {
    Stream = 1,
    Reference = 2,
    Training = 3,
    Calibration = 4,
    Audit = 5,
    Monitors = 6,
    Retrain = 7,
    Noise = 8,
    Episodes = 9,
    Replica = 10,
}

/// One example of the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub t: u64,
    pub x: Vec<f64>,
    pub y: usize,
    /// Slice flag, 0 or 1.
    pub group: u32,
    /// Step at which the label becomes visible.
    pub arrival: u64,
    /// Drawn from the drifted generator.
    pub drifted: bool,
}

/// Cluster means and drift operators shared by every draw of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub means: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
    pub subgroup_shift: Vec<f64>,
    pub permutation: Vec<usize>,
}

impl Generator {
    pub fn new(cfg: &StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.classes;
        let means = (0..c)
            .map(|k| {
                let mut m = vec![0.0; cfg.dim];
                for (j, v) in m.iter_mut().enumerate().take(c) {
                    let simplex = if j == k { 1.0 } else { 0.0 } - 1.0 / c as f64;
                    *v = cfg.cluster_scale * simplex;
                }
                m
            })
            .collect();
        let mut shift = vec![0.0; cfg.dim];
        shift[0] = cfg.shift_norm;
        let mut subgroup_shift = vec![0.0; cfg.dim];
        subgroup_shift[0] = cfg.subgroup_shift_norm;
        // Swaps the first two classes.
        let mut permutation: Vec<usize> = (0..c).collect();
        permutation.swap(0, 1);
        Ok(Self {
            means,
            shift,
            subgroup_shift,
            permutation,
        })
    }

    /// Nominal `(x, y)`.
    pub fn nominal<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let y = rng.random_range(0..self.means.len());
        let x = self.means[y]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, y)
    }
}

/// Covariate operator `x + alpha * v`.
#[must_use]
pub fn apply_covariate(x: &[f64], alpha: f64, generator: &Generator) -> Vec<f64> {
    x.iter().zip(&generator.shift).map(|(a, v)| a + alpha * v).collect()
}

/// Label permuted with probability `alpha`.
pub fn apply_concept<R: Rng>(y: usize, alpha: f64, perm: &[usize], rng: &mut R) -> Result<usize> {
    check_permutation(perm)?;
    if y >= perm.len() {
        return Err(Error::invalid("label", format!("{y} outside {} classes", perm.len())));
    }
    Ok(if rng.random::<f64>() < alpha { perm[y] } else { y })
}

fn check_permutation(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::invalid("permutation", format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    if perm.iter().enumerate().filter(|(i, p)| i != *p).count() < 2 {
        return Err(Error::invalid("permutation", "must move at least two classes"));
    }
    Ok(())
}

/// Subgroup members get the stronger offset at intensity `alpha`; others are untouched.
#[must_use]
pub fn apply_subgroup(x: &[f64], group: u32, alpha: f64, generator: &Generator) -> Vec<f64> {
    if group == 0 {
        return x.to_vec();
    }
    x.iter().zip(&generator.subgroup_shift).map(|(a, v)| a + alpha * v).collect()
}

/// Draws the example of step `t`.
pub fn sample_example<R: Rng>(t: u64, cfg: &StreamConfig, generator: &Generator, rng: &mut R) -> Result<SyntheticExample> {
    let (x, y) = generator.nominal(rng);
    let group = u32::from(rng.random::<f64>() < cfg.p_sub);
    let drifted = rng.random::<f64>() < alpha_at(t, cfg);
    let (x, y) = if drifted {
        match cfg.drift_type {
            DriftType::None => (x, y),
            DriftType::Covariate => (apply_covariate(&x, 1.0, generator), y),
            DriftType::Concept => {
                check_permutation(&generator.permutation)?;
                (x, generator.permutation[y])
            }
            DriftType::Subgroup => (apply_subgroup(&x, group, 1.0, generator), y),
        }
    } else {
        (x, y)
    };
    Ok(SyntheticExample {
        t,
        x,
        y,
        group,
        arrival: t.saturating_add(cfg.delay),
        drifted: drifted && cfg.drift_type != DriftType::None,
    })
}

/// Pre-drawn data of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub cfg: StreamConfig,
    pub generator: Generator,
    /// `examples[i]` is step `i + 1`.
    pub examples: Vec<SyntheticExample>,
    /// Nominal labeled buffer collected before step 1.
    pub reference: Vec<SyntheticExample>,
    /// Nominal data for the launch model.
    pub training: Vec<SyntheticExample>,
}

impl Stream {
    pub fn generate(cfg: &StreamConfig) -> Result<Self> {
        let generator = Generator::new(cfg)?;
        let mut rng = derive_rng(cfg.seed, RngPurpose::Stream, 0);
        let examples = (1..=cfg.length)
            .map(|t| sample_example(t, cfg, &generator, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let reference = nominal_examples(&generator, cfg, cfg.reference_size, RngPurpose::Reference, 0);
        let training = nominal_examples(&generator, cfg, cfg.train_size, RngPurpose::Training, 0);
        Ok(Self {
            cfg: cfg.clone(),
            generator,
            examples,
            reference,
            training,
        })
    }

    /// Example of step `t` (1-based).
    #[must_use]
    pub fn at(&self, t: u64) -> &SyntheticExample {
        &self.examples[(t - 1) as usize]
    }
}

/// `count` nominal examples with step 0, drawn from their own stream.
#[must_use]
pub fn nominal_examples(
    generator: &Generator,
    cfg: &StreamConfig,
    count: usize,
    purpose: RngPurpose,
    index: u64,
) -> Vec<SyntheticExample> {
    let mut rng = derive_rng(cfg.seed, purpose, index);
    (0..count)
        .map(|_| {
            let (x, y) = generator.nominal(&mut rng);
            let group = u32::from(rng.random::<f64>() < cfg.p_sub);
            SyntheticExample {
                t: 0,
                x,
                y,
                group,
                arrival: 0,
                drifted: false,
            }
        })
        .collect()
}

/// Labels waiting for their arrival step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DelayQueue {
    pending: BTreeMap<u64, (usize, u64)>,
}

impl DelayQueue {
    pub fn push(&mut self, index: u64, label: usize, arrival: u64) {
        self.pending.insert(index, (label, arrival));
    }

    /// Label of `index` if it has arrived by step `t`.
    #[must_use]
    pub fn visible(&self, index: u64, t: u64) -> Option<usize> {
        self.pending
            .get(&index)
            .and_then(|&(label, arrival)| (arrival <= t).then_some(label))
    }

    /// Whether `index` was ever requested.
    #[must_use]
    pub fn contains(&self, index: u64) -> bool {
        self.pending.contains_key(&index)
    }

    /// `(index, label)` pairs visible at `t`, in index order.
    pub fn visible_at(&self, t: u64) -> impl Iterator<Item = (u64, usize)> + '_ {
        self.pending
            .iter()
            .filter(move |(_, &(_, a))| a <= t)
            .map(|(&i, &(label, _))| (i, label))
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.pending.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Acceptance function: predict iff the top probability reaches `threshold`.
#[must_use]
pub fn abstain_rule(probs: &[f64], threshold: f64) -> bool {
    probs.iter().copied().fold(0.0, f64::max) >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedules() {
        let mut cfg = StreamConfig {
            pattern: DriftPattern::Gradual,
            onset: 100,
            ..StreamConfig::default()
        };
        assert_eq!(alpha_at(100, &cfg), 0.5);
        cfg.pattern = DriftPattern::Recurring;
        assert_abs_diff_eq!(alpha_at(0, &cfg), 0.5, epsilon = 1e-15);
        cfg.pattern = DriftPattern::Sudden;
        assert_eq!(alpha_at(99, &cfg), 0.0);
        assert_eq!(alpha_at(100, &cfg), 1.0);
    }

    #[test]
    fn concept_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let perm = [1, 0, 2, 3];
        assert_eq!(apply_concept(2, 1.0, &perm, &mut rng).unwrap(), 2);
        assert_eq!(apply_concept(0, 1.0, &perm, &mut rng).unwrap(), 1);
        assert_eq!(apply_concept(0, 0.0, &perm, &mut rng).unwrap(), 0);
        assert!(apply_concept(0, 1.0, &[0, 1, 2], &mut rng).is_err());
        assert!(apply_concept(0, 1.0, &[0, 0, 2], &mut rng).is_err());
        let moved = (0..10_000)
            .filter(|_| apply_concept(0, 0.5, &perm, &mut rng).unwrap() == 1)
            .count();
        assert!((moved as f64 / 1e4 - 0.5).abs() < 0.02);
    }

    #[test]
    fn subgroup_operator() {
        let g = Generator::new(&StreamConfig::default()).unwrap();
        let x = vec![0.5; 16];
        assert_eq!(apply_subgroup(&x, 0, 1.0, &g), x);
        assert_eq!(apply_subgroup(&x, 1, 0.0, &g), x);
        assert_eq!(apply_subgroup(&x, 1, 1.0, &g)[0], 4.5);
    }

    #[test]
    fn delay_queue_visibility() {
        let mut q = DelayQueue::default();
        q.push(3, 1, 53);
        assert_eq!(q.visible(3, 52), None);
        assert_eq!(q.visible(3, 53), Some(1));
        assert_eq!(q.visible_at(60).collect::<Vec<_>>(), vec![(3, 1)]);
    }

    #[test]
    fn abstain_examples() {
        assert!(abstain_rule(&[0.9, 0.1], 0.6));
        assert!(!abstain_rule(&[0.25; 4], 0.6));
        assert!(abstain_rule(&[0.25; 4], 0.0));
    }

    #[test]
    fn streams_are_reproducible_and_aligned() {
        let cfg = StreamConfig {
            length: 300,
            ..StreamConfig::default()
        };
        let a = Stream::generate(&cfg).unwrap();
        assert_eq!(a, Stream::generate(&cfg).unwrap());
        let none = Stream::generate(&StreamConfig {
            drift_type: DriftType::None,
            ..cfg.clone()
        })
        .unwrap();
        for t in 1..cfg.onset {
            assert_eq!(a.at(t), none.at(t));
        }
        assert!(a.examples.iter().all(|e| e.arrival == e.t + 50));
    }
}
