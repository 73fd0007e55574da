//! Gain table from paired counterfactual interventions.
//!
//! For every drift type the same realization is replayed once per action; the
//! gain of an action is the normalized drop in windowed risk `horizon` steps
//! after it was applied, averaged over episodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::episodes::launch_model;
use super::model::{act_recalibrate, act_retrain, act_rollback, act_tta, ModelParams, SurrogateModel, TrainConfig};
use super::{abstain_rule, derive_rng, DriftPattern, RngPurpose, Stream, StreamConfig, SyntheticExample};
use crate::belief::{DriftType, TYPE_COUNT};
use crate::controller::{Action, GainTable, ACTION_COUNT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub episodes_per_type: usize,
    /// Steps between the intervention and the risk measurement.
    pub horizon: u64,
    /// Risk scale dividing every gain.
    pub sigma_r: f64,
    /// Certificate window length `N`.
    pub window: u64,
    /// Recent inputs used by test-time adaptation.
    pub recent: u64,
    pub tta_steps: usize,
    pub tta_learning_rate: f64,
    pub selective_threshold: f64,
    pub onset: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            episodes_per_type: 4,
            horizon: 100,
            sigma_r: 0.10,
            window: 256,
            recent: 64,
            tta_steps: 5,
            tta_learning_rate: 1e-2,
            selective_threshold: 0.6,
            onset: 100,
        }
    }
}

/// Plain or selective 0-1 risk of `model` on `examples`.
fn risk(model: &ModelParams, examples: &[&SyntheticExample], selective: Option<f64>) -> f64 {
    let mut wrong = 0usize;
    let mut counted = 0usize;
    for e in examples {
        if let Some(th) = selective {
            if !abstain_rule(&model.probs(&e.x), th) {
                continue;
            }
        }
        counted += 1;
        if model.predict(&e.x) != e.y {
            wrong += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        wrong as f64 / counted as f64
    }
}

/// Risk `horizon` steps after applying `action` at the intervention step.
fn counterfactual_risk(
    action: Action,
    stream: &Stream,
    launch: &ModelParams,
    at: u64,
    cal: &CalibrationConfig,
    episode: u64,
) -> Result<f64> {
    let d = stream.cfg.delay;
    let labeled_lo = at.saturating_sub(d + cal.window - 1).max(1);
    let labeled: Vec<(&[f64], usize)> = if at > d {
        (labeled_lo..=at - d).map(|t| (stream.at(t).x.as_slice(), stream.at(t).y)).collect()
    } else {
        Vec::new()
    };
    let recent: Vec<&[f64]> = (at.saturating_sub(cal.recent - 1).max(1)..=at).map(|t| stream.at(t).x.as_slice()).collect();
    let mut model = SurrogateModel::launch(launch.clone());
    let mut selective = None;
    match action {
        Action::Noop | Action::QueryLabels => {}
        Action::Recalibrate => {
            act_recalibrate(&mut model, &labeled);
        }
        Action::Tta => {
            act_tta(&mut model, &recent, cal.tta_steps, cal.tta_learning_rate)?;
        }
        Action::Retrain => {
            let mut rng = derive_rng(stream.cfg.seed, RngPurpose::Retrain, episode);
            act_retrain(&mut model, &labeled, &TrainConfig::default(), &mut rng)?;
        }
        Action::Rollback => act_rollback(&mut model),
        Action::Abstain => selective = Some(cal.selective_threshold),
    }
    let end = at + cal.horizon;
    let window: Vec<&SyntheticExample> = (end.saturating_sub(cal.window - 1).max(1)..=end).map(|t| stream.at(t)).collect();
    Ok(risk(model.params(), &window, selective))
}

/// Calibrated gain table; the no-op column is zero by construction.
pub fn calibrate_gain_table(base: &StreamConfig, cal: &CalibrationConfig, seed: u64) -> Result<GainTable> {
    if cal.episodes_per_type == 0 || !(cal.sigma_r > 0.0) || cal.window == 0 || cal.recent == 0 {
        return Err(Error::invalid("calibration", "need episodes, a positive risk scale and nonempty windows"));
    }
    let at = cal.onset + base.delay + cal.recent;
    let mut rows = [[0.0; ACTION_COUNT]; TYPE_COUNT];
    for drift in DriftType::ALL {
        for e in 0..cal.episodes_per_type {
            let cfg = StreamConfig {
                length: at + cal.horizon,
                pattern: DriftPattern::Sudden,
                onset: cal.onset,
                drift_type: drift,
                seed: derive_rng(seed, RngPurpose::Calibration, (drift.index() * cal.episodes_per_type + e) as u64).random(),
                ..base.clone()
            };
            let stream = Stream::generate(&cfg)?;
            let launch = launch_model(&stream)?;
            let baseline = counterfactual_risk(Action::Noop, &stream, &launch, at, cal, e as u64)?;
            for a in Action::ALL.into_iter().skip(1) {
                let r = counterfactual_risk(a, &stream, &launch, at, cal, e as u64)?;
                rows[drift.index()][a.index()] += (baseline - r) / cal.sigma_r / cal.episodes_per_type as f64;
            }
        }
    }
    GainTable::new(rows)
}
