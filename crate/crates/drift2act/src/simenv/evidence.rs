//! Monitor evaluation over stream windows through the deployed model.

use serde::{Deserialize, Serialize};

use super::model::ModelParams;
use super::{nominal_examples, RngPurpose, Stream, SyntheticExample};
use crate::error::Result;
use crate::monitors::{
    self, entropy_unchecked, EmbeddingWindow, EvidenceVector, MonitorMask, MonitorSuite, RecentView, ReferenceStats,
    WindowOrigin, MONITOR_COUNT,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceConfig {
    /// Recent window size `n`.
    pub window: usize,
    /// Nominal windows used to fit the standardization.
    pub calibration_windows: usize,
    pub epsilon: f64,
    pub mask: MonitorMask,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        Self {
            window: 64,
            calibration_windows: 24,
            epsilon: 1e-6,
            mask: MonitorMask::default(),
        }
    }
}

/// Reference caches and standardization for one stream.
#[derive(Debug, Clone)]
pub struct EvidencePipeline {
    suite: MonitorSuite,
    stats: ReferenceStats,
    mask: MonitorMask,
}

/// `(confidence, correct)` of `model` on labeled examples.
pub fn confidence_pairs<'a>(model: &ModelParams, labeled: impl IntoIterator<Item = &'a SyntheticExample>) -> Vec<(f64, bool)> {
    labeled
        .into_iter()
        .map(|e| {
            let p = model.probs(&e.x);
            let conf = p.iter().copied().fold(0.0, f64::max).min(1.0);
            (conf, model.predict(&e.x) == e.y)
        })
        .collect()
}

fn tagged_window(examples: &[&SyntheticExample], origin: WindowOrigin) -> Result<EmbeddingWindow> {
    let dim = examples.first().map_or(1, |e| e.x.len());
    let mut w = EmbeddingWindow::new(dim, origin)?;
    for e in examples {
        w.push_tagged(&e.x, e.group)?;
    }
    Ok(w)
}

/// Calibration error and mean entropy of `model` on the reference buffer.
fn reference_levels(model: &ModelParams, reference: &[SyntheticExample]) -> Result<(f64, f64)> {
    let pairs = confidence_pairs(model, reference);
    let ece = monitors::streaming_ece(&pairs, monitors::ECE_BINS)?.value;
    let ent = reference.iter().map(|e| entropy_unchecked(&model.probs(&e.x))).sum::<f64>() / reference.len() as f64;
    Ok((ece, ent))
}

impl EvidencePipeline {
    /// Fits reference levels and standardization from nominal data only.
    pub fn build(stream: &Stream, model: &ModelParams, cfg: &EvidenceConfig) -> Result<Self> {
        let refs: Vec<&SyntheticExample> = stream.reference.iter().collect();
        let suite = MonitorSuite::new(tagged_window(&refs, WindowOrigin::Reference)?)?;
        let (ece_ref, ent_ref) = reference_levels(model, &stream.reference)?;
        let mut pipeline = Self {
            suite,
            stats: ReferenceStats::fit(&[[0.0; MONITOR_COUNT]], cfg.epsilon, ece_ref, ent_ref)?,
            mask: cfg.mask,
        };
        let mut raw = Vec::with_capacity(cfg.calibration_windows);
        for k in 0..cfg.calibration_windows {
            let window = nominal_examples(&stream.generator, &stream.cfg, cfg.window, RngPurpose::Calibration, k as u64);
            let recent: Vec<&SyntheticExample> = window.iter().collect();
            let labeled = confidence_pairs(model, window.iter());
            raw.push(pipeline.raw(&recent, &labeled, model, k as u64)?);
        }
        pipeline.stats = ReferenceStats::fit(&raw, cfg.epsilon, ece_ref, ent_ref)?;
        Ok(pipeline)
    }

    #[must_use]
    pub fn stats(&self) -> &ReferenceStats {
        &self.stats
    }

    /// Re-anchors the calibration and entropy baselines after a model change.
    pub fn refresh_reference_levels(&mut self, model: &ModelParams, stream: &Stream) -> Result<()> {
        let (ece, ent) = reference_levels(model, &stream.reference)?;
        self.stats.ece_ref = ece;
        self.stats.mean_entropy_ref = ent;
        Ok(())
    }

    fn raw(
        &self,
        recent: &[&SyntheticExample],
        labeled: &[(f64, bool)],
        model: &ModelParams,
        seed: u64,
    ) -> Result<[f64; MONITOR_COUNT]> {
        let window = tagged_window(recent, WindowOrigin::Recent)?;
        let probs: Vec<Vec<f64>> = recent.iter().map(|e| model.probs(&e.x)).collect();
        let view = RecentView {
            window: &window,
            probs: &probs,
            labeled,
        };
        self.suite.evaluate(&view, self.stats.ece_ref, self.stats.mean_entropy_ref, seed)
    }

    /// Standardized evidence for a recent window and its labeled pairs.
    pub fn evaluate(
        &self,
        recent: &[&SyntheticExample],
        labeled: &[(f64, bool)],
        model: &ModelParams,
        seed: u64,
    ) -> Result<EvidenceVector> {
        let raw = EvidenceVector::from_raw(self.raw(recent, labeled, model, seed)?);
        Ok(monitors::standardize_masked(&raw, &self.stats, self.mask))
    }
}
