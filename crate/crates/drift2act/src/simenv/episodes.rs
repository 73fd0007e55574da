//! Labeled evidence sequences for fitting the belief model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::evidence::{confidence_pairs, EvidenceConfig, EvidencePipeline};
use super::model::{train_softmax, ModelParams, TrainConfig};
use super::{derive_rng, DriftPattern, RngPurpose, Stream, StreamConfig, SyntheticExample};
use crate::belief::{DriftType, Episode, EpisodeDataset, EpisodeStep};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Number of episodes `M`; drift types are assigned round-robin.
    pub count: usize,
    /// Steps per episode `L`.
    pub length: u64,
    /// Inclusive range of onset steps.
    pub onset_range: (u64, u64),
    /// Evidence is recorded every `stride` steps.
    pub stride: u64,
    pub stream: StreamConfig,
    pub evidence: EvidenceConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            count: 40,
            length: 300,
            onset_range: (75, 150),
            stride: 1,
            stream: StreamConfig::default(),
            evidence: EvidenceConfig::default(),
        }
    }
}

/// Launch model trained on the nominal training split of `stream`.
pub fn launch_model(stream: &Stream) -> Result<ModelParams> {
    let labeled: Vec<(&[f64], usize)> = stream.training.iter().map(|e| (e.x.as_slice(), e.y)).collect();
    let mut rng = derive_rng(stream.cfg.seed, RngPurpose::Training, 1);
    train_softmax(&labeled, stream.cfg.classes, stream.cfg.dim, &TrainConfig::default(), &mut rng)
}

/// Examples of steps `lo..=hi` clipped to the stream.
fn span(stream: &Stream, lo: i64, hi: i64) -> impl Iterator<Item = &SyntheticExample> {
    let lo = lo.max(1) as u64;
    let hi = hi.min(stream.examples.len() as i64);
    let hi = if hi < 1 { 0 } else { hi as u64 };
    (lo..=hi).map(move |t| stream.at(t))
}

/// Balanced episodes of standardized evidence labeled with the true drift type.
pub fn generate_episodes(cfg: &EpisodeConfig, seed: u64) -> Result<EpisodeDataset> {
    let (lo, hi) = cfg.onset_range;
    if cfg.count == 0 || cfg.stride == 0 || lo > hi || hi > cfg.length {
        return Err(Error::invalid("episodes", "need count >= 1, stride >= 1 and an onset range inside the episode"));
    }
    let window = cfg.evidence.window as u64;
    if window < 2 || window > cfg.length {
        return Err(Error::invalid("episodes", "monitor window must fit inside an episode"));
    }
    let base = StreamConfig {
        length: cfg.length,
        onset: lo.max(1),
        seed,
        ..cfg.stream.clone()
    };
    let base_stream = Stream::generate(&StreamConfig {
        drift_type: DriftType::None,
        ..base.clone()
    })?;
    let model = launch_model(&base_stream)?;
    let pipeline = EvidencePipeline::build(&base_stream, &model, &cfg.evidence)?;
    let delay = base.delay as i64;
    let n = window as i64;
    let mut episodes = Vec::with_capacity(cfg.count);
    for e in 0..cfg.count {
        let drift = DriftType::ALL[e % DriftType::ALL.len()];
        let mut rng = derive_rng(seed, RngPurpose::Episodes, e as u64);
        let onset = rng.random_range(lo..=hi);
        let stream = Stream::generate(&StreamConfig {
            pattern: DriftPattern::Sudden,
            onset,
            drift_type: drift,
            seed: rng.random(),
            ..base.clone()
        })?;
        let mut episode = Episode::default();
        let mut onset_pos = None;
        let mut t = window;
        while t <= cfg.length {
            let ti = t as i64;
            let recent: Vec<&SyntheticExample> = span(&stream, ti - n + 1, ti).collect();
            let labeled = confidence_pairs(&model, span(&stream, ti - delay - n + 1, ti - delay));
            let evidence = pipeline.evaluate(&recent, &labeled, &model, rng.random())?;
            if t >= onset && onset_pos.is_none() {
                onset_pos = Some(episode.steps.len());
            }
            let label = if t >= onset { drift } else { DriftType::None };
            episode.steps.push(EpisodeStep {
                evidence: evidence.standardized,
                label,
            });
            t += cfg.stride;
        }
        episode.onset = onset_pos.unwrap_or(episode.steps.len());
        episodes.push(episode);
    }
    Ok(EpisodeDataset { episodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_episode_set_is_balanced_and_labeled() {
        let cfg = EpisodeConfig {
            count: 5,
            length: 120,
            onset_range: (80, 100),
            stride: 10,
            evidence: EvidenceConfig {
                calibration_windows: 4,
                ..EvidenceConfig::default()
            },
            ..EpisodeConfig::default()
        };
        let data = generate_episodes(&cfg, 7).unwrap();
        assert_eq!(data.episodes.len(), 5);
        for (i, ep) in data.episodes.iter().enumerate() {
            let drift = DriftType::ALL[i % 4];
            for (k, s) in ep.steps.iter().enumerate() {
                let expected = if k >= ep.onset { drift } else { DriftType::None };
                assert_eq!(s.label, expected);
                assert_eq!(s.evidence.len(), 5);
            }
        }
        assert_eq!(data, generate_episodes(&cfg, 7).unwrap());
    }
}
