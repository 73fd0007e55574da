//! Label-free and label-light drift monitors.
//!
//! Each monitor compares a recent window against a fixed reference window and
//! contributes one coordinate of the evidence vector, in this order:
//!
//! 1. `mmd2`: unbiased squared MMD with an RBF kernel
//!    `k(u, v) = exp(-|u - v|^2 / (2 sigma^2))`, where `sigma^2` is the median
//!    pairwise squared distance of the pooled pair;
//! 2. `disc_auc`: held-out AUC of a linear logistic discriminator trained to
//!    separate recent (label 1) from reference (label 0) points;
//! 3. `entropy_shift`: mean predictive entropy on the recent window minus the
//!    reference mean;
//! 4. `ece_shift`: binned calibration error on the currently labeled set minus
//!    the reference calibration error;
//! 5. `slice_max_mmd2`: the largest per-group `mmd2` over groups with at least
//!    two points on both sides.
//!
//! Raw values are standardized as `(z - mu) / (sigma + eps)` with statistics
//! fitted on nominal windows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of monitors in the evidence vector.
pub const MONITOR_COUNT: usize = 5;

/// Display names in evidence-vector order.
pub const MONITOR_NAMES: [&str; MONITOR_COUNT] =
    ["mmd2", "disc_auc", "entropy_shift", "ece_shift", "slice_max_mmd2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowOrigin {
    Reference,
    Recent,
}

/// Fixed-dimension point collection, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingWindow {
    dim: usize,
    data: Vec<f64>,
    pub origin: WindowOrigin,
    group_tags: Option<Vec<u32>>,
}

impl EmbeddingWindow {
    pub fn new(dim: usize, origin: WindowOrigin) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "embedding dimension must be positive"));
        }
        Ok(Self {
            dim,
            data: Vec::new(),
            origin,
            group_tags: None,
        })
    }

    /// Builds a window from rows; every row must share one dimension.
    pub fn from_rows(rows: &[Vec<f64>], origin: WindowOrigin) -> Result<Self> {
        let dim = rows.first().map_or(1, Vec::len);
        let mut w = Self::new(dim, origin)?;
        for r in rows {
            w.push(r)?;
        }
        Ok(w)
    }

    /// Builds a tagged window; `tags` must have one entry per row.
    pub fn from_tagged_rows(rows: &[Vec<f64>], tags: &[u32], origin: WindowOrigin) -> Result<Self> {
        if rows.len() != tags.len() {
            return Err(Error::invalid(
                "group_tags",
                format!("{} tags for {} points", tags.len(), rows.len()),
            ));
        }
        let mut w = Self::from_rows(rows, origin)?;
        w.group_tags = Some(tags.to_vec());
        Ok(w)
    }

    pub fn push(&mut self, point: &[f64]) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::invalid(
                "point",
                format!("dimension {} differs from window dimension {}", point.len(), self.dim),
            ));
        }
        if self.group_tags.is_some() {
            return Err(Error::invalid("point", "tagged window requires push_tagged"));
        }
        self.data.extend_from_slice(point);
        Ok(())
    }

    pub fn push_tagged(&mut self, point: &[f64], tag: u32) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::invalid(
                "point",
                format!("dimension {} differs from window dimension {}", point.len(), self.dim),
            ));
        }
        if self.group_tags.is_none() {
            if !self.data.is_empty() {
                return Err(Error::invalid("point", "untagged window cannot take tagged points"));
            }
            self.group_tags = Some(Vec::new());
        }
        self.data.extend_from_slice(point);
        if let Some(tags) = self.group_tags.as_mut() {
            tags.push(tag);
        }
        Ok(())
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[must_use]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    #[must_use]
    pub fn group_tags(&self) -> Option<&[u32]> {
        self.group_tags.as_deref()
    }

    /// Sub-window of the points carrying `tag`; untagged windows yield `None`.
    #[must_use]
    pub fn restrict_to_group(&self, tag: u32) -> Option<Self> {
        let tags = self.group_tags.as_ref()?;
        let mut data = Vec::new();
        let mut kept = Vec::new();
        for (i, &g) in tags.iter().enumerate() {
            if g == tag {
                data.extend_from_slice(self.point(i));
                kept.push(g);
            }
        }
        Some(Self {
            dim: self.dim,
            data,
            origin: self.origin,
            group_tags: Some(kept),
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_same_dim(a: &EmbeddingWindow, b: &EmbeddingWindow) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::invalid(
            "windows",
            format!("dimension mismatch {} vs {}", a.dim, b.dim),
        ));
    }
    Ok(())
}

fn median_of(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

fn bandwidth_from_median(median: f64) -> f64 {
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

/// Median pairwise squared distance over distinct pairs; 1 if all points coincide.
pub fn median_bandwidth(pooled: &EmbeddingWindow) -> Result<f64> {
    let n = pooled.len();
    if n < 2 {
        return Err(Error::invalid("pooled", format!("{n} points, need at least 2")));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist(pooled.point(i), pooled.point(j)));
        }
    }
    Ok(bandwidth_from_median(median_of(&mut d)))
}

/// Median bandwidth of the union of two windows without materializing it.
pub fn pooled_bandwidth(a: &EmbeddingWindow, b: &EmbeddingWindow) -> Result<f64> {
    check_same_dim(a, b)?;
    let n = a.len() + b.len();
    if n < 2 {
        return Err(Error::invalid("pooled", format!("{n} points, need at least 2")));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    within_distances(a, &mut d);
    within_distances(b, &mut d);
    cross_distances(a, b, &mut d);
    Ok(bandwidth_from_median(median_of(&mut d)))
}

fn within_distances(w: &EmbeddingWindow, out: &mut Vec<f64>) {
    let n = w.len();
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(sq_dist(w.point(i), w.point(j)));
        }
    }
}

fn cross_distances(a: &EmbeddingWindow, b: &EmbeddingWindow, out: &mut Vec<f64>) {
    for p in a.points() {
        for q in b.points() {
            out.push(sq_dist(p, q));
        }
    }
}

/// Reference-side quantities that do not change between evaluations.
///
/// Pooled medians and MMD values computed through the cache are identical to
/// [`pooled_bandwidth`] and [`mmd2_unbiased`] on the same inputs.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    reference: EmbeddingWindow,
    sorted_within: Vec<f64>,
}

impl ReferenceCache {
    pub fn new(reference: EmbeddingWindow) -> Result<Self> {
        if reference.len() < 2 {
            return Err(Error::invalid(
                "reference",
                format!("{} points, need at least 2", reference.len()),
            ));
        }
        let mut sorted_within = Vec::new();
        within_distances(&reference, &mut sorted_within);
        sorted_within.sort_unstable_by(f64::total_cmp);
        Ok(Self {
            reference,
            sorted_within,
        })
    }

    #[must_use]
    pub fn reference(&self) -> &EmbeddingWindow {
        &self.reference
    }

    /// Same value as `pooled_bandwidth(recent, reference)`.
    pub fn pooled_bandwidth(&self, recent: &EmbeddingWindow) -> Result<f64> {
        check_same_dim(recent, &self.reference)?;
        let mut dynamic = Vec::new();
        within_distances(recent, &mut dynamic);
        cross_distances(recent, &self.reference, &mut dynamic);
        dynamic.sort_unstable_by(f64::total_cmp);
        let fixed = &self.sorted_within;
        let total = fixed.len() + dynamic.len();
        let mid = total / 2;
        let upper = kth_of_sorted_pair(fixed, &dynamic, mid);
        let median = if total % 2 == 1 {
            upper
        } else {
            0.5 * (kth_of_sorted_pair(fixed, &dynamic, mid - 1) + upper)
        };
        Ok(bandwidth_from_median(median))
    }

    /// Same value as `mmd2_unbiased(recent, reference, sigma2)`.
    pub fn mmd2(&self, recent: &EmbeddingWindow, sigma2: f64) -> Result<f64> {
        check_mmd_inputs(recent, &self.reference, sigma2)?;
        let scale = -0.5 / sigma2;
        let m = self.reference.len() as f64;
        let ref_sum: f64 = self.sorted_within.iter().map(|&d| (d * scale).exp()).sum();
        let within_ref = 2.0 * ref_sum / (m * (m - 1.0));
        Ok(within_mean(recent, scale) + within_ref - 2.0 * cross_mean(recent, &self.reference, scale))
    }
}

/// k-th smallest (0-based) element of the union of two sorted slices.
fn kth_of_sorted_pair(a: &[f64], b: &[f64], k: usize) -> f64 {
    // Binary search on how many elements come from `a`.
    let mut lo = k.saturating_sub(b.len());
    let mut hi = k.min(a.len());
    loop {
        let i = (lo + hi) / 2;
        let j = k - i;
        let a_left = if i > 0 { a[i - 1] } else { f64::NEG_INFINITY };
        let a_right = if i < a.len() { a[i] } else { f64::INFINITY };
        let b_left = if j > 0 { b[j - 1] } else { f64::NEG_INFINITY };
        let b_right = if j < b.len() { b[j] } else { f64::INFINITY };
        if a_left > b_right {
            hi = i - 1;
        } else if b_left > a_right {
            lo = i + 1;
        } else {
            return a_right.min(b_right);
        }
    }
}

fn check_mmd_inputs(recent: &EmbeddingWindow, reference: &EmbeddingWindow, sigma2: f64) -> Result<()> {
    check_same_dim(recent, reference)?;
    if recent.len() < 2 || reference.len() < 2 {
        return Err(Error::invalid(
            "windows",
            format!(
                "unbiased MMD needs 2 points per window, got {} and {}",
                recent.len(),
                reference.len()
            ),
        ));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::invalid("sigma2", format!("{sigma2} is not a positive bandwidth")));
    }
    Ok(())
}

fn within_mean(w: &EmbeddingWindow, scale: f64) -> f64 {
    let n = w.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += (sq_dist(w.point(i), w.point(j)) * scale).exp();
        }
    }
    2.0 * sum / (n as f64 * (n as f64 - 1.0))
}

fn cross_mean(a: &EmbeddingWindow, b: &EmbeddingWindow, scale: f64) -> f64 {
    let mut sum = 0.0;
    for p in a.points() {
        for q in b.points() {
            sum += (sq_dist(p, q) * scale).exp();
        }
    }
    sum / (a.len() as f64 * b.len() as f64)
}

/// Three-term unbiased estimator of squared MMD; may be negative.
pub fn mmd2_unbiased(recent: &EmbeddingWindow, reference: &EmbeddingWindow, sigma2: f64) -> Result<f64> {
    check_mmd_inputs(recent, reference, sigma2)?;
    let scale = -0.5 / sigma2;
    Ok(within_mean(recent, scale) + within_mean(reference, scale) - 2.0 * cross_mean(recent, reference, scale))
}

/// Monitor value plus a flag raised when the statistic fell back to a default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: f64,
    pub degenerate: bool,
}

impl Flagged {
    fn ok(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    fn fallback(value: f64) -> Self {
        Self {
            value,
            degenerate: true,
        }
    }
}

/// Largest per-group MMD; 0 with a flag when no group has 2 points on both sides.
pub fn slice_max_mmd2(recent: &EmbeddingWindow, reference: &EmbeddingWindow, sigma2: f64) -> Result<Flagged> {
    check_same_dim(recent, reference)?;
    let (Some(rt), Some(ft)) = (recent.group_tags(), reference.group_tags()) else {
        return Err(Error::invalid("group_tags", "slice MMD needs tagged windows"));
    };
    let mut groups: Vec<u32> = rt.iter().chain(ft).copied().collect();
    groups.sort_unstable();
    groups.dedup();
    let mut best: Option<f64> = None;
    for g in groups {
        let (Some(r), Some(f)) = (recent.restrict_to_group(g), reference.restrict_to_group(g)) else {
            continue;
        };
        if r.len() < 2 || f.len() < 2 {
            continue;
        }
        let v = mmd2_unbiased(&r, &f, sigma2)?;
        best = Some(best.map_or(v, |b: f64| b.max(v)));
    }
    Ok(best.map_or(Flagged::fallback(0.0), Flagged::ok))
}

/// Mann-Whitney AUC of positive over negative scores with half credit for ties.
#[must_use]
pub fn rank_auc(positive: &[f64], negative: &[f64]) -> f64 {
    if positive.is_empty() || negative.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Average 1-based rank of the tie block.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let np = positive.len() as f64;
    let nn = negative.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Settings of the linear logistic discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Fraction of each window used for training; the rest is held out.
    pub split_fraction: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            split_fraction: 0.5,
            iterations: 60,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

fn split_indices(n: usize, train_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(n);
    let holdout = idx.split_off(n_train);
    (idx, holdout)
}

/// Held-out AUC of a logistic discriminator between the two windows.
///
/// Each window is split separately, so both classes reach the holdout when
/// they have enough points. Classes are weighted equally during training.
pub fn discriminator_auc(
    recent: &EmbeddingWindow,
    reference: &EmbeddingWindow,
    cfg: &DiscriminatorConfig,
    seed: u64,
) -> Result<Flagged> {
    check_same_dim(recent, reference)?;
    if recent.is_empty() || reference.is_empty() {
        return Err(Error::invalid("windows", "discriminator needs nonempty windows"));
    }
    if !(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0) {
        return Err(Error::invalid(
            "split_fraction",
            format!("{} not in (0, 1)", cfg.split_fraction),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos_train, pos_hold) = split_indices(recent.len(), cfg.split_fraction, &mut rng);
    let (neg_train, neg_hold) = split_indices(reference.len(), cfg.split_fraction, &mut rng);
    if pos_hold.is_empty() || neg_hold.is_empty() || pos_train.is_empty() || neg_train.is_empty() {
        return Ok(Flagged::fallback(0.5));
    }
    let dim = recent.dim();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let wp = 0.5 / pos_train.len() as f64;
    let wn = 0.5 / neg_train.len() as f64;
    let mut grad = vec![0.0; dim];
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        let mut accumulate = |x: &[f64], label: f64, weight: f64| {
            let s: f64 = b + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
            let r = weight * (sigmoid(s) - label);
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += r * xi;
            }
            gb += r;
        };
        for &i in &pos_train {
            accumulate(recent.point(i), 1.0, wp);
        }
        for &i in &neg_train {
            accumulate(reference.point(i), 0.0, wn);
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= cfg.learning_rate * (g + cfg.l2 * *wi);
        }
        b -= cfg.learning_rate * gb;
    }
    let score = |x: &[f64]| b + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
    let pos: Vec<f64> = pos_hold.iter().map(|&i| score(recent.point(i))).collect();
    let neg: Vec<f64> = neg_hold.iter().map(|&i| score(reference.point(i))).collect();
    Ok(Flagged::ok(rank_auc(&pos, &neg)))
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

const PROB_SUM_TOL: f64 = 1e-9;

/// Natural-log Shannon entropy with `0 log 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid("probs", "entries must be finite and nonnegative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::invalid("probs", format!("sum {total} is not 1")));
    }
    Ok(entropy_unchecked(probs))
}

pub(crate) fn entropy_unchecked(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mean recent entropy minus the reference mean entropy.
pub fn entropy_shift<P: AsRef<[f64]>>(recent_probs: &[P], ref_mean_entropy: f64) -> Result<f64> {
    if recent_probs.is_empty() {
        return Err(Error::invalid("recent_probs", "window is empty"));
    }
    let mut total = 0.0;
    for p in recent_probs {
        total += predictive_entropy(p.as_ref())?;
    }
    Ok(total / recent_probs.len() as f64 - ref_mean_entropy)
}

/// Equal-width binned calibration error over `(confidence, correct)` pairs.
///
/// The last bin is closed on the right. An empty input returns 0 flagged.
pub fn streaming_ece(labeled: &[(f64, bool)], bins: usize) -> Result<Flagged> {
    if bins == 0 {
        return Err(Error::invalid("bins", "need at least one bin"));
    }
    if labeled.is_empty() {
        return Ok(Flagged::fallback(0.0));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct_sum = vec![0.0; bins];
    for &(c, ok) in labeled {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid("confidence", format!("{c} not in [0, 1]")));
        }
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        if ok {
            correct_sum[b] += 1.0;
        }
    }
    let n = labeled.len() as f64;
    let ece = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct_sum[b] / m - conf_sum[b] / m).abs()
        })
        .sum();
    Ok(Flagged::ok(ece))
}

/// Reference statistics used to standardize raw monitor outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub mean: [f64; MONITOR_COUNT],
    pub std: [f64; MONITOR_COUNT],
    pub epsilon: f64,
    pub ece_ref: f64,
    pub mean_entropy_ref: f64,
}

impl ReferenceStats {
    /// Fits per-monitor mean and standard deviation from raw nominal vectors.
    pub fn fit(raw: &[[f64; MONITOR_COUNT]], epsilon: f64, ece_ref: f64, mean_entropy_ref: f64) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("raw", "no calibration vectors"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        let n = raw.len() as f64;
        let mut mean = [0.0; MONITOR_COUNT];
        let mut std = [0.0; MONITOR_COUNT];
        for j in 0..MONITOR_COUNT {
            mean[j] = raw.iter().map(|r| r[j]).sum::<f64>() / n;
            std[j] = (raw.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
        }
        Ok(Self {
            mean,
            std,
            epsilon,
            ece_ref,
            mean_entropy_ref,
        })
    }
}

/// Which monitors feed the standardized evidence; disabled ones read as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorMask(pub [bool; MONITOR_COUNT]);

impl Default for MonitorMask {
    fn default() -> Self {
        Self([true; MONITOR_COUNT])
    }
}

/// Raw monitor outputs with their standardized counterparts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceVector {
    pub mmd2: f64,
    pub disc_auc: f64,
    pub entropy_shift: f64,
    pub ece_shift: f64,
    pub slice_max_mmd2: f64,
    /// One entry per raw component, in [`MONITOR_NAMES`] order.
    pub standardized: Vec<f64>,
}

impl EvidenceVector {
    /// Raw vector with an all-zero standardized part.
    #[must_use]
    pub fn from_raw(raw: [f64; MONITOR_COUNT]) -> Self {
        Self {
            mmd2: raw[0],
            disc_auc: raw[1],
            entropy_shift: raw[2],
            ece_shift: raw[3],
            slice_max_mmd2: raw[4],
            standardized: vec![0.0; MONITOR_COUNT],
        }
    }

    #[must_use]
    pub fn raw(&self) -> [f64; MONITOR_COUNT] {
        [self.mmd2, self.disc_auc, self.entropy_shift, self.ece_shift, self.slice_max_mmd2]
    }

    /// Largest standardized component.
    #[must_use]
    pub fn max_standardized(&self) -> f64 {
        self.standardized.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    #[must_use]
    pub fn standardized_norm(&self) -> f64 {
        self.standardized.iter().map(|z| z * z).sum::<f64>().sqrt()
    }
}

/// Per-component `(raw - mu) / (sigma + eps)`.
#[must_use]
pub fn standardize(raw: &EvidenceVector, stats: &ReferenceStats) -> EvidenceVector {
    standardize_masked(raw, stats, MonitorMask::default())
}

/// [`standardize`] with disabled components forced to 0.
#[must_use]
pub fn standardize_masked(raw: &EvidenceVector, stats: &ReferenceStats, mask: MonitorMask) -> EvidenceVector {
    let r = raw.raw();
    let standardized = (0..MONITOR_COUNT)
        .map(|j| {
            if mask.0[j] {
                (r[j] - stats.mean[j]) / (stats.std[j] + stats.epsilon)
            } else {
                0.0
            }
        })
        .collect();
    EvidenceVector {
        standardized,
        ..raw.clone()
    }
}

/// Inverse of [`standardize`] on the standardized part.
#[must_use]
pub fn unstandardize(standardized: &[f64], stats: &ReferenceStats) -> [f64; MONITOR_COUNT] {
    let mut out = [0.0; MONITOR_COUNT];
    for j in 0..MONITOR_COUNT {
        out[j] = standardized[j] * (stats.std[j] + stats.epsilon) + stats.mean[j];
    }
    out
}

/// Unlabeled and labeled views of the recent window for one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RecentView<'a> {
    /// Embeddings with group tags.
    pub window: &'a EmbeddingWindow,
    /// Predictive distribution of each recent point.
    pub probs: &'a [Vec<f64>],
    /// `(confidence, correct)` for recent points whose labels are known.
    pub labeled: &'a [(f64, bool)],
}

/// Reference-side caches for evaluating all monitors on successive windows.
#[derive(Debug, Clone)]
pub struct MonitorSuite {
    global: ReferenceCache,
    slices: Vec<(u32, ReferenceCache)>,
    pub discriminator: DiscriminatorConfig,
    pub ece_bins: usize,
}

/// Default equal-width bin count for calibration error.
pub const ECE_BINS: usize = 10;

impl MonitorSuite {
    /// `reference` must carry group tags.
    pub fn new(reference: EmbeddingWindow) -> Result<Self> {
        let Some(tags) = reference.group_tags() else {
            return Err(Error::invalid("group_tags", "reference window must be tagged"));
        };
        let mut groups: Vec<u32> = tags.to_vec();
        groups.sort_unstable();
        groups.dedup();
        let mut slices = Vec::new();
        for g in groups {
            if let Some(part) = reference.restrict_to_group(g) {
                if part.len() >= 2 {
                    slices.push((g, ReferenceCache::new(part)?));
                }
            }
        }
        Ok(Self {
            global: ReferenceCache::new(reference)?,
            slices,
            discriminator: DiscriminatorConfig::default(),
            ece_bins: ECE_BINS,
        })
    }

    #[must_use]
    pub fn reference(&self) -> &EmbeddingWindow {
        self.global.reference()
    }

    /// Raw monitor vector in [`MONITOR_NAMES`] order.
    pub fn evaluate(&self, recent: &RecentView<'_>, ece_ref: f64, mean_entropy_ref: f64, seed: u64) -> Result<[f64; MONITOR_COUNT]> {
        let sigma2 = self.global.pooled_bandwidth(recent.window)?;
        let mmd = self.global.mmd2(recent.window, sigma2)?;
        let auc = discriminator_auc(recent.window, self.global.reference(), &self.discriminator, seed)?.value;
        let ent = entropy_shift(recent.probs, mean_entropy_ref)?;
        let ece = streaming_ece(recent.labeled, self.ece_bins)?;
        let ece_shift = if ece.degenerate { 0.0 } else { ece.value - ece_ref };
        let slice = self.slice_max_mmd2(recent.window, sigma2)?.value;
        Ok([mmd, auc, ent, ece_shift, slice])
    }

    /// Same value as [`slice_max_mmd2`] against the cached reference.
    pub fn slice_max_mmd2(&self, recent: &EmbeddingWindow, sigma2: f64) -> Result<Flagged> {
        if recent.group_tags().is_none() {
            return Err(Error::invalid("group_tags", "slice MMD needs tagged windows"));
        }
        let mut best: Option<f64> = None;
        for (g, cache) in &self.slices {
            let Some(part) = recent.restrict_to_group(*g) else { continue };
            if part.len() < 2 {
                continue;
            }
            let v = cache.mmd2(&part, sigma2)?;
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
        Ok(best.map_or(Flagged::fallback(0.0), Flagged::ok))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(values: &[f64]) -> EmbeddingWindow {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        EmbeddingWindow::from_rows(&rows, WindowOrigin::Recent).unwrap()
    }

    #[test]
    fn bandwidth_examples() {
        assert_eq!(median_bandwidth(&line(&[0.0, 2.0])).unwrap(), 4.0);
        assert_eq!(median_bandwidth(&line(&[0.0, 1.0, 3.0])).unwrap(), 4.0);
        assert_eq!(median_bandwidth(&line(&[5.0, 5.0, 5.0])).unwrap(), 1.0);
        assert!(median_bandwidth(&line(&[1.0])).is_err());
    }

    #[test]
    fn mmd_hand_examples() {
        let same = mmd2_unbiased(&line(&[3.0, 3.0]), &line(&[3.0, 3.0]), 1.0).unwrap();
        assert_abs_diff_eq!(same, 0.0, epsilon = 1e-12);
        let shifted = mmd2_unbiased(&line(&[0.0, 0.0]), &line(&[1.0, 1.0]), 1.0).unwrap();
        assert_abs_diff_eq!(shifted, 2.0 - 2.0 * (-0.5f64).exp(), epsilon = 1e-12);
        assert!(mmd2_unbiased(&line(&[0.0]), &line(&[1.0, 1.0]), 1.0).is_err());
        assert!(mmd2_unbiased(&line(&[0.0, 1.0]), &line(&[1.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn cache_matches_direct_evaluation() {
        let reference = line(&[0.1, -0.4, 1.3, 2.2, 0.7, -1.1, 0.0]);
        let recent = line(&[0.5, 1.5, 2.5, -0.2]);
        let cache = ReferenceCache::new(reference.clone()).unwrap();
        let direct_bw = pooled_bandwidth(&recent, &reference).unwrap();
        assert_eq!(cache.pooled_bandwidth(&recent).unwrap(), direct_bw);
        let direct = mmd2_unbiased(&recent, &reference, direct_bw).unwrap();
        assert_abs_diff_eq!(cache.mmd2(&recent, direct_bw).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn kth_of_pair_matches_merge() {
        let a = [1.0, 3.0, 5.0, 7.0];
        let b = [2.0, 2.0, 6.0];
        let mut merged: Vec<f64> = a.iter().chain(&b).copied().collect();
        merged.sort_by(f64::total_cmp);
        for (k, &v) in merged.iter().enumerate() {
            assert_eq!(kth_of_sorted_pair(&a, &b, k), v);
        }
        for (k, &v) in a.iter().enumerate() {
            assert_eq!(kth_of_sorted_pair(&a, &[], k), v);
            assert_eq!(kth_of_sorted_pair(&[], &a, k), v);
        }
    }

    #[test]
    fn auc_pair_counts() {
        assert_eq!(rank_auc(&[0.9, 0.8], &[0.2, 0.1]), 1.0);
        assert_eq!(rank_auc(&[0.4, 0.4], &[0.4, 0.4]), 0.5);
        assert_eq!(rank_auc(&[0.9, 0.3], &[0.5, 0.1]), 0.75);
    }

    #[test]
    fn discriminator_flags_tiny_windows() {
        let out = discriminator_auc(&line(&[1.0]), &line(&[0.0, 0.5]), &DiscriminatorConfig::default(), 3).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.value, 0.5);
    }

    #[test]
    fn discriminator_separates_shifted_windows() {
        let recent = line(&(0..40).map(|i| 5.0 + i as f64 * 0.01).collect::<Vec<_>>());
        let reference = line(&(0..40).map(|i| i as f64 * 0.01).collect::<Vec<_>>());
        let out = discriminator_auc(&recent, &reference, &DiscriminatorConfig::default(), 11).unwrap();
        assert!(!out.degenerate);
        assert_eq!(out.value, 1.0);
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(predictive_entropy(&[0.5, 0.5]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(predictive_entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(predictive_entropy(&[0.7, 0.2, 0.1]).unwrap(), 0.801_818_552_543_337_4, epsilon = 1e-12);
        assert!(predictive_entropy(&[0.7, 0.2]).is_err());
        assert!(predictive_entropy(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn entropy_shift_examples() {
        let point = vec![vec![1.0, 0.0]; 3];
        assert_abs_diff_eq!(entropy_shift(&point, std::f64::consts::LN_2).unwrap(), -std::f64::consts::LN_2, epsilon = 1e-15);
        let uniform = vec![vec![0.25; 4]; 5];
        assert_abs_diff_eq!(entropy_shift(&uniform, 0.0).unwrap(), 4f64.ln(), epsilon = 1e-15);
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(entropy_shift(&empty, 0.0).is_err());
    }

    #[test]
    fn ece_examples() {
        let calibrated: Vec<(f64, bool)> = (0..10).map(|i| (0.8, i < 8)).collect();
        assert_abs_diff_eq!(streaming_ece(&calibrated, 1).unwrap().value, 0.0, epsilon = 1e-12);
        let mixed = [(0.9, true), (0.8, false), (0.3, false)];
        assert_abs_diff_eq!(streaming_ece(&mixed, 2).unwrap().value, 1.0 / 3.0, epsilon = 1e-12);
        let wrong = [(1.0, false), (1.0, false)];
        assert_abs_diff_eq!(streaming_ece(&wrong, 10).unwrap().value, 1.0, epsilon = 1e-15);
        let empty = streaming_ece(&[], 10).unwrap();
        assert!(empty.degenerate);
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn slice_mmd_picks_shifted_group() {
        let rows = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
        let recent = EmbeddingWindow::from_tagged_rows(&rows(&[0.0, 0.1, 3.0, 3.1]), &[0, 0, 1, 1], WindowOrigin::Recent).unwrap();
        let reference = EmbeddingWindow::from_tagged_rows(&rows(&[0.05, 0.12, 0.0, 0.1]), &[0, 0, 1, 1], WindowOrigin::Reference).unwrap();
        let g1 = mmd2_unbiased(
            &recent.restrict_to_group(1).unwrap(),
            &reference.restrict_to_group(1).unwrap(),
            1.0,
        )
        .unwrap();
        let out = slice_max_mmd2(&recent, &reference, 1.0).unwrap();
        assert!(!out.degenerate);
        assert_abs_diff_eq!(out.value, g1, epsilon = 1e-15);
        let sparse = EmbeddingWindow::from_tagged_rows(&rows(&[0.0, 1.0]), &[0, 1], WindowOrigin::Recent).unwrap();
        let flagged = slice_max_mmd2(&sparse, &reference, 1.0).unwrap();
        assert!(flagged.degenerate);
        assert_eq!(flagged.value, 0.0);
        assert!(slice_max_mmd2(&line(&[0.0, 1.0]), &reference, 1.0).is_err());
    }

    #[test]
    fn standardize_examples() {
        let stats = ReferenceStats {
            mean: [0.1, 0.5, 0.0, 0.02, 0.1],
            std: [0.05, 0.03, 0.1, 0.01, 0.0],
            epsilon: 1e-6,
            ece_ref: 0.03,
            mean_entropy_ref: 0.4,
        };
        let at_mean = standardize(&EvidenceVector::from_raw(stats.mean), &stats);
        assert!(at_mean.standardized.iter().all(|&z| z == 0.0));
        let mut raw = stats.mean;
        for j in 0..MONITOR_COUNT {
            raw[j] += stats.std[j] + 1.0;
        }
        let z = standardize(&EvidenceVector::from_raw(raw), &stats);
        assert!(z.standardized.iter().all(|v| v.is_finite()));
        let back = unstandardize(&z.standardized, &stats);
        for j in 0..MONITOR_COUNT {
            assert_abs_diff_eq!(back[j], raw[j], epsilon = 1e-9);
        }
        let masked = standardize_masked(&EvidenceVector::from_raw(raw), &stats, MonitorMask([true, false, true, false, true]));
        assert_eq!(masked.standardized[1], 0.0);
        assert_eq!(masked.standardized[3], 0.0);
    }

    #[test]
    fn suite_slice_matches_direct() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 * 0.3, (i % 3) as f64]).collect();
        let tags: Vec<u32> = (0..12).map(|i| u32::from(i % 4 == 0)).collect();
        let reference = EmbeddingWindow::from_tagged_rows(&rows, &tags, WindowOrigin::Reference).unwrap();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0] + 1.0, r[1]]).collect();
        let recent = EmbeddingWindow::from_tagged_rows(&shifted, &tags, WindowOrigin::Recent).unwrap();
        let suite = MonitorSuite::new(reference.clone()).unwrap();
        let a = suite.slice_max_mmd2(&recent, 2.0).unwrap();
        let b = slice_max_mmd2(&recent, &reference, 2.0).unwrap();
        assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-12);
    }
}
