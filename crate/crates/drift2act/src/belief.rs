//! Markov filter over drift types with a discriminative emission potential.
//!
//! One step of the filter is
//!
//! ```text
//! predicted(d) = sum_{d'} T[d'][d] * prev(d')
//! posterior(d) ∝ psi(d) * predicted(d),     psi(d) = softmax(W z + b)_d ^ beta
//! ```
//!
//! Any positive factor shared by all `psi(d)` cancels in the normalization, so
//! a calibrated classifier posterior can stand in for the likelihood.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of drift types.
pub const TYPE_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DriftType {
    None,
    Covariate,
    Concept,
    Subgroup,
}

impl DriftType {
    pub const ALL: [DriftType; TYPE_COUNT] = [
        DriftType::None,
        DriftType::Covariate,
        DriftType::Concept,
        DriftType::Subgroup,
    ];

    #[must_use]
    pub fn index(self) -> usize {
        self as usize
    }

    #[must_use]
    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            DriftType::None => "none",
            DriftType::Covariate => "covariate",
            DriftType::Concept => "concept",
            DriftType::Subgroup => "subgroup",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::invalid("drift type", format!("unknown name {s:?}")))
    }
}

const SUM_TOL: f64 = 1e-9;

/// Posterior probabilities over drift types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    probs: [f64; TYPE_COUNT],
}

impl Belief {
    pub fn new(probs: [f64; TYPE_COUNT]) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("belief", format!("{probs:?} has a negative or non-finite entry")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid("belief", format!("{probs:?} sums to {total}")));
        }
        Ok(Self { probs })
    }

    #[must_use]
    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / TYPE_COUNT as f64; TYPE_COUNT],
        }
    }

    /// Start-of-stream prior that favors the nominal regime.
    #[must_use]
    pub fn initial() -> Self {
        Self {
            probs: [0.97, 0.01, 0.01, 0.01],
        }
    }

    #[must_use]
    pub fn probs(&self) -> [f64; TYPE_COUNT] {
        self.probs
    }

    #[must_use]
    pub fn prob(&self, d: DriftType) -> f64 {
        self.probs[d.index()]
    }

    /// Most probable type; ties resolve to the earlier type.
    #[must_use]
    pub fn argmax(&self) -> DriftType {
        let mut best = 0;
        for i in 1..TYPE_COUNT {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        DriftType::ALL[best]
    }
}

/// Row-stochastic matrix with `rows[from][to] = P(to | from)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    rows: [[f64; TYPE_COUNT]; TYPE_COUNT],
}

impl TransitionMatrix {
    pub fn new(rows: [[f64; TYPE_COUNT]; TYPE_COUNT]) -> Result<Self> {
        let m = Self { rows };
        m.validate()?;
        Ok(m)
    }

    #[must_use]
    pub fn identity() -> Self {
        let mut rows = [[0.0; TYPE_COUNT]; TYPE_COUNT];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { rows }
    }

    /// Sticky chain: stay with probability `stay`, else move uniformly.
    pub fn sticky(stay: f64) -> Result<Self> {
        let off = (1.0 - stay) / (TYPE_COUNT - 1) as f64;
        let mut rows = [[off; TYPE_COUNT]; TYPE_COUNT];
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] = stay;
        }
        Self::new(rows)
    }

    #[must_use]
    pub fn rows(&self) -> &[[f64; TYPE_COUNT]; TYPE_COUNT] {
        &self.rows
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid("transition", format!("row {i} has an invalid entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > SUM_TOL {
                return Err(Error::invalid("transition", format!("row {i} sums to {total}")));
            }
        }
        Ok(())
    }
}

/// Belief after the transition, before evidence.
pub fn predict_step(prev: &Belief, transition: &TransitionMatrix) -> Result<Belief> {
    transition.validate()?;
    let mut out = [0.0; TYPE_COUNT];
    for (from, row) in transition.rows.iter().enumerate() {
        for (to, p) in row.iter().enumerate() {
            out[to] += p * prev.probs[from];
        }
    }
    Ok(Belief { probs: out })
}

/// Diagonal Gaussian likelihood per drift type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmission {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianEmission {
    fn log_density(&self, d: usize, z: &[f64]) -> f64 {
        self.means[d]
            .iter()
            .zip(&self.variances[d])
            .zip(z)
            .map(|((m, v), x)| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln()))
            .sum()
    }

    /// Log density of `z` under type `d`.
    #[must_use]
    pub fn log_likelihood(&self, d: DriftType, z: &[f64]) -> f64 {
        self.log_density(d.index(), z)
    }
}

/// Per-type emission potential over standardized evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionModel {
    /// One weight row per drift type; empty rows mean the model is unfitted.
    pub weights: Vec<Vec<f64>>,
    pub biases: [f64; TYPE_COUNT],
    /// Evidence sharpness; 1 uses the classifier posterior as is.
    pub beta: f64,
    /// When set, replaces the discriminative potential.
    pub gaussian: Option<GaussianEmission>,
}

impl EmissionModel {
    /// All-zero weights and biases: a uniform potential.
    #[must_use]
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![vec![0.0; dim]; TYPE_COUNT],
            biases: [0.0; TYPE_COUNT],
            beta: 1.0,
            gaussian: None,
        }
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn check(&self, z: &[f64]) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta", format!("{} is not positive", self.beta)));
        }
        if let Some(g) = &self.gaussian {
            if g.means.len() != TYPE_COUNT || g.means.iter().any(|m| m.len() != z.len()) {
                return Err(Error::invalid("emission", "Gaussian parameters do not match evidence"));
            }
            if g.variances.iter().flatten().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid("emission", "Gaussian variances must be positive"));
            }
            return Ok(());
        }
        if self.weights.len() != TYPE_COUNT || self.dim() == 0 {
            return Err(Error::invalid("emission", "model is not fitted"));
        }
        if self.weights.iter().any(|w| w.len() != z.len()) {
            return Err(Error::invalid(
                "evidence",
                format!("length {} differs from model dimension {}", z.len(), self.dim()),
            ));
        }
        Ok(())
    }

    /// Class posterior `softmax(W z + b)`.
    pub fn posterior(&self, z: &[f64]) -> Result<[f64; TYPE_COUNT]> {
        self.check(z)?;
        Ok(softmax4(&self.logits(z)))
    }

    fn logits(&self, z: &[f64]) -> [f64; TYPE_COUNT] {
        let mut s = self.biases;
        for (d, w) in self.weights.iter().enumerate() {
            s[d] += w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        }
        s
    }
}

fn softmax4(s: &[f64; TYPE_COUNT]) -> [f64; TYPE_COUNT] {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; TYPE_COUNT];
    for (o, &v) in e.iter_mut().zip(s) {
        *o = (v - m).exp();
    }
    let total: f64 = e.iter().sum();
    e.map(|v| v / total)
}

/// `softmax(W z + b)^beta`; the Gaussian variant returns likelihoods scaled
/// by one shared positive factor.
pub fn emission_potential(z: &[f64], model: &EmissionModel) -> Result<[f64; TYPE_COUNT]> {
    model.check(z)?;
    if let Some(g) = &model.gaussian {
        let mut ll = [0.0; TYPE_COUNT];
        for (d, v) in ll.iter_mut().enumerate() {
            *v = model.beta * g.log_density(d, z);
        }
        let m = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Ok(ll.map(|v| (v - m).exp()));
    }
    let q = softmax4(&model.logits(z));
    Ok(if model.beta == 1.0 { q } else { q.map(|p| p.powf(model.beta)) })
}

/// Posterior after one filter step, with a flag for the uniform fallback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub belief: Belief,
    pub degenerate: bool,
}

/// Filter step from an explicit potential vector.
pub fn update_with_potential(
    prev: &Belief,
    potential: &[f64; TYPE_COUNT],
    transition: &TransitionMatrix,
) -> Result<FilterOutcome> {
    if potential.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid("potential", format!("{potential:?} has an invalid entry")));
    }
    let predicted = predict_step(prev, transition)?;
    let mut post = [0.0; TYPE_COUNT];
    for d in 0..TYPE_COUNT {
        post[d] = potential[d] * predicted.probs[d];
    }
    let total: f64 = post.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Ok(FilterOutcome {
            belief: Belief::uniform(),
            degenerate: true,
        });
    }
    Ok(FilterOutcome {
        belief: Belief {
            probs: post.map(|p| p / total),
        },
        degenerate: false,
    })
}

/// One filter step on standardized evidence.
pub fn update(
    prev: &Belief,
    z: &[f64],
    transition: &TransitionMatrix,
    model: &EmissionModel,
) -> Result<FilterOutcome> {
    let psi = emission_potential(z, model)?;
    update_with_potential(prev, &psi, transition)
}

/// One labeled evidence vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    /// Standardized evidence.
    pub evidence: Vec<f64>,
    pub label: DriftType,
}

/// Consecutive steps of one synthetic stream.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    /// Position in `steps` of the first step at or after the drift onset.
    pub onset: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeDataset {
    pub episodes: Vec<Episode>,
}

impl EpisodeDataset {
    pub fn steps(&self) -> impl Iterator<Item = &EpisodeStep> {
        self.episodes.iter().flat_map(|e| e.steps.iter())
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> Result<usize> {
        let mut steps = self.steps();
        let first = steps
            .next()
            .ok_or_else(|| Error::invalid("dataset", "no steps"))?
            .evidence
            .len();
        if first == 0 || steps.any(|s| s.evidence.len() != first) {
            return Err(Error::invalid("dataset", "evidence vectors differ in length"));
        }
        Ok(first)
    }

    /// Flat text: one line per step, `episode label v1 v2 ...`.
    #[must_use]
    pub fn to_text(&self) -> String {
        let mut out = String::from("drift2act-episodes v1\n");
        for (e, ep) in self.episodes.iter().enumerate() {
            let _ = writeln!(out, "onset {e} {}", ep.onset);
            for s in &ep.steps {
                let _ = write!(out, "{e} {}", s.label.name());
                for v in &s.evidence {
                    let _ = write!(out, " {v:?}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("drift2act-episodes v1") {
            return Err(Error::parse("episodes", "missing or unknown header"));
        }
        let mut episodes: Vec<Episode> = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut parts = line.split_whitespace();
            if line.starts_with("onset ") {
                parts.next();
                let e: usize = parse_field(parts.next(), "episode", n)?;
                let k: usize = parse_field(parts.next(), "onset", n)?;
                while episodes.len() <= e {
                    episodes.push(Episode::default());
                }
                episodes[e].onset = k;
                continue;
            }
            let e: usize = parse_field(parts.next(), "episode", n)?;
            let label = DriftType::parse(parts.next().unwrap_or(""))
                .map_err(|err| Error::parse("episodes", format!("line {}: {err}", n + 2)))?;
            let evidence = parts
                .map(|p| p.parse::<f64>().map_err(|err| Error::parse("episodes", format!("line {}: {err}", n + 2))))
                .collect::<Result<Vec<f64>>>()?;
            while episodes.len() <= e {
                episodes.push(Episode::default());
            }
            episodes[e].steps.push(EpisodeStep { evidence, label });
        }
        Ok(Self { episodes })
    }
}

fn parse_field<T: std::str::FromStr>(s: Option<&str>, what: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.ok_or_else(|| Error::parse("episodes", format!("line {}: missing {what}", line + 2)))?
        .parse()
        .map_err(|e| Error::parse("episodes", format!("line {}: {what}: {e}", line + 2)))
}

/// Penalized multinomial log-likelihood over a flat parameter vector laid out
/// as `TYPE_COUNT` rows of `[w_1 .. w_m, b]`.
#[derive(Debug, Clone)]
pub struct MultinomialObjective<'a> {
    features: Vec<&'a [f64]>,
    labels: Vec<usize>,
    dim: usize,
    l2: f64,
}

impl<'a> MultinomialObjective<'a> {
    pub fn new(data: &'a EpisodeDataset, l2: f64) -> Result<Self> {
        let dim = data.dim()?;
        if !(l2 >= 0.0) {
            return Err(Error::invalid("l2", format!("{l2} is negative")));
        }
        Ok(Self {
            features: data.steps().map(|s| s.evidence.as_slice()).collect(),
            labels: data.steps().map(|s| s.label.index()).collect(),
            dim,
            l2,
        })
    }

    #[must_use]
    pub fn param_len(&self) -> usize {
        TYPE_COUNT * (self.dim + 1)
    }

    fn logits(&self, params: &[f64], x: &[f64]) -> [f64; TYPE_COUNT] {
        let stride = self.dim + 1;
        let mut s = [0.0; TYPE_COUNT];
        for (d, v) in s.iter_mut().enumerate() {
            let row = &params[d * stride..(d + 1) * stride];
            *v = row[self.dim] + row[..self.dim].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
        s
    }

    /// Mean log-likelihood minus `l2 / 2 * |W|^2` (biases unpenalized).
    #[must_use]
    pub fn value(&self, params: &[f64]) -> f64 {
        let n = self.features.len() as f64;
        let mut ll = 0.0;
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let s = self.logits(params, x);
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ll += s[y] - lse;
        }
        ll / n - 0.5 * self.l2 * self.penalized_sq_norm(params)
    }

    fn penalized_sq_norm(&self, params: &[f64]) -> f64 {
        let stride = self.dim + 1;
        (0..TYPE_COUNT)
            .map(|d| params[d * stride..d * stride + self.dim].iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Gradient of [`Self::value`].
    #[must_use]
    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let stride = self.dim + 1;
        let n = self.features.len() as f64;
        let mut g = vec![0.0; params.len()];
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let q = softmax4(&self.logits(params, x));
            for d in 0..TYPE_COUNT {
                let r = (if d == y { 1.0 } else { 0.0 }) - q[d];
                let row = &mut g[d * stride..(d + 1) * stride];
                for (gi, xi) in row[..self.dim].iter_mut().zip(x.iter()) {
                    *gi += r * xi / n;
                }
                row[self.dim] += r / n;
            }
        }
        for d in 0..TYPE_COUNT {
            for i in 0..self.dim {
                g[d * stride + i] -= self.l2 * params[d * stride + i];
            }
        }
        g
    }
}

/// Settings of [`fit_emission`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub l2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            iterations: 500,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression by full-batch gradient ascent.
///
/// Features are centered and scaled internally; the returned weights act on
/// the original evidence coordinates.
pub fn fit_emission(data: &EpisodeDataset, cfg: &FitConfig) -> Result<EmissionModel> {
    let dim = data.dim()?;
    let mut present = [false; TYPE_COUNT];
    for s in data.steps() {
        present[s.label.index()] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("dataset", "need at least two distinct drift types"));
    }
    let n = data.len() as f64;
    let mut center = vec![0.0; dim];
    for s in data.steps() {
        for (c, v) in center.iter_mut().zip(&s.evidence) {
            *c += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for s in data.steps() {
        for ((sc, v), c) in scale.iter_mut().zip(&s.evidence).zip(&center) {
            *sc += (v - c).powi(2) / n;
        }
    }
    let scale: Vec<f64> = scale.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let normalized = EpisodeDataset {
        episodes: data
            .episodes
            .iter()
            .map(|e| Episode {
                steps: e
                    .steps
                    .iter()
                    .map(|s| EpisodeStep {
                        evidence: s
                            .evidence
                            .iter()
                            .zip(&center)
                            .zip(&scale)
                            .map(|((v, c), sc)| (v - c) / sc)
                            .collect(),
                        label: s.label,
                    })
                    .collect(),
                onset: e.onset,
            })
            .collect(),
    };
    let objective = MultinomialObjective::new(&normalized, cfg.l2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: Vec<f64> = (0..objective.param_len()).map(|_| rng.random_range(-0.01..0.01)).collect();
    for _ in 0..cfg.iterations {
        let g = objective.gradient(&params);
        for (p, gi) in params.iter_mut().zip(&g) {
            *p += cfg.learning_rate * gi;
        }
    }
    let stride = dim + 1;
    let mut weights = vec![vec![0.0; dim]; TYPE_COUNT];
    let mut biases = [0.0; TYPE_COUNT];
    for d in 0..TYPE_COUNT {
        let row = &params[d * stride..(d + 1) * stride];
        let mut b = row[dim];
        for i in 0..dim {
            weights[d][i] = row[i] / scale[i];
            b -= row[i] * center[i] / scale[i];
        }
        biases[d] = b;
    }
    Ok(EmissionModel {
        weights,
        biases,
        beta: 1.0,
        gaussian: None,
    })
}

/// Transition counts normalized per row; rows never left become uniform.
pub fn fit_transitions(data: &EpisodeDataset) -> Result<TransitionMatrix> {
    if data.episodes.iter().all(|e| e.steps.is_empty()) {
        return Err(Error::invalid("dataset", "no steps"));
    }
    let mut counts = [[0.0; TYPE_COUNT]; TYPE_COUNT];
    for e in &data.episodes {
        for pair in e.steps.windows(2) {
            counts[pair[0].label.index()][pair[1].label.index()] += 1.0;
        }
    }
    let mut rows = [[0.0; TYPE_COUNT]; TYPE_COUNT];
    for (row, c) in rows.iter_mut().zip(&counts) {
        let total: f64 = c.iter().sum();
        if total > 0.0 {
            for (r, v) in row.iter_mut().zip(c) {
                *r = v / total;
            }
        } else {
            *row = [1.0 / TYPE_COUNT as f64; TYPE_COUNT];
        }
    }
    TransitionMatrix::new(rows)
}

/// Lower bound applied to every fitted Gaussian variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Gaussian emission fit plus the types that had fewer than two samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub model: EmissionModel,
    pub underpopulated: Vec<DriftType>,
}

/// Maximum-likelihood diagonal Gaussian per drift type.
pub fn fit_gaussian_emission(data: &EpisodeDataset) -> Result<GaussianFit> {
    let dim = data.dim()?;
    let mut means = vec![vec![0.0; dim]; TYPE_COUNT];
    let mut variances = vec![vec![0.0; dim]; TYPE_COUNT];
    let mut counts = [0usize; TYPE_COUNT];
    for s in data.steps() {
        let d = s.label.index();
        counts[d] += 1;
        for (m, v) in means[d].iter_mut().zip(&s.evidence) {
            *m += v;
        }
    }
    for d in 0..TYPE_COUNT {
        if counts[d] > 0 {
            means[d].iter_mut().for_each(|m| *m /= counts[d] as f64);
        }
    }
    for s in data.steps() {
        let d = s.label.index();
        for ((var, v), m) in variances[d].iter_mut().zip(&s.evidence).zip(&means[d]) {
            *var += (v - m).powi(2);
        }
    }
    let mut underpopulated = Vec::new();
    for d in 0..TYPE_COUNT {
        if counts[d] < 2 {
            underpopulated.push(DriftType::ALL[d]);
        }
        for var in &mut variances[d] {
            let ml = if counts[d] > 0 { *var / counts[d] as f64 } else { 0.0 };
            *var = ml.max(VARIANCE_FLOOR);
        }
    }
    let mut model = EmissionModel::zeros(dim);
    model.gaussian = Some(GaussianEmission { means, variances });
    Ok(GaussianFit { model, underpopulated })
}

const MODEL_HEADER: &str = "drift2act-belief v1";

/// Versioned flat text holding the emission model and transition rows.
#[must_use]
pub fn serialize_model(model: &EmissionModel, transition: &TransitionMatrix) -> String {
    let mut out = format!("{MODEL_HEADER}\n");
    out.push_str("types");
    for d in DriftType::ALL {
        out.push(' ');
        out.push_str(d.name());
    }
    out.push('\n');
    let _ = writeln!(out, "beta {:?}", model.beta);
    let _ = writeln!(out, "dim {}", model.dim());
    let row_line = |out: &mut String, key: &str, d: DriftType, values: &[f64]| {
        let _ = write!(out, "{key} {}", d.name());
        for v in values {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    };
    for d in DriftType::ALL {
        row_line(&mut out, "weight", d, &model.weights[d.index()]);
    }
    for d in DriftType::ALL {
        row_line(&mut out, "bias", d, &[model.biases[d.index()]]);
    }
    if let Some(g) = &model.gaussian {
        for d in DriftType::ALL {
            row_line(&mut out, "gauss_mean", d, &g.means[d.index()]);
        }
        for d in DriftType::ALL {
            row_line(&mut out, "gauss_var", d, &g.variances[d.index()]);
        }
    }
    for d in DriftType::ALL {
        row_line(&mut out, "transition", d, &transition.rows[d.index()]);
    }
    out
}

/// Inverse of [`serialize_model`].
pub fn deserialize_model(text: &str) -> Result<(EmissionModel, TransitionMatrix)> {
    let err = |detail: String| Error::parse("belief model", detail);
    let mut lines = text.lines();
    if lines.next() != Some(MODEL_HEADER) {
        return Err(err("missing or unknown header".into()));
    }
    let mut beta = None;
    let mut weights: Vec<Option<Vec<f64>>> = vec![None; TYPE_COUNT];
    let mut biases: [Option<f64>; TYPE_COUNT] = [None; TYPE_COUNT];
    let mut means: Vec<Option<Vec<f64>>> = vec![None; TYPE_COUNT];
    let mut vars: Vec<Option<Vec<f64>>> = vec![None; TYPE_COUNT];
    let mut rows: [Option<[f64; TYPE_COUNT]>; TYPE_COUNT] = [None; TYPE_COUNT];
    for line in lines {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        match key {
            "types" => {
                let names: Vec<&str> = parts.collect();
                let expected: Vec<&str> = DriftType::ALL.iter().map(|d| d.name()).collect();
                if names != expected {
                    return Err(err(format!("type order {names:?} differs from {expected:?}")));
                }
            }
            "beta" => beta = Some(parse_num(parts.next(), "beta")?),
            "dim" => {}
            "weight" | "bias" | "gauss_mean" | "gauss_var" | "transition" => {
                let d = DriftType::parse(parts.next().unwrap_or("")).map_err(|e| err(e.to_string()))?.index();
                let values = parts.map(|p| parse_num(Some(p), key)).collect::<Result<Vec<f64>>>()?;
                match key {
                    "weight" => weights[d] = Some(values),
                    "bias" => biases[d] = values.first().copied(),
                    "gauss_mean" => means[d] = Some(values),
                    "gauss_var" => vars[d] = Some(values),
                    _ => {
                        let row: [f64; TYPE_COUNT] = values
                            .try_into()
                            .map_err(|_| err(format!("transition row for type {d} needs {TYPE_COUNT} values")))?;
                        rows[d] = Some(row);
                    }
                }
            }
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    let weights = weights
        .into_iter()
        .map(|w| w.ok_or_else(|| err("missing weight row".into())))
        .collect::<Result<Vec<_>>>()?;
    let mut b = [0.0; TYPE_COUNT];
    for (out, v) in b.iter_mut().zip(biases) {
        *out = v.ok_or_else(|| err("missing bias".into()))?;
    }
    let mut t = [[0.0; TYPE_COUNT]; TYPE_COUNT];
    for (out, r) in t.iter_mut().zip(rows) {
        *out = r.ok_or_else(|| err("missing transition row".into()))?;
    }
    let gaussian = if means.iter().all(Option::is_some) && vars.iter().all(Option::is_some) {
        Some(GaussianEmission {
            means: means.into_iter().flatten().collect(),
            variances: vars.into_iter().flatten().collect(),
        })
    } else {
        None
    };
    let model = EmissionModel {
        weights,
        biases: b,
        beta: beta.ok_or_else(|| err("missing beta".into()))?,
        gaussian,
    };
    Ok((model, TransitionMatrix::new(t)?))
}

fn parse_num(s: Option<&str>, what: &str) -> Result<f64> {
    s.ok_or_else(|| Error::parse("belief model", format!("missing {what} value")))?
        .parse()
        .map_err(|e| Error::parse("belief model", format!("{what}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn episode(labels: &[DriftType], evidence: impl Fn(usize) -> Vec<f64>) -> Episode {
        Episode {
            steps: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| EpisodeStep {
                    evidence: evidence(i),
                    label,
                })
                .collect(),
            onset: 0,
        }
    }

    #[test]
    fn predict_examples() {
        let b = Belief::new([0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(predict_step(&b, &TransitionMatrix::identity()).unwrap(), b);
        let u = predict_step(&Belief::uniform(), &TransitionMatrix::sticky(0.7).unwrap()).unwrap();
        for p in u.probs() {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
        let mut rows = [[0.25; 4]; 4];
        rows[0] = [0.9, 0.1, 0.0, 0.0];
        let t = TransitionMatrix::new(rows).unwrap();
        let out = predict_step(&Belief::new([1.0, 0.0, 0.0, 0.0]).unwrap(), &t).unwrap();
        assert_eq!(out.probs(), [0.9, 0.1, 0.0, 0.0]);
        assert!(TransitionMatrix::new([[0.5; 4]; 4]).is_err());
    }

    #[test]
    fn zero_model_gives_uniform_potential() {
        let psi = emission_potential(&[0.3, -1.0, 2.0], &EmissionModel::zeros(3)).unwrap();
        assert_eq!(psi, [0.25; 4]);
        let unfitted = EmissionModel {
            weights: Vec::new(),
            biases: [0.0; 4],
            beta: 1.0,
            gaussian: None,
        };
        assert!(emission_potential(&[0.0], &unfitted).is_err());
    }

    #[test]
    fn update_examples() {
        let psi = [0.4, 0.3, 0.2, 0.1];
        let out = update_with_potential(&Belief::uniform(), &psi, &TransitionMatrix::identity()).unwrap();
        for (a, b) in out.belief.probs().iter().zip(psi) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let t = TransitionMatrix::sticky(0.9).unwrap();
        let prev = Belief::initial();
        let flat = update_with_potential(&prev, &[0.25; 4], &t).unwrap();
        let predicted = predict_step(&prev, &t).unwrap();
        for (a, b) in flat.belief.probs().iter().zip(predicted.probs()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let zero = update_with_potential(&prev, &[0.0; 4], &t).unwrap();
        assert!(zero.degenerate);
        assert_eq!(zero.belief, Belief::uniform());
    }

    #[test]
    fn transition_counts() {
        use DriftType::*;
        let data = EpisodeDataset {
            episodes: vec![episode(&[None, None, Covariate, Covariate], |_| vec![0.0])],
        };
        let t = fit_transitions(&data).unwrap();
        assert_eq!(t.rows()[0], [0.5, 0.5, 0.0, 0.0]);
        assert_eq!(t.rows()[1], [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(t.rows()[2], [0.25; 4]);
        assert!(fit_transitions(&EpisodeDataset::default()).is_err());
    }

    #[test]
    fn separable_fit_is_perfect() {
        use DriftType::*;
        let data = EpisodeDataset {
            episodes: vec![
                episode(&[None; 20], |i| vec![-2.0 - 0.05 * i as f64, 0.1]),
                episode(&[Covariate; 20], |i| vec![2.0 + 0.05 * i as f64, -0.1]),
            ],
        };
        let model = fit_emission(&data, &FitConfig::default()).unwrap();
        for s in data.steps() {
            let q = model.posterior(&s.evidence).unwrap();
            let best = (0..4).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap();
            assert_eq!(best, s.label.index());
        }
        let single = EpisodeDataset {
            episodes: vec![episode(&[None; 3], |_| vec![1.0])],
        };
        assert!(fit_emission(&single, &FitConfig::default()).is_err());
    }

    #[test]
    fn gaussian_fit_hand_values() {
        use DriftType::*;
        let data = EpisodeDataset {
            episodes: vec![Episode {
                onset: 0,
                steps: vec![
                    EpisodeStep { evidence: vec![1.0, 4.0], label: None },
                    EpisodeStep { evidence: vec![3.0, 4.0], label: None },
                    EpisodeStep { evidence: vec![7.0, 0.0], label: Concept },
                ],
            }],
        };
        let fit = fit_gaussian_emission(&data).unwrap();
        let g = fit.model.gaussian.as_ref().unwrap();
        assert_eq!(g.means[0], vec![2.0, 4.0]);
        assert_eq!(g.variances[0], vec![1.0, VARIANCE_FLOOR]);
        assert_eq!(g.means[2], vec![7.0, 0.0]);
        assert_eq!(fit.underpopulated, vec![Covariate, Concept, Subgroup]);
        let psi = emission_potential(&[2.0, 4.0], &fit.model).unwrap();
        assert!(psi[0] > psi[2]);
    }

    #[test]
    fn model_text_round_trip() {
        let mut model = EmissionModel::zeros(3);
        model.weights[1] = vec![0.5, -1.25, 3.0e-7];
        model.biases = [0.1, -0.2, 0.3, 1.0 / 3.0];
        model.beta = 2.0;
        let t = TransitionMatrix::sticky(0.95).unwrap();
        let text = serialize_model(&model, &t);
        let (m2, t2) = deserialize_model(&text).unwrap();
        assert_eq!(m2, model);
        assert_eq!(t2, t);
        assert!(deserialize_model("nonsense").is_err());
    }

    #[test]
    fn episode_text_round_trip() {
        use DriftType::*;
        let data = EpisodeDataset {
            episodes: vec![
                episode(&[None, Concept], |i| vec![i as f64 * 0.1, -1.5]),
                Episode {
                    onset: 1,
                    ..episode(&[Subgroup, Subgroup], |_| vec![2.0, 0.25])
                },
            ],
        };
        assert_eq!(EpisodeDataset::from_text(&data.to_text()).unwrap(), data);
    }
}
