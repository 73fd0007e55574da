//! Linear softmax surrogate with temperature, checkpoints and action effects.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monitors::entropy_unchecked;

/// Weights, biases and temperature of a linear softmax classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub temperature: f64,
}

impl ModelParams {
    #[must_use]
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            temperature: 1.0,
        }
    }

    /// Untempered logits `W x + b`.
    #[must_use]
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// `softmax(logits / temperature)`.
    #[must_use]
    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax_scaled(&self.logits(x), self.temperature)
    }

    /// Arg-max class; ties resolve to the lower class.
    #[must_use]
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Class probabilities of `model` at `x`.
#[must_use]
pub fn model_predict(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    model.probs(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub id: usize,
    /// Version of the deployed parameters when the checkpoint was taken.
    pub version: u64,
    pub params: ModelParams,
}

/// Deployed parameters plus the checkpoint store.
///
/// Every mutation gets a fresh version number; a rollback restores both the
/// parameters and the version of the safe checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    current: ModelParams,
    version: u64,
    next_version: u64,
    checkpoints: Vec<Checkpoint>,
    safe: usize,
}

impl SurrogateModel {
    /// Deploys `params` as checkpoint 0, which is also the first safe checkpoint.
    #[must_use]
    pub fn launch(params: ModelParams) -> Self {
        Self {
            checkpoints: vec![Checkpoint {
                id: 0,
                version: 0,
                params: params.clone(),
            }],
            current: params,
            version: 0,
            next_version: 1,
            safe: 0,
        }
    }

    #[must_use]
    pub fn params(&self) -> &ModelParams {
        &self.current
    }

    #[must_use]
    pub fn version(&self) -> u64 {
        self.version
    }

    #[must_use]
    pub fn safe_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.safe]
    }

    #[must_use]
    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    fn replace(&mut self, params: ModelParams) {
        self.current = params;
        self.version = self.next_version;
        self.next_version += 1;
    }

    fn deposit(&mut self) -> usize {
        let id = self.checkpoints.len();
        self.checkpoints.push(Checkpoint {
            id,
            version: self.version,
            params: self.current.clone(),
        });
        id
    }

    /// Records the deployed parameters as the safe checkpoint.
    pub fn mark_safe(&mut self) {
        if self.checkpoints[self.safe].version == self.version {
            return;
        }
        self.safe = match self.checkpoints.iter().position(|c| c.version == self.version) {
            Some(i) => i,
            None => self.deposit(),
        };
    }
}

/// Mean negative log-likelihood at temperature `temperature`.
#[must_use]
pub fn nll(params: &ModelParams, labeled: &[(&[f64], usize)], temperature: f64) -> f64 {
    let total: f64 = labeled
        .iter()
        .map(|(x, y)| {
            let s = params.logits(x);
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m / temperature + s.iter().map(|v| ((v - m) / temperature).exp()).sum::<f64>().ln();
            lse - s[*y] / temperature
        })
        .sum();
    total / labeled.len() as f64
}

/// Temperature search bracket.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);

/// Refits the temperature by golden-section search on the NLL, in log scale.
///
/// Returns `false` and leaves the model unchanged when `labeled` is empty.
pub fn act_recalibrate(model: &mut SurrogateModel, labeled: &[(&[f64], usize)]) -> bool {
    if labeled.is_empty() {
        return false;
    }
    let f = |log_t: f64| nll(&model.current, labeled, log_t.exp());
    let (mut lo, mut hi) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..80 {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = f(b);
        }
    }
    let mut params = model.current.clone();
    params.temperature = (0.5 * (lo + hi)).exp();
    model.replace(params);
    true
}

/// Mean predictive entropy over `inputs`.
#[must_use]
pub fn mean_entropy(params: &ModelParams, inputs: &[&[f64]]) -> f64 {
    inputs.iter().map(|x| entropy_unchecked(&params.probs(x))).sum::<f64>() / inputs.len() as f64
}

/// Gradient of [`mean_entropy`] with respect to weights and biases.
#[must_use]
pub fn entropy_gradient(params: &ModelParams, inputs: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; params.weights.len()];
    let mut gb = vec![0.0; params.classes];
    let n = inputs.len() as f64;
    for x in inputs {
        let p = params.probs(x);
        let h = entropy_unchecked(&p);
        for c in 0..params.classes {
            // dH/ds_c = -p_c (ln p_c + H), with s = logits / temperature.
            let ds = if p[c] > 0.0 { -p[c] * (p[c].ln() + h) } else { 0.0 };
            let g = ds / params.temperature / n;
            gb[c] += g;
            for (w, xi) in gw[c * params.dim..(c + 1) * params.dim].iter_mut().zip(x.iter()) {
                *w += g * xi;
            }
        }
    }
    (gw, gb)
}

/// Entropy-minimization steps on unlabeled inputs; returns the mean entropy
/// before and after.
pub fn act_tta(model: &mut SurrogateModel, inputs: &[&[f64]], steps: usize, learning_rate: f64) -> Result<(f64, f64)> {
    if inputs.is_empty() {
        return Err(Error::invalid("inputs", "test-time adaptation needs recent inputs"));
    }
    let before = mean_entropy(&model.current, inputs);
    if learning_rate == 0.0 || steps == 0 {
        return Ok((before, before));
    }
    let mut params = model.current.clone();
    for _ in 0..steps {
        let (gw, gb) = entropy_gradient(&params, inputs);
        for (w, g) in params.weights.iter_mut().zip(&gw) {
            *w -= learning_rate * g;
        }
        for (b, g) in params.bias.iter_mut().zip(&gb) {
            *b -= learning_rate * g;
        }
    }
    let after = mean_entropy(&params, inputs);
    model.replace(params);
    Ok((before, after))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 0.1,
            l2: 1e-3,
        }
    }
}

/// Regularized softmax regression by full-batch gradient descent.
pub fn train_softmax<R: Rng>(
    labeled: &[(&[f64], usize)],
    classes: usize,
    dim: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ModelParams> {
    if labeled.is_empty() {
        return Err(Error::invalid("labeled", "no training examples"));
    }
    if labeled.iter().any(|(x, y)| x.len() != dim || *y >= classes) {
        return Err(Error::invalid("labeled", "example shape does not match the model"));
    }
    let mut params = ModelParams::zeros(classes, dim);
    for w in &mut params.weights {
        *w = rng.random_range(-0.01..0.01);
    }
    let n = labeled.len() as f64;
    let mut gw = vec![0.0; params.weights.len()];
    let mut gb = vec![0.0; classes];
    for _ in 0..cfg.iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (x, y) in labeled {
            let p = softmax_scaled(&params.logits(x), 1.0);
            for c in 0..classes {
                let r = (p[c] - if c == *y { 1.0 } else { 0.0 }) / n;
                gb[c] += r;
                for (g, xi) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x.iter()) {
                    *g += r * xi;
                }
            }
        }
        for (w, g) in params.weights.iter_mut().zip(&gw) {
            *w -= cfg.learning_rate * (g + cfg.l2 * *w);
        }
        for (b, g) in params.bias.iter_mut().zip(&gb) {
            *b -= cfg.learning_rate * g;
        }
    }
    Ok(params)
}

/// Refits on `labeled` and deposits a new checkpoint.
///
/// Returns `false` without touching the model when fewer than two classes are
/// present.
pub fn act_retrain<R: Rng>(model: &mut SurrogateModel, labeled: &[(&[f64], usize)], cfg: &TrainConfig, rng: &mut R) -> Result<bool> {
    let classes = model.current.classes;
    let mut seen = vec![false; classes];
    for (_, y) in labeled {
        if *y < classes {
            seen[*y] = true;
        }
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Ok(false);
    }
    let params = train_softmax(labeled, classes, model.current.dim, cfg, rng)?;
    model.replace(params);
    model.deposit();
    Ok(true)
}

/// Restores the safe checkpoint bit for bit.
pub fn act_rollback(model: &mut SurrogateModel) {
    let safe = &model.checkpoints[model.safe];
    model.current = safe.params.clone();
    model.version = safe.version;
}
