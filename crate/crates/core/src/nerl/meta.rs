use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vector::{add_scaled, dot, softmax};
use super::{NerlError, Vocab};
use crate::codec::{Decoder, Encoder};
use crate::text::{tokenize, Token};

const MAGIC: [u8; 4] = *b"MTMM";
const VERSION: u16 = 1;

/// A mention in context with its label for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaExample {
    pub tokens: Vec<Token>,
    pub token_start: usize,
    pub token_end: usize,
    pub label: String,
}

impl MetaExample {
    /// Builds an example from a character span of `text`.
    pub fn from_text(text: &str, start: usize, end: usize, label: &str) -> Result<Self, NerlError> {
        let tokens = tokenize(text);
        let inside: Vec<usize> = tokens
            .iter()
            .filter(|t| t.start >= start && t.end <= end)
            .map(|t| t.position)
            .collect();
        let (Some(&first), Some(&last)) = (inside.first(), inside.last()) else {
            return Err(NerlError::BadSpan { start, end });
        };
        Ok(Self {
            tokens,
            token_start: first,
            token_end: last + 1,
            label: label.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Context half-width in tokens.
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            k: 7,
            epochs: 2000,
            learning_rate: 1.0,
            l2: 1e-4,
            seed: 42,
        }
    }
}

/// Multinomial logistic regression over `[mean left-k ⧺ mean right-k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub task: String,
    pub labels: Vec<String>,
    pub k: usize,
    pub dim: usize,
    /// Row-major, `labels × 2·dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaPrediction {
    pub label: String,
    pub probability: f64,
    pub probabilities: Vec<f64>,
}

/// Mean embedding of up to `k` tokens left of the span followed by the mean
/// of up to `k` tokens right of it. Unknown words are skipped; an empty side
/// contributes zeros.
pub fn meta_features(tokens: &[Token], start: usize, end: usize, vocab: &Vocab, k: usize) -> Vec<f64> {
    let dim = vocab.dim();
    let mut out = vec![0.0; 2 * dim];
    let sides = [start.saturating_sub(k)..start.min(tokens.len()), end.min(tokens.len())..(end + k).min(tokens.len())];
    for (side, range) in sides.into_iter().enumerate() {
        let slot = &mut out[side * dim..(side + 1) * dim];
        let mut n = 0;
        for t in &tokens[range] {
            if let Some(v) = vocab.vector(&t.text) {
                add_scaled(slot, 1.0, v);
                n += 1;
            }
        }
        if n > 0 {
            slot.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    out
}

/// Mean cross-entropy plus `l2/2 · ‖W‖²`, and its gradient with respect to
/// the weights and the bias.
pub fn softmax_loss_gradient(
    weights: &[f64],
    bias: &[f64],
    xs: &[Vec<f64>],
    ys: &[usize],
    l2: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let labels = bias.len();
    let f = weights.len() / labels;
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; labels];
    for (x, &y) in xs.iter().zip(ys) {
        let logits: Vec<f64> = (0..labels).map(|l| dot(&weights[l * f..(l + 1) * f], x) + bias[l]).collect();
        let p = softmax(&logits);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for l in 0..labels {
            let d = p[l] - if l == y { 1.0 } else { 0.0 };
            gb[l] += d / n;
            add_scaled(&mut gw[l * f..(l + 1) * f], d / n, x);
        }
    }
    loss /= n;
    loss += 0.5 * l2 * dot(weights, weights);
    add_scaled(&mut gw, l2, weights);
    (loss, gw, gb)
}

/// Full-batch gradient descent; deterministic for a given seed.
pub fn train_meta(task: &str, examples: &[MetaExample], vocab: &Vocab, config: &MetaConfig) -> Result<MetaModel, NerlError> {
    if examples.is_empty() {
        return Err(NerlError::EmptyTrainingSet);
    }
    let labels: Vec<String> = examples.iter().map(|e| e.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if labels.len() < 2 {
        return Err(NerlError::SingleLabelData);
    }
    let raw: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| meta_features(&e.tokens, e.token_start, e.token_end, vocab, config.k))
        .collect();
    let ys: Vec<usize> = examples
        .iter()
        .map(|e| labels.binary_search(&e.label).expect("label collected above"))
        .collect();
    let f = 2 * vocab.dim();

    // Descent runs on standardized features; the scaling is folded back into
    // the weights afterwards so the model stays linear in the raw features.
    let n = raw.len() as f64;
    let mut mean = vec![0.0; f];
    for x in &raw {
        add_scaled(&mut mean, 1.0 / n, x);
    }
    let scale: Vec<f64> = (0..f)
        .map(|j| {
            let var = raw.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-18 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let xs: Vec<Vec<f64>> = raw
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights: Vec<f64> = (0..labels.len() * f).map(|_| (rng.gen::<f64>() - 0.5) * 0.02).collect();
    let mut bias = vec![0.0; labels.len()];
    // mean ‖x‖² + l2 bounds the curvature along the weights
    let sq = xs.iter().map(|x| dot(x, x)).sum::<f64>() / n;
    let weight_lr = config.learning_rate / (0.5 * sq + config.l2).max(1e-12);
    for _ in 0..config.epochs {
        let (_, gw, gb) = softmax_loss_gradient(&weights, &bias, &xs, &ys, config.l2);
        add_scaled(&mut weights, -weight_lr, &gw);
        add_scaled(&mut bias, -config.learning_rate, &gb);
    }
    for (l, b) in bias.iter_mut().enumerate() {
        let row = &mut weights[l * f..(l + 1) * f];
        for j in 0..f {
            row[j] *= scale[j];
            *b -= row[j] * mean[j];
        }
    }
    Ok(MetaModel {
        task: task.to_string(),
        labels,
        k: config.k,
        dim: vocab.dim(),
        weights,
        bias,
    })
}

impl MetaModel {
    pub fn probabilities(&self, features: &[f64]) -> Vec<f64> {
        let f = 2 * self.dim;
        let logits: Vec<f64> = (0..self.labels.len())
            .map(|l| dot(&self.weights[l * f..(l + 1) * f], features) + self.bias[l])
            .collect();
        softmax(&logits)
    }

    /// Most probable label for the mention at tokens `start..end`.
    pub fn predict(&self, tokens: &[Token], start: usize, end: usize, vocab: &Vocab) -> MetaPrediction {
        let probabilities = self.probabilities(&meta_features(tokens, start, end, vocab, self.k));
        let mut best = 0;
        for (i, p) in probabilities.iter().enumerate() {
            if *p > probabilities[best] {
                best = i;
            }
        }
        MetaPrediction {
            label: self.labels[best].clone(),
            probability: probabilities[best],
            probabilities,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.str(&self.task).len(self.labels.len());
        for l in &self.labels {
            e.str(l);
        }
        e.len(self.k).len(self.dim).f64s(&self.weights).f64s(&self.bias);
        e.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, NerlError> {
        let mut d = Decoder::new(data, MAGIC, VERSION)?;
        let task = d.str()?;
        let labels = (0..d.len()?).map(|_| d.str()).collect::<Result<Vec<_>, _>>()?;
        let k = d.len()?;
        let dim = d.len()?;
        let weights = d.f64s()?;
        let bias = d.f64s()?;
        d.finish()?;
        if labels.len() < 2 || bias.len() != labels.len() || weights.len() != labels.len() * 2 * dim {
            return Err(NerlError::Bundle(format!("meta model `{task}` has inconsistent dimensions")));
        }
        Ok(Self {
            task,
            labels,
            k,
            dim,
            weights,
            bias,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NerlError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NerlError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
