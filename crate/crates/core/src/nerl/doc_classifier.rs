use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vector::{add_scaled, dot, normalize, sigmoid};
use super::{NerlError, Vocab};
use crate::codec::{Decoder, Encoder};
use crate::text::tokenize;

const MAGIC: [u8; 4] = *b"MTDC";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDoc {
    pub text: String,
    pub labels: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DocClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for DocClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 2.0,
            l2: 1e-4,
        }
    }
}

/// One-vs-rest logistic models over a tf-idf weighted sentence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DocClassifier {
    pub labels: Vec<String>,
    pub dim: usize,
    /// Inverse document frequency from the training set; unseen words get
    /// `default_idf`.
    pub idf: BTreeMap<String, f64>,
    pub default_idf: f64,
    /// Row-major, `labels × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn embed(text: &str, vocab: &Vocab, idf: &BTreeMap<String, f64>, default_idf: f64) -> Option<Vec<f64>> {
    let mut tf: BTreeMap<String, f64> = BTreeMap::new();
    for t in tokenize(text) {
        if vocab.vector(&t.text).is_some() {
            *tf.entry(t.text).or_default() += 1.0;
        }
    }
    let mut sum = vec![0.0; vocab.dim()];
    let mut weight = 0.0;
    for (w, n) in &tf {
        let wt = n * idf.get(w).copied().unwrap_or(default_idf);
        add_scaled(&mut sum, wt, vocab.vector(w).expect("filtered above"));
        weight += wt;
    }
    if weight == 0.0 {
        return None;
    }
    sum.iter_mut().for_each(|x| *x /= weight);
    normalize(&mut sum).then_some(sum)
}

/// Trains one binary logistic model per label by full-batch gradient descent.
pub fn train_doc_classifier(docs: &[LabeledDoc], vocab: &Vocab, config: &DocClassifierConfig) -> Result<DocClassifier, NerlError> {
    if docs.is_empty() {
        return Err(NerlError::EmptyTrainingSet);
    }
    let labels: Vec<String> = docs.iter().flat_map(|d| d.labels.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
    if labels.len() < 2 {
        return Err(NerlError::SingleLabelData);
    }
    let n = docs.len() as f64;
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for d in docs {
        for w in tokenize(&d.text).into_iter().map(|t| t.text).collect::<BTreeSet<_>>() {
            *df.entry(w).or_default() += 1.0;
        }
    }
    let idf: BTreeMap<String, f64> = df.into_iter().map(|(w, c)| (w, ((1.0 + n) / (1.0 + c)).ln() + 1.0)).collect();
    let default_idf = (1.0 + n).ln() + 1.0;

    let dim = vocab.dim();
    let xs: Vec<Vec<f64>> = docs
        .iter()
        .map(|d| embed(&d.text, vocab, &idf, default_idf).unwrap_or_else(|| vec![0.0; dim]))
        .collect();
    let mut weights = vec![0.0; labels.len() * dim];
    let mut bias = vec![0.0; labels.len()];
    for (l, label) in labels.iter().enumerate() {
        let ys: Vec<f64> = docs.iter().map(|d| f64::from(u8::from(d.labels.contains(label)))).collect();
        let w = &mut weights[l * dim..(l + 1) * dim];
        for _ in 0..config.epochs {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let d = sigmoid(dot(w, x) + bias[l]) - y;
                add_scaled(&mut gw, d / n, x);
                gb += d / n;
            }
            add_scaled(&mut gw, config.l2, w);
            add_scaled(w, -config.learning_rate, &gw);
            bias[l] -= config.learning_rate * gb;
        }
    }
    Ok(DocClassifier {
        labels,
        dim,
        idf,
        default_idf,
        weights,
        bias,
    })
}

impl DocClassifier {
    /// Per-label probabilities; `None` when the text has no known words.
    pub fn probabilities(&self, text: &str, vocab: &Vocab) -> Option<Vec<f64>> {
        let x = embed(text, vocab, &self.idf, self.default_idf)?;
        Some(
            (0..self.labels.len())
                .map(|l| sigmoid(dot(&self.weights[l * self.dim..(l + 1) * self.dim], &x) + self.bias[l]))
                .collect(),
        )
    }

    /// Every label with probability at or above `threshold`.
    pub fn classify(&self, text: &str, vocab: &Vocab, threshold: f64) -> BTreeSet<String> {
        let Some(p) = self.probabilities(text, vocab) else {
            return BTreeSet::new();
        };
        self.labels
            .iter()
            .zip(p)
            .filter(|(_, p)| *p >= threshold)
            .map(|(l, _)| l.clone())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.len(self.labels.len());
        for l in &self.labels {
            e.str(l);
        }
        e.len(self.dim).f64(self.default_idf).len(self.idf.len());
        for (w, v) in &self.idf {
            e.str(w).f64(*v);
        }
        e.f64s(&self.weights).f64s(&self.bias);
        e.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, NerlError> {
        let mut d = Decoder::new(data, MAGIC, VERSION)?;
        let labels = (0..d.len()?).map(|_| d.str()).collect::<Result<Vec<_>, _>>()?;
        let dim = d.len()?;
        let default_idf = d.f64()?;
        let mut idf = BTreeMap::new();
        for _ in 0..d.len()? {
            let w = d.str()?;
            idf.insert(w, d.f64()?);
        }
        let weights = d.f64s()?;
        let bias = d.f64s()?;
        d.finish()?;
        if bias.len() != labels.len() || weights.len() != labels.len() * dim {
            return Err(NerlError::Bundle("document classifier has inconsistent dimensions".into()));
        }
        Ok(Self {
            labels,
            dim,
            idf,
            default_idf,
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
