use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vector::{dot, normalize, sigmoid};
use super::NerlError;
use crate::codec::{Decoder, Encoder};
use crate::text::tokenize;

const MAGIC: [u8; 4] = *b"MTVC";
const VERSION: u16 = 1;

const LR_START: f64 = 0.025;
const LR_END: f64 = 0.0001;

/// Word counts and unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    dim: usize,
    words: Vec<String>,
    counts: Vec<u64>,
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocab from explicit vectors, normalizing each one.
    pub fn from_vectors(entries: Vec<(String, u64, Vec<f64>)>) -> Result<Self, NerlError> {
        let dim = entries.first().map_or(0, |e| e.2.len());
        let mut v = Vocab {
            dim,
            words: Vec::new(),
            counts: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        };
        for (word, count, mut vec) in entries {
            if vec.len() != dim || !normalize(&mut vec) {
                return Err(NerlError::InvalidDimension(vec.len()));
            }
            v.index.insert(word.clone(), v.words.len());
            v.words.push(word);
            v.counts.push(count.max(1));
            v.vectors.extend(vec);
        }
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn count(&self, word: &str) -> Option<u64> {
        self.index.get(word).map(|&i| self.counts[i])
    }

    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn similarity(&self, a: &str, b: &str) -> Option<f64> {
        Some(dot(self.vector(a)?, self.vector(b)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.len(self.dim).len(self.words.len());
        for (i, w) in self.words.iter().enumerate() {
            e.str(w).u64(self.counts[i]);
            for x in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                e.f64(*x);
            }
        }
        e.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, NerlError> {
        let mut d = Decoder::new(data, MAGIC, VERSION)?;
        let dim = d.len()?;
        let n = d.len()?;
        let mut v = Vocab {
            dim,
            words: Vec::with_capacity(n),
            counts: Vec::with_capacity(n),
            vectors: Vec::with_capacity(n * dim),
            index: HashMap::with_capacity(n),
        };
        for i in 0..n {
            let w = d.str()?;
            v.counts.push(d.u64()?);
            for _ in 0..dim {
                v.vectors.push(d.f64()?);
            }
            v.index.insert(w.clone(), i);
            v.words.push(w);
        }
        d.finish()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), NerlError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NerlError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Word2VecConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub min_count: u64,
    pub seed: u64,
}

impl Default for Word2VecConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            window: 5,
            negatives: 5,
            epochs: 5,
            min_count: 1,
            seed: 42,
        }
    }
}

/// Skip-gram with negative sampling. Deterministic for a given seed.
pub fn train_word_embeddings<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    config: &Word2VecConfig,
) -> Result<Vocab, NerlError> {
    if config.dim < 2 {
        return Err(NerlError::InvalidDimension(config.dim));
    }
    let docs: Vec<Vec<String>> = corpus
        .into_iter()
        .map(|d| tokenize(d).into_iter().map(|t| t.text).collect())
        .collect();
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for w in docs.iter().flatten() {
        *counts.entry(w).or_default() += 1;
    }
    let mut entries: Vec<(&str, u64)> = counts.into_iter().filter(|(_, c)| *c >= config.min_count).collect();
    if entries.is_empty() {
        return Err(NerlError::EmptyCorpus);
    }
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let index: HashMap<&str, usize> = entries.iter().enumerate().map(|(i, (w, _))| (*w, i)).collect();
    let sentences: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.iter().filter_map(|w| index.get(w.as_str()).copied()).collect())
        .collect();

    let n = entries.len();
    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input: Vec<f64> = (0..n * dim).map(|_| (rng.gen::<f64>() - 0.5) / dim as f64).collect();
    let mut output = vec![0.0; n * dim];

    // cumulative unigram^0.75 for negative sampling
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for (_, c) in &entries {
        acc += (*c as f64).powf(0.75);
        cumulative.push(acc);
    }
    let total_weight = acc;

    let total_steps = (config.epochs * sentences.iter().map(Vec::len).sum::<usize>()).max(1);
    let mut step = 0usize;
    let mut neu = vec![0.0; dim];
    for _ in 0..config.epochs {
        for sent in &sentences {
            for (i, &center) in sent.iter().enumerate() {
                let lr = (LR_START - (LR_START - LR_END) * step as f64 / total_steps as f64).max(LR_END);
                step += 1;
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window + 1).min(sent.len());
                for (j, &context) in sent.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    neu.iter_mut().for_each(|x| *x = 0.0);
                    let v = center * dim..(center + 1) * dim;
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let r = rng.gen::<f64>() * total_weight;
                            let t = cumulative.partition_point(|&c| c <= r).min(n - 1);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let u = target * dim..(target + 1) * dim;
                        let f = sigmoid(dot(&input[v.clone()], &output[u.clone()]));
                        let g = lr * (label - f);
                        for d in 0..dim {
                            neu[d] += g * output[u.start + d];
                            output[u.start + d] += g * input[v.start + d];
                        }
                    }
                    for d in 0..dim {
                        input[v.start + d] += neu[d];
                    }
                }
            }
        }
    }

    for row in input.chunks_mut(dim) {
        normalize(row);
    }
    Ok(Vocab {
        dim,
        words: entries.iter().map(|(w, _)| w.to_string()).collect(),
        counts: entries.iter().map(|(_, c)| *c).collect(),
        vectors: input,
        index: entries.iter().enumerate().map(|(i, (w, _))| (w.to_string(), i)).collect(),
    })
}
