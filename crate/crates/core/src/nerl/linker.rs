use serde::{Deserialize, Serialize};

use super::vector::{add_scaled, cosine, normalize};
use super::{ConceptDatabase, EntityMention, NerlError, Vocab};
use crate::text::Token;

/// A name match over tokens `token_start..token_end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub token_start: usize,
    pub token_end: usize,
    pub name: String,
    /// Sorted.
    pub cuis: Vec<String>,
}

impl Candidate {
    pub fn is_ambiguous(&self) -> bool {
        self.cuis.len() > 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    /// Minimum cosine for a trained concept to link.
    pub theta: f64,
    /// Confidence given to an unambiguous, untrained concept.
    pub untrained_confidence: f64,
    /// Context half-width in token positions.
    pub window: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            theta: 0.3,
            untrained_confidence: 0.5,
            window: 9,
        }
    }
}

/// Greedy left-to-right longest match of concept names over token n-grams.
pub fn detect_candidates(tokens: &[Token], cdb: &ConceptDatabase) -> Vec<Candidate> {
    let mut out = Vec::new();
    let max = cdb.max_name_len();
    let mut i = 0;
    while i < tokens.len() {
        let mut found = None;
        for n in (1..=max.min(tokens.len() - i)).rev() {
            let name = tokens[i..i + n].iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ");
            if let Some(cuis) = cdb.lookup(&name) {
                found = Some((n, name, cuis.iter().cloned().collect()));
                break;
            }
        }
        match found {
            Some((n, name, cuis)) => {
                out.push(Candidate {
                    token_start: i,
                    token_end: i + n,
                    name,
                    cuis,
                });
                i += n;
            }
            None => i += 1,
        }
    }
    out
}

/// Unit-normalized mean of the known words within `window` positions on
/// each side of `start..end`, excluding the span itself.
pub fn compute_context_vector(
    tokens: &[Token],
    start: usize,
    end: usize,
    vocab: &Vocab,
    window: usize,
) -> Result<Vec<f64>, NerlError> {
    if start >= end || end > tokens.len() {
        return Err(NerlError::BadSpan { start, end });
    }
    let left = start.saturating_sub(window)..start;
    let right = end..(end + window).min(tokens.len());
    let mut sum = vec![0.0; vocab.dim()];
    let mut known = 0usize;
    for t in tokens[left].iter().chain(&tokens[right]) {
        if let Some(v) = vocab.vector(&t.text) {
            add_scaled(&mut sum, 1.0, v);
            known += 1;
        }
    }
    if known == 0 {
        return Err(NerlError::NoContext);
    }
    for x in &mut sum {
        *x /= known as f64;
    }
    if !normalize(&mut sum) {
        return Err(NerlError::NoContext);
    }
    Ok(sum)
}

/// Resolves candidates to concepts. Mentions carry empty meta maps.
pub fn link_entities(
    candidates: &[Candidate],
    tokens: &[Token],
    cdb: &ConceptDatabase,
    vocab: &Vocab,
    config: &LinkConfig,
) -> Vec<EntityMention> {
    let mut out = Vec::new();
    for cand in candidates {
        let context = || compute_context_vector(tokens, cand.token_start, cand.token_end, vocab, config.window).ok();
        let linked = if let [cui] = cand.cuis.as_slice() {
            let Some(concept) = cdb.concept(cui) else { continue };
            match concept.mean() {
                None => Some((cui.clone(), config.untrained_confidence)),
                Some(mean) => context()
                    .map(|ctx| cosine(mean, &ctx))
                    .filter(|&s| s >= config.theta)
                    .map(|s| (cui.clone(), s)),
            }
        } else {
            let trained: Vec<(&String, &[f64])> = cand
                .cuis
                .iter()
                .filter_map(|c| cdb.concept(c).and_then(|x| x.mean()).map(|m| (c, m)))
                .collect();
            if trained.is_empty() {
                None
            } else {
                context().and_then(|ctx| {
                    let mut best: Option<(&String, f64)> = None;
                    for (c, m) in trained {
                        let s = cosine(m, &ctx);
                        if best.is_none_or(|(_, b)| s > b) {
                            best = Some((c, s));
                        }
                    }
                    best.filter(|(_, s)| *s >= config.theta).map(|(c, s)| (c.clone(), s))
                })
            }
        };
        if let Some((cui, confidence)) = linked {
            out.push(EntityMention {
                start: tokens[cand.token_start].start,
                end: tokens[cand.token_end - 1].end,
                token_start: cand.token_start,
                token_end: cand.token_end,
                name: cand.name.clone(),
                cui,
                confidence: confidence.clamp(0.0, 1.0),
                meta: Default::default(),
            });
        }
    }
    out
}
