use serde::{Deserialize, Serialize};

use super::vector::add_scaled;
use super::{compute_context_vector, detect_candidates, ConceptDatabase, LinkConfig, NerlError, Vocab};
use crate::text::tokenize;

/// Updates concept means from every unambiguous match with a context.
/// Returns the number of updates applied.
pub fn train_self_supervised<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    cdb: &mut ConceptDatabase,
    vocab: &Vocab,
    config: &LinkConfig,
) -> usize {
    let mut updates = 0;
    for text in corpus {
        let tokens = tokenize(text);
        for cand in detect_candidates(&tokens, cdb) {
            let [cui] = cand.cuis.as_slice() else { continue };
            let Ok(ctx) = compute_context_vector(&tokens, cand.token_start, cand.token_end, vocab, config.window) else {
                continue;
            };
            let concept = cdb.concept_mut(cui).expect("candidate cui in cdb");
            let n = concept.train_count as f64;
            match concept.mean_mut() {
                Some(mean) => {
                    for (m, c) in mean.iter_mut().zip(&ctx) {
                        *m = (n * *m + c) / (n + 1.0);
                    }
                }
                None => concept.set_mean(ctx),
            }
            concept.train_count += 1;
            updates += 1;
        }
    }
    updates
}

/// A human verdict on a concept at a character span of `text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedExample {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub cui: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedExample {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedReport {
    pub applied: usize,
    pub skipped: Vec<SkippedExample>,
}

/// Applies verdicts in input order. Positives pull the mean toward the
/// context (or set it when untrained); negatives push it away. A negative on
/// an untrained concept has nothing to move and is skipped.
pub fn train_supervised(
    examples: &[SupervisedExample],
    cdb: &mut ConceptDatabase,
    vocab: &Vocab,
    lr: f64,
    config: &LinkConfig,
) -> Result<SupervisedReport, NerlError> {
    if let Some(ex) = examples.iter().find(|e| cdb.concept(&e.cui).is_none()) {
        return Err(NerlError::UnknownCui(ex.cui.clone()));
    }
    let mut report = SupervisedReport::default();
    for (index, ex) in examples.iter().enumerate() {
        let mut skip = |reason: String| report.skipped.push(SkippedExample { index, reason });
        let tokens = tokenize(&ex.text);
        let inside: Vec<usize> = tokens
            .iter()
            .filter(|t| t.start >= ex.start && t.end <= ex.end)
            .map(|t| t.position)
            .collect();
        let (Some(&first), Some(&last)) = (inside.first(), inside.last()) else {
            skip(NerlError::BadSpan { start: ex.start, end: ex.end }.to_string());
            continue;
        };
        let ctx = match compute_context_vector(&tokens, first, last + 1, vocab, config.window) {
            Ok(c) => c,
            Err(e) => {
                skip(e.to_string());
                continue;
            }
        };
        let concept = cdb.concept_mut(&ex.cui).expect("checked above");
        match (concept.mean_mut(), ex.correct) {
            (None, true) => concept.set_mean(ctx),
            (Some(mean), true) => {
                for (m, c) in mean.iter_mut().zip(&ctx) {
                    *m += lr * (c - *m);
                }
            }
            (Some(mean), false) => add_scaled(mean, -lr, &ctx),
            (None, false) => {
                skip("negative verdict on an untrained concept".into());
                continue;
            }
        }
        if ex.correct {
            concept.train_count += 1;
        }
        report.applied += 1;
    }
    Ok(report)
}
