//! Trial eligibility over clinical events with a moving time window, and
//! concordance statistics against manual screening.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{parse_timestamp, Document};
use crate::nerl::EntityMention;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("events belong to more than one patient ({0} and {1})")]
    MixedPatients(String, String),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("manual screening set is empty")]
    EmptyManualSet,
    #[error("events line {line}: {reason}")]
    BadEvent { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub patient_id: String,
    pub cui: String,
    pub timestamp: DateTime<Utc>,
    pub doc_id: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionLookback {
    /// Any exclusion event at or before `t` disqualifies.
    #[default]
    FullHistory,
    /// Only exclusion events inside `[t - D, t]` disqualify.
    Window,
}

fn default_window() -> i64 {
    60
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityRule {
    pub inclusion: BTreeSet<String>,
    #[serde(default)]
    pub exclusion: BTreeSet<String>,
    #[serde(default = "default_window")]
    pub window_minutes: i64,
    #[serde(default)]
    pub exclusion_lookback: ExclusionLookback,
}

impl EligibilityRule {
    pub fn new<I, J, S, T>(inclusion: I, exclusion: J, window_minutes: i64) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        Self {
            inclusion: inclusion.into_iter().map(Into::into).collect(),
            exclusion: exclusion.into_iter().map(Into::into).collect(),
            window_minutes,
            exclusion_lookback: ExclusionLookback::FullHistory,
        }
    }

    pub fn window(&self) -> Duration {
        Duration::minutes(self.window_minutes)
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        if self.inclusion.is_empty() {
            return Err(CohortError::InvalidRule("inclusion set is empty".into()));
        }
        if let Some(c) = self.inclusion.intersection(&self.exclusion).next() {
            return Err(CohortError::InvalidRule(format!("{c} is both included and excluded")));
        }
        if self.window_minutes <= 0 {
            return Err(CohortError::InvalidRule("window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityResult {
    pub eligible: bool,
    pub index_date: Option<DateTime<Utc>>,
}

/// Whether the patient is eligible at instant `t`.
pub fn eligible_at(events: &[ClinicalEvent], rule: &EligibilityRule, t: DateTime<Utc>) -> bool {
    let from = t - rule.window();
    let included = rule
        .inclusion
        .iter()
        .all(|c| events.iter().any(|e| &e.cui == c && e.timestamp >= from && e.timestamp <= t));
    let excluded = events.iter().any(|e| {
        rule.exclusion.contains(&e.cui)
            && e.timestamp <= t
            && (rule.exclusion_lookback == ExclusionLookback::FullHistory || e.timestamp >= from)
    });
    included && !excluded
}

/// Earliest instant at which every inclusion concept has an event in the
/// trailing window and no exclusion event disqualifies.
pub fn evaluate_eligibility(events: &[ClinicalEvent], rule: &EligibilityRule) -> Result<EligibilityResult, CohortError> {
    rule.validate()?;
    if let Some(first) = events.first() {
        if let Some(other) = events.iter().find(|e| e.patient_id != first.patient_id) {
            return Err(CohortError::MixedPatients(first.patient_id.clone(), other.patient_id.clone()));
        }
    }
    // Eligibility can only begin when an inclusion event enters the window,
    // or (window-only lookback) just after an exclusion event leaves it.
    let mut candidates: BTreeSet<DateTime<Utc>> = events
        .iter()
        .filter(|e| rule.inclusion.contains(&e.cui))
        .map(|e| e.timestamp)
        .collect();
    if rule.exclusion_lookback == ExclusionLookback::Window {
        candidates.extend(
            events
                .iter()
                .filter(|e| rule.exclusion.contains(&e.cui))
                .map(|e| e.timestamp + rule.window() + Duration::nanoseconds(1)),
        );
    }
    let index_date = candidates.into_iter().find(|&t| eligible_at(events, rule, t));
    Ok(EligibilityResult {
        eligible: index_date.is_some(),
        index_date,
    })
}

/// Evaluates every patient in `events`.
pub fn evaluate_cohort(events: &[ClinicalEvent], rule: &EligibilityRule) -> Result<BTreeMap<String, EligibilityResult>, CohortError> {
    rule.validate()?;
    let mut by_patient: BTreeMap<&str, Vec<ClinicalEvent>> = BTreeMap::new();
    for e in events {
        by_patient.entry(&e.patient_id).or_default().push(e.clone());
    }
    by_patient
        .into_iter()
        .map(|(p, evs)| Ok((p.to_string(), evaluate_eligibility(&evs, rule)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    pub sensitivity: f64,
    pub wilson_95_ci: (f64, f64),
    pub n_manual: usize,
    pub n_both: usize,
    pub n_auto_earlier: usize,
    pub n_equal: usize,
    pub n_manual_earlier: usize,
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Sensitivity of automatic identification against manual screening, with
/// index-date agreement compared by calendar day.
pub fn screening_concordance(
    auto: &BTreeMap<String, DateTime<Utc>>,
    manual: &BTreeMap<String, DateTime<Utc>>,
) -> Result<Concordance, CohortError> {
    if manual.is_empty() {
        return Err(CohortError::EmptyManualSet);
    }
    let (mut earlier, mut equal, mut later, mut both) = (0, 0, 0, 0);
    for (p, m) in manual {
        let Some(a) = auto.get(p) else { continue };
        both += 1;
        match a.date_naive().cmp(&m.date_naive()) {
            std::cmp::Ordering::Less => earlier += 1,
            std::cmp::Ordering::Equal => equal += 1,
            std::cmp::Ordering::Greater => later += 1,
        }
    }
    Ok(Concordance {
        sensitivity: both as f64 / manual.len() as f64,
        wilson_95_ci: wilson_interval(both, manual.len(), Z_95),
        n_manual: manual.len(),
        n_both: both,
        n_auto_earlier: earlier,
        n_equal: equal,
        n_manual_earlier: later,
    })
}

/// Reads `patient_id,cui,timestamp,doc_id` rows (with header).
pub fn read_events(reader: impl Read) -> Result<Vec<ClinicalEvent>, CohortError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| CohortError::BadEvent { line: i + 2, reason };
        if rec.len() < 3 {
            return Err(bad("expected patient_id,cui,timestamp,doc_id".into()));
        }
        if rec[1].is_empty() {
            return Err(bad("empty cui".into()));
        }
        out.push(ClinicalEvent {
            patient_id: rec[0].to_string(),
            cui: rec[1].to_string(),
            timestamp: parse_timestamp(&rec[2]).map_err(|e| bad(e.to_string()))?,
            doc_id: rec.get(3).unwrap_or_default().to_string(),
        });
    }
    Ok(out)
}

/// Writes `patient_id,eligible,index_date`.
pub fn write_results(writer: impl Write, results: &BTreeMap<String, EligibilityResult>) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["patient_id", "eligible", "index_date"])?;
    for (p, r) in results {
        let date = r
            .index_date
            .map(|d| d.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true))
            .unwrap_or_default();
        w.write_record([p.as_str(), if r.eligible { "true" } else { "false" }, &date])?;
    }
    w.flush()?;
    Ok(())
}

/// Events for the affirmed, patient-experienced mentions of a document,
/// stamped with the document's timestamp.
pub fn events_from_mentions(doc: &Document, mentions: &[EntityMention]) -> Vec<ClinicalEvent> {
    mentions
        .iter()
        .filter(|m| m.meta.get("negation").map(String::as_str) != Some("negated"))
        .filter(|m| m.meta.get("experiencer").map(String::as_str) != Some("other"))
        .map(|m| ClinicalEvent {
            patient_id: doc.patient_id.clone(),
            cui: m.cui.clone(),
            timestamp: doc.timestamp,
            doc_id: doc.doc_id.clone(),
        })
        .collect()
}
