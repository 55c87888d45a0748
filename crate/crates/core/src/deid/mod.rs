//! Rule and dictionary based detection and redaction of protected health
//! information in free text.
//!
//! Detection never fails; it returns sorted, non-overlapping [`PhiSpan`]s.
//! Overlaps between candidate matches are resolved by preferring the longer
//! span, then the higher-priority category, then the leftmost span.

mod rules;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{char_len, CharIndex};
pub use rules::RuleDetector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PhiCategory {
    Name,
    Date,
    Phone,
    Email,
    Id,
    Postcode,
    #[serde(rename = "AGE_OVER_89")]
    AgeOver89,
}

impl PhiCategory {
    pub const ALL: [PhiCategory; 7] = [
        PhiCategory::Name,
        PhiCategory::Date,
        PhiCategory::Phone,
        PhiCategory::Email,
        PhiCategory::Id,
        PhiCategory::Postcode,
        PhiCategory::AgeOver89,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhiCategory::Name => "NAME",
            PhiCategory::Date => "DATE",
            PhiCategory::Phone => "PHONE",
            PhiCategory::Email => "EMAIL",
            PhiCategory::Id => "ID",
            PhiCategory::Postcode => "POSTCODE",
            PhiCategory::AgeOver89 => "AGE_OVER_89",
        }
    }

    /// Lower ranks win ties between equally long overlapping spans.
    fn rank(self) -> u8 {
        match self {
            PhiCategory::Email => 0,
            PhiCategory::Phone => 1,
            PhiCategory::Id => 2,
            PhiCategory::Date => 3,
            PhiCategory::Postcode => 4,
            PhiCategory::Name => 5,
            PhiCategory::AgeOver89 => 6,
        }
    }
}

impl fmt::Display for PhiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhiCategory {
    type Err = DeidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PhiCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DeidError::Config(format!("unknown category `{s}`")))
    }
}

/// A detected identifier. Offsets are character offsets, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhiSpan {
    pub start: usize,
    pub end: usize,
    pub category: PhiCategory,
    pub matched: String,
}

#[derive(Debug, Error)]
pub enum DeidError {
    #[error("spans overlap at offset {0}")]
    OverlappingSpans(usize),
    #[error("span {start}..{end} is outside text of length {len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("placeholder template must contain {{CATEGORY}}")]
    InvalidTemplate,
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const DEFAULT_NAMES: &str = include_str!("../../data/names.txt");
const DEFAULT_SAFE_LIST: &str = include_str!("../../data/safe_list.txt");

fn parse_word_list(content: &str) -> BTreeSet<String> {
    content
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeidConfig {
    // already has the safe list subtracted
    name_dictionary: BTreeSet<String>,
    safe_list: BTreeSet<String>,
    categories: BTreeSet<PhiCategory>,
    placeholder: String,
}

impl Default for DeidConfig {
    fn default() -> Self {
        Self::new(
            parse_word_list(DEFAULT_NAMES),
            parse_word_list(DEFAULT_SAFE_LIST),
            PhiCategory::ALL.into_iter().collect(),
            "[{CATEGORY}]",
        )
        .expect("default deid config is valid")
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeidConfigFile {
    name_dictionary: Option<String>,
    safe_list: Option<String>,
    categories: Option<Vec<PhiCategory>>,
    placeholder: Option<String>,
}

impl DeidConfig {
    pub fn new(
        names: impl IntoIterator<Item = String>,
        safe_list: impl IntoIterator<Item = String>,
        categories: BTreeSet<PhiCategory>,
        placeholder: &str,
    ) -> Result<Self, DeidError> {
        if !placeholder.contains("{CATEGORY}") {
            return Err(DeidError::InvalidTemplate);
        }
        let safe_list: BTreeSet<String> = safe_list.into_iter().map(|s| s.trim().to_lowercase()).collect();
        let name_dictionary = names
            .into_iter()
            .map(|s| s.trim().to_lowercase())
            .filter(|s| !s.is_empty() && !safe_list.contains(s))
            .collect();
        Ok(Self {
            name_dictionary,
            safe_list,
            categories,
            placeholder: placeholder.to_string(),
        })
    }

    /// Loads a JSON config. Word-list paths are resolved relative to the
    /// config file; omitted keys fall back to the defaults.
    pub fn load(path: &Path) -> Result<Self, DeidError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| DeidError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let file: DeidConfigFile =
            serde_json::from_str(&read(path)?).map_err(|e| DeidError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let names = match &file.name_dictionary {
            Some(p) => parse_word_list(&read(&base.join(p))?),
            None => parse_word_list(DEFAULT_NAMES),
        };
        let safe = match &file.safe_list {
            Some(p) => parse_word_list(&read(&base.join(p))?),
            None => parse_word_list(DEFAULT_SAFE_LIST),
        };
        let categories = file
            .categories
            .map(|c| c.into_iter().collect())
            .unwrap_or_else(|| PhiCategory::ALL.into_iter().collect());
        Self::new(names, safe, categories, file.placeholder.as_deref().unwrap_or("[{CATEGORY}]"))
    }

    pub fn with_categories(mut self, categories: impl IntoIterator<Item = PhiCategory>) -> Self {
        self.categories = categories.into_iter().collect();
        self
    }

    pub fn name_dictionary(&self) -> &BTreeSet<String> {
        &self.name_dictionary
    }

    pub fn safe_list(&self) -> &BTreeSet<String> {
        &self.safe_list
    }

    pub fn categories(&self) -> &BTreeSet<PhiCategory> {
        &self.categories
    }

    pub fn placeholder(&self, category: PhiCategory) -> String {
        self.placeholder.replace("{CATEGORY}", category.as_str())
    }
}

/// A source of candidate spans. Candidates may overlap; the caller resolves.
pub trait PhiDetector: Send + Sync {
    fn detect(&self, text: &str, chars: &CharIndex, config: &DeidConfig, out: &mut Vec<PhiSpan>);
}

/// The rule detector plus any additional detectors.
pub struct Deidentifier {
    config: DeidConfig,
    detectors: Vec<Box<dyn PhiDetector>>,
}

impl Deidentifier {
    pub fn new(config: DeidConfig) -> Self {
        Self {
            config,
            detectors: vec![Box::new(RuleDetector)],
        }
    }

    pub fn with_detector(mut self, detector: Box<dyn PhiDetector>) -> Self {
        self.detectors.push(detector);
        self
    }

    pub fn config(&self) -> &DeidConfig {
        &self.config
    }

    pub fn detect(&self, text: &str) -> Vec<PhiSpan> {
        let chars = CharIndex::new(text);
        let mut candidates = Vec::new();
        for d in &self.detectors {
            d.detect(text, &chars, &self.config, &mut candidates);
        }
        let masked = placeholder_ranges(text, &chars, &self.config);
        candidates.retain(|c| {
            self.config.categories.contains(&c.category)
                && c.start < c.end
                && !masked.iter().any(|&(s, e)| c.start < e && s < c.end)
        });
        resolve_overlaps(candidates)
    }

    pub fn redact(&self, text: &str, spans: &[PhiSpan]) -> Result<String, DeidError> {
        redact(text, spans, &self.config)
    }

    pub fn deidentify(&self, text: &str) -> (String, Vec<PhiSpan>) {
        let spans = self.detect(text);
        let out = self.redact(text, &spans).expect("detected spans are valid");
        (out, spans)
    }
}

/// Occurrences of rendered placeholders; nothing inside them is re-detected.
fn placeholder_ranges(text: &str, chars: &CharIndex, config: &DeidConfig) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    for cat in PhiCategory::ALL {
        let p = config.placeholder(cat);
        if p.is_empty() {
            continue;
        }
        for (b, _) in text.match_indices(p.as_str()) {
            ranges.push((chars.char_at(b), chars.char_at(b + p.len())));
        }
    }
    ranges
}

fn resolve_overlaps(mut candidates: Vec<PhiSpan>) -> Vec<PhiSpan> {
    candidates.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(a.category.rank().cmp(&b.category.rank()))
            .then(a.start.cmp(&b.start))
    });
    // accepted spans keyed by start
    let mut accepted: BTreeMap<usize, PhiSpan> = BTreeMap::new();
    for c in candidates {
        let clash_before = accepted
            .range(..c.end)
            .next_back()
            .is_some_and(|(_, prev)| prev.end > c.start);
        if !clash_before {
            accepted.insert(c.start, c);
        }
    }
    accepted.into_values().collect()
}

/// Detects PHI with the built-in rule set.
pub fn detect_phi(text: &str, config: &DeidConfig) -> Vec<PhiSpan> {
    Deidentifier::new(config.clone()).detect(text)
}

/// Replaces every span with the category placeholder; all other text is
/// copied unchanged.
pub fn redact(text: &str, spans: &[PhiSpan], config: &DeidConfig) -> Result<String, DeidError> {
    let len = char_len(text);
    let mut sorted: Vec<&PhiSpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    let mut last_end = 0;
    for (i, s) in sorted.iter().enumerate() {
        if s.start >= s.end || s.end > len {
            return Err(DeidError::SpanOutOfBounds {
                start: s.start,
                end: s.end,
                len,
            });
        }
        if i > 0 && s.start < last_end {
            return Err(DeidError::OverlappingSpans(s.start));
        }
        last_end = s.end;
    }

    let mut out = String::with_capacity(text.len());
    let mut next = sorted.iter().peekable();
    let mut skip_until = 0;
    for (i, ch) in text.chars().enumerate() {
        if let Some(span) = next.peek().filter(|s| s.start == i) {
            out.push_str(&config.placeholder(span.category));
            skip_until = span.end;
            next.next();
        }
        if i >= skip_until {
            out.push(ch);
        }
    }
    Ok(out)
}
