use std::sync::OnceLock;

use regex::Regex;

use super::{DeidConfig, PhiCategory, PhiDetector, PhiSpan};
use crate::text::CharIndex;

const MONTH: &str = r"(?:Jan(?:uary)?|Feb(?:ruary)?|Mar(?:ch)?|Apr(?:il)?|May|June?|July?|Aug(?:ust)?|Sept?(?:ember)?|Oct(?:ober)?|Nov(?:ember)?|Dec(?:ember)?)";

struct Patterns {
    email: Regex,
    phone_national: Regex,
    phone_intl: Regex,
    id: Vec<Regex>,
    date: Vec<Regex>,
    postcode: Regex,
    age: Regex,
    titled_name: Regex,
    word: Regex,
    word_run: Regex,
}

const TITLES: [&str; 6] = ["dr", "mr", "mrs", "ms", "miss", "prof"];

fn is_title(word: &str) -> bool {
    TITLES.contains(&word.trim_end_matches('.').to_lowercase().as_str())
}

fn patterns() -> &'static Patterns {
    static PATTERNS: OnceLock<Patterns> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let re = |p: &str| Regex::new(p).expect("static pattern");
        Patterns {
            email: re(r"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}\b"),
            phone_national: re(r"(?:\(0\d{2,4}\)|\b0\d{2,4})[ -]?\d{3,4}[ -]?\d{3,4}\b"),
            phone_intl: re(r"\+44 ?(?:\(0\))? ?\d{2,4}[ -]?\d{3,4}[ -]?\d{3,4}\b"),
            id: vec![re(r"\b\d{3}[ -]\d{3}[ -]\d{4}\b"), re(r"\b\d{7,}\b")],
            date: vec![
                re(r"\b\d{1,2}[/.-]\d{1,2}[/.-](?:\d{4}|\d{2})\b"),
                re(r"\b\d{4}-\d{1,2}-\d{1,2}\b"),
                re(&format!(r"\b\d{{1,2}}(?:st|nd|rd|th)? {MONTH}\.?,? \d{{4}}\b")),
                re(&format!(r"\b{MONTH}\.? \d{{1,2}}(?:st|nd|rd|th)?,? \d{{4}}\b")),
                re(&format!(r"\b{MONTH}\.? \d{{4}}\b")),
                re(&format!(r"\b\d{{1,2}}(?:st|nd|rd|th)? {MONTH}\b")),
            ],
            postcode: re(r"\b[A-Z]{1,2}\d[A-Z\d]? ?\d[A-Z]{2}\b"),
            age: re(r"(?i)\b(\d{2,3}) ?-?(?:years?|yrs?|yo|y/o)\b"),
            titled_name: re(r"\b(?:Dr|Mr|Mrs|Ms|Miss|Prof|DR|MR|MRS|MS)\.? +(\p{Lu}\p{L}*(?:['-]\p{Lu}\p{L}*)*\b(?: +\p{Lu}\p{L}*(?:['-]\p{Lu}\p{L}*)*\b){0,2})"),
            word: re(r"\p{L}+"),
            word_run: re(r"\S+"),
        }
    })
}

/// The fixed rule set: dates, UK phone numbers, emails, NHS numbers and long
/// digit runs, UK postcodes, dictionary or title-triggered names, and ages
/// of 90 and above.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleDetector;

fn push(out: &mut Vec<PhiSpan>, text: &str, chars: &CharIndex, b0: usize, b1: usize, category: PhiCategory) {
    out.push(PhiSpan {
        start: chars.char_at(b0),
        end: chars.char_at(b1),
        category,
        matched: text[b0..b1].to_string(),
    });
}

/// Leftmost match at every start position, so a spurious match cannot hide
/// an overlapping real one from the overlap resolver.
fn all_matches<'r, 't>(re: &'r Regex, text: &'t str) -> impl Iterator<Item = regex::Match<'t>> + use<'r, 't> {
    let mut at = 0;
    std::iter::from_fn(move || {
        let m = re.find_at(text, at)?;
        at = m.start() + text[m.start()..].chars().next().map_or(1, char::len_utf8);
        Some(m)
    })
}

fn all_captures<'r, 't>(re: &'r Regex, text: &'t str) -> impl Iterator<Item = regex::Captures<'t>> + use<'r, 't> {
    let mut at = 0;
    std::iter::from_fn(move || {
        let c = re.captures_at(text, at)?;
        let start = c.get(0).unwrap().start();
        at = start + text[start..].chars().next().map_or(1, char::len_utf8);
        Some(c)
    })
}

fn digit_count(s: &str) -> usize {
    s.chars().filter(char::is_ascii_digit).count()
}

impl PhiDetector for RuleDetector {
    fn detect(&self, text: &str, chars: &CharIndex, config: &DeidConfig, out: &mut Vec<PhiSpan>) {
        let p = patterns();

        for m in all_matches(&p.email, text) {
            push(out, text, chars, m.start(), m.end(), PhiCategory::Email);
        }
        // UK numbers have 10 or 11 digits including the trunk 0
        for m in all_matches(&p.phone_national, text) {
            if (10..=11).contains(&digit_count(m.as_str())) {
                push(out, text, chars, m.start(), m.end(), PhiCategory::Phone);
            }
        }
        for m in all_matches(&p.phone_intl, text) {
            let national = digit_count(m.as_str()) - 2 - usize::from(m.as_str().contains("(0)"));
            if (9..=10).contains(&national) {
                push(out, text, chars, m.start(), m.end(), PhiCategory::Phone);
            }
        }
        for re in &p.id {
            for m in all_matches(re, text) {
                push(out, text, chars, m.start(), m.end(), PhiCategory::Id);
            }
        }
        for re in &p.date {
            for m in all_matches(re, text) {
                push(out, text, chars, m.start(), m.end(), PhiCategory::Date);
            }
        }
        for m in all_matches(&p.postcode, text) {
            push(out, text, chars, m.start(), m.end(), PhiCategory::Postcode);
        }
        for caps in all_captures(&p.age, text) {
            let n = caps.get(1).unwrap();
            if n.as_str().parse::<u32>().is_ok_and(|v| v >= 90) {
                push(out, text, chars, n.start(), n.end(), PhiCategory::AgeOver89);
            }
        }
        for caps in all_captures(&p.titled_name, text) {
            let n = caps.get(1).unwrap();
            // every prefix is a candidate; a following title starts a new name
            for w in p.word_run.find_iter(n.as_str()) {
                if is_title(w.as_str()) {
                    break;
                }
                push(out, text, chars, n.start(), n.start() + w.end(), PhiCategory::Name);
            }
        }
        detect_dictionary_names(text, chars, config, out);
    }
}

/// Dictionary hits, case-insensitive. Entries may span several words; runs of
/// hits separated only by spaces merge into one span.
fn detect_dictionary_names(text: &str, chars: &CharIndex, config: &DeidConfig, out: &mut Vec<PhiSpan>) {
    let dict = config.name_dictionary();
    if dict.is_empty() {
        return;
    }
    let max_words = dict.iter().map(|e| e.split_whitespace().count()).max().unwrap_or(1);
    let words: Vec<(usize, usize, String)> = patterns()
        .word
        .find_iter(text)
        .map(|m| (m.start(), m.end(), m.as_str().to_lowercase()))
        .collect();

    let mut hits: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut matched = 0;
        for n in (1..=max_words.min(words.len() - i)).rev() {
            let window = &words[i..i + n];
            let joined_by_spaces = window.windows(2).all(|w| text[w[0].1..w[1].0].chars().all(|c| c == ' '));
            if !joined_by_spaces {
                continue;
            }
            let key = window.iter().map(|w| w.2.as_str()).collect::<Vec<_>>().join(" ");
            if dict.contains(&key) {
                matched = n;
                break;
            }
        }
        if matched > 0 {
            let (s, e) = (words[i].0, words[i + matched - 1].1);
            // each entry also stands alone so it survives if the merged run
            // loses an overlap to another category
            push(out, text, chars, s, e, PhiCategory::Name);
            match hits.last_mut() {
                Some(last) if text[last.1..s].chars().all(|c| c == ' ') && !text[last.1..s].is_empty() => last.1 = e,
                _ => hits.push((s, e)),
            }
            i += matched;
        } else {
            i += 1;
        }
    }
    for (s, e) in hits {
        push(out, text, chars, s, e, PhiCategory::Name);
    }
}
