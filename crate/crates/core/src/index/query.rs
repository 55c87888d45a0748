//! Query language: a Lucene-like subset with boolean operators, phrases,
//! prefixes, field filters and date ranges.
//!
//! ```text
//! query   := or
//! or      := and ("OR" and)*
//! and     := unary (("AND")? unary)*
//! unary   := "NOT" unary | primary
//! primary := "(" query ")" | phrase | fieldterm | prefix | term
//! phrase  := '"' term+ '"'
//! fieldterm := ident ":" (term | range)
//! range   := "[" value "TO" value "]"
//! prefix  := term "*"
//! ```
//!
//! A lone `*` matches every document.

use std::fmt;

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::ingest::parse_timestamp;
use crate::text::tokenize;

/// Stored fields usable in `field:value` filters.
pub const FILTER_FIELDS: [&str; 3] = ["doc_type", "patient_id", "source"];
/// Stored fields usable in date ranges.
pub const DATE_FIELDS: [&str; 1] = ["timestamp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QueryAst {
    Term { term: String },
    Phrase { terms: Vec<String> },
    Prefix { prefix: String },
    And { clauses: Vec<QueryAst> },
    Or { clauses: Vec<QueryAst> },
    Not { clause: Box<QueryAst> },
    FieldFilter { field: String, value: String },
    DateRange {
        field: String,
        from: Option<DateTime<Utc>>,
        to: Option<DateTime<Utc>>,
    },
    MatchAll,
}

impl QueryAst {
    pub fn term(t: &str) -> Self {
        QueryAst::Term { term: t.to_string() }
    }

    pub fn phrase(terms: &[&str]) -> Self {
        QueryAst::Phrase {
            terms: terms.iter().map(|t| t.to_string()).collect(),
        }
    }

    pub fn prefix(p: &str) -> Self {
        QueryAst::Prefix { prefix: p.to_string() }
    }

    pub fn and(clauses: Vec<QueryAst>) -> Self {
        QueryAst::And { clauses }
    }

    pub fn or(clauses: Vec<QueryAst>) -> Self {
        QueryAst::Or { clauses }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(clause: QueryAst) -> Self {
        QueryAst::Not {
            clause: Box::new(clause),
        }
    }

    pub fn field(field: &str, value: &str) -> Self {
        QueryAst::FieldFilter {
            field: field.to_string(),
            value: value.to_string(),
        }
    }

    /// Whether the node restricts to a bounded set without relying on a
    /// complement over the whole corpus.
    pub fn is_positive(&self) -> bool {
        match self {
            QueryAst::Not { .. } => false,
            QueryAst::And { clauses } => clauses.iter().any(QueryAst::is_positive),
            QueryAst::Or { clauses } => clauses.iter().all(QueryAst::is_positive),
            _ => true,
        }
    }

    fn is_compound(&self) -> bool {
        matches!(self, QueryAst::And { .. } | QueryAst::Or { .. })
    }
}

fn fmt_instant(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let child = |f: &mut fmt::Formatter<'_>, c: &QueryAst| {
            if c.is_compound() {
                write!(f, "({c})")
            } else {
                write!(f, "{c}")
            }
        };
        match self {
            QueryAst::Term { term } => f.write_str(term),
            QueryAst::Phrase { terms } => write!(f, "\"{}\"", terms.join(" ")),
            QueryAst::Prefix { prefix } => write!(f, "{prefix}*"),
            QueryAst::And { clauses } | QueryAst::Or { clauses } => {
                let op = if matches!(self, QueryAst::And { .. }) { " AND " } else { " OR " };
                for (i, c) in clauses.iter().enumerate() {
                    if i > 0 {
                        f.write_str(op)?;
                    }
                    child(f, c)?;
                }
                Ok(())
            }
            QueryAst::Not { clause } => {
                f.write_str("NOT ")?;
                child(f, clause)
            }
            QueryAst::FieldFilter { field, value } => write!(f, "{field}:{value}"),
            QueryAst::DateRange { field, from, to } => {
                let b = |t: &Option<DateTime<Utc>>| t.as_ref().map(fmt_instant).unwrap_or_else(|| "*".into());
                write!(f, "{field}:[{} TO {}]", b(from), b(to))
            }
            QueryAst::MatchAll => f.write_str("*"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at offset {position}: {message}")]
pub struct QueryError {
    /// Character offset into the query string.
    pub position: usize,
    pub message: String,
}

fn err<T>(position: usize, message: impl Into<String>) -> Result<T, QueryError> {
    Err(QueryError {
        position,
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Lex {
    LParen,
    RParen,
    Colon,
    Star,
    Word(String),
    Quoted(String),
    Range(String),
}

#[derive(Debug, Clone)]
struct Tok {
    lex: Lex,
    start: usize,
    end: usize,
}

fn is_word_char(c: char) -> bool {
    !c.is_whitespace() && !matches!(c, '(' | ')' | '"' | '[' | ']' | ':' | '*')
}

fn lex(input: &str) -> Result<Vec<Tok>, QueryError> {
    let chars: Vec<char> = input.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        let single = |lex| Tok { lex, start, end: start + 1 };
        match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '(' => toks.push(single(Lex::LParen)),
            ')' => toks.push(single(Lex::RParen)),
            ':' => toks.push(single(Lex::Colon)),
            '*' => toks.push(single(Lex::Star)),
            ']' => return err(i, "unbalanced ']'"),
            '"' | '[' => {
                let close = if c == '"' { '"' } else { ']' };
                let Some(len) = chars[i + 1..].iter().position(|&x| x == close) else {
                    let what = if c == '"' { "unterminated quote" } else { "unterminated range" };
                    return err(i, what);
                };
                let content: String = chars[i + 1..i + 1 + len].iter().collect();
                let end = i + len + 2;
                toks.push(Tok {
                    lex: if c == '"' { Lex::Quoted(content) } else { Lex::Range(content) },
                    start,
                    end,
                });
                i = end;
                continue;
            }
            _ => {
                let mut j = i;
                while j < chars.len() && is_word_char(chars[j]) {
                    j += 1;
                }
                toks.push(Tok {
                    lex: Lex::Word(chars[i..j].iter().collect()),
                    start,
                    end: j,
                });
                i = j;
                continue;
            }
        }
        i += 1;
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
    input_len: usize,
}

fn is_keyword(t: Option<&Tok>, kw: &str) -> bool {
    matches!(t, Some(Tok { lex: Lex::Word(w), .. }) if w == kw)
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn offset(&self) -> usize {
        self.peek().map(|t| t.start).unwrap_or(self.input_len)
    }

    fn parse_or(&mut self) -> Result<QueryAst, QueryError> {
        let mut clauses = vec![self.parse_and()?];
        while is_keyword(self.peek(), "OR") {
            let op = self.next().unwrap();
            if self.at_clause_end() {
                return err(op.start, "dangling OR");
            }
            clauses.push(self.parse_and()?);
        }
        Ok(if clauses.len() == 1 { clauses.pop().unwrap() } else { QueryAst::Or { clauses } })
    }

    fn at_clause_end(&self) -> bool {
        matches!(self.peek(), None | Some(Tok { lex: Lex::RParen, .. }))
            || is_keyword(self.peek(), "OR")
            || is_keyword(self.peek(), "AND")
    }

    fn parse_and(&mut self) -> Result<QueryAst, QueryError> {
        let mut clauses = vec![self.parse_unary()?];
        loop {
            if is_keyword(self.peek(), "AND") {
                let op = self.next().unwrap();
                if self.at_clause_end() {
                    return err(op.start, "dangling AND");
                }
            } else if matches!(self.peek(), None | Some(Tok { lex: Lex::RParen, .. })) || is_keyword(self.peek(), "OR") {
                break;
            }
            clauses.push(self.parse_unary()?);
        }
        Ok(if clauses.len() == 1 { clauses.pop().unwrap() } else { QueryAst::And { clauses } })
    }

    fn parse_unary(&mut self) -> Result<QueryAst, QueryError> {
        if is_keyword(self.peek(), "NOT") {
            let op = self.next().unwrap();
            if self.at_clause_end() {
                return err(op.start, "dangling NOT");
            }
            return Ok(QueryAst::not(self.parse_unary()?));
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<QueryAst, QueryError> {
        let at = self.offset();
        let Some(tok) = self.next() else {
            return err(at, "expected a term");
        };
        match tok.lex {
            Lex::LParen => {
                if self.peek().is_none() {
                    return err(tok.start, "unclosed '('");
                }
                let inner = match self.parse_or() {
                    Err(e) if e.position == self.input_len => return err(tok.start, "unclosed '('"),
                    other => other?,
                };
                match self.next() {
                    Some(Tok { lex: Lex::RParen, .. }) => Ok(inner),
                    _ => err(tok.start, "unclosed '('"),
                }
            }
            Lex::RParen => err(tok.start, "unexpected ')'"),
            Lex::Colon => err(tok.start, "unexpected ':'"),
            Lex::Star => err(tok.start, "unexpected '*'"),
            Lex::Range(_) => err(tok.start, "range outside a field filter"),
            Lex::Quoted(content) => {
                let terms: Vec<String> = tokenize(&content).into_iter().map(|t| t.text).collect();
                match terms.len() {
                    0 => err(tok.start, "empty phrase"),
                    1 => Ok(QueryAst::Term { term: terms[0].clone() }),
                    _ => Ok(QueryAst::Phrase { terms }),
                }
            }
            Lex::Word(word) => {
                if matches!(word.as_str(), "AND" | "OR") {
                    return err(tok.start, format!("unexpected operator {word}"));
                }
                match self.peek() {
                    Some(Tok { lex: Lex::Colon, .. }) => {
                        self.next();
                        self.parse_field(word, tok.start)
                    }
                    Some(Tok { lex: Lex::Star, start, .. }) if *start == tok.end => {
                        self.next();
                        let terms = tokenize(&word);
                        if terms.len() != 1 {
                            return err(tok.start, "prefix must be a single term");
                        }
                        Ok(QueryAst::Prefix {
                            prefix: terms[0].text.clone(),
                        })
                    }
                    _ => {
                        let terms: Vec<String> = tokenize(&word).into_iter().map(|t| t.text).collect();
                        match terms.len() {
                            0 => err(tok.start, "no searchable characters"),
                            1 => Ok(QueryAst::Term { term: terms[0].clone() }),
                            _ => Ok(QueryAst::Phrase { terms }),
                        }
                    }
                }
            }
        }
    }

    fn parse_field(&mut self, field: String, field_start: usize) -> Result<QueryAst, QueryError> {
        let valid_ident = field
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && field.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !valid_ident {
            return err(field_start, format!("invalid field name `{field}`"));
        }
        let at = self.offset();
        match self.next() {
            Some(Tok { lex: Lex::Range(content), start, .. }) => {
                if !DATE_FIELDS.contains(&field.as_str()) {
                    return err(field_start, format!("field `{field}` does not support ranges"));
                }
                let parts: Vec<&str> = content.split_whitespace().collect();
                if parts.len() != 3 || parts[1] != "TO" {
                    return err(start, "range must be [from TO to]");
                }
                let from = parse_bound(parts[0], false).map_err(|m| QueryError { position: start, message: m })?;
                let to = parse_bound(parts[2], true).map_err(|m| QueryError { position: start, message: m })?;
                Ok(QueryAst::DateRange { field, from, to })
            }
            Some(Tok { lex: Lex::Word(value), .. }) => {
                if !FILTER_FIELDS.contains(&field.as_str()) {
                    return err(field_start, format!("unknown filter field `{field}`"));
                }
                Ok(QueryAst::FieldFilter { field, value })
            }
            _ => err(at, "expected a value after ':'"),
        }
    }
}

fn parse_bound(s: &str, upper: bool) -> Result<Option<DateTime<Utc>>, String> {
    if s == "*" {
        return Ok(None);
    }
    // a bare upper date covers its whole day
    if upper {
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Ok(Some(d.and_hms_nano_opt(23, 59, 59, 999_999_999).unwrap().and_utc()));
        }
    }
    parse_timestamp(s).map(Some).map_err(|e| e.to_string())
}

/// Parses a query. Pure negations (a query that could only be answered by
/// complementing the whole corpus) are rejected.
pub fn parse_query(input: &str) -> Result<QueryAst, QueryError> {
    let toks = lex(input)?;
    let input_len = input.chars().count();
    if toks.is_empty() {
        return err(0, "empty query");
    }
    if toks.len() == 1 && toks[0].lex == Lex::Star {
        return Ok(QueryAst::MatchAll);
    }
    let mut p = Parser { toks, pos: 0, input_len };
    let ast = p.parse_or()?;
    if let Some(t) = p.peek() {
        let msg = if t.lex == Lex::RParen { "unbalanced ')'" } else { "unexpected token" };
        return err(t.start, msg);
    }
    if !ast.is_positive() {
        let not_at = p
            .toks
            .iter()
            .find(|t| matches!(&t.lex, Lex::Word(w) if w == "NOT"))
            .map(|t| t.start)
            .unwrap_or(0);
        return err(not_at, "pure negation is not supported");
    }
    Ok(ast)
}
