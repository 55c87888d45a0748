use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vector::normalize;
use super::NerlError;
use crate::codec::{Decoder, Encoder};
use crate::text::normalize as normalize_name;

const MAGIC: [u8; 4] = *b"MTCD";
const VERSION: u16 = 1;

/// One ontology row: `cui<TAB>name<TAB>T|F[<TAB>type]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyRow {
    pub cui: String,
    pub name: String,
    pub is_preferred: bool,
    #[serde(default)]
    pub type_id: Option<String>,
}

impl OntologyRow {
    pub fn new(cui: &str, name: &str, is_preferred: bool) -> Self {
        Self {
            cui: cui.into(),
            name: name.into(),
            is_preferred,
            type_id: None,
        }
    }
}

/// Parses the ontology TSV. Blank lines and lines starting with `#` are
/// skipped.
pub fn read_ontology(reader: impl BufRead) -> Result<Vec<OntologyRow>, NerlError> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| NerlError::Ontology {
            line: i + 1,
            reason: reason.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(bad("expected 3 or 4 tab-separated columns"));
        }
        let is_preferred = match cols[2] {
            "T" => true,
            "F" => false,
            _ => return Err(bad("is_preferred must be T or F")),
        };
        if cols[0].is_empty() {
            return Err(bad("empty cui"));
        }
        rows.push(OntologyRow {
            cui: cols[0].to_string(),
            name: cols[1].to_string(),
            is_preferred,
            type_id: cols.get(3).filter(|t| !t.is_empty()).map(|t| t.to_string()),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub cui: String,
    pub preferred_name: String,
    /// Normalized names.
    pub names: BTreeSet<String>,
    pub type_id: Option<String>,
    /// Running mean of context vectors, stored un-normalized.
    mean: Option<Vec<f64>>,
    pub train_count: u64,
}

impl Concept {
    pub fn is_trained(&self) -> bool {
        self.mean.is_some()
    }

    /// The raw stored mean.
    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    /// The unit-normalized concept vector.
    pub fn vector(&self) -> Option<Vec<f64>> {
        let mut v = self.mean.clone()?;
        normalize(&mut v);
        Some(v)
    }

    pub(crate) fn set_mean(&mut self, mean: Vec<f64>) {
        self.mean = Some(mean);
    }

    pub(crate) fn mean_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.mean.as_mut()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptDatabase {
    concepts: BTreeMap<String, Concept>,
    name_index: BTreeMap<String, BTreeSet<String>>,
    max_name_len: usize,
}

/// Builds an untrained concept database from ontology rows.
pub fn build_cdb(rows: &[OntologyRow]) -> Result<ConceptDatabase, NerlError> {
    let mut concepts: BTreeMap<String, Concept> = BTreeMap::new();
    for row in rows {
        let name = normalize_name(&row.name);
        if name.is_empty() {
            return Err(NerlError::EmptyName {
                cui: row.cui.clone(),
                name: row.name.clone(),
            });
        }
        let c = concepts.entry(row.cui.clone()).or_insert_with(|| Concept {
            cui: row.cui.clone(),
            preferred_name: String::new(),
            names: BTreeSet::new(),
            type_id: None,
            mean: None,
            train_count: 0,
        });
        if row.is_preferred {
            if !c.preferred_name.is_empty() {
                return Err(NerlError::DuplicatePreferred(row.cui.clone()));
            }
            c.preferred_name = row.name.clone();
        }
        if c.type_id.is_none() {
            c.type_id = row.type_id.clone();
        }
        c.names.insert(name);
    }
    if let Some(c) = concepts.values().find(|c| c.preferred_name.is_empty()) {
        return Err(NerlError::MissingPreferred(c.cui.clone()));
    }
    Ok(ConceptDatabase::from_concepts(concepts))
}

impl ConceptDatabase {
    fn from_concepts(concepts: BTreeMap<String, Concept>) -> Self {
        let mut name_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for c in concepts.values() {
            for n in &c.names {
                name_index.entry(n.clone()).or_default().insert(c.cui.clone());
            }
        }
        let max_name_len = name_index.keys().map(|n| n.split(' ').count()).max().unwrap_or(0);
        Self {
            concepts,
            name_index,
            max_name_len,
        }
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn max_name_len(&self) -> usize {
        self.max_name_len
    }

    pub fn concept(&self, cui: &str) -> Option<&Concept> {
        self.concepts.get(cui)
    }

    pub(crate) fn concept_mut(&mut self, cui: &str) -> Option<&mut Concept> {
        self.concepts.get_mut(cui)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    /// Concepts a normalized name maps to.
    pub fn lookup(&self, name: &str) -> Option<&BTreeSet<String>> {
        self.name_index.get(name)
    }

    pub fn name_index(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.name_index
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.len(self.concepts.len());
        for c in self.concepts.values() {
            e.str(&c.cui).str(&c.preferred_name);
            match &c.type_id {
                Some(t) => e.u8(1).str(t),
                None => e.u8(0),
            };
            e.len(c.names.len());
            for n in &c.names {
                e.str(n);
            }
            e.u64(c.train_count);
            match &c.mean {
                Some(m) => e.u8(1).f64s(m),
                None => e.u8(0),
            };
        }
        e.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, NerlError> {
        let mut d = Decoder::new(data, MAGIC, VERSION)?;
        let mut concepts = BTreeMap::new();
        for _ in 0..d.len()? {
            let cui = d.str()?;
            let preferred_name = d.str()?;
            let type_id = if d.u8()? == 1 { Some(d.str()?) } else { None };
            let names = (0..d.len()?).map(|_| d.str()).collect::<Result<BTreeSet<_>, _>>()?;
            let train_count = d.u64()?;
            let mean = if d.u8()? == 1 { Some(d.f64s()?) } else { None };
            concepts.insert(
                cui.clone(),
                Concept {
                    cui,
                    preferred_name,
                    names,
                    type_id,
                    mean,
                    train_count,
                },
            );
        }
        d.finish()?;
        Ok(Self::from_concepts(concepts))
    }

    pub fn save(&self, path: &Path) -> Result<(), NerlError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NerlError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
