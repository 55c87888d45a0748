use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{detect_candidates, link_entities, ConceptDatabase, EntityMention, LinkConfig, MetaModel, NerlError, Vocab};
use crate::text::tokenize;

pub const BUNDLE_MANIFEST: &str = "bundle.json";
const CDB_FILE: &str = "cdb.bin";
const VOCAB_FILE: &str = "vocab.bin";
const META_DIR: &str = "meta";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleConfig {
    pub link: LinkConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: BundleConfig,
    meta_tasks: Vec<String>,
}

/// Everything needed to annotate text.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub cdb: ConceptDatabase,
    pub vocab: Vocab,
    pub meta: Vec<MetaModel>,
    pub config: BundleConfig,
}

fn valid_task(task: &str) -> bool {
    !task.is_empty() && task.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl ModelBundle {
    pub fn new(cdb: ConceptDatabase, vocab: Vocab) -> Self {
        Self {
            cdb,
            vocab,
            meta: Vec::new(),
            config: BundleConfig::default(),
        }
    }

    /// Detects, links and meta-annotates concept mentions. Offsets refer to
    /// `text`.
    pub fn annotate_text(&self, text: &str) -> Vec<EntityMention> {
        let tokens = tokenize(text);
        let candidates = detect_candidates(&tokens, &self.cdb);
        let mut mentions = link_entities(&candidates, &tokens, &self.cdb, &self.vocab, &self.config.link);
        for m in &mut mentions {
            for model in &self.meta {
                let p = model.predict(&tokens, m.token_start, m.token_end, &self.vocab);
                m.meta.insert(model.task.clone(), p.label);
            }
        }
        mentions
    }

    /// Adds or replaces the model for its task.
    pub fn set_meta(&mut self, model: MetaModel) {
        match self.meta.iter_mut().find(|m| m.task == model.task) {
            Some(slot) => *slot = model,
            None => {
                self.meta.push(model);
                self.meta.sort_by(|a, b| a.task.cmp(&b.task));
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), NerlError> {
        fs::create_dir_all(dir.join(META_DIR))?;
        for m in &self.meta {
            if !valid_task(&m.task) {
                return Err(NerlError::Bundle(format!("invalid task name `{}`", m.task)));
            }
            m.save(&dir.join(META_DIR).join(format!("{}.bin", m.task)))?;
        }
        self.cdb.save(&dir.join(CDB_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let manifest = Manifest {
            format_version: 1,
            config: self.config.clone(),
            meta_tasks: self.meta.iter().map(|m| m.task.clone()).collect(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| NerlError::Bundle(e.to_string()))?;
        fs::write(dir.join(BUNDLE_MANIFEST), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NerlError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(BUNDLE_MANIFEST))?)
            .map_err(|e| NerlError::Bundle(format!("{BUNDLE_MANIFEST}: {e}")))?;
        if manifest.format_version != 1 {
            return Err(NerlError::Bundle(format!("unsupported bundle version {}", manifest.format_version)));
        }
        let cdb = ConceptDatabase::load(&dir.join(CDB_FILE))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let mut meta = Vec::new();
        for task in &manifest.meta_tasks {
            if !valid_task(task) {
                return Err(NerlError::Bundle(format!("invalid task name `{task}`")));
            }
            let m = MetaModel::load(&dir.join(META_DIR).join(format!("{task}.bin")))?;
            if m.dim != vocab.dim() {
                return Err(NerlError::Bundle(format!("meta model `{task}` dimension differs from vocab")));
            }
            meta.push(m);
        }
        Ok(Self {
            cdb,
            vocab,
            meta,
            config: manifest.config,
        })
    }
}
