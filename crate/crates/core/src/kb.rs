//! Crop and disease encyclopedia with search and classifier-label linkage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("knowledge base parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid {record}: {reason}")]
    Validation { record: String, reason: String },
}

pub type Result<T, E = KbError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropCategory {
    Grain,
    Pulse,
    Oil,
    Fiber,
    Cash,
    Vegetable,
    Kandal,
    Spice,
    Fruit,
    Flower,
    TreeHerbaceous,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropEntry {
    pub id: String,
    pub name: String,
    pub category: CropCategory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseEntry {
    pub id: String,
    pub name: String,
    pub crop_ids: Vec<String>,
    pub causes: String,
    pub symptoms: String,
    pub treatments: String,
    #[serde(default)]
    pub image_refs: Vec<String>,
    #[serde(default)]
    pub model_labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbDocument {
    version: i64,
    crops: Vec<CropEntry>,
    diseases: Vec<DiseaseEntry>,
}

/// Validated, immutable knowledge base.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeBase {
    version: i64,
    crops: Vec<CropEntry>,
    diseases: Vec<DiseaseEntry>,
    label_index: BTreeMap<String, usize>,
}

/// Outcome of mapping a classifier label to advisory content.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution<'a> {
    Disease(&'a DiseaseEntry),
    Healthy,
    Unmapped,
}

/// Labels whose last `___`-separated segment is `healthy` (any case) denote
/// healthy plants.
pub fn is_healthy_label(label: &str) -> bool {
    label
        .rsplit("___")
        .next()
        .is_some_and(|tail| tail.eq_ignore_ascii_case("healthy"))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LabelAudit {
    pub mapped: Vec<String>,
    pub healthy: Vec<String>,
    pub unmapped: Vec<String>,
}

fn invalid(record: impl Into<String>, reason: impl Into<String>) -> KbError {
    KbError::Validation {
        record: record.into(),
        reason: reason.into(),
    }
}

impl KnowledgeBase {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: KbDocument = serde_json::from_str(text).map_err(|e| KbError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::build(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| KbError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn build(doc: KbDocument) -> Result<Self> {
        let mut crop_ids = BTreeSet::new();
        for crop in &doc.crops {
            let record = format!("crop '{}'", crop.id);
            if crop.id.trim().is_empty() {
                return Err(invalid("crop", "empty id"));
            }
            if crop.name.trim().is_empty() {
                return Err(invalid(record, "empty name"));
            }
            if !crop_ids.insert(crop.id.as_str()) {
                return Err(invalid(record, "duplicate id"));
            }
        }
        let mut disease_ids = BTreeSet::new();
        let mut label_index = BTreeMap::new();
        for (i, d) in doc.diseases.iter().enumerate() {
            let record = format!("disease '{}'", d.id);
            if d.id.trim().is_empty() {
                return Err(invalid("disease", format!("entry {i} has an empty id")));
            }
            if !disease_ids.insert(d.id.as_str()) {
                return Err(invalid(record, "duplicate id"));
            }
            for (field, value) in [
                ("name", &d.name),
                ("causes", &d.causes),
                ("symptoms", &d.symptoms),
                ("treatments", &d.treatments),
            ] {
                if value.trim().is_empty() {
                    return Err(invalid(&record, format!("{field} must not be empty")));
                }
            }
            if d.crop_ids.is_empty() {
                return Err(invalid(&record, "crop_ids must not be empty"));
            }
            if let Some(missing) = d.crop_ids.iter().find(|c| !crop_ids.contains(c.as_str())) {
                return Err(invalid(&record, format!("unknown crop id '{missing}'")));
            }
            for label in &d.model_labels {
                if label.is_empty() {
                    return Err(invalid(&record, "empty model label"));
                }
                if let Some(prev) = label_index.insert(label.clone(), i) {
                    return Err(invalid(
                        &record,
                        format!("model label '{label}' already maps to '{}'", doc.diseases[prev].id),
                    ));
                }
            }
        }
        Ok(Self {
            version: doc.version,
            crops: doc.crops,
            diseases: doc.diseases,
            label_index,
        })
    }

    /// A KB with no entries, in which every label is healthy or unmapped.
    pub fn empty() -> Self {
        Self {
            version: 0,
            crops: Vec::new(),
            diseases: Vec::new(),
            label_index: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let doc = KbDocument {
            version: self.version,
            crops: self.crops.clone(),
            diseases: self.diseases.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data serializes")
    }

    pub fn version(&self) -> i64 {
        self.version
    }

    pub fn crops(&self) -> &[CropEntry] {
        &self.crops
    }

    pub fn diseases(&self) -> &[DiseaseEntry] {
        &self.diseases
    }

    pub fn crop(&self, id: &str) -> Option<&CropEntry> {
        self.crops.iter().find(|c| c.id == id)
    }

    pub fn disease(&self, id: &str) -> Option<&DiseaseEntry> {
        self.diseases.iter().find(|d| d.id == id)
    }

    /// Case-insensitive substring search ranked by where the query matched:
    /// disease name, then crop name, then symptoms; ties by name.
    pub fn search(&self, query: &str) -> Vec<&DiseaseEntry> {
        let q = query.trim().to_lowercase();
        if q.is_empty() {
            return Vec::new();
        }
        let mut hits: Vec<(u8, &DiseaseEntry)> = self
            .diseases
            .iter()
            .filter_map(|d| self.match_rank(d, &q).map(|r| (r, d)))
            .collect();
        hits.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then_with(|| a.1.name.cmp(&b.1.name))
                .then_with(|| a.1.id.cmp(&b.1.id))
        });
        hits.into_iter().map(|(_, d)| d).collect()
    }

    fn match_rank(&self, d: &DiseaseEntry, q: &str) -> Option<u8> {
        if d.name.to_lowercase().contains(q) {
            return Some(0);
        }
        let crop_hit = d
            .crop_ids
            .iter()
            .filter_map(|id| self.crop(id))
            .any(|c| c.name.to_lowercase().contains(q));
        if crop_hit {
            return Some(1);
        }
        d.symptoms.to_lowercase().contains(q).then_some(2)
    }

    pub fn resolve_label(&self, label: &str) -> Resolution<'_> {
        if let Some(&i) = self.label_index.get(label) {
            Resolution::Disease(&self.diseases[i])
        } else if is_healthy_label(label) {
            Resolution::Healthy
        } else {
            Resolution::Unmapped
        }
    }

    pub fn audit_labels<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> LabelAudit {
        let mut audit = LabelAudit::default();
        for label in labels {
            let bucket = match self.resolve_label(label) {
                Resolution::Disease(_) => &mut audit.mapped,
                Resolution::Healthy => &mut audit.healthy,
                Resolution::Unmapped => &mut audit.unmapped,
            };
            bucket.push(label.to_string());
        }
        audit
    }
}
