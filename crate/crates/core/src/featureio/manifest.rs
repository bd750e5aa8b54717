//! Dataset manifest (JSON).
//!
//! ```json
//! {
//!   "version": 1,
//!   "anchors": "anchors.r2ta",
//!   "samples": [
//!     {"id": "bottle_000", "category": "bottle", "role": "test", "label": 1,
//!      "features": "feat/bottle_000.r2cf", "mask": "mask/bottle_000.pgm"}
//!   ],
//!   "references": {"bottle": ["bottle_ref_0", "bottle_ref_1"]}
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub category: String,
    pub role: Role,
    pub label: u8,
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<String>,
    pub samples: Vec<SampleEntry>,
    #[serde(default)]
    pub references: BTreeMap<String, Vec<String>>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::ManifestInvalid(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        Ok(m)
    }

    /// Reads and structurally validates a manifest file.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::from_json(&text, base).map_err(|e| e.at(path))?;
        m.validate(false).map_err(|e| e.at(path))?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn sample(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.role == role)
    }

    /// Categories in first-appearance order.
    pub fn categories(&self, role: Role) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in self.with_role(role) {
            if !out.contains(&s.category) {
                out.push(s.category.clone());
            }
        }
        out
    }

    /// Reference pool of a category: the explicit list if present, otherwise
    /// every `reference` sample of that category in manifest order.
    pub fn reference_pool(&self, category: &str) -> Vec<&SampleEntry> {
        match self.references.get(category) {
            Some(ids) => ids.iter().filter_map(|id| self.sample(id)).collect(),
            None => self
                .with_role(Role::Reference)
                .filter(|s| s.category == category)
                .collect(),
        }
    }

    pub fn validate(&self, pixel_metrics: bool) -> Result<()> {
        let invalid = |m: String| Err(Error::ManifestInvalid(m));
        if self.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut seen: HashMap<&str, &SampleEntry> = HashMap::new();
        for s in &self.samples {
            if s.id.is_empty() || s.category.is_empty() {
                return invalid("sample with empty id or category".into());
            }
            if seen.insert(&s.id, s).is_some() {
                return invalid(format!("duplicate sample id {}", s.id));
            }
            if s.label > 1 {
                return invalid(format!("{}: label {} is not 0 or 1", s.id, s.label));
            }
            if s.role == Role::Reference && s.label != 0 {
                return invalid(format!("{}: reference samples must be normal", s.id));
            }
            if pixel_metrics && s.role == Role::Test && s.label == 1 && s.mask.is_none() {
                return invalid(format!("{}: anomalous test sample lacks a mask", s.id));
            }
        }
        for (cat, ids) in &self.references {
            for id in ids {
                let Some(s) = seen.get(id.as_str()) else {
                    return invalid(format!("reference {id} of {cat} is not a sample"));
                };
                if s.label != 0 {
                    return invalid(format!("reference {id} of {cat} is labeled anomalous"));
                }
                if &s.category != cat {
                    return invalid(format!("reference {id} belongs to {}, listed under {cat}", s.category));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "version": 1,
        "anchors": "anchors.r2ta",
        "samples": [
            {"id": "a0", "category": "a", "role": "test", "label": 0, "features": "a0.r2cf"},
            {"id": "a1", "category": "a", "role": "test", "label": 1, "features": "a1.r2cf", "mask": "a1.pgm"},
            {"id": "r0", "category": "a", "role": "reference", "label": 0, "features": "r0.r2cf"}
        ],
        "references": {"a": ["r0"]}
    }"#;

    fn parse(doc: &str) -> DatasetManifest {
        DatasetManifest::from_json(doc, Path::new("/data")).unwrap()
    }

    #[test]
    fn parses_and_resolves() {
        let m = parse(DOC);
        m.validate(true).unwrap();
        assert_eq!(m.resolve("a0.r2cf"), PathBuf::from("/data/a0.r2cf"));
        assert_eq!(m.reference_pool("a").len(), 1);
        assert_eq!(m.categories(Role::Test), vec!["a".to_string()]);
    }

    #[test]
    fn json_round_trip() {
        let m = parse(DOC);
        let back = parse(&m.to_json().unwrap());
        assert_eq!(back, m);
    }

    #[test]
    fn anomalous_reference_is_rejected() {
        let doc = DOC.replace(r#""role": "reference", "label": 0"#, r#""role": "reference", "label": 1"#);
        assert!(matches!(parse(&doc).validate(false), Err(Error::ManifestInvalid(_))));
    }

    #[test]
    fn missing_mask_only_matters_with_pixel_metrics() {
        let doc = DOC.replace(r#", "mask": "a1.pgm""#, "");
        let m = parse(&doc);
        assert!(m.validate(false).is_ok());
        assert!(matches!(m.validate(true), Err(Error::ManifestInvalid(_))));
    }

    #[test]
    fn reference_list_must_name_normal_samples_of_the_category() {
        let doc = DOC.replace(r#"{"a": ["r0"]}"#, r#"{"a": ["a1"]}"#);
        assert!(parse(&doc).validate(false).is_err());
        let doc = DOC.replace(r#"{"a": ["r0"]}"#, r#"{"b": ["r0"]}"#);
        assert!(parse(&doc).validate(false).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let doc = DOC.replace(r#""version": 1,"#, r#""version": 1, "extra": true,"#);
        assert!(matches!(DatasetManifest::from_json(&doc, Path::new(".")), Err(Error::ManifestInvalid(_))));
    }
}
