//! Dataset schema: column declarations the loader validates against.
//!
//! Supplied as JSON. Keys: `features[]` (each with `name`, `kind` =
//! `categorical`|`continuous`, and `categories` for categorical), `label`,
//! `label_values[]`, `sensitive[]` (each with `name` and `categories`), and
//! the optional `include_sensitive_in_features` flag (default true).

use super::DataError;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitiveSpec {
    pub name: String,
    pub categories: Vec<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub features: Vec<FeatureSpec>,
    pub label: String,
    pub label_values: Vec<String>,
    pub sensitive: Vec<SensitiveSpec>,
    /// Whether sensitive one-hot blocks are appended to the feature matrix.
    #[serde(default = "default_true")]
    pub include_sensitive_in_features: bool,
}

impl DatasetSchema {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.sensitive.is_empty() {
            return Err(DataError::InvalidSchema(
                "at least one sensitive attribute is required".into(),
            ));
        }
        if self.label_values.len() < 2 {
            return Err(DataError::InvalidSchema(format!(
                "label '{}' needs at least 2 declared values",
                self.label
            )));
        }
        let mut names = HashSet::new();
        for f in &self.features {
            if !names.insert(f.name.as_str()) {
                return Err(DataError::InvalidSchema(format!(
                    "duplicate column '{}'",
                    f.name
                )));
            }
            if f.kind == FeatureKind::Categorical && f.categories.len() < 2 {
                return Err(DataError::InvalidSchema(format!(
                    "categorical feature '{}' needs at least 2 declared categories",
                    f.name
                )));
            }
            if f.kind == FeatureKind::Continuous && !f.categories.is_empty() {
                return Err(DataError::InvalidSchema(format!(
                    "continuous feature '{}' must not declare categories",
                    f.name
                )));
            }
        }
        for s in &self.sensitive {
            if !names.insert(s.name.as_str()) {
                return Err(DataError::InvalidSchema(format!(
                    "duplicate column '{}'",
                    s.name
                )));
            }
            if s.categories.len() < 2 {
                return Err(DataError::InvalidSchema(format!(
                    "sensitive attribute '{}' needs at least 2 declared categories",
                    s.name
                )));
            }
        }
        if names.contains(self.label.as_str()) {
            return Err(DataError::InvalidSchema(format!(
                "label '{}' collides with a feature or sensitive column",
                self.label
            )));
        }
        Ok(())
    }

    pub fn sensitive_spec(&self, name: &str) -> Option<&SensitiveSpec> {
        self.sensitive.iter().find(|s| s.name == name)
    }

    pub fn sensitive_names(&self) -> Vec<String> {
        self.sensitive.iter().map(|s| s.name.clone()).collect()
    }
}

#[cfg(test)]
pub(crate) fn test_schema_one_cont_one_sensitive() -> DatasetSchema {
    DatasetSchema::from_json(
        r#"{
            "features": [{"name": "x", "kind": "continuous"}],
            "label": "outcome",
            "label_values": ["no", "yes"],
            "sensitive": [{"name": "grp", "categories": ["a", "b"]}]
        }"#,
    )
    .unwrap()
}
