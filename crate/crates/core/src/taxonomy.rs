//! Artifact taxonomy: three perceptual axes, each holding a configurable set
//! of artifact categories with the yes/no prompt used to query a predictor.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa_eval::{AnnotationRecord, RawAnnotation};

/// Placeholder substituted with a category's display name.
pub const ARTIFACT_PLACEHOLDER: &str = "{Artifact}";

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Does this video exhibit {Artifact}?";

const DEFAULT_TAXONOMY_JSON: &str = include_str!("../data/default_taxonomy.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    Appearance,
    Motion,
    Camera,
}

impl Axis {
    /// Report column order.
    pub const REPORT_ORDER: [Axis; 3] = [Axis::Appearance, Axis::Camera, Axis::Motion];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Appearance => "Appearance",
            Axis::Motion => "Motion",
            Axis::Camera => "Camera",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Appearance" => Ok(Axis::Appearance),
            "Motion" => Ok(Axis::Motion),
            "Camera" => Ok(Axis::Camera),
            other => Err(Error::Taxonomy(format!("unknown axis \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArtifactCategory {
    pub id: String,
    pub axis: Axis,
    pub display_name: String,
    pub prompt_template: String,
}

impl ArtifactCategory {
    /// The question posed for this category.
    pub fn render_prompt(&self) -> String {
        self.prompt_template
            .replace(ARTIFACT_PLACEHOLDER, &self.display_name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Taxonomy {
    pub version: String,
    pub categories: Vec<ArtifactCategory>,
}

// Loose mirror of the file format so every field can be validated with a
// precise location instead of failing inside serde.
#[derive(Deserialize)]
struct RawTaxonomy {
    version: Option<String>,
    categories: Option<Vec<RawCategory>>,
}

#[derive(Deserialize)]
struct RawCategory {
    id: Option<String>,
    axis: Option<String>,
    display_name: Option<String>,
    prompt_template: Option<String>,
}

impl Taxonomy {
    /// The shipped six-category taxonomy (two categories per axis).
    pub fn default_six() -> Taxonomy {
        Taxonomy::from_json_str(DEFAULT_TAXONOMY_JSON).expect("embedded taxonomy is valid")
    }

    pub fn from_json_str(text: &str) -> Result<Taxonomy> {
        if text.starts_with('\u{feff}') {
            return Err(Error::Taxonomy("document starts with a byte-order mark".into()));
        }
        let raw: RawTaxonomy =
            serde_json::from_str(text).map_err(|e| Error::json("taxonomy parse error", e))?;
        let version = raw
            .version
            .ok_or_else(|| Error::Taxonomy("missing field \"version\"".into()))?;
        let raw_categories = raw
            .categories
            .ok_or_else(|| Error::Taxonomy("missing field \"categories\"".into()))?;
        if raw_categories.is_empty() {
            return Err(Error::Taxonomy("empty category list".into()));
        }

        let mut seen = HashSet::new();
        let mut categories = Vec::with_capacity(raw_categories.len());
        for (i, rc) in raw_categories.into_iter().enumerate() {
            let field = |name: &str| format!("categories[{i}].{name}");
            let id = rc
                .id
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Taxonomy(format!("{}: missing or empty", field("id"))))?;
            if !is_snake_case(&id) {
                return Err(Error::Taxonomy(format!(
                    "{}: \"{id}\" is not a lowercase snake_case identifier",
                    field("id")
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Taxonomy(format!("{}: duplicate id \"{id}\"", field("id"))));
            }
            let axis_name = rc
                .axis
                .ok_or_else(|| Error::Taxonomy(format!("{}: missing", field("axis"))))?;
            let axis = axis_name
                .parse::<Axis>()
                .map_err(|_| Error::Taxonomy(format!("{}: unknown axis \"{axis_name}\"", field("axis"))))?;
            let display_name = rc.display_name.filter(|s| !s.is_empty()).ok_or_else(|| {
                Error::Taxonomy(format!("{}: missing or empty", field("display_name")))
            })?;
            let prompt_template = match rc.prompt_template {
                Some(t) if t.trim().is_empty() => {
                    return Err(Error::Taxonomy(format!("{}: empty", field("prompt_template"))))
                }
                Some(t) => t,
                None => DEFAULT_PROMPT_TEMPLATE.to_string(),
            };
            categories.push(ArtifactCategory {
                id,
                axis,
                display_name,
                prompt_template,
            });
        }
        Ok(Taxonomy {
            version,
            categories,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }

    pub fn category(&self, id: &str) -> Option<&ArtifactCategory> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn axis_of(&self, id: &str) -> Option<Axis> {
        self.category(id).map(|c| c.axis)
    }

    pub fn axes(&self) -> Vec<Axis> {
        let mut axes: Vec<Axis> = self.categories.iter().map(|c| c.axis).collect();
        axes.sort();
        axes.dedup();
        axes
    }
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Taxonomy(format!("{}: not valid UTF-8", path.display())))?;
    Taxonomy::from_json_str(&text)
}

fn is_snake_case(id: &str) -> bool {
    id.chars()
        .next()
        .is_some_and(|c| c.is_ascii_lowercase())
        && id
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotationViolation {
    MissingVideoId,
    UnknownCategory(String),
    NonBooleanLabel { category_id: String, value: String },
}

impl fmt::Display for AnnotationViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnotationViolation::MissingVideoId => f.write_str("missing video_id"),
            AnnotationViolation::UnknownCategory(id) => write!(f, "unknown category id \"{id}\""),
            AnnotationViolation::NonBooleanLabel { category_id, value } => {
                write!(f, "label \"{category_id}\" is not a boolean: {value}")
            }
        }
    }
}

/// Checks a parsed annotation line against the taxonomy, collecting every
/// violation. Labelling a subset of the categories is allowed.
pub fn validate_annotation(
    record: &RawAnnotation,
    tax: &Taxonomy,
) -> std::result::Result<AnnotationRecord, Vec<AnnotationViolation>> {
    let mut violations = Vec::new();
    let video_id = match &record.video_id {
        Some(id) if !id.is_empty() => id.clone(),
        _ => {
            violations.push(AnnotationViolation::MissingVideoId);
            String::new()
        }
    };
    let mut labels = BTreeMap::new();
    for (key, value) in &record.labels {
        if tax.category(key).is_none() {
            violations.push(AnnotationViolation::UnknownCategory(key.clone()));
            continue;
        }
        match value.as_bool() {
            Some(b) => {
                labels.insert(key.clone(), b);
            }
            None => violations.push(AnnotationViolation::NonBooleanLabel {
                category_id: key.clone(),
                value: value.to_string(),
            }),
        }
    }
    if violations.is_empty() {
        Ok(AnnotationRecord { video_id, labels })
    } else {
        Err(violations)
    }
}
