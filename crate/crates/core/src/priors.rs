//! Class-conditional volume priors and the prompt templates that verbalize
//! them.
//!
//! The prior table maps each class to the mean ground-truth volume of its
//! training items. A prompt template turns (class name, prior volume) into
//! the sentence handed to the text encoder.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassVocabulary, StereoSample};

/// Where the table's numbers came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    /// Computed from the training split.
    TrainSplit,
    /// Supplied from outside (e.g. a published nutrition table).
    External,
}

/// Class name -> mean training volume in mL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumePriorTable {
    pub source: PriorSource,
    entries: BTreeMap<String, f64>,
}

impl VolumePriorTable {
    pub fn from_entries(entries: BTreeMap<String, f64>, source: PriorSource) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::DataEmpty);
        }
        for (class, &v) in &entries {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "prior for `{class}` must be positive, got {v}"
                )));
            }
        }
        Ok(Self { source, entries })
    }

    pub fn mean_volume_ml(&self, class: &str) -> Result<f64> {
        self.entries.get(class).copied().ok_or_else(|| Error::UnknownClass(class.into()))
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::serde(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: VolumePriorTable =
            serde_json::from_str(&text).map_err(|e| Error::serde(path, e))?;
        // Re-validate: the file may have been edited by hand.
        Self::from_entries(table.entries, table.source)
    }
}

/// Mean ground-truth volume per class over the training items.
///
/// Augmented pairs of the same item count once: volumes are collected per
/// item id, not per sample row. Every vocabulary class must have at least
/// one training item.
pub fn build_prior_table(
    train: &[StereoSample],
    vocab: &ClassVocabulary,
) -> Result<VolumePriorTable> {
    if train.is_empty() {
        return Err(Error::DataEmpty);
    }
    let mut sums = vec![0.0f64; vocab.len()];
    let mut counts = vec![0usize; vocab.len()];
    let mut seen_items = HashSet::new();
    for s in train {
        let class_idx = vocab.index_of(&s.class_label)?;
        if !seen_items.insert(s.item_id.clone()) {
            continue;
        }
        if !(s.volume_gt_ml.is_finite() && s.volume_gt_ml > 0.0) {
            return Err(Error::NonPositiveVolume(s.volume_gt_ml));
        }
        sums[class_idx] += s.volume_gt_ml;
        counts[class_idx] += 1;
    }
    let mut entries = BTreeMap::new();
    for (i, name) in vocab.names().iter().enumerate() {
        if counts[i] == 0 {
            return Err(Error::EmptyClass(name.clone()));
        }
        entries.insert(name.clone(), sums[i] / counts[i] as f64);
    }
    VolumePriorTable::from_entries(entries, PriorSource::TrainSplit)
}

/// Prior volume for a predicted class name.
pub fn prior_for_prediction(table: &VolumePriorTable, predicted_class: &str) -> Result<f64> {
    table.mean_volume_ml(predicted_class)
}

pub const CLASS_SLOT: &str = "{class}";
pub const VOLUME_SLOT: &str = "{volume}";

/// Number of built-in prompt templates.
pub const TEMPLATE_COUNT: u8 = 6;

/// Built-in patterns, index = template id.
const PATTERNS: [&str; TEMPLATE_COUNT as usize] = [
    "These are stereo image pairs of {class} whose approximate volume is {volume} mL.",
    "Detected object: {class}, estimated volume: {volume} mL",
    "Object identified as {class}, with volume approximately {volume} mL",
    "Classification: {class} | Volume estimate: {volume} mL",
    "This appears to be a {class}, measuring roughly {volume} mL in volume",
    "The object is {class} and the approximate volume is {volume} mL",
];

/// A sentence pattern with one `{class}` and one `{volume}` slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Built-in id, if this is one of the stock templates.
    pub template_id: Option<u8>,
    pub pattern: String,
}

impl PromptTemplate {
    pub fn by_id(id: u8) -> Result<Self> {
        let pattern = PATTERNS.get(id as usize).ok_or_else(|| {
            Error::InvalidTemplate(format!("template id {id} out of range 0..{TEMPLATE_COUNT}"))
        })?;
        Ok(Self { template_id: Some(id), pattern: (*pattern).to_string() })
    }

    pub fn custom(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        Self::validate_pattern(&pattern)?;
        Ok(Self { template_id: None, pattern })
    }

    fn validate_pattern(pattern: &str) -> Result<()> {
        for slot in [CLASS_SLOT, VOLUME_SLOT] {
            let count = pattern.matches(slot).count();
            if count != 1 {
                return Err(Error::InvalidTemplate(format!(
                    "pattern must contain `{slot}` exactly once, found {count}"
                )));
            }
        }
        Ok(())
    }

    pub fn all_builtin() -> Vec<Self> {
        (0..TEMPLATE_COUNT).map(|id| Self::by_id(id).expect("builtin id")).collect()
    }
}

/// Renders a prompt from a template, a class name, and a prior volume.
///
/// The volume is printed with `decimals` digits after the point. For a fixed
/// template the output determines (class, formatted volume) uniquely.
pub fn render_prompt(
    template: &PromptTemplate,
    class: &str,
    mean_volume_ml: f64,
    decimals: usize,
) -> Result<String> {
    if class.trim().is_empty() {
        return Err(Error::InvalidArgument("class name is blank".into()));
    }
    if !(mean_volume_ml.is_finite() && mean_volume_ml > 0.0) {
        return Err(Error::NonPositiveVolume(mean_volume_ml));
    }
    PromptTemplate::validate_pattern(&template.pattern)?;
    let volume = format!("{mean_volume_ml:.decimals$}");
    Ok(template.pattern.replace(CLASS_SLOT, class).replace(VOLUME_SLOT, &volume))
}
