//! Versioned model checkpoints.
//!
//! A checkpoint carries everything needed to rebuild the predictor except
//! the encoder weights themselves: head parameters, volume scaler, class
//! vocabulary, prompt template, and the encoder names to resolve through the
//! registry. JSON with full float round-trip, so save/load is bitwise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::model::{FeatureMask, FusionModelParams, VolumeScaler};
use crate::priors::PromptTemplate;
use crate::types::{ClassVocabulary, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub image_encoder: String,
    pub text_encoder: String,
    pub template: PromptTemplate,
    pub volume_decimals: usize,
    pub mask: FeatureMask,
    pub class_names: Vec<String>,
    pub scaler: VolumeScaler,
    pub params: FusionModelParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::serde(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::serde(path, e))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "format version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.params.validate()?;
        Ok(ckpt)
    }

    pub fn vocab(&self) -> Result<ClassVocabulary> {
        ClassVocabulary::from_names(self.class_names.iter().cloned())
    }

    /// Confirms concrete encoders fit the stored head dimensions.
    pub fn check_encoders(
        &self,
        image: &dyn ImageEncoder,
        text: &dyn TextEncoder,
    ) -> Result<()> {
        let dims = &self.params.dims;
        if image.output_dim() != dims.image_dim {
            return Err(Error::CheckpointMismatch(format!(
                "image encoder `{}` outputs {}, checkpoint expects {}",
                image.name(),
                image.output_dim(),
                dims.image_dim
            )));
        }
        if text.output_dim() != dims.text_dim {
            return Err(Error::CheckpointMismatch(format!(
                "text encoder `{}` outputs {}, checkpoint expects {}",
                text.name(),
                text.output_dim(),
                dims.text_dim
            )));
        }
        if self.class_names.len() != dims.num_classes {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint lists {} classes, head expects {}",
                self.class_names.len(),
                dims.num_classes
            )));
        }
        Ok(())
    }
}
