pub mod encoders;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod nutrition;
pub mod priors;
pub mod synthetic;
pub mod training;
pub mod types;
pub mod vlm;

pub use error::{Error, ErrorFamily, Result};
pub use types::{
    ClassVocabulary, EmbeddingVector, ImageRef, ImageTensor, ManifestRecord, StereoFeature,
    StereoSample, TrainConfig,
};
