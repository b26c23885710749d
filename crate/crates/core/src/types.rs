//! Shared data model: samples, embeddings, vocabulary, training configuration.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoded RGB image, row-major, channel-interleaved, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub width: u32,
    pub height: u32,
    /// Length is `width * height * 3`.
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: expected,
                context: "image tensor data".into(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Reference to one image: a file on disk or an in-memory tensor.
///
/// Manifests only store the `Path` form; tensors exist for synthetic
/// in-memory datasets and tests.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageRef {
    Path(PathBuf),
    Tensor(Arc<ImageTensor>),
}

impl ImageRef {
    pub fn path(p: impl Into<PathBuf>) -> Self {
        ImageRef::Path(p.into())
    }

    /// Stable cache key: the path string, or a synthetic key for tensors.
    pub fn cache_key(&self) -> String {
        match self {
            ImageRef::Path(p) => p.display().to_string(),
            ImageRef::Tensor(t) => {
                // Tensors are keyed by content so identical frames share a slot.
                let mut key = format!("tensor:{}x{}:", t.width, t.height);
                let digest = crate::encoders::digest_f32s(&t.data);
                let _ = write!(key, "{digest}");
                key
            }
        }
    }

    pub fn as_path(&self) -> Option<&Path> {
        match self {
            ImageRef::Path(p) => Some(p),
            ImageRef::Tensor(_) => None,
        }
    }
}

/// One training or evaluation unit: two views of one object plus its label
/// and measured volume.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub item_id: String,
    pub class_label: String,
    pub left_image: ImageRef,
    pub right_image: ImageRef,
    /// Ground-truth volume in mL.
    pub volume_gt_ml: f64,
    /// Frame indices the two views were taken from, left < right.
    pub frame_indices: (u32, u32),
}

/// At-rest form of a `StereoSample`; one JSON object per manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub item_id: String,
    pub class_label: String,
    pub left_image: String,
    pub right_image: String,
    pub volume_ml: f64,
    pub frame_left: u32,
    pub frame_right: u32,
}

impl ManifestRecord {
    pub fn to_sample(&self) -> StereoSample {
        StereoSample {
            item_id: self.item_id.clone(),
            class_label: self.class_label.clone(),
            left_image: ImageRef::path(&self.left_image),
            right_image: ImageRef::path(&self.right_image),
            volume_gt_ml: self.volume_ml,
            frame_indices: (self.frame_left, self.frame_right),
        }
    }

    /// Fails for in-memory tensor refs; manifests only hold paths.
    pub fn from_sample(s: &StereoSample) -> Result<Self> {
        let path_of = |r: &ImageRef, side: &str| -> Result<String> {
            r.as_path()
                .map(|p| p.display().to_string())
                .ok_or_else(|| Error::InvalidArgument(format!(
                    "{side} image of `{}` is in-memory; manifests need file paths",
                    s.item_id
                )))
        };
        Ok(ManifestRecord {
            item_id: s.item_id.clone(),
            class_label: s.class_label.clone(),
            left_image: path_of(&s.left_image, "left")?,
            right_image: path_of(&s.right_image, "right")?,
            volume_ml: s.volume_gt_ml,
            frame_left: s.frame_indices.0,
            frame_right: s.frame_indices.1,
        })
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::serde(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

/// Dense feature vector produced by an encoder. Finite by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Concatenation of per-view embeddings, left first.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoFeature {
    values: Vec<f64>,
    view_dim: usize,
    views: usize,
}

impl StereoFeature {
    pub fn concat(views: &[EmbeddingVector]) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidArgument("need at least one view".into()));
        }
        let view_dim = views[0].dim();
        for v in views {
            if v.dim() != view_dim {
                return Err(Error::DimMismatch {
                    expected: view_dim,
                    got: v.dim(),
                    context: "per-view embedding".into(),
                });
            }
        }
        let mut values = Vec::with_capacity(view_dim * views.len());
        for v in views {
            values.extend_from_slice(v.values());
        }
        Ok(Self { values, view_dim, views: views.len() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn view_dim(&self) -> usize {
        self.view_dim
    }

    pub fn views(&self) -> usize {
        self.views
    }
}

/// Ordered set of class names with O(1) name -> index lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl ClassVocabulary {
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidArgument("vocabulary must be non-empty".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("class name {i} is blank")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownClass(name.into()))
    }

    pub fn name_of(&self, index: usize) -> Result<&str> {
        self.names.get(index).map(String::as_str).ok_or(Error::ClassIndexOutOfRange {
            index,
            classes: self.names.len(),
        })
    }

    /// One class name per line, in index order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for n in &self.names {
            text.push_str(n);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_names(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string))
    }
}

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    64
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_lambda() -> f64 {
    1.0
}
fn default_mu() -> f64 {
    0.5
}
fn default_projection_dim() -> usize {
    512
}
fn default_image_count() -> usize {
    2
}

/// Training hyperparameters. Field defaults match the reference protocol:
/// Adam(0.9, 0.999, eps 1e-8) at lr 1e-3, 100 epochs, batch 64, loss
/// weights lambda 1.0 (regression) and mu 0.5 (classification).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Weight on the volume regression term.
    pub lambda_mse: f64,
    /// Weight on the classification term.
    pub mu_ce: f64,
    pub seed: u64,
    /// Width K of the fused feature after projection.
    pub projection_dim: usize,
    /// Optional hidden width for the classifier head; None = single affine layer.
    pub classifier_hidden: Option<usize>,
    /// Hidden width for the regression head; None = projection_dim / 2.
    pub regression_hidden: Option<usize>,
    /// Number of views concatenated at the input (2 = stereo).
    pub image_count: usize,
    /// Probability of rendering the prompt from the ground-truth class during
    /// training instead of the predicted class.
    pub teacher_forcing_prob: f64,
    /// Train the regression target in standardized volume units.
    pub standardize_volumes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
            lambda_mse: default_lambda(),
            mu_ce: default_mu(),
            seed: 0,
            projection_dim: default_projection_dim(),
            classifier_hidden: None,
            regression_hidden: None,
            image_count: default_image_count(),
            teacher_forcing_prob: 0.0,
            standardize_volumes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        fn req(cond: bool, msg: &str) -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::InvalidConfig(msg.into()))
            }
        }
        req(self.epochs > 0, "epochs must be > 0")?;
        req(self.batch_size > 0, "batch_size must be > 0")?;
        req(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate must be positive",
        )?;
        req(
            (0.0..1.0).contains(&self.adam_beta1),
            "adam_beta1 must be in [0, 1)",
        )?;
        req(
            (0.0..1.0).contains(&self.adam_beta2),
            "adam_beta2 must be in [0, 1)",
        )?;
        req(
            self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0,
            "adam_epsilon must be positive",
        )?;
        req(
            self.lambda_mse.is_finite() && self.lambda_mse >= 0.0,
            "lambda_mse must be >= 0",
        )?;
        req(self.mu_ce.is_finite() && self.mu_ce >= 0.0, "mu_ce must be >= 0")?;
        req(
            self.lambda_mse > 0.0 || self.mu_ce > 0.0,
            "at least one of lambda_mse, mu_ce must be > 0",
        )?;
        req(self.projection_dim > 0, "projection_dim must be > 0")?;
        if let Some(h) = self.classifier_hidden {
            req(h > 0, "classifier_hidden must be > 0 when set")?;
        }
        if let Some(h) = self.regression_hidden {
            req(h > 0, "regression_hidden must be > 0 when set")?;
        }
        req(self.image_count > 0, "image_count must be > 0")?;
        req(
            (0.0..=1.0).contains(&self.teacher_forcing_prob),
            "teacher_forcing_prob must be in [0, 1]",
        )?;
        Ok(())
    }

    /// Effective regression hidden width.
    pub fn regression_hidden_dim(&self) -> usize {
        self.regression_hidden.unwrap_or((self.projection_dim / 2).max(1))
    }
}

/// Checks one sample against the vocabulary and the field invariants.
pub fn validate_sample(sample: &StereoSample, vocab: &ClassVocabulary) -> Result<()> {
    vocab.index_of(&sample.class_label)?;
    if !(sample.volume_gt_ml.is_finite() && sample.volume_gt_ml > 0.0) {
        return Err(Error::NonPositiveVolume(sample.volume_gt_ml));
    }
    let (l, r) = sample.frame_indices;
    if l == r {
        return Err(Error::DegenerateFramePair(l as usize));
    }
    if sample.item_id.trim().is_empty() {
        return Err(Error::InvalidArgument("item_id is blank".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> StereoSample {
        StereoSample {
            item_id: "apple_001".into(),
            class_label: "apple".into(),
            left_image: ImageRef::path("frames/apple_001/003.png"),
            right_image: ImageRef::path("frames/apple_001/007.png"),
            volume_gt_ml: 182.4,
            frame_indices: (3, 7),
        }
    }

    #[test]
    fn validate_sample_accepts_well_formed() {
        let vocab = ClassVocabulary::from_names(["apple", "bagel"]).unwrap();
        validate_sample(&sample(), &vocab).unwrap();
    }

    #[test]
    fn validate_sample_rejects_unknown_class() {
        let vocab = ClassVocabulary::from_names(["bagel"]).unwrap();
        match validate_sample(&sample(), &vocab) {
            Err(Error::UnknownClass(c)) => assert_eq!(c, "apple"),
            other => panic!("expected UnknownClass, got {other:?}"),
        }
    }

    #[test]
    fn validate_sample_rejects_nonpositive_volume() {
        let vocab = ClassVocabulary::from_names(["apple"]).unwrap();
        let mut s = sample();
        s.volume_gt_ml = 0.0;
        assert!(matches!(validate_sample(&s, &vocab), Err(Error::NonPositiveVolume(_))));
        s.volume_gt_ml = -3.0;
        assert!(matches!(validate_sample(&s, &vocab), Err(Error::NonPositiveVolume(_))));
    }

    #[test]
    fn validate_sample_rejects_identical_frames() {
        let vocab = ClassVocabulary::from_names(["apple"]).unwrap();
        let mut s = sample();
        s.frame_indices = (4, 4);
        assert!(matches!(validate_sample(&s, &vocab), Err(Error::DegenerateFramePair(4))));
    }

    #[test]
    fn stereo_concat_orders_left_first() {
        let l = EmbeddingVector::new(vec![1.0, 2.0]).unwrap();
        let r = EmbeddingVector::new(vec![3.0, 4.0]).unwrap();
        let f = StereoFeature::concat(&[l, r]).unwrap();
        assert_eq!(f.values(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.view_dim(), 2);
        assert_eq!(f.views(), 2);
    }

    #[test]
    fn stereo_concat_rejects_mixed_dims() {
        let l = EmbeddingVector::new(vec![1.0, 2.0]).unwrap();
        let r = EmbeddingVector::new(vec![3.0]).unwrap();
        assert!(matches!(
            StereoFeature::concat(&[l, r]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![f64::INFINITY]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
    }

    #[test]
    fn vocabulary_lookup_round_trips() {
        let vocab = ClassVocabulary::from_names(["apple", "bagel", "carrot"]).unwrap();
        assert_eq!(vocab.len(), 3);
        assert_eq!(vocab.index_of("bagel").unwrap(), 1);
        assert_eq!(vocab.name_of(2).unwrap(), "carrot");
        assert!(matches!(vocab.index_of("donut"), Err(Error::UnknownClass(_))));
        assert!(matches!(
            vocab.name_of(3),
            Err(Error::ClassIndexOutOfRange { index: 3, classes: 3 })
        ));
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_blanks() {
        assert!(ClassVocabulary::from_names(["a", "a"]).is_err());
        assert!(ClassVocabulary::from_names(["a", " "]).is_err());
        assert!(ClassVocabulary::from_names(Vec::<String>::new()).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = ClassVocabulary::from_names(["apple", "bagel"]).unwrap();
        vocab.save(&path).unwrap();
        let loaded = ClassVocabulary::load(&path).unwrap();
        assert_eq!(vocab, loaded);
    }

    #[test]
    fn manifest_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let records: Vec<ManifestRecord> = (0..4)
            .map(|i| ManifestRecord {
                item_id: format!("item_{i}"),
                class_label: "apple".into(),
                left_image: format!("frames/{i}/000.png"),
                right_image: format!("frames/{i}/002.png"),
                volume_ml: 100.5 + i as f64 * 0.1,
                frame_left: 0,
                frame_right: 2,
            })
            .collect();
        write_manifest(&path, &records).unwrap();
        let loaded = read_manifest(&path).unwrap();
        assert_eq!(records, loaded);
    }

    #[test]
    fn manifest_rejects_unknown_fields() {
        let line = r#"{"item_id":"a","class_label":"apple","left_image":"l","right_image":"r","volume_ml":1.0,"frame_left":0,"frame_right":2,"extra":1}"#;
        assert!(serde_json::from_str::<ManifestRecord>(line).is_err());
    }

    #[test]
    fn manifest_read_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"item_id\": 3}\n").unwrap();
        match read_manifest(&path) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn config_default_is_valid_and_matches_protocol() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.adam_beta1, 0.9);
        assert_eq!(cfg.adam_beta2, 0.999);
        assert_eq!(cfg.adam_epsilon, 1e-8);
        assert_eq!(cfg.lambda_mse, 1.0);
        assert_eq!(cfg.mu_ce, 0.5);
        assert_eq!(cfg.image_count, 2);
        assert_eq!(cfg.regression_hidden_dim(), 256);
    }

    #[test]
    fn config_rejects_out_of_range() {
        let cases = [
            TrainConfig { adam_beta1: 1.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { lambda_mse: 0.0, mu_ce: 0.0, ..TrainConfig::default() },
            TrainConfig { teacher_forcing_prob: 1.5, ..TrainConfig::default() },
        ];
        for cfg in cases {
            assert!(cfg.validate().is_err());
        }
    }
}
