//! Flat TOML run configuration. One file covers paths, encoder selection,
//! training hyperparameters, and split policy; command-line flags override
//! individual values after the file is read.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use stereovol_core::error::{Error, Result};
use stereovol_core::ingest::ManifestPolicy;
use stereovol_core::model::FeatureMask;
use stereovol_core::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

/// Every tunable in one flat table. Unknown keys are rejected so a typo
/// fails the run before any work starts.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    // Paths. Relative image and mesh paths in manifests resolve under
    // `data_root`; `output_dir` is the default home for run outputs.
    pub data_root: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,

    // Model wiring.
    pub image_encoder: String,
    pub text_encoder: String,
    pub template_id: u8,
    pub volume_decimals: usize,
    pub mask: FeatureMask,

    // Run behavior. Every command is deterministic by construction; the
    // flag exists so a config can state the expectation and fail loudly if
    // someone asks for the mode this build does not have.
    pub deterministic: bool,
    pub log_level: LogLevel,

    // Training hyperparameters, mirroring TrainConfig field for field.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub lambda_mse: f64,
    pub mu_ce: f64,
    pub seed: u64,
    pub projection_dim: usize,
    pub classifier_hidden: Option<usize>,
    pub regression_hidden: Option<usize>,
    pub image_count: usize,
    pub teacher_forcing_prob: f64,
    pub standardize_volumes: bool,

    // Split policy.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub min_gap: usize,
    pub max_train_pairs_per_item: usize,
    pub mesh_unit_scale_to_cm: f64,
}

impl Default for FileConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let split = ManifestPolicy::default();
        FileConfig {
            data_root: PathBuf::from("."),
            cache_dir: None,
            output_dir: PathBuf::from("out"),
            image_encoder: "test:32:0".into(),
            text_encoder: "test:32:0".into(),
            template_id: 0,
            volume_decimals: 1,
            mask: FeatureMask::Full,
            deterministic: true,
            log_level: LogLevel::Info,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_epsilon: train.adam_epsilon,
            lambda_mse: train.lambda_mse,
            mu_ce: train.mu_ce,
            seed: train.seed,
            projection_dim: train.projection_dim,
            classifier_hidden: train.classifier_hidden,
            regression_hidden: train.regression_hidden,
            image_count: train.image_count,
            teacher_forcing_prob: train.teacher_forcing_prob,
            standardize_volumes: train.standardize_volumes,
            train_fraction: split.train_fraction,
            split_seed: split.seed,
            min_gap: split.min_gap,
            max_train_pairs_per_item: split.max_train_pairs_per_item,
            mesh_unit_scale_to_cm: split.mesh_unit_scale_to_cm,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.deterministic {
            return Err(Error::InvalidConfig(
                "deterministic = false is not supported; every run is deterministic \
                 by construction"
                    .into(),
            ));
        }
        if !(1..=2).contains(&self.image_count) {
            return Err(Error::InvalidConfig(format!(
                "image_count must be 1 or 2 here (stereo manifests carry two views \
                 per item); got {}",
                self.image_count
            )));
        }
        // Template and the numeric ranges are validated by their owners at
        // use time; checking the template id here keeps the failure early.
        stereovol_core::priors::PromptTemplate::by_id(self.template_id)?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            lambda_mse: self.lambda_mse,
            mu_ce: self.mu_ce,
            seed: self.seed,
            projection_dim: self.projection_dim,
            classifier_hidden: self.classifier_hidden,
            regression_hidden: self.regression_hidden,
            image_count: self.image_count,
            teacher_forcing_prob: self.teacher_forcing_prob,
            standardize_volumes: self.standardize_volumes,
        }
    }

    pub fn manifest_policy(&self) -> ManifestPolicy {
        ManifestPolicy {
            train_fraction: self.train_fraction,
            seed: self.split_seed,
            min_gap: self.min_gap,
            max_train_pairs_per_item: self.max_train_pairs_per_item,
            mesh_unit_scale_to_cm: self.mesh_unit_scale_to_cm,
            explicit_split: None,
        }
    }

    /// Joins a possibly relative path onto `data_root`.
    pub fn resolve(&self, p: impl AsRef<Path>) -> PathBuf {
        let path = p.as_ref();
        if path.is_absolute() || self.data_root == Path::new(".") {
            path.to_path_buf()
        } else {
            self.data_root.join(path)
        }
    }
}

pub fn parse_mask(s: &str) -> Result<FeatureMask> {
    match s {
        "full" => Ok(FeatureMask::Full),
        "stereo-only" => Ok(FeatureMask::StereoOnly),
        "text-only" => Ok(FeatureMask::TextOnly),
        other => Err(Error::InvalidArgument(format!(
            "unknown mask `{other}` (expected full, stereo-only, or text-only)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_core_train_config() {
        let cfg = FileConfig::default();
        assert_eq!(cfg.train_config(), TrainConfig::default());
        let policy = cfg.manifest_policy();
        let core = ManifestPolicy::default();
        assert_eq!(policy.train_fraction, core.train_fraction);
        assert_eq!(policy.max_train_pairs_per_item, core.max_train_pairs_per_item);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<FileConfig>("epochss = 5").unwrap_err();
        assert!(err.to_string().contains("epochss"));
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let cfg: FileConfig = toml::from_str("epochs = 7\nmask = \"stereo-only\"").unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.mask, FeatureMask::StereoOnly);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn nondeterministic_mode_is_refused() {
        let cfg: FileConfig = toml::from_str("deterministic = false").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn wide_image_counts_are_refused() {
        let cfg: FileConfig = toml::from_str("image_count = 3").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolve_honors_data_root() {
        let cfg: FileConfig = toml::from_str("data_root = \"/data\"").unwrap();
        assert_eq!(cfg.resolve("frames/a.png"), PathBuf::from("/data/frames/a.png"));
        assert_eq!(cfg.resolve("/abs/b.png"), PathBuf::from("/abs/b.png"));
        let dot = FileConfig::default();
        assert_eq!(dot.resolve("frames/a.png"), PathBuf::from("frames/a.png"));
    }
}
