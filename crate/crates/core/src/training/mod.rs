//! Training loop: cached encoding, seeded shuffling, Adam updates, run
//! manifest. Serial and fully deterministic for a fixed config and dataset.

pub mod adam;
pub mod checkpoint;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{encode_image, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::model::{
    gradient, FeatureMask, ForwardOptions, FusionModelParams, ModelDims, TextContext,
    TrainExample, VolumeScaler,
};
use crate::priors::{PromptTemplate, VolumePriorTable};
use crate::types::{ClassVocabulary, EmbeddingVector, ImageRef, StereoSample, TrainConfig};
use adam::{adam_step, AdamHyper, AdamState};
use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

/// One training or evaluation row: any number of views of one item.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRow {
    pub item_id: String,
    pub class_label: String,
    pub views: Vec<ImageRef>,
    pub volume_gt_ml: f64,
}

impl From<&StereoSample> for TrainRow {
    fn from(s: &StereoSample) -> Self {
        TrainRow {
            item_id: s.item_id.clone(),
            class_label: s.class_label.clone(),
            views: vec![s.left_image.clone(), s.right_image.clone()],
            volume_gt_ml: s.volume_gt_ml,
        }
    }
}

/// Rows plus the vocabulary that covers them.
#[derive(Clone, Debug)]
pub struct TrainDataset {
    pub rows: Vec<TrainRow>,
    pub vocab: ClassVocabulary,
}

impl TrainDataset {
    pub fn from_samples(samples: &[StereoSample], vocab: ClassVocabulary) -> Self {
        TrainDataset { rows: samples.iter().map(TrainRow::from).collect(), vocab }
    }
}

/// Frozen components and fusion settings for a run.
pub struct TrainWiring<'a> {
    pub image_encoder: &'a dyn ImageEncoder,
    pub text_encoder: &'a dyn TextEncoder,
    pub priors: &'a VolumePriorTable,
    pub template: &'a PromptTemplate,
    pub volume_decimals: usize,
    pub mask: FeatureMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mse: f64,
    pub ce: f64,
    pub total: f64,
}

/// Record of one training run: configuration, data identity, and the loss
/// trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub config: TrainConfig,
    pub image_encoder: String,
    pub text_encoder: String,
    pub template: PromptTemplate,
    pub volume_decimals: usize,
    pub mask: FeatureMask,
    pub train_data_digest: String,
    pub num_train_rows: usize,
    pub num_classes: usize,
    pub num_params: usize,
    pub scaler: VolumeScaler,
    pub epoch_losses: Vec<EpochLoss>,
    pub best_epoch: usize,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::serde(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::serde(path, e))
    }
}

/// Content digest of the rows a run trained on: ids, classes, volumes, and
/// view keys, in row order.
pub fn digest_rows(rows: &[TrainRow]) -> String {
    let mut hasher = Sha256::new();
    for r in rows {
        hasher.update(r.item_id.as_bytes());
        hasher.update([0]);
        hasher.update(r.class_label.as_bytes());
        hasher.update([0]);
        hasher.update(r.volume_gt_ml.to_le_bytes());
        for v in &r.views {
            hasher.update(v.cache_key().as_bytes());
            hasher.update([0]);
        }
        hasher.update([0xff]);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Result of a run: final weights, the best-loss weights, and the manifest.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: FusionModelParams,
    pub best_params: FusionModelParams,
    pub scaler: VolumeScaler,
    pub manifest: RunManifest,
}

impl TrainOutput {
    /// Packages the run as a checkpoint; `best` picks the lowest-loss epoch
    /// weights over the final ones.
    pub fn to_checkpoint(&self, best: bool) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.manifest.config.clone(),
            image_encoder: self.manifest.image_encoder.clone(),
            text_encoder: self.manifest.text_encoder.clone(),
            template: self.manifest.template.clone(),
            volume_decimals: self.manifest.volume_decimals,
            mask: self.manifest.mask,
            class_names: Vec::new(), // filled below
            scaler: self.scaler,
            params: if best { self.best_params.clone() } else { self.params.clone() },
        }
    }
}

fn mix_seed(seed: u64, tag: &str, k: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(k.to_le_bytes());
    u64::from_le_bytes(hasher.finalize()[..8].try_into().expect("8 bytes"))
}

/// Encodes every distinct view once and assembles per-row view embeddings.
pub fn encode_rows(
    rows: &[TrainRow],
    encoder: &dyn ImageEncoder,
) -> Result<Vec<Arc<Vec<EmbeddingVector>>>> {
    let mut cache: HashMap<String, EmbeddingVector> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut views = Vec::with_capacity(row.views.len());
        for image in &row.views {
            let key = image.cache_key();
            let embedded = match cache.get(&key) {
                Some(hit) => hit.clone(),
                None => {
                    let e = encode_image(encoder, image)?;
                    cache.insert(key, e.clone());
                    e
                }
            };
            views.push(embedded);
        }
        out.push(Arc::new(views));
    }
    Ok(out)
}

/// Trains the fusion head. Encoders stay frozen; all randomness (init,
/// shuffling, teacher-forcing coins) derives from `cfg.seed`.
pub fn train(cfg: &TrainConfig, data: &TrainDataset, wiring: &TrainWiring) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.rows.is_empty() {
        return Err(Error::DataEmpty);
    }
    for row in &data.rows {
        data.vocab.index_of(&row.class_label)?;
        if !(row.volume_gt_ml.is_finite() && row.volume_gt_ml > 0.0) {
            return Err(Error::NonPositiveVolume(row.volume_gt_ml));
        }
        if row.views.len() != cfg.image_count {
            return Err(Error::DimMismatch {
                expected: cfg.image_count,
                got: row.views.len(),
                context: format!("views of `{}`", row.item_id),
            });
        }
    }

    let scaler = if cfg.standardize_volumes {
        VolumeScaler::fit(&data.rows.iter().map(|r| r.volume_gt_ml).collect::<Vec<_>>())?
    } else {
        VolumeScaler::identity()
    };

    let dims = ModelDims::from_config(
        cfg,
        wiring.image_encoder.output_dim(),
        wiring.text_encoder.output_dim(),
        data.vocab.len(),
    )?;
    let mut params = FusionModelParams::init(&dims, cfg.seed)?;

    let encoded = encode_rows(&data.rows, wiring.image_encoder)?;
    let examples: Vec<TrainExample> = data
        .rows
        .iter()
        .zip(&encoded)
        .map(|(row, views)| {
            Ok(TrainExample {
                views: views.clone(),
                target_model: scaler.to_model(row.volume_gt_ml),
                class_index: data.vocab.index_of(&row.class_label)?,
                prompt_class_override: None,
            })
        })
        .collect::<Result<_>>()?;

    let ctx = TextContext::new(
        &data.vocab,
        wiring.priors,
        wiring.template,
        wiring.volume_decimals,
        wiring.text_encoder,
    );
    let opts = ForwardOptions { mask: wiring.mask, prompt_class_override: None, scaler };
    let hyper = AdamHyper::from(cfg);

    let mut flat = params.flatten();
    let mut state = AdamState::new(flat.len());
    let n = examples.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_total = f64::INFINITY;
    let mut best_params = params.clone();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, "epoch", epoch as u64));
        order.shuffle(&mut rng);

        let mut overrides: Vec<Option<usize>> = vec![None; n];
        if cfg.teacher_forcing_prob > 0.0 {
            for &idx in &order {
                if rng.random_range(0.0..1.0) < cfg.teacher_forcing_prob {
                    overrides[idx] = Some(examples[idx].class_index);
                }
            }
        }

        let mut mse_sum = 0.0;
        let mut ce_sum = 0.0;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainExample> = chunk
                .iter()
                .map(|&i| TrainExample {
                    prompt_class_override: overrides[i],
                    ..examples[i].clone()
                })
                .collect();
            let step = gradient(&params, &batch, &ctx, &opts, cfg.lambda_mse, cfg.mu_ce)
                .and_then(|(grads, losses)| {
                    adam_step(&mut flat, &grads.flatten(), &mut state, &hyper)?;
                    params.set_from_flat(&flat)?;
                    Ok(losses)
                });
            let losses = step.map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch: batch_id },
                other => other,
            })?;
            mse_sum += losses.mse * chunk.len() as f64;
            ce_sum += losses.ce * chunk.len() as f64;
        }
        let mse = mse_sum / n as f64;
        let ce = ce_sum / n as f64;
        let total = cfg.lambda_mse * mse + cfg.mu_ce * ce;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        epoch_losses.push(EpochLoss { epoch, mse, ce, total });
        if total < best_total {
            best_total = total;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }

    let manifest = RunManifest {
        version: 1,
        config: cfg.clone(),
        image_encoder: wiring.image_encoder.name().to_string(),
        text_encoder: wiring.text_encoder.name().to_string(),
        template: wiring.template.clone(),
        volume_decimals: wiring.volume_decimals,
        mask: wiring.mask,
        train_data_digest: digest_rows(&data.rows),
        num_train_rows: n,
        num_classes: data.vocab.len(),
        num_params: params.num_params(),
        scaler,
        epoch_losses,
        best_epoch,
    };
    Ok(TrainOutput { params, best_params, scaler, manifest })
}

/// Packages a finished run into a checkpoint with the vocabulary attached.
pub fn make_checkpoint(output: &TrainOutput, vocab: &ClassVocabulary, best: bool) -> Checkpoint {
    let mut ckpt = output.to_checkpoint(best);
    ckpt.class_names = vocab.names().to_vec();
    ckpt
}
