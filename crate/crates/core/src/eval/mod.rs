//! Prediction sets, the five-metric report, reference baselines, and the
//! ablation runner.

pub mod distribution;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::model::{FeatureMask, ForwardOptions, TextContext};
use crate::priors::{PromptTemplate, VolumePriorTable};
use crate::training::checkpoint::Checkpoint;
use crate::training::{
    encode_rows, make_checkpoint, train, RunManifest, TrainDataset, TrainRow, TrainWiring,
};
use crate::types::TrainConfig;

/// One scored item. `class_label` is ground truth; `predicted_class` and
/// `prompt` are filled only by the fusion model (baselines leave them empty).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRow {
    pub item_id: String,
    pub class_label: String,
    pub volume_est_ml: f64,
    pub volume_gt_ml: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// Estimate was negative and got clamped to zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clipped: bool,
}

/// Validated collection of prediction rows: unique item ids, positive finite
/// ground truth, finite estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn new(rows: Vec<PredictionRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::DataEmpty);
        }
        let mut seen = BTreeSet::new();
        for row in &rows {
            if !seen.insert(row.item_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate item_id `{}` in prediction set",
                    row.item_id
                )));
            }
            if !(row.volume_gt_ml.is_finite() && row.volume_gt_ml > 0.0) {
                return Err(Error::NonPositiveVolume(row.volume_gt_ml));
            }
            if !row.volume_est_ml.is_finite() {
                return Err(Error::NonFinite(format!(
                    "estimate for `{}`",
                    row.item_id
                )));
            }
        }
        Ok(PredictionSet { rows })
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// One JSON object per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for row in &self.rows {
            let line = serde_json::to_string(row).map_err(|e| Error::serde(path, e))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: PredictionRow =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            rows.push(row);
        }
        PredictionSet::new(rows)
    }
}

/// The five regression metrics plus optional classification accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub n_items: usize,
    pub mae_ml: f64,
    pub mape_percent: f64,
    pub pearson_r: f64,
    pub r_squared: f64,
    pub cosine_similarity: f64,
    /// Present only when every row carries a predicted class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification_accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::serde(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::serde(path, e))
    }
}

/// Plain two-pass metrics in row order.
///
/// Conventions for degenerate inputs: r = 0 when either variance is zero;
/// cosine = 0 when either norm is zero; when the ground truth is constant,
/// R-squared is 1 for an exact fit and 0 otherwise.
pub fn compute_metrics(preds: &PredictionSet) -> Result<MetricsReport> {
    let rows = preds.rows();
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "correlation metrics need at least 2 predictions".into(),
        ));
    }
    let nf = n as f64;

    let mut sum_gt = 0.0;
    let mut sum_est = 0.0;
    for r in rows {
        sum_gt += r.volume_gt_ml;
        sum_est += r.volume_est_ml;
    }
    let mean_gt = sum_gt / nf;
    let mean_est = sum_est / nf;

    let mut abs_sum = 0.0;
    let mut ape_sum = 0.0;
    let mut cov = 0.0;
    let mut var_gt = 0.0;
    let mut var_est = 0.0;
    let mut dot = 0.0;
    let mut sq_gt = 0.0;
    let mut sq_est = 0.0;
    let mut ss_res = 0.0;
    for r in rows {
        let err = r.volume_est_ml - r.volume_gt_ml;
        abs_sum += err.abs();
        ape_sum += err.abs() / r.volume_gt_ml;
        ss_res += err * err;
        let dg = r.volume_gt_ml - mean_gt;
        let de = r.volume_est_ml - mean_est;
        cov += dg * de;
        var_gt += dg * dg;
        var_est += de * de;
        dot += r.volume_gt_ml * r.volume_est_ml;
        sq_gt += r.volume_gt_ml * r.volume_gt_ml;
        sq_est += r.volume_est_ml * r.volume_est_ml;
    }

    let pearson_r = if var_gt == 0.0 || var_est == 0.0 {
        0.0
    } else {
        cov / (var_gt * var_est).sqrt()
    };
    let r_squared = if var_gt == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / var_gt
    };
    let cosine_similarity = if sq_gt == 0.0 || sq_est == 0.0 {
        0.0
    } else {
        dot / (sq_gt * sq_est).sqrt()
    };

    let classification_accuracy = if rows.iter().all(|r| r.predicted_class.is_some()) {
        let hits = rows
            .iter()
            .filter(|r| r.predicted_class.as_deref() == Some(r.class_label.as_str()))
            .count();
        Some(hits as f64 / nf)
    } else {
        None
    };

    Ok(MetricsReport {
        n_items: n,
        mae_ml: abs_sum / nf,
        mape_percent: 100.0 * (ape_sum / nf),
        pearson_r,
        r_squared,
        cosine_similarity,
        classification_accuracy,
    })
}

/// Runs the trained head over `rows` and packages the estimates. Prompts are
/// always rendered from the predicted class; `clip_negative` clamps negative
/// estimates to zero and marks the row.
pub fn predict(
    ckpt: &Checkpoint,
    rows: &[TrainRow],
    image_encoder: &dyn ImageEncoder,
    text_encoder: &dyn TextEncoder,
    priors: &VolumePriorTable,
    clip_negative: bool,
) -> Result<PredictionSet> {
    if rows.is_empty() {
        return Err(Error::DataEmpty);
    }
    ckpt.check_encoders(image_encoder, text_encoder)?;
    let vocab = ckpt.vocab()?;
    for row in rows {
        if row.views.len() != ckpt.config.image_count {
            return Err(Error::DimMismatch {
                expected: ckpt.config.image_count,
                got: row.views.len(),
                context: format!("views of `{}`", row.item_id),
            });
        }
    }
    let encoded = encode_rows(rows, image_encoder)?;
    let ctx = TextContext::new(
        &vocab,
        priors,
        &ckpt.template,
        ckpt.volume_decimals,
        text_encoder,
    );
    let opts = ForwardOptions {
        mask: ckpt.mask,
        prompt_class_override: None,
        scaler: ckpt.scaler,
    };

    let mut out = Vec::with_capacity(rows.len());
    for (row, views) in rows.iter().zip(&encoded) {
        let trace = crate::model::forward(&ckpt.params, views, &ctx, &opts)?;
        let mut est = trace.volume_est_ml;
        let clipped = clip_negative && est < 0.0;
        if clipped {
            est = 0.0;
        }
        out.push(PredictionRow {
            item_id: row.item_id.clone(),
            class_label: row.class_label.clone(),
            volume_est_ml: est,
            volume_gt_ml: row.volume_gt_ml,
            predicted_class: Some(trace.predicted_class_name.clone()),
            // Under stereo-only masking the prompt never reaches the model.
            prompt: (ckpt.mask != FeatureMask::StereoOnly).then(|| trace.prompt.clone()),
            clipped,
        });
    }
    PredictionSet::new(out)
}

/// Predicts the plain mean of the training volumes for every item.
///
/// The mean is a left-to-right sum divided by the count, the same expression
/// `compute_metrics` uses for the ground-truth mean, so evaluating this
/// baseline on its own training set gives R-squared of exactly zero.
pub fn baseline_dataset_mean(
    train_volumes: &[f64],
    eval_rows: &[TrainRow],
) -> Result<PredictionSet> {
    if train_volumes.is_empty() || eval_rows.is_empty() {
        return Err(Error::DataEmpty);
    }
    for &v in train_volumes {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::NonPositiveVolume(v));
        }
    }
    let mean = train_volumes.iter().sum::<f64>() / train_volumes.len() as f64;
    let rows = eval_rows
        .iter()
        .map(|row| PredictionRow {
            item_id: row.item_id.clone(),
            class_label: row.class_label.clone(),
            volume_est_ml: mean,
            volume_gt_ml: row.volume_gt_ml,
            predicted_class: None,
            prompt: None,
            clipped: false,
        })
        .collect();
    PredictionSet::new(rows)
}

/// Predicts each item's class-mean volume from the prior table, using the
/// ground-truth class label.
pub fn baseline_category_mean(
    priors: &VolumePriorTable,
    eval_rows: &[TrainRow],
) -> Result<PredictionSet> {
    if eval_rows.is_empty() {
        return Err(Error::DataEmpty);
    }
    let rows = eval_rows
        .iter()
        .map(|row| {
            Ok(PredictionRow {
                item_id: row.item_id.clone(),
                class_label: row.class_label.clone(),
                volume_est_ml: priors.mean_volume_ml(&row.class_label)?,
                volume_gt_ml: row.volume_gt_ml,
                predicted_class: None,
                prompt: None,
                clipped: false,
            })
        })
        .collect::<Result<_>>()?;
    PredictionSet::new(rows)
}

/// One knob turned relative to the reference configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Full,
    StereoOnly,
    TextOnly,
    /// Built-in prompt template id.
    PromptTemplate(u8),
    /// Views concatenated per item; needs a row source in the setup.
    ImageCount(usize),
}

impl AblationVariant {
    pub fn name(&self) -> String {
        match self {
            AblationVariant::Full => "full".into(),
            AblationVariant::StereoOnly => "stereo-only".into(),
            AblationVariant::TextOnly => "text-only".into(),
            AblationVariant::PromptTemplate(id) => format!("prompt-template-{id}"),
            AblationVariant::ImageCount(n) => format!("image-count-{n}"),
        }
    }
}

/// Rebuilds train/eval rows with a different number of views per item, for
/// the image-count ablation.
pub trait RowsForCount {
    fn rows_for_count(&self, image_count: usize) -> Result<(TrainDataset, Vec<TrainRow>)>;
}

/// Shared train/eval protocol every variant runs under.
pub struct AblationSetup<'a> {
    pub config: &'a TrainConfig,
    pub train: &'a TrainDataset,
    pub eval_rows: &'a [TrainRow],
    pub image_encoder: &'a dyn ImageEncoder,
    pub text_encoder: &'a dyn TextEncoder,
    pub priors: &'a VolumePriorTable,
    pub template: &'a PromptTemplate,
    pub volume_decimals: usize,
    pub clip_negative: bool,
    pub rows_for_count: Option<&'a dyn RowsForCount>,
}

pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub metrics: MetricsReport,
    pub predictions: PredictionSet,
    pub manifest: RunManifest,
    /// Trained weights of this variant, ready for further prediction.
    pub checkpoint: Checkpoint,
}

/// Trains and evaluates one variant under the setup's fixed protocol. Only
/// the variant's knob changes: branch masking swaps the masked half of the
/// combined feature for zeros, the prompt variant swaps the template, and the
/// image-count variant rebuilds rows through the setup's row source.
pub fn run_ablation(variant: &AblationVariant, setup: &AblationSetup) -> Result<AblationOutcome> {
    let mut cfg = setup.config.clone();
    let mut mask = FeatureMask::Full;
    let mut template = setup.template.clone();
    let mut rebuilt: Option<(TrainDataset, Vec<TrainRow>)> = None;

    match variant {
        AblationVariant::Full => {}
        AblationVariant::StereoOnly => mask = FeatureMask::StereoOnly,
        AblationVariant::TextOnly => mask = FeatureMask::TextOnly,
        AblationVariant::PromptTemplate(id) => template = PromptTemplate::by_id(*id)?,
        AblationVariant::ImageCount(n) => {
            let source = setup.rows_for_count.ok_or_else(|| {
                Error::InvalidArgument(
                    "image-count ablation needs a row source in the setup".into(),
                )
            })?;
            cfg.image_count = *n;
            rebuilt = Some(source.rows_for_count(*n)?);
        }
    }
    let (train_data, eval_rows) = match &rebuilt {
        Some((t, e)) => (t, e.as_slice()),
        None => (setup.train, setup.eval_rows),
    };

    let wiring = TrainWiring {
        image_encoder: setup.image_encoder,
        text_encoder: setup.text_encoder,
        priors: setup.priors,
        template: &template,
        volume_decimals: setup.volume_decimals,
        mask,
    };
    let output = train(&cfg, train_data, &wiring)?;
    let ckpt = make_checkpoint(&output, &train_data.vocab, false);
    let predictions = predict(
        &ckpt,
        eval_rows,
        setup.image_encoder,
        setup.text_encoder,
        setup.priors,
        setup.clip_negative,
    )?;
    let metrics = compute_metrics(&predictions)?;
    Ok(AblationOutcome {
        variant: variant.clone(),
        metrics,
        predictions,
        manifest: output.manifest,
        checkpoint: ckpt,
    })
}
