//! The fused volume estimator: stereo classifier, text-prior lookup,
//! projection of the combined feature, and volume regression head.
//!
//! Data flow for one sample:
//!
//! ```text
//! views ---------concat--------> stereo ---+--> classifier --> logits --> argmax
//!                                          |                                |
//!                                          |          prior lookup + prompt render
//!                                          |                                |
//!                                          |            text encoder (frozen, constant)
//!                                          |                                |
//!                                          +------[stereo ; text]-----------+
//!                                                       |
//!                                            projection + relu --> fused
//!                                                       |
//!                                            regression MLP --> volume
//! ```
//!
//! The argmax -> prompt -> text-feature hop is not differentiable, so the
//! text feature is treated as a constant during backprop: the classifier
//! learns only from the classification term, and the projection/regression
//! stack learns only from the regression term flowing back to the fused
//! feature. Encoders are frozen and receive no gradient at all.

pub mod dense;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::priors::{render_prompt, PromptTemplate, VolumePriorTable};
use crate::types::{ClassVocabulary, EmbeddingVector, TrainConfig};
use dense::{relu, relu_mask, Dense, DenseGrad};

/// Static shape of the trainable head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Per-view embedding width D.
    pub image_dim: usize,
    /// Views concatenated at the input (2 = stereo).
    pub image_count: usize,
    /// Text embedding width.
    pub text_dim: usize,
    pub num_classes: usize,
    /// Fused feature width K.
    pub projection_dim: usize,
    /// Optional classifier hidden width; None = single affine layer.
    pub classifier_hidden: Option<usize>,
    /// Regression hidden width (K/2 under default config).
    pub regression_hidden: usize,
}

impl ModelDims {
    pub fn from_config(
        cfg: &TrainConfig,
        image_dim: usize,
        text_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let dims = ModelDims {
            image_dim,
            image_count: cfg.image_count,
            text_dim,
            num_classes,
            projection_dim: cfg.projection_dim,
            classifier_hidden: cfg.classifier_hidden,
            regression_hidden: cfg.regression_hidden_dim(),
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.image_dim, "image_dim"),
            (self.image_count, "image_count"),
            (self.text_dim, "text_dim"),
            (self.projection_dim, "projection_dim"),
            (self.regression_hidden, "regression_hidden"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if let Some(h) = self.classifier_hidden {
            if h == 0 {
                return Err(Error::InvalidConfig("classifier_hidden must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Width of the concatenated per-view embeddings.
    pub fn stereo_dim(&self) -> usize {
        self.image_dim * self.image_count
    }

    /// Width of [stereo ; text].
    pub fn combined_dim(&self) -> usize {
        self.stereo_dim() + self.text_dim
    }
}

/// Affine map between mL and model units. Identity when standardization is
/// off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScaler {
    pub mean: f64,
    pub std: f64,
}

impl VolumeScaler {
    pub fn identity() -> Self {
        VolumeScaler { mean: 0.0, std: 1.0 }
    }

    /// Mean/std of the training volumes (population std).
    pub fn fit(volumes: &[f64]) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::DataEmpty);
        }
        let n = volumes.len() as f64;
        let mean = volumes.iter().sum::<f64>() / n;
        let var = volumes.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std.is_finite() && std > 1e-12) {
            return Err(Error::InvalidArgument(
                "volumes have (near) zero spread; standardization is degenerate".into(),
            ));
        }
        Ok(VolumeScaler { mean, std })
    }

    pub fn to_model(&self, volume_ml: f64) -> f64 {
        (volume_ml - self.mean) / self.std
    }

    pub fn to_ml(&self, raw: f64) -> f64 {
        raw * self.std + self.mean
    }
}

/// Weights of the trainable head. Everything upstream (both encoders) is
/// frozen and lives outside this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModelParams {
    pub dims: ModelDims,
    /// One affine layer, or affine-relu-affine when `classifier_hidden` set.
    pub classifier: Vec<Dense>,
    /// Combined feature -> K, followed by relu.
    pub projection: Dense,
    /// K -> hidden -> 1 with relu between.
    pub regression: Vec<Dense>,
}

impl FusionModelParams {
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let classifier = match dims.classifier_hidden {
            None => vec![Dense::new_seeded(dims.num_classes, dims.stereo_dim(), &mut rng)],
            Some(h) => vec![
                Dense::new_seeded(h, dims.stereo_dim(), &mut rng),
                Dense::new_seeded(dims.num_classes, h, &mut rng),
            ],
        };
        let projection = Dense::new_seeded(dims.projection_dim, dims.combined_dim(), &mut rng);
        let regression = vec![
            Dense::new_seeded(dims.regression_hidden, dims.projection_dim, &mut rng),
            Dense::new_seeded(1, dims.regression_hidden, &mut rng),
        ];
        Ok(Self { dims: dims.clone(), classifier, projection, regression })
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        for layer in self.classifier.iter().chain([&self.projection]).chain(&self.regression) {
            layer.validate()?;
        }
        let last = self.regression.last().ok_or_else(|| {
            Error::InvalidConfig("regression head must have layers".into())
        })?;
        if last.out_dim != 1 {
            return Err(Error::DimMismatch {
                expected: 1,
                got: last.out_dim,
                context: "regression output".into(),
            });
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.classifier.iter().chain([&self.projection]).chain(&self.regression)
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// Forward FLOPs of the trainable head for one sample: multiply-adds and
    /// bias adds of every dense layer plus one op per relu unit.
    pub fn head_flops(&self) -> u64 {
        let dense: u64 = self.layers().map(Dense::flops).sum();
        let mut relu_units = self.dims.projection_dim as u64 + self.dims.regression_hidden as u64;
        if let Some(h) = self.dims.classifier_hidden {
            relu_units += h as u64;
        }
        dense + relu_units
    }

    /// Canonical parameter order: classifier layers, projection, regression
    /// layers; within a layer, weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                left: flat.len(),
                right: self.num_params(),
                context: "flattened parameters".into(),
            });
        }
        let mut offset = 0;
        let mut take = |layer: &mut Dense| {
            let (wn, bn) = (layer.w.len(), layer.b.len());
            layer.w.copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            layer.b.copy_from_slice(&flat[offset..offset + bn]);
            offset += bn;
        };
        for layer in &mut self.classifier {
            take(layer);
        }
        take(&mut self.projection);
        for layer in &mut self.regression {
            take(layer);
        }
        Ok(())
    }
}

/// Gradients shaped like `FusionModelParams`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub classifier: Vec<DenseGrad>,
    pub projection: DenseGrad,
    pub regression: Vec<DenseGrad>,
}

impl ModelGrads {
    pub fn zeros_like(params: &FusionModelParams) -> Self {
        ModelGrads {
            classifier: params.classifier.iter().map(DenseGrad::zeros_like).collect(),
            projection: DenseGrad::zeros_like(&params.projection),
            regression: params.regression.iter().map(DenseGrad::zeros_like).collect(),
        }
    }

    /// Same canonical order as `FusionModelParams::flatten`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.classifier.iter().chain([&self.projection]).chain(&self.regression) {
            out.extend_from_slice(&g.dw);
            out.extend_from_slice(&g.db);
        }
        out
    }
}

/// Which halves of the combined feature reach the projection.
///
/// Masking changes only the fusion input: the classifier always sees the
/// real stereo feature, so the prompt (and therefore the text feature) is
/// still driven by the image content under `TextOnly`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMask {
    Full,
    /// Zero the text half; no text encoding is performed.
    StereoOnly,
    /// Zero the stereo half.
    TextOnly,
}

/// Everything the forward pass needs to turn a predicted class into a text
/// feature. The embedding cache is keyed by prompt string; priors are fixed
/// during a run, so the set of distinct prompts is finite and caching never
/// changes outputs.
pub struct TextContext<'a> {
    pub vocab: &'a ClassVocabulary,
    pub priors: &'a VolumePriorTable,
    pub template: &'a PromptTemplate,
    pub volume_decimals: usize,
    pub encoder: &'a dyn TextEncoder,
    cache: RefCell<HashMap<String, Arc<Vec<f64>>>>,
}

impl<'a> TextContext<'a> {
    pub fn new(
        vocab: &'a ClassVocabulary,
        priors: &'a VolumePriorTable,
        template: &'a PromptTemplate,
        volume_decimals: usize,
        encoder: &'a dyn TextEncoder,
    ) -> Self {
        Self { vocab, priors, template, volume_decimals, encoder, cache: RefCell::new(HashMap::new()) }
    }

    /// Prompt for a class index, rendered from the class prior.
    pub fn prompt_for_class(&self, class_index: usize) -> Result<String> {
        let name = self.vocab.name_of(class_index)?;
        let prior = self.priors.mean_volume_ml(name)?;
        render_prompt(self.template, name, prior, self.volume_decimals)
    }

    fn text_feature(&self, prompt: &str) -> Result<Arc<Vec<f64>>> {
        if let Some(hit) = self.cache.borrow().get(prompt) {
            return Ok(hit.clone());
        }
        let embedded = crate::encoders::encode_text(self.encoder, prompt)?;
        let feature = Arc::new(embedded.values().to_vec());
        self.cache.borrow_mut().insert(prompt.to_string(), feature.clone());
        Ok(feature)
    }
}

/// Per-call forward options.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mask: FeatureMask,
    /// Render the prompt from this class instead of the argmax (teacher
    /// forcing during training). Inference always passes None.
    pub prompt_class_override: Option<usize>,
    /// Maps the raw regression output back to mL.
    pub scaler: VolumeScaler,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mask: FeatureMask::Full,
            prompt_class_override: None,
            scaler: VolumeScaler::identity(),
        }
    }
}

/// Full record of one forward pass: every intermediate a caller might audit,
/// plus what backprop needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub stereo_feature: Vec<f64>,
    pub class_logits: Vec<f64>,
    /// Argmax of the logits; ties resolve to the lowest index.
    pub predicted_class: usize,
    pub predicted_class_name: String,
    /// Class the prompt was rendered from (differs from `predicted_class`
    /// only under teacher forcing).
    pub prompt_class: usize,
    pub prompt: String,
    pub text_feature: Arc<Vec<f64>>,
    /// [stereo ; text] after mask application.
    pub combined_feature: Vec<f64>,
    /// Fused feature after projection and relu.
    pub fused_feature: Vec<f64>,
    /// Regression output in model units.
    pub raw_output: f64,
    /// Regression output mapped to mL.
    pub volume_est_ml: f64,
    // Backward-pass internals.
    pub(crate) classifier_pre_hidden: Option<Vec<f64>>,
    pub(crate) classifier_hidden: Option<Vec<f64>>,
    pub(crate) projection_pre: Vec<f64>,
    pub(crate) regression_pre_hidden: Vec<f64>,
    pub(crate) regression_hidden: Vec<f64>,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs the full pipeline on one sample's view embeddings.
pub fn forward(
    params: &FusionModelParams,
    views: &[EmbeddingVector],
    ctx: &TextContext,
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    let dims = &params.dims;
    if views.len() != dims.image_count {
        return Err(Error::DimMismatch {
            expected: dims.image_count,
            got: views.len(),
            context: "view count".into(),
        });
    }
    for v in views {
        if v.dim() != dims.image_dim {
            return Err(Error::DimMismatch {
                expected: dims.image_dim,
                got: v.dim(),
                context: "view embedding width".into(),
            });
        }
    }
    if ctx.vocab.len() != dims.num_classes {
        return Err(Error::DimMismatch {
            expected: dims.num_classes,
            got: ctx.vocab.len(),
            context: "vocabulary size".into(),
        });
    }

    let mut stereo = Vec::with_capacity(dims.stereo_dim());
    for v in views {
        stereo.extend_from_slice(v.values());
    }

    // Classification always runs on the real stereo feature.
    let (classifier_pre_hidden, classifier_hidden, class_logits) = match params.classifier.len() {
        1 => (None, None, params.classifier[0].forward(&stereo)?),
        2 => {
            let pre = params.classifier[0].forward(&stereo)?;
            let act = relu(&pre);
            let logits = params.classifier[1].forward(&act)?;
            (Some(pre), Some(act), logits)
        }
        n => {
            return Err(Error::InvalidConfig(format!("classifier has {n} layers, expected 1 or 2")))
        }
    };
    let predicted_class = argmax(&class_logits);
    let predicted_class_name = ctx.vocab.name_of(predicted_class)?.to_string();

    let prompt_class = opts.prompt_class_override.unwrap_or(predicted_class);
    if prompt_class >= dims.num_classes {
        return Err(Error::ClassIndexOutOfRange { index: prompt_class, classes: dims.num_classes });
    }
    let prompt = ctx.prompt_for_class(prompt_class)?;

    let text_feature = match opts.mask {
        // The text half is about to be zeroed; skip the encoder call.
        FeatureMask::StereoOnly => Arc::new(vec![0.0; dims.text_dim]),
        _ => {
            let f = ctx.text_feature(&prompt)?;
            if f.len() != dims.text_dim {
                return Err(Error::DimMismatch {
                    expected: dims.text_dim,
                    got: f.len(),
                    context: "text feature width".into(),
                });
            }
            f
        }
    };

    let mut combined = Vec::with_capacity(dims.combined_dim());
    match opts.mask {
        FeatureMask::Full => {
            combined.extend_from_slice(&stereo);
            combined.extend_from_slice(&text_feature);
        }
        FeatureMask::StereoOnly => {
            combined.extend_from_slice(&stereo);
            combined.resize(dims.combined_dim(), 0.0);
        }
        FeatureMask::TextOnly => {
            combined.resize(dims.stereo_dim(), 0.0);
            combined.extend_from_slice(&text_feature);
        }
    }

    let projection_pre = params.projection.forward(&combined)?;
    let fused = relu(&projection_pre);

    let regression_pre_hidden = params.regression[0].forward(&fused)?;
    let regression_hidden = relu(&regression_pre_hidden);
    let raw_output = params.regression[1].forward(&regression_hidden)?[0];
    if !raw_output.is_finite() {
        return Err(Error::NonFinite("regression output".into()));
    }

    Ok(ForwardTrace {
        stereo_feature: stereo,
        class_logits,
        predicted_class,
        predicted_class_name,
        prompt_class,
        prompt,
        text_feature,
        combined_feature: combined,
        fused_feature: fused,
        raw_output,
        volume_est_ml: opts.scaler.to_ml(raw_output),
        classifier_pre_hidden,
        classifier_hidden,
        projection_pre,
        regression_pre_hidden,
        regression_hidden,
    })
}

/// Mean squared error over a batch.
pub fn mse_loss(estimates: &[f64], targets: &[f64]) -> Result<f64> {
    if estimates.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: estimates.len(),
            right: targets.len(),
            context: "mse batch".into(),
        });
    }
    if estimates.is_empty() {
        return Err(Error::DataEmpty);
    }
    let n = estimates.len() as f64;
    Ok(estimates
        .iter()
        .zip(targets)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / n)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|&l| l.exp()).collect()
}

/// Mean cross-entropy over a batch of logit rows. Always nonnegative.
pub fn ce_loss(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: targets.len(),
            context: "ce batch".into(),
        });
    }
    if logits.is_empty() {
        return Err(Error::DataEmpty);
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::ClassIndexOutOfRange { index: t, classes: row.len() });
        }
        total -= log_softmax(row)[t];
    }
    Ok(total / logits.len() as f64)
}

/// Weighted sum of the two loss terms.
pub fn combined_loss(mse: f64, ce: f64, lambda: f64, mu: f64) -> f64 {
    lambda * mse + mu * ce
}

/// One training example with its views already encoded. Views sit behind an
/// `Arc` so per-epoch batch gathering never copies embeddings.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub views: Arc<Vec<EmbeddingVector>>,
    /// Regression target in model units (standardized when a scaler is in
    /// effect).
    pub target_model: f64,
    pub class_index: usize,
    pub prompt_class_override: Option<usize>,
}

/// Loss values for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub ce: f64,
    pub total: f64,
}

/// Batch gradient of `combined_loss` with respect to every head parameter.
///
/// The regression term backpropagates through regression, relu, and
/// projection, stopping at the combined feature (its halves are constants).
/// The classification term backpropagates through the classifier only; the
/// argmax that selects the prompt is a discrete hop and contributes no
/// gradient.
pub fn gradient(
    params: &FusionModelParams,
    batch: &[TrainExample],
    ctx: &TextContext,
    opts: &ForwardOptions,
    lambda: f64,
    mu: f64,
) -> Result<(ModelGrads, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::DataEmpty);
    }
    let n = batch.len() as f64;
    let mut grads = ModelGrads::zeros_like(params);
    let mut mse_sum = 0.0;
    let mut ce_sum = 0.0;

    for ex in batch {
        if ex.class_index >= params.dims.num_classes {
            return Err(Error::ClassIndexOutOfRange {
                index: ex.class_index,
                classes: params.dims.num_classes,
            });
        }
        let call_opts = ForwardOptions {
            prompt_class_override: ex.prompt_class_override,
            ..*opts
        };
        let trace = forward(params, &ex.views, ctx, &call_opts)?;

        // Regression path.
        let err = trace.raw_output - ex.target_model;
        mse_sum += err * err;
        let d_raw = 2.0 * lambda * err / n;
        let d_hidden =
            params.regression[1].backward(&trace.regression_hidden, &[d_raw], &mut grads.regression[1]);
        let d_pre_hidden = relu_mask(&trace.regression_pre_hidden, &d_hidden);
        let d_fused = params.regression[0].backward(
            &trace.fused_feature,
            &d_pre_hidden,
            &mut grads.regression[0],
        );
        let d_projection_pre = relu_mask(&trace.projection_pre, &d_fused);
        // Combined feature is constant; discard its gradient.
        let _ = params.projection.backward(
            &trace.combined_feature,
            &d_projection_pre,
            &mut grads.projection,
        );

        // Classification path.
        let log_probs = log_softmax(&trace.class_logits);
        ce_sum -= log_probs[ex.class_index];
        let mut d_logits: Vec<f64> = log_probs.iter().map(|&l| mu * l.exp() / n).collect();
        d_logits[ex.class_index] -= mu / n;
        match params.classifier.len() {
            1 => {
                let _ = params.classifier[0].backward(
                    &trace.stereo_feature,
                    &d_logits,
                    &mut grads.classifier[0],
                );
            }
            _ => {
                let hidden = trace.classifier_hidden.as_ref().expect("two-layer trace");
                let pre = trace.classifier_pre_hidden.as_ref().expect("two-layer trace");
                let d_hidden =
                    params.classifier[1].backward(hidden, &d_logits, &mut grads.classifier[1]);
                let d_pre = relu_mask(pre, &d_hidden);
                let _ = params.classifier[0].backward(
                    &trace.stereo_feature,
                    &d_pre,
                    &mut grads.classifier[0],
                );
            }
        }
    }

    let mse = mse_sum / n;
    let ce = ce_sum / n;
    let total = combined_loss(mse, ce, lambda, mu);
    if !total.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok((grads, LossBreakdown { mse, ce, total }))
}
