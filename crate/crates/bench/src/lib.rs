//! Deterministic fixture builders shared by the criterion benches.

use std::collections::BTreeMap;
use std::sync::Arc;

use stereovol_core::encoders::{make_test_text_encoder, HashTextEncoder};
use stereovol_core::eval::{PredictionRow, PredictionSet};
use stereovol_core::ingest::mesh::TriangleMesh;
use stereovol_core::model::{FusionModelParams, ModelDims, TrainExample};
use stereovol_core::priors::{PriorSource, PromptTemplate, VolumePriorTable};
use stereovol_core::{ClassVocabulary, EmbeddingVector, ImageRef, ImageTensor};

/// Cheap deterministic value stream; good enough to keep benches honest.
fn wave(i: usize) -> f64 {
    ((i * 37 + 11) % 101) as f64 / 101.0
}

pub fn prediction_set(n: usize) -> PredictionSet {
    let rows = (0..n)
        .map(|i| {
            let gt = 50.0 + 400.0 * wave(i);
            PredictionRow {
                item_id: format!("item-{i:06}"),
                class_label: format!("class-{}", i % 8),
                volume_est_ml: gt * (0.85 + 0.3 * wave(i + 1)),
                volume_gt_ml: gt,
                predicted_class: None,
                prompt: None,
                clipped: false,
            }
        })
        .collect();
    PredictionSet::new(rows).expect("valid rows")
}

/// Watertight UV sphere: `stacks` latitude bands, `sectors` longitude steps.
/// Pole caps are triangle fans; the body is split quads.
pub fn uv_sphere(stacks: usize, sectors: usize) -> TriangleMesh {
    assert!(stacks >= 3 && sectors >= 3);
    let mut vertices = vec![[0.0, 0.0, 1.0]];
    for s in 1..stacks {
        let phi = std::f64::consts::PI * s as f64 / stacks as f64;
        for t in 0..sectors {
            let theta = 2.0 * std::f64::consts::PI * t as f64 / sectors as f64;
            vertices.push([
                phi.sin() * theta.cos(),
                phi.sin() * theta.sin(),
                phi.cos(),
            ]);
        }
    }
    vertices.push([0.0, 0.0, -1.0]);
    let south = vertices.len() - 1;
    let ring = |s: usize, t: usize| 1 + (s - 1) * sectors + (t % sectors);

    let mut faces = Vec::new();
    for t in 0..sectors {
        faces.push([0, ring(1, t), ring(1, t + 1)]);
    }
    for s in 1..stacks - 1 {
        for t in 0..sectors {
            let (a, b) = (ring(s, t), ring(s, t + 1));
            let (c, d) = (ring(s + 1, t), ring(s + 1, t + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for t in 0..sectors {
        faces.push([south, ring(stacks - 1, t + 1), ring(stacks - 1, t)]);
    }
    TriangleMesh::new(vertices, faces).expect("sphere is a valid mesh")
}

pub fn image_tensor(width: u32, height: u32) -> ImageRef {
    let data: Vec<f32> =
        (0..width as usize * height as usize * 3).map(|i| wave(i) as f32).collect();
    ImageRef::Tensor(Arc::new(ImageTensor::new(width, height, data).expect("sized data")))
}

/// A mid-sized fusion head plus everything its forward pass reads.
pub struct ModelFixture {
    pub params: FusionModelParams,
    pub views: Vec<EmbeddingVector>,
    pub batch: Vec<TrainExample>,
    pub vocab: ClassVocabulary,
    pub priors: VolumePriorTable,
    pub template: PromptTemplate,
    pub encoder: HashTextEncoder,
}

pub fn model_fixture(batch_size: usize) -> ModelFixture {
    let dims = ModelDims {
        image_dim: 256,
        image_count: 2,
        text_dim: 256,
        num_classes: 16,
        projection_dim: 256,
        classifier_hidden: None,
        regression_hidden: 128,
    };
    let params = FusionModelParams::init(&dims, 5).expect("valid dims");
    let names: Vec<String> = (0..dims.num_classes).map(|c| format!("class-{c:02}")).collect();
    let vocab = ClassVocabulary::from_names(names.iter().cloned()).expect("distinct names");
    let entries: BTreeMap<String, f64> =
        names.iter().enumerate().map(|(c, n)| (n.clone(), 60.0 + 20.0 * c as f64)).collect();
    let priors =
        VolumePriorTable::from_entries(entries, PriorSource::TrainSplit).expect("positive");
    let template = PromptTemplate::by_id(0).expect("template 0 exists");
    let encoder = make_test_text_encoder(dims.text_dim, 5).expect("valid dim");

    let embedding = |offset: usize| {
        EmbeddingVector::new((0..dims.image_dim).map(|i| wave(i + offset) - 0.5).collect())
            .expect("finite")
    };
    let views = vec![embedding(0), embedding(7)];
    let batch = (0..batch_size)
        .map(|b| TrainExample {
            views: Arc::new(vec![embedding(b * 13), embedding(b * 13 + 7)]),
            target_model: wave(b) * 2.0 - 1.0,
            class_index: b % dims.num_classes,
            prompt_class_override: Some(b % dims.num_classes),
        })
        .collect();
    ModelFixture { params, views, batch, vocab, priors, template, encoder }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stereovol_core::ingest::mesh::mesh_volume_ml;

    #[test]
    fn sphere_fixture_is_watertight_and_near_unit_ball() {
        let mesh = uv_sphere(32, 64);
        let v = mesh_volume_ml(&mesh, 1.0).unwrap();
        let ball = 4.0 / 3.0 * std::f64::consts::PI;
        assert!((v - ball).abs() / ball < 0.01, "got {v}, want ~{ball}");
    }

    #[test]
    fn model_fixture_forward_runs() {
        let fx = model_fixture(4);
        let ctx = stereovol_core::model::TextContext::new(
            &fx.vocab,
            &fx.priors,
            &fx.template,
            1,
            &fx.encoder,
        );
        let opts = stereovol_core::model::ForwardOptions::default();
        let trace = stereovol_core::model::forward(&fx.params, &fx.views, &ctx, &opts).unwrap();
        assert_eq!(trace.class_logits.len(), 16);
    }
}
