//! Synthetic stereo dataset with a known volume law.
//!
//! Each class is a color direction; each item draws a size scalar that sets
//! image brightness, and ground truth is `base_volume * size`. Brightness is
//! affine in size and the test image encoder is linear in pixels, so the
//! latent size is linearly recoverable from the embeddings. Used by the
//! end-to-end learning checks and by CLI integration tests.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ingest::{FrameSequence, SequenceRecord};
use crate::types::{ImageRef, ImageTensor};

/// One synthetic class: its label, reference volume, and color direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClass {
    pub label: String,
    /// Volume of a size-1.0 item, in mL.
    pub base_volume_ml: f64,
    /// RGB direction in [0, 1] scaled by per-item brightness.
    pub color: [f64; 3],
}

impl SyntheticClass {
    pub fn new(label: impl Into<String>, base_volume_ml: f64, color: [f64; 3]) -> Self {
        SyntheticClass { label: label.into(), base_volume_ml, color }
    }
}

/// Generation parameters. `Default` is the configuration the acceptance
/// checks train on: five classes, thirty items each, four frames per item.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<SyntheticClass>,
    pub items_per_class: usize,
    /// Frames per capture sequence; at least 3 so non-consecutive stereo
    /// pairs exist.
    pub frames_per_item: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Per-item size scalar range; volume = base_volume * size.
    pub size_range: (f64, f64),
    /// Brightness levels the size range maps onto, within (0, 1).
    pub brightness_range: (f64, f64),
    /// Per-frame relative brightness jitter (stereo views disagree by up to
    /// this fraction).
    pub frame_jitter: f64,
    /// Per-pixel uniform noise amplitude.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: vec![
                SyntheticClass::new("apple", 60.0, [0.95, 0.20, 0.20]),
                SyntheticClass::new("bagel", 120.0, [0.20, 0.85, 0.20]),
                SyntheticClass::new("croissant", 200.0, [0.25, 0.35, 0.95]),
                SyntheticClass::new("dumpling", 300.0, [0.90, 0.80, 0.15]),
                SyntheticClass::new("eclair", 420.0, [0.15, 0.85, 0.90]),
            ],
            items_per_class: 30,
            frames_per_item: 4,
            image_width: 32,
            image_height: 32,
            size_range: (0.6, 1.4),
            brightness_range: (0.25, 0.75),
            frame_jitter: 0.02,
            texture_amplitude: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        fn req(cond: bool, msg: &str) -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::InvalidConfig(msg.into()))
            }
        }
        req(!self.classes.is_empty(), "synthetic spec needs at least one class")?;
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            req(!c.label.trim().is_empty(), "class labels must be non-blank")?;
            req(seen.insert(c.label.as_str()), "class labels must be unique")?;
            req(
                c.base_volume_ml.is_finite() && c.base_volume_ml > 0.0,
                "base volumes must be positive",
            )?;
            req(
                c.color.iter().all(|v| (0.0..=1.0).contains(v)),
                "color components must lie in [0, 1]",
            )?;
        }
        req(self.items_per_class > 0, "items_per_class must be > 0")?;
        req(self.frames_per_item >= 3, "frames_per_item must be >= 3")?;
        req(self.image_width > 0 && self.image_height > 0, "image area must be > 0")?;
        let (s0, s1) = self.size_range;
        req(s0.is_finite() && s1.is_finite() && 0.0 < s0 && s0 < s1, "bad size_range")?;
        let (b0, b1) = self.brightness_range;
        req(
            b0.is_finite() && b1.is_finite() && 0.0 < b0 && b0 < b1 && b1 < 1.0,
            "brightness_range must lie strictly inside (0, 1)",
        )?;
        req(
            (0.0..0.5).contains(&self.frame_jitter),
            "frame_jitter must lie in [0, 0.5)",
        )?;
        req(
            (0.0..=0.2).contains(&self.texture_amplitude),
            "texture_amplitude must lie in [0, 0.2]",
        )?;
        Ok(())
    }

    fn brightness_for_size(&self, size: f64) -> f64 {
        let (s0, s1) = self.size_range;
        let (b0, b1) = self.brightness_range;
        b0 + (size - s0) / (s1 - s0) * (b1 - b0)
    }
}

/// Independent rng stream derived from the dataset seed and a path of
/// identifying parts.
fn stream(seed: u64, parts: &[&str]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for p in parts {
        hasher.update([0u8]);
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    ChaCha12Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

fn frame_tensor(
    spec: &SyntheticSpec,
    class: &SyntheticClass,
    item_idx: usize,
    frame_idx: usize,
    size: f64,
) -> ImageTensor {
    let mut rng = stream(
        spec.seed,
        &[&class.label, &item_idx.to_string(), &frame_idx.to_string()],
    );
    let jitter = if spec.frame_jitter > 0.0 {
        rng.random_range(-spec.frame_jitter..spec.frame_jitter)
    } else {
        0.0
    };
    let scale = spec.brightness_for_size(size) * (1.0 + jitter);
    let (w, h) = (spec.image_width as usize, spec.image_height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    let amp = spec.texture_amplitude;
    for _ in 0..w * h {
        for ch in 0..3 {
            let noise = if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 };
            let v = (class.color[ch] * scale + noise).clamp(0.0, 1.0);
            data.push(v as f32);
        }
    }
    ImageTensor::new(spec.image_width, spec.image_height, data)
        .expect("dimensions checked by SyntheticSpec::validate")
}

/// Generates every item as an in-memory frame sequence with ground-truth
/// volume. Identical specs yield bitwise-identical tensors.
pub fn generate_sequences(spec: &SyntheticSpec) -> Result<Vec<FrameSequence>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.classes.len() * spec.items_per_class);
    for class in &spec.classes {
        for item_idx in 0..spec.items_per_class {
            let mut rng = stream(spec.seed, &["size", &class.label, &item_idx.to_string()]);
            let size = rng.random_range(spec.size_range.0..spec.size_range.1);
            let frames = (0..spec.frames_per_item)
                .map(|k| {
                    ImageRef::Tensor(Arc::new(frame_tensor(spec, class, item_idx, k, size)))
                })
                .collect();
            out.push(FrameSequence {
                item_id: format!("{}-{item_idx:03}", class.label),
                class_label: class.label.clone(),
                frames,
                mesh_path: None,
                volume_ml: Some(class.base_volume_ml * size),
            });
        }
    }
    Ok(out)
}

/// Renders the dataset to PNG frames plus a `sequences.jsonl` index under
/// `dir` and returns the index path. Frame paths are recorded as written, so
/// an absolute `dir` yields a relocatable index only within that directory.
pub fn write_png_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let seqs = generate_sequences(spec)?;
    let frames_root = dir.join("frames");
    let mut records = Vec::with_capacity(seqs.len());
    for seq in &seqs {
        let item_dir = frames_root.join(&seq.item_id);
        std::fs::create_dir_all(&item_dir).map_err(|e| Error::io(&item_dir, e))?;
        let mut frame_paths = Vec::with_capacity(seq.frames.len());
        for (k, frame) in seq.frames.iter().enumerate() {
            let tensor = match frame {
                ImageRef::Tensor(t) => t,
                ImageRef::Path(_) => unreachable!("generator emits tensors"),
            };
            let mut img = image::RgbImage::new(tensor.width, tensor.height);
            for (x, y, px) in img.enumerate_pixels_mut() {
                let [r, g, b] = tensor.pixel(x, y);
                *px = image::Rgb([quantize(r), quantize(g), quantize(b)]);
            }
            let path = item_dir.join(format!("{k:02}.png"));
            img.save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
            frame_paths.push(path.to_string_lossy().into_owned());
        }
        records.push(SequenceRecord {
            item_id: seq.item_id.clone(),
            class_label: seq.class_label.clone(),
            frames: frame_paths,
            mesh: None,
            volume_ml: seq.volume_ml,
        });
    }
    let index = dir.join("sequences.jsonl");
    let mut text = String::new();
    for rec in &records {
        text.push_str(&serde_json::to_string(rec).map_err(|e| Error::serde(&index, e))?);
        text.push('\n');
    }
    std::fs::write(&index, text).map_err(|e| Error::io(&index, e))?;
    Ok(index)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::digest_f32s;
    use crate::ingest::read_sequence_index;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            items_per_class: 4,
            image_width: 16,
            image_height: 16,
            ..Default::default()
        }
    }

    fn tensor_of(frame: &ImageRef) -> &ImageTensor {
        match frame {
            ImageRef::Tensor(t) => t,
            ImageRef::Path(p) => panic!("expected tensor, got path {}", p.display()),
        }
    }

    fn mean_luminance(t: &ImageTensor) -> f64 {
        t.data.iter().map(|&v| v as f64).sum::<f64>() / t.data.len() as f64
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate_sequences(&spec).unwrap();
        let b = generate_sequences(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.item_id, y.item_id);
            assert_eq!(x.volume_ml, y.volume_ml);
            for (f, g) in x.frames.iter().zip(&y.frames) {
                assert_eq!(digest_f32s(&tensor_of(f).data), digest_f32s(&tensor_of(g).data));
            }
        }
    }

    #[test]
    fn different_seeds_change_the_data() {
        let a = generate_sequences(&tiny_spec()).unwrap();
        let b = generate_sequences(&SyntheticSpec { seed: 1, ..tiny_spec() }).unwrap();
        assert_ne!(a[0].volume_ml, b[0].volume_ml);
    }

    #[test]
    fn volumes_follow_the_size_law() {
        let spec = tiny_spec();
        let seqs = generate_sequences(&spec).unwrap();
        assert_eq!(seqs.len(), spec.classes.len() * spec.items_per_class);
        for (ci, class) in spec.classes.iter().enumerate() {
            for (k, seq) in seqs
                [ci * spec.items_per_class..(ci + 1) * spec.items_per_class]
                .iter()
                .enumerate()
            {
                assert_eq!(seq.class_label, class.label);
                assert_eq!(seq.item_id, format!("{}-{k:03}", class.label));
                assert_eq!(seq.frames.len(), spec.frames_per_item);
                let v = seq.volume_ml.unwrap();
                let size = v / class.base_volume_ml;
                assert!(
                    size >= spec.size_range.0 && size < spec.size_range.1,
                    "size {size} outside {:?}",
                    spec.size_range
                );
            }
        }
    }

    #[test]
    fn brightness_tracks_volume_within_each_class() {
        // Mean luminance must be an affine readout of the size scalar up to
        // the small jitter, which is what makes the task learnable through a
        // linear encoder.
        let spec = SyntheticSpec { items_per_class: 24, ..tiny_spec() };
        let seqs = generate_sequences(&spec).unwrap();
        for ci in 0..spec.classes.len() {
            let rows: Vec<(f64, f64)> = seqs
                [ci * spec.items_per_class..(ci + 1) * spec.items_per_class]
                .iter()
                .map(|s| (mean_luminance(tensor_of(&s.frames[0])), s.volume_ml.unwrap()))
                .collect();
            let n = rows.len() as f64;
            let mx = rows.iter().map(|r| r.0).sum::<f64>() / n;
            let my = rows.iter().map(|r| r.1).sum::<f64>() / n;
            let cov: f64 = rows.iter().map(|r| (r.0 - mx) * (r.1 - my)).sum();
            let vx: f64 = rows.iter().map(|r| (r.0 - mx).powi(2)).sum();
            let vy: f64 = rows.iter().map(|r| (r.1 - my).powi(2)).sum();
            let r = cov / (vx * vy).sqrt();
            assert!(r > 0.99, "class {ci}: luminance-volume correlation {r}");
        }
    }

    #[test]
    fn frames_of_one_item_differ_but_share_the_signal() {
        let spec = tiny_spec();
        let seqs = generate_sequences(&spec).unwrap();
        let seq = &seqs[0];
        let first = tensor_of(&seq.frames[0]);
        let second = tensor_of(&seq.frames[1]);
        assert_ne!(first.data, second.data, "frames must not be carbon copies");
        let lum_gap = (mean_luminance(first) - mean_luminance(second)).abs();
        assert!(
            lum_gap < 2.0 * spec.frame_jitter,
            "frames of one item drifted too far apart: {lum_gap}"
        );
    }

    #[test]
    fn pixels_stay_in_range() {
        let seqs = generate_sequences(&tiny_spec()).unwrap();
        for seq in &seqs {
            for frame in &seq.frames {
                assert!(tensor_of(frame).data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let ok = tiny_spec();
        assert!(ok.validate().is_ok());
        let cases: Vec<SyntheticSpec> = vec![
            SyntheticSpec { classes: vec![], ..ok.clone() },
            SyntheticSpec {
                classes: vec![
                    SyntheticClass::new("dup", 10.0, [0.5, 0.5, 0.5]),
                    SyntheticClass::new("dup", 20.0, [0.1, 0.5, 0.5]),
                ],
                ..ok.clone()
            },
            SyntheticSpec {
                classes: vec![SyntheticClass::new("neg", -1.0, [0.5, 0.5, 0.5])],
                ..ok.clone()
            },
            SyntheticSpec {
                classes: vec![SyntheticClass::new("loud", 10.0, [1.5, 0.5, 0.5])],
                ..ok.clone()
            },
            SyntheticSpec { items_per_class: 0, ..ok.clone() },
            SyntheticSpec { frames_per_item: 2, ..ok.clone() },
            SyntheticSpec { image_width: 0, ..ok.clone() },
            SyntheticSpec { size_range: (1.4, 0.6), ..ok.clone() },
            SyntheticSpec { size_range: (0.0, 1.0), ..ok.clone() },
            SyntheticSpec { brightness_range: (0.5, 1.0), ..ok.clone() },
            SyntheticSpec { frame_jitter: 0.5, ..ok.clone() },
            SyntheticSpec { texture_amplitude: 0.3, ..ok.clone() },
        ];
        for (i, bad) in cases.iter().enumerate() {
            assert!(bad.validate().is_err(), "case {i} should fail");
        }
    }

    #[test]
    fn png_export_round_trips_through_the_index() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { items_per_class: 2, ..tiny_spec() };
        let index = write_png_dataset(&spec, dir.path()).unwrap();
        let on_disk = read_sequence_index(&index).unwrap();
        let in_memory = generate_sequences(&spec).unwrap();
        assert_eq!(on_disk.len(), in_memory.len());
        for (d, m) in on_disk.iter().zip(&in_memory) {
            assert_eq!(d.item_id, m.item_id);
            assert_eq!(d.class_label, m.class_label);
            assert_eq!(d.volume_ml, m.volume_ml);
            assert_eq!(d.frames.len(), m.frames.len());
        }
        // Quantization to 8-bit moves each channel by at most half a step.
        let decoded = crate::encoders::decode_image(&on_disk[0].frames[0]).unwrap();
        let original = tensor_of(&in_memory[0].frames[0]);
        let worst = decoded
            .data
            .iter()
            .zip(&original.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "quantization error {worst}");
    }
}
