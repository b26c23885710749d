//! Dataset ingestion: frame sequences, stereo pair selection, split and
//! manifest construction.

pub mod mesh;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{
    validate_sample, ClassVocabulary, ImageRef, ManifestRecord, StereoSample,
};
use mesh::{mesh_volume_ml, TriangleMesh};

/// Ordered frames of one captured object plus its volume source.
///
/// Ground truth comes from `volume_ml` when present, otherwise from the
/// scanned mesh at `mesh_path`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub item_id: String,
    pub class_label: String,
    /// Frames in capture order.
    pub frames: Vec<ImageRef>,
    pub mesh_path: Option<PathBuf>,
    pub volume_ml: Option<f64>,
}

/// At-rest form of a `FrameSequence`; one JSON object per index line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub item_id: String,
    pub class_label: String,
    pub frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_ml: Option<f64>,
}

impl SequenceRecord {
    pub fn to_sequence(&self) -> FrameSequence {
        FrameSequence {
            item_id: self.item_id.clone(),
            class_label: self.class_label.clone(),
            frames: self.frames.iter().map(ImageRef::path).collect(),
            mesh_path: self.mesh.as_ref().map(PathBuf::from),
            volume_ml: self.volume_ml,
        }
    }
}

pub fn read_sequence_index(path: &Path) -> Result<Vec<FrameSequence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(rec.to_sequence());
    }
    Ok(out)
}

/// Controls stereo pair selection.
///
/// `min_gap` is the minimum number of frames strictly between the two chosen
/// indices; the default of 1 means "non-consecutive".
#[derive(Clone, Debug, PartialEq)]
pub struct PairPolicy {
    pub min_gap: usize,
    pub seed: u64,
}

impl Default for PairPolicy {
    fn default() -> Self {
        PairPolicy { min_gap: 1, seed: 0 }
    }
}

fn item_stream_seed(seed: u64, item_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(item_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Picks one frame pair (i, j), i < j, uniformly over all pairs with
/// j - i > min_gap. Deterministic in (policy, sequence identity).
pub fn sample_stereo_pair(seq: &FrameSequence, policy: &PairPolicy) -> Result<(usize, usize)> {
    let n = seq.frames.len();
    let needed = policy.min_gap + 2;
    if n < needed {
        return Err(Error::SequenceTooShort { id: seq.item_id.clone(), frames: n, needed });
    }
    let stride = policy.min_gap + 1;
    // Number of valid pairs: sum over i of n - i - stride.
    let per_i: Vec<usize> = (0..n.saturating_sub(stride)).map(|i| n - i - stride).collect();
    let total: usize = per_i.iter().sum();
    let mut rng = ChaCha12Rng::seed_from_u64(item_stream_seed(policy.seed, &seq.item_id));
    let mut k = rng.random_range(0..total);
    for (i, &count) in per_i.iter().enumerate() {
        if k < count {
            return Ok((i, i + stride + k));
        }
        k -= count;
    }
    unreachable!("k < total by construction");
}

/// All non-consecutive frame pairs (i, j), i < j, j - i >= 2, in
/// lexicographic order, truncated to `max_pairs`.
pub fn enumerate_training_pairs(
    seq: &FrameSequence,
    max_pairs: usize,
) -> Result<Vec<(usize, usize)>> {
    if max_pairs == 0 {
        return Err(Error::InvalidArgument("max_pairs must be > 0".into()));
    }
    let n = seq.frames.len();
    if n < 3 {
        return Err(Error::SequenceTooShort { id: seq.item_id.clone(), frames: n, needed: 3 });
    }
    let mut out = Vec::new();
    'outer: for i in 0..n {
        for j in (i + 2)..n {
            out.push((i, j));
            if out.len() == max_pairs {
                break 'outer;
            }
        }
    }
    Ok(out)
}

/// Split and augmentation policy for manifest construction.
#[derive(Clone, Debug)]
pub struct ManifestPolicy {
    /// Fraction of items assigned to train when no explicit lists are given.
    pub train_fraction: f64,
    pub seed: u64,
    /// Pair selection gap for the single evaluation pair per test item.
    pub min_gap: usize,
    /// Cap on augmented pairs per training item.
    pub max_train_pairs_per_item: usize,
    /// Mesh unit conversion used when ground truth comes from geometry.
    pub mesh_unit_scale_to_cm: f64,
    /// Explicit item-id split; overrides `train_fraction` when set.
    pub explicit_split: Option<ExplicitSplit>,
}

#[derive(Clone, Debug)]
pub struct ExplicitSplit {
    pub train_items: HashSet<String>,
    pub test_items: HashSet<String>,
}

impl Default for ManifestPolicy {
    fn default() -> Self {
        ManifestPolicy {
            train_fraction: 0.8,
            seed: 0,
            min_gap: 1,
            max_train_pairs_per_item: 8,
            mesh_unit_scale_to_cm: 1.0,
            explicit_split: None,
        }
    }
}

/// Train/test samples plus the vocabulary covering both.
#[derive(Clone, Debug)]
pub struct SplitSamples {
    pub train: Vec<StereoSample>,
    pub test: Vec<StereoSample>,
    pub vocab: ClassVocabulary,
}

fn resolve_volume(seq: &FrameSequence, scale: f64) -> Result<f64> {
    if let Some(v) = seq.volume_ml {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::NonPositiveVolume(v));
        }
        return Ok(v);
    }
    match &seq.mesh_path {
        Some(p) => mesh_volume_ml(&TriangleMesh::from_obj_file(p)?, scale),
        None => Err(Error::InvalidArgument(format!(
            "sequence `{}` has neither volume_ml nor a mesh",
            seq.item_id
        ))),
    }
}

fn split_item_ids(
    seqs: &[FrameSequence],
    policy: &ManifestPolicy,
) -> Result<(HashSet<String>, HashSet<String>)> {
    if let Some(explicit) = &policy.explicit_split {
        let overlap: Vec<_> =
            explicit.train_items.intersection(&explicit.test_items).collect();
        if !overlap.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "items appear in both splits: {overlap:?}"
            )));
        }
        let known: HashSet<&str> = seqs.iter().map(|s| s.item_id.as_str()).collect();
        for id in explicit.train_items.iter().chain(&explicit.test_items) {
            if !known.contains(id.as_str()) {
                return Err(Error::InvalidConfig(format!("split lists unknown item `{id}`")));
            }
        }
        return Ok((explicit.train_items.clone(), explicit.test_items.clone()));
    }
    if !(0.0..=1.0).contains(&policy.train_fraction) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in [0, 1], got {}",
            policy.train_fraction
        )));
    }
    let mut ids: Vec<&str> = seqs.iter().map(|s| s.item_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha12Rng::seed_from_u64(policy.seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let mut n_train = (n as f64 * policy.train_fraction).round() as usize;
    // Keep both splits non-empty whenever there are at least two items.
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let train: HashSet<String> = ids[..n_train].iter().map(|s| s.to_string()).collect();
    let test: HashSet<String> = ids[n_train..].iter().map(|s| s.to_string()).collect();
    Ok((train, test))
}

/// Builds train/test stereo samples from frame sequences.
///
/// Train items contribute up to `max_train_pairs_per_item` augmented pairs;
/// test items contribute exactly one sampled pair. Splits are by item, never
/// by frame, so no object appears on both sides.
pub fn build_split_samples(
    seqs: &[FrameSequence],
    policy: &ManifestPolicy,
) -> Result<SplitSamples> {
    if seqs.is_empty() {
        return Err(Error::DataEmpty);
    }
    let mut seen = HashSet::new();
    for s in seqs {
        if !seen.insert(s.item_id.as_str()) {
            return Err(Error::DuplicateItem(s.item_id.clone()));
        }
    }
    let class_names: BTreeSet<&str> = seqs.iter().map(|s| s.class_label.as_str()).collect();
    let vocab = ClassVocabulary::from_names(class_names.iter().map(|s| s.to_string()))?;
    let (train_ids, test_ids) = split_item_ids(seqs, policy)?;

    let volumes: HashMap<&str, f64> = seqs
        .iter()
        .map(|s| Ok((s.item_id.as_str(), resolve_volume(s, policy.mesh_unit_scale_to_cm)?)))
        .collect::<Result<_>>()?;

    let make_sample = |seq: &FrameSequence, (i, j): (usize, usize)| StereoSample {
        item_id: seq.item_id.clone(),
        class_label: seq.class_label.clone(),
        left_image: seq.frames[i].clone(),
        right_image: seq.frames[j].clone(),
        volume_gt_ml: volumes[seq.item_id.as_str()],
        frame_indices: (i as u32, j as u32),
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for seq in seqs {
        if train_ids.contains(&seq.item_id) {
            for pair in enumerate_training_pairs(seq, policy.max_train_pairs_per_item)? {
                train.push(make_sample(seq, pair));
            }
        } else if test_ids.contains(&seq.item_id) {
            let pair = sample_stereo_pair(
                seq,
                &PairPolicy { min_gap: policy.min_gap, seed: policy.seed },
            )?;
            test.push(make_sample(seq, pair));
        }
        // Items in neither explicit list are dropped.
    }
    for s in train.iter().chain(&test) {
        validate_sample(s, &vocab)?;
    }
    Ok(SplitSamples { train, test, vocab })
}

/// Manifest rows for both splits plus the vocabulary. Requires on-disk
/// frames; in-memory sequences go through [`build_split_samples`].
pub fn build_manifest(
    seqs: &[FrameSequence],
    policy: &ManifestPolicy,
) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>, ClassVocabulary)> {
    let split = build_split_samples(seqs, policy)?;
    let train = split.train.iter().map(ManifestRecord::from_sample).collect::<Result<_>>()?;
    let test = split.test.iter().map(ManifestRecord::from_sample).collect::<Result<_>>()?;
    Ok((train, test, split.vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::types::ImageTensor;

    fn seq_with_frames(id: &str, class: &str, n: usize, volume: f64) -> FrameSequence {
        FrameSequence {
            item_id: id.into(),
            class_label: class.into(),
            frames: (0..n).map(|i| ImageRef::path(format!("frames/{id}/{i:03}.png"))).collect(),
            mesh_path: None,
            volume_ml: Some(volume),
        }
    }

    #[test]
    fn enumeration_is_lexicographic_and_non_consecutive() {
        let seq = seq_with_frames("a", "apple", 4, 100.0);
        let pairs = enumerate_training_pairs(&seq, 100).unwrap();
        assert_eq!(pairs, vec![(0, 2), (0, 3), (1, 3)]);
    }

    #[test]
    fn enumeration_respects_cap() {
        let seq = seq_with_frames("a", "apple", 10, 100.0);
        let pairs = enumerate_training_pairs(&seq, 5).unwrap();
        assert_eq!(pairs.len(), 5);
        assert_eq!(pairs, vec![(0, 2), (0, 3), (0, 4), (0, 5), (0, 6)]);
    }

    #[test]
    fn enumeration_needs_three_frames() {
        let seq = seq_with_frames("a", "apple", 2, 100.0);
        assert!(matches!(
            enumerate_training_pairs(&seq, 10),
            Err(Error::SequenceTooShort { .. })
        ));
        let seq = seq_with_frames("a", "apple", 3, 100.0);
        assert_eq!(enumerate_training_pairs(&seq, 10).unwrap(), vec![(0, 2)]);
    }

    #[test]
    fn enumeration_rejects_zero_cap() {
        let seq = seq_with_frames("a", "apple", 4, 100.0);
        assert!(enumerate_training_pairs(&seq, 0).is_err());
    }

    #[test]
    fn sampled_pair_is_deterministic_and_valid() {
        let seq = seq_with_frames("item-1", "apple", 9, 100.0);
        let policy = PairPolicy { min_gap: 1, seed: 42 };
        let first = sample_stereo_pair(&seq, &policy).unwrap();
        let second = sample_stereo_pair(&seq, &policy).unwrap();
        assert_eq!(first, second);
        assert!(first.1 > first.0 + 1);
        assert!(first.1 < 9);
    }

    #[test]
    fn sampled_pair_differs_across_items() {
        let policy = PairPolicy { min_gap: 1, seed: 0 };
        let hits: HashSet<(usize, usize)> = (0..20)
            .map(|k| {
                let seq = seq_with_frames(&format!("item-{k}"), "apple", 12, 100.0);
                sample_stereo_pair(&seq, &policy).unwrap()
            })
            .collect();
        assert!(hits.len() > 1, "every item picked the same pair");
    }

    #[test]
    fn sampling_covers_all_valid_pairs() {
        let policy_base = PairPolicy { min_gap: 1, seed: 0 };
        let seq = seq_with_frames("x", "apple", 5, 100.0);
        let expected: HashSet<(usize, usize)> =
            [(0, 2), (0, 3), (0, 4), (1, 3), (1, 4), (2, 4)].into();
        let mut seen = HashSet::new();
        for seed in 0..500u64 {
            let p = PairPolicy { seed, ..policy_base.clone() };
            let pair = sample_stereo_pair(&seq, &p).unwrap();
            assert!(expected.contains(&pair), "invalid pair {pair:?}");
            seen.insert(pair);
        }
        assert_eq!(seen, expected);
    }

    #[test]
    fn sampling_respects_min_gap_and_length() {
        let seq = seq_with_frames("x", "apple", 5, 100.0);
        let policy = PairPolicy { min_gap: 3, seed: 7 };
        let (i, j) = sample_stereo_pair(&seq, &policy).unwrap();
        assert_eq!((i, j), (0, 4), "only one pair has 3 frames between");
        let policy = PairPolicy { min_gap: 4, seed: 7 };
        assert!(matches!(
            sample_stereo_pair(&seq, &policy),
            Err(Error::SequenceTooShort { needed: 6, .. })
        ));
    }

    fn ten_items() -> Vec<FrameSequence> {
        (0..10)
            .map(|k| {
                let class = if k % 2 == 0 { "apple" } else { "bagel" };
                seq_with_frames(&format!("item-{k:02}"), class, 6, 50.0 + k as f64)
            })
            .collect()
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let seqs = ten_items();
        let policy = ManifestPolicy { seed: 3, ..Default::default() };
        let a = build_split_samples(&seqs, &policy).unwrap();
        let b = build_split_samples(&seqs, &policy).unwrap();
        let train_ids: HashSet<&str> = a.train.iter().map(|s| s.item_id.as_str()).collect();
        let test_ids: HashSet<&str> = a.test.iter().map(|s| s.item_id.as_str()).collect();
        assert_eq!(train_ids.len(), 8);
        assert_eq!(test_ids.len(), 2);
        assert!(train_ids.is_disjoint(&test_ids));
        assert_eq!(a.train.len(), b.train.len());
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn test_items_get_exactly_one_pair() {
        let seqs = ten_items();
        let policy = ManifestPolicy::default();
        let split = build_split_samples(&seqs, &policy).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &split.test {
            *counts.entry(s.item_id.as_str()).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| c == 1));
    }

    #[test]
    fn train_pairs_are_never_consecutive() {
        let seqs = ten_items();
        let split = build_split_samples(&seqs, &ManifestPolicy::default()).unwrap();
        assert!(!split.train.is_empty());
        for s in &split.train {
            assert!(s.frame_indices.1 - s.frame_indices.0 >= 2, "{:?}", s.frame_indices);
        }
    }

    #[test]
    fn explicit_split_is_honored_and_validated() {
        let seqs = ten_items();
        let explicit = ExplicitSplit {
            train_items: ["item-00", "item-01"].iter().map(|s| s.to_string()).collect(),
            test_items: ["item-02"].iter().map(|s| s.to_string()).collect(),
        };
        let policy = ManifestPolicy { explicit_split: Some(explicit), ..Default::default() };
        let split = build_split_samples(&seqs, &policy).unwrap();
        let train_ids: HashSet<&str> = split.train.iter().map(|s| s.item_id.as_str()).collect();
        assert_eq!(train_ids, ["item-00", "item-01"].into());
        assert_eq!(split.test.len(), 1);

        let overlapping = ExplicitSplit {
            train_items: ["item-00"].iter().map(|s| s.to_string()).collect(),
            test_items: ["item-00"].iter().map(|s| s.to_string()).collect(),
        };
        let policy = ManifestPolicy { explicit_split: Some(overlapping), ..Default::default() };
        assert!(matches!(build_split_samples(&seqs, &policy), Err(Error::InvalidConfig(_))));

        let unknown = ExplicitSplit {
            train_items: ["ghost"].iter().map(|s| s.to_string()).collect(),
            test_items: HashSet::new(),
        };
        let policy = ManifestPolicy { explicit_split: Some(unknown), ..Default::default() };
        assert!(matches!(build_split_samples(&seqs, &policy), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn duplicate_item_ids_are_rejected() {
        let mut seqs = ten_items();
        seqs.push(seq_with_frames("item-00", "apple", 6, 10.0));
        assert!(matches!(
            build_split_samples(&seqs, &ManifestPolicy::default()),
            Err(Error::DuplicateItem(_))
        ));
    }

    #[test]
    fn explicit_volume_wins_over_mesh() {
        let dir = tempfile::tempdir().unwrap();
        let mesh_path = dir.path().join("cube.obj");
        std::fs::write(&mesh_path, crate::ingest::mesh::tests::UNIT_CUBE_OBJ).unwrap();
        let mut seq = seq_with_frames("a", "apple", 6, 123.0);
        seq.mesh_path = Some(mesh_path);
        let v = resolve_volume(&seq, 1.0).unwrap();
        assert_eq!(v, 123.0);
        seq.volume_ml = None;
        let v = resolve_volume(&seq, 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        seq.mesh_path = None;
        assert!(resolve_volume(&seq, 1.0).is_err());
    }

    #[test]
    fn manifest_requires_on_disk_frames() {
        let tensor = Arc::new(ImageTensor::new(2, 2, vec![0.0; 12]).unwrap());
        let mut seqs = ten_items();
        for f in &mut seqs[0].frames {
            *f = ImageRef::Tensor(tensor.clone());
        }
        // In-memory frames are fine for samples...
        build_split_samples(&seqs, &ManifestPolicy::default()).unwrap();
        // ...but not for manifests, which hold paths.
        assert!(build_manifest(&seqs, &ManifestPolicy::default()).is_err());
    }

    #[test]
    fn sequence_index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sequences.jsonl");
        let recs = [
            SequenceRecord {
                item_id: "a".into(),
                class_label: "apple".into(),
                frames: vec!["f/0.png".into(), "f/1.png".into(), "f/2.png".into()],
                mesh: None,
                volume_ml: Some(42.0),
            },
            SequenceRecord {
                item_id: "b".into(),
                class_label: "bagel".into(),
                frames: vec!["g/0.png".into(), "g/1.png".into(), "g/2.png".into()],
                mesh: Some("g/mesh.obj".into()),
                volume_ml: None,
            },
        ];
        let text: String =
            recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        std::fs::write(&path, text).unwrap();
        let seqs = read_sequence_index(&path).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].volume_ml, Some(42.0));
        assert_eq!(seqs[1].mesh_path, Some(PathBuf::from("g/mesh.obj")));
    }
}
