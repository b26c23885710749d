//! Frozen feature encoders for images and prompt text.
//!
//! Two families of backends exist behind the `ImageEncoder` / `TextEncoder`
//! traits:
//!
//! * deterministic test backends (`HashImageEncoder`, `HashTextEncoder`):
//!   cheap seeded projections used by the test suite and the synthetic
//!   pipeline. No pretrained weights involved.
//! * precomputed backends: serve embeddings that were exported once by a
//!   real pretrained encoder and stored on disk keyed by content digest.
//!   The well-known production names ("clip-vit-l14-336", "mpnet-v2")
//!   resolve to precomputed stores under `STEREOVOL_CACHE_DIR` and report
//!   `BackendUnavailable` when the store is missing.
//!
//! All backends are frozen: encoding never updates any state, and repeated
//! calls on identical input return bitwise-identical vectors.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{EmbeddingVector, ImageRef, ImageTensor};

/// Environment variable pointing at the directory that holds precomputed
/// embedding stores for the production encoder names.
pub const CACHE_DIR_ENV: &str = "STEREOVOL_CACHE_DIR";

/// Default embedding width of the production backends.
pub const DEFAULT_DIM: usize = 768;

/// Side length of the pooling grid used by the test image encoder.
const GRID: usize = 8;

pub trait ImageEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn encode(&self, image: &ImageRef) -> Result<EmbeddingVector>;
    /// Encoders never receive gradient and never change during training.
    fn frozen(&self) -> bool {
        true
    }
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> Result<EmbeddingVector>;
    fn frozen(&self) -> bool {
        true
    }
}

/// Encodes one image and checks the backend honored its declared width.
pub fn encode_image(backend: &dyn ImageEncoder, image: &ImageRef) -> Result<EmbeddingVector> {
    let e = backend.encode(image)?;
    if e.dim() != backend.output_dim() {
        return Err(Error::DimMismatch {
            expected: backend.output_dim(),
            got: e.dim(),
            context: format!("image encoder `{}` output", backend.name()),
        });
    }
    Ok(e)
}

/// Encodes one prompt and checks the backend honored its declared width.
pub fn encode_text(backend: &dyn TextEncoder, prompt: &str) -> Result<EmbeddingVector> {
    let e = backend.encode(prompt)?;
    if e.dim() != backend.output_dim() {
        return Err(Error::DimMismatch {
            expected: backend.output_dim(),
            got: e.dim(),
            context: format!("text encoder `{}` output", backend.name()),
        });
    }
    Ok(e)
}

/// Hex sha-256 of a byte slice.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex sha-256 of an f32 slice (little-endian bit pattern).
pub fn digest_f32s(values: &[f32]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Decodes an image reference into a pixel tensor.
pub fn decode_image(image: &ImageRef) -> Result<ImageTensor> {
    match image {
        ImageRef::Tensor(t) => Ok((**t).clone()),
        ImageRef::Path(p) => {
            let img = image::open(p).map_err(|e| Error::DecodeFailure {
                path: p.clone(),
                message: e.to_string(),
            })?;
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width(), rgb.height());
            let data: Vec<f32> = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            ImageTensor::new(w, h, data)
        }
    }
}

/// Deterministic test image encoder.
///
/// Pools the image into an 8x8 grid of per-channel block means, appends a
/// constant slot, and applies a fixed seeded linear projection. Linear in the
/// pixel values, so it is Lipschitz with the bound reported by
/// [`HashImageEncoder::lipschitz_linf_bound`]. Output is a pure function of
/// the pixel content; two files with identical pixels encode identically.
pub struct HashImageEncoder {
    name: String,
    dim: usize,
    seed: u64,
    /// Row-major projection, `dim` rows by `GRID*GRID*3 + 1` columns.
    projection: Vec<f64>,
}

impl HashImageEncoder {
    const STATS: usize = GRID * GRID * 3 + 1;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("encoder dim must be > 0".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x1347_9eb2_51c0_ffee);
        let scale = 1.0 / (Self::STATS as f64).sqrt();
        let projection = (0..dim * Self::STATS)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect();
        Ok(Self { name: format!("test:{dim}:{seed}"), dim, seed, projection })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Bound B such that changing every pixel channel by at most delta moves
    /// each output coordinate by at most B * delta (block means are convex
    /// combinations of pixels, so per-stat change is at most delta).
    pub fn lipschitz_linf_bound(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.dim {
            let row = &self.projection[k * Self::STATS..(k + 1) * Self::STATS];
            // Last slot is the constant term; pixel changes never reach it.
            let sum: f64 = row[..Self::STATS - 1].iter().map(|v| v.abs()).sum();
            worst = worst.max(sum);
        }
        worst
    }

    fn grid_stats(tensor: &ImageTensor) -> Vec<f64> {
        let (w, h) = (tensor.width as usize, tensor.height as usize);
        let mut stats = vec![0.0f64; Self::STATS];
        for gy in 0..GRID {
            for gx in 0..GRID {
                let y0 = (gy * h / GRID).min(h - 1);
                let y1 = (((gy + 1) * h) / GRID).max(y0 + 1).min(h);
                let x0 = (gx * w / GRID).min(w - 1);
                let x1 = (((gx + 1) * w) / GRID).max(x0 + 1).min(w);
                let mut acc = [0.0f64; 3];
                let mut count = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let px = tensor.pixel(x as u32, y as u32);
                        acc[0] += px[0] as f64;
                        acc[1] += px[1] as f64;
                        acc[2] += px[2] as f64;
                        count += 1;
                    }
                }
                let base = (gy * GRID + gx) * 3;
                for c in 0..3 {
                    stats[base + c] = acc[c] / count as f64;
                }
            }
        }
        stats[Self::STATS - 1] = 1.0;
        stats
    }
}

impl ImageEncoder for HashImageEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &ImageRef) -> Result<EmbeddingVector> {
        let tensor = decode_image(image)?;
        if tensor.width == 0 || tensor.height == 0 {
            return Err(Error::InvalidArgument("image has zero area".into()));
        }
        let stats = Self::grid_stats(&tensor);
        let mut out = vec![0.0f64; self.dim];
        for (k, slot) in out.iter_mut().enumerate() {
            let row = &self.projection[k * Self::STATS..(k + 1) * Self::STATS];
            *slot = row.iter().zip(&stats).map(|(p, s)| p * s).sum();
        }
        EmbeddingVector::new(out)
    }
}

/// Constructs the deterministic test image encoder.
pub fn make_test_image_encoder(dim: usize, seed: u64) -> Result<HashImageEncoder> {
    HashImageEncoder::new(dim, seed)
}

/// Constructs the deterministic test text encoder.
pub fn make_test_text_encoder(dim: usize, seed: u64) -> Result<HashTextEncoder> {
    HashTextEncoder::new(dim, seed)
}

/// Deterministic test text encoder: sha-256 of (seed, prompt) seeds a
/// generator that fills the output vector. Distinct prompts get unrelated
/// vectors; identical prompts always get the same vector.
pub struct HashTextEncoder {
    name: String,
    dim: usize,
    seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("encoder dim must be > 0".into()));
        }
        Ok(Self { name: format!("test:{dim}:{seed}"), dim, seed })
    }
}

impl TextEncoder for HashTextEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Result<EmbeddingVector> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(prompt.as_bytes());
        let digest = hasher.finalize();
        let stream_seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha12Rng::seed_from_u64(stream_seed);
        let values = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingVector::new(values)
    }
}

/// Serves embeddings exported ahead of time by a real pretrained encoder.
///
/// Store layout: one `<digest>.json` file per input holding a JSON array of
/// f64, where the digest is sha-256 of the image bytes (image store) or of
/// the prompt UTF-8 (text store).
pub struct PrecomputedStore {
    name: String,
    dim: usize,
    dir: PathBuf,
}

impl PrecomputedStore {
    pub fn open(name: impl Into<String>, dir: impl Into<PathBuf>, dim: usize) -> Result<Self> {
        let dir = dir.into();
        let name = name.into();
        if dim == 0 {
            return Err(Error::InvalidArgument("encoder dim must be > 0".into()));
        }
        if !dir.is_dir() {
            return Err(Error::BackendUnavailable(format!(
                "embedding store for `{name}` not found at {}",
                dir.display()
            )));
        }
        Ok(Self { name, dim, dir })
    }

    fn lookup(&self, key: &str) -> Result<EmbeddingVector> {
        let path = self.dir.join(format!("{key}.json"));
        let text = std::fs::read_to_string(&path).map_err(|_| {
            Error::BackendUnavailable(format!(
                "`{}` has no embedding for key {key} (expected {})",
                self.name,
                path.display()
            ))
        })?;
        let values: Vec<f64> =
            serde_json::from_str(&text).map_err(|e| Error::serde(&path, e))?;
        if values.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: values.len(),
                context: format!("stored embedding {key}"),
            });
        }
        EmbeddingVector::new(values)
    }

    /// Writes one embedding into the store (used by export tooling).
    pub fn insert(&self, key: &str, values: &[f64]) -> Result<()> {
        let path = self.dir.join(format!("{key}.json"));
        let text = serde_json::to_string(values).map_err(|e| Error::serde(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn image_key(image: &ImageRef) -> Result<String> {
        match image {
            ImageRef::Path(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                Ok(digest_bytes(&bytes))
            }
            ImageRef::Tensor(t) => Ok(digest_f32s(&t.data)),
        }
    }

    pub fn text_key(prompt: &str) -> String {
        digest_bytes(prompt.as_bytes())
    }
}

impl ImageEncoder for PrecomputedStore {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &ImageRef) -> Result<EmbeddingVector> {
        self.lookup(&Self::image_key(image)?)
    }
}

impl TextEncoder for PrecomputedStore {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Result<EmbeddingVector> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        self.lookup(&Self::text_key(prompt))
    }
}

/// Production encoder names served through precomputed stores.
const IMAGE_BACKENDS: &[&str] = &["clip-vit-l14-336"];
const TEXT_BACKENDS: &[&str] = &["mpnet-v2"];

fn cache_store(name: &str) -> Result<PrecomputedStore> {
    let root = std::env::var(CACHE_DIR_ENV).map_err(|_| {
        Error::BackendUnavailable(format!(
            "backend `{name}` needs {CACHE_DIR_ENV} pointing at a directory of \
             exported embeddings"
        ))
    })?;
    PrecomputedStore::open(name, Path::new(&root).join(name), DEFAULT_DIM)
}

/// Parses a backend spec of the form `kind[:arg[:arg]]`.
fn split_spec(spec: &str) -> Vec<&str> {
    spec.split(':').collect()
}

fn parse_dim_seed(parts: &[&str], default_dim: usize) -> Result<(usize, u64)> {
    let dim = match parts.first() {
        None | Some(&"") => default_dim,
        Some(s) => s
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad encoder dim `{s}`")))?,
    };
    let seed = match parts.get(1) {
        None | Some(&"") => 0,
        Some(s) => s
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad encoder seed `{s}`")))?,
    };
    Ok((dim, seed))
}

/// Resolves an image encoder from a spec string.
///
/// Accepted forms: `test[:dim[:seed]]`, `precomputed:<dir>[:dim]`, or a
/// production backend name.
pub fn image_encoder_from_spec(spec: &str) -> Result<Box<dyn ImageEncoder>> {
    let parts = split_spec(spec);
    match parts[0] {
        "test" => {
            let (dim, seed) = parse_dim_seed(&parts[1..], DEFAULT_DIM)?;
            Ok(Box::new(HashImageEncoder::new(dim, seed)?))
        }
        "precomputed" => {
            let dir = parts
                .get(1)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::InvalidArgument("precomputed spec needs a directory".into()))?;
            let dim = match parts.get(2) {
                None => DEFAULT_DIM,
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad encoder dim `{s}`")))?,
            };
            Ok(Box::new(PrecomputedStore::open(spec, *dir, dim)?))
        }
        name if IMAGE_BACKENDS.contains(&name) => Ok(Box::new(cache_store(name)?)),
        other => Err(Error::BackendUnavailable(format!("unknown image encoder `{other}`"))),
    }
}

/// Resolves a text encoder from a spec string. Same forms as
/// [`image_encoder_from_spec`].
pub fn text_encoder_from_spec(spec: &str) -> Result<Box<dyn TextEncoder>> {
    let parts = split_spec(spec);
    match parts[0] {
        "test" => {
            let (dim, seed) = parse_dim_seed(&parts[1..], DEFAULT_DIM)?;
            Ok(Box::new(HashTextEncoder::new(dim, seed)?))
        }
        "precomputed" => {
            let dir = parts
                .get(1)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::InvalidArgument("precomputed spec needs a directory".into()))?;
            let dim = match parts.get(2) {
                None => DEFAULT_DIM,
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad encoder dim `{s}`")))?,
            };
            Ok(Box::new(PrecomputedStore::open(spec, *dir, dim)?))
        }
        name if TEXT_BACKENDS.contains(&name) => Ok(Box::new(cache_store(name)?)),
        other => Err(Error::BackendUnavailable(format!("unknown text encoder `{other}`"))),
    }
}
