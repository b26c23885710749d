//! Chat-completion baseline client: fixed prompts, a strict response parser,
//! and a pluggable transport with record/replay support for offline runs.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{PredictionRow, PredictionSet};
use crate::training::TrainRow;
use crate::types::ImageRef;

const SINGLE_NO_CONTEXT_PROMPT: &str = "Answer with ONLY a single floating-point number (milliliters). No units, no extra text.\nEstimate the object's volume in milliliters from the image.\nReturn ONLY a single floating-point number (milliliters), no units, no words, no punctuation, no JSON, no code fences.";

const SINGLE_WITH_CONTEXT_PROMPT: &str = "Answer with ONLY a single floating-point number (milliliters). No units, no extra text.\nGiven this is an image of {context_text}, estimate its volume in milliliters.\nReturn ONLY a single floating-point number (milliliters), no units, no words, no punctuation, no JSON, no code fences.";

const STEREO_PROMPT: &str = "You are given TWO images of the SAME object, captured from different viewpoints.\nUse both images jointly (stereo cues, parallax, shape consistency) to estimate the object's volume in milliliters.\nAssume similar scale and camera distance; modest viewpoint change is present.\nRESPONSE FORMAT (STRICT JSON, one object, no code fences, no extra text):\n{\n  \"volume_ml\": <float>,\n  \"explanation\": \"<2-4 concise sentences on the visual cues you used>\"\n}\nRules:\n- Return ONLY the JSON object above (no markdown, no reasoning sections, no additional keys).\n- \"volume_ml\" MUST be a single floating-point number (no units, no commas).\nReturn ONLY the final JSON object; do not include chain-of-thought or extra text.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VlmMode {
    SingleNoContext,
    SingleWithContext,
    Stereo,
}

impl VlmMode {
    pub fn name(self) -> &'static str {
        match self {
            VlmMode::SingleNoContext => "single-no-context",
            VlmMode::SingleWithContext => "single-with-context",
            VlmMode::Stereo => "stereo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single-no-context" => Ok(VlmMode::SingleNoContext),
            "single-with-context" => Ok(VlmMode::SingleWithContext),
            "stereo" => Ok(VlmMode::Stereo),
            other => Err(Error::InvalidArgument(format!(
                "unknown vlm mode `{other}` (expected single-no-context, single-with-context, or stereo)"
            ))),
        }
    }

    pub fn image_count(self) -> usize {
        match self {
            VlmMode::Stereo => 2,
            _ => 1,
        }
    }

    pub fn needs_context(self) -> bool {
        self == VlmMode::SingleWithContext
    }
}

/// Renders the fixed prompt for a mode. The with-context prompt substitutes
/// `context_text`; the other prompts take none.
pub fn render_vlm_prompt(mode: VlmMode, context_text: Option<&str>) -> Result<String> {
    match (mode.needs_context(), context_text) {
        (true, None) => return Err(Error::MissingContext),
        (true, Some(t)) if t.trim().is_empty() => return Err(Error::MissingContext),
        (false, Some(_)) => return Err(Error::UnexpectedContext),
        _ => {}
    }
    Ok(match mode {
        VlmMode::SingleNoContext => SINGLE_NO_CONTEXT_PROMPT.to_string(),
        VlmMode::SingleWithContext => {
            SINGLE_WITH_CONTEXT_PROMPT.replace("{context_text}", context_text.expect("checked"))
        }
        VlmMode::Stereo => STEREO_PROMPT.to_string(),
    })
}

/// One fully rendered request: mode, images, and the exact prompt string.
#[derive(Clone, Debug)]
pub struct VlmQuery {
    pub mode: VlmMode,
    pub images: Vec<ImageRef>,
    pub context_text: Option<String>,
    pub prompt: String,
}

impl VlmQuery {
    pub fn new(mode: VlmMode, images: Vec<ImageRef>, context_text: Option<String>) -> Result<Self> {
        if images.len() != mode.image_count() {
            return Err(Error::InvalidArgument(format!(
                "mode `{}` takes {} image(s), got {}",
                mode.name(),
                mode.image_count(),
                images.len()
            )));
        }
        let prompt = render_vlm_prompt(mode, context_text.as_deref())?;
        Ok(VlmQuery { mode, images, context_text, prompt })
    }

    /// Stable key over mode, prompt, and image contents; used to index
    /// fixture tapes.
    pub fn cache_key(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.mode.name().as_bytes());
        hasher.update([0]);
        hasher.update(self.prompt.as_bytes());
        for image in &self.images {
            hasher.update([0]);
            hasher.update(image.cache_key().as_bytes());
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StereoResponse {
    volume_ml: f64,
    #[serde(default)]
    #[allow(dead_code)]
    explanation: Option<String>,
}

/// Extracts the volume from a raw model response.
///
/// Single-image modes accept exactly one float (surrounding whitespace
/// tolerated); stereo mode accepts exactly one JSON object with `volume_ml`
/// and optional `explanation`, nothing else.
pub fn parse_vlm_volume(response: &str, mode: VlmMode) -> Result<f64> {
    let trimmed = response.trim();
    let volume = match mode {
        VlmMode::SingleNoContext | VlmMode::SingleWithContext => trimmed
            .parse::<f64>()
            .map_err(|_| Error::UnparseableResponse(truncate_for_error(response)))?,
        VlmMode::Stereo => {
            let parsed: StereoResponse = serde_json::from_str(trimmed)
                .map_err(|_| Error::UnparseableResponse(truncate_for_error(response)))?;
            parsed.volume_ml
        }
    };
    if !volume.is_finite() {
        return Err(Error::UnparseableResponse(truncate_for_error(response)));
    }
    if volume <= 0.0 {
        return Err(Error::NonPositiveVolume(volume));
    }
    Ok(volume)
}

fn truncate_for_error(response: &str) -> String {
    const LIMIT: usize = 120;
    let mut out: String = response.chars().take(LIMIT).collect();
    if response.chars().count() > LIMIT {
        out.push_str("...");
    }
    out
}

/// Anything that can answer a rendered query with raw response text.
pub trait ChatTransport {
    fn complete(&self, query: &VlmQuery) -> Result<String>;
    /// Short label recorded in run manifests.
    fn describe(&self) -> String;
}

#[derive(Serialize, Deserialize)]
struct TapeEntry {
    key: String,
    response: String,
}

/// Query-keyed recorded responses, one JSON object per line on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FixtureTape {
    entries: BTreeMap<String, String>,
}

impl FixtureTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TapeEntry =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            entries.insert(entry.key, entry.response);
        }
        Ok(FixtureTape { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for (key, response) in &self.entries {
            let entry = TapeEntry { key: key.clone(), response: response.clone() };
            let line = serde_json::to_string(&entry).map_err(|e| Error::serde(path, e))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn record(&mut self, key: String, response: String) {
        self.entries.insert(key, response);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Serves responses from a tape; unknown queries fail with the lookup key so
/// the missing fixture is easy to add.
pub struct ReplayTransport {
    tape: FixtureTape,
}

impl ReplayTransport {
    pub fn new(tape: FixtureTape) -> Self {
        ReplayTransport { tape }
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&self, query: &VlmQuery) -> Result<String> {
        let key = query.cache_key();
        self.tape
            .get(&key)
            .map(str::to_string)
            .ok_or(Error::FixtureMiss(key))
    }

    fn describe(&self) -> String {
        format!("replay({} fixtures)", self.tape.len())
    }
}

/// Passes queries through to an inner transport and records every response.
pub struct RecordingTransport<'a> {
    inner: &'a dyn ChatTransport,
    tape: RefCell<FixtureTape>,
}

impl<'a> RecordingTransport<'a> {
    pub fn new(inner: &'a dyn ChatTransport) -> Self {
        RecordingTransport { inner, tape: RefCell::new(FixtureTape::new()) }
    }

    pub fn into_tape(self) -> FixtureTape {
        self.tape.into_inner()
    }
}

impl ChatTransport for RecordingTransport<'_> {
    fn complete(&self, query: &VlmQuery) -> Result<String> {
        let response = self.inner.complete(query)?;
        self.tape.borrow_mut().record(query.cache_key(), response.clone());
        Ok(response)
    }

    fn describe(&self) -> String {
        format!("recording({})", self.inner.describe())
    }
}

/// Bounded exponential backoff: attempt k sleeps base * 2^(k-1), capped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

/// Runs one query with retries. Returns the attempts used alongside the
/// response; exhaustion maps to `Error::Transport` carrying the last failure.
pub fn complete_with_retry(
    transport: &dyn ChatTransport,
    query: &VlmQuery,
    policy: &RetryPolicy,
) -> (u32, Result<String>) {
    let attempts_allowed = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts_allowed {
        match transport.complete(query) {
            Ok(response) => return (attempt, Ok(response)),
            Err(e) => last = e.to_string(),
        }
        if attempt < attempts_allowed {
            let delay = policy
                .base_delay_ms
                .saturating_mul(1u64 << (attempt - 1).min(32))
                .min(policy.max_delay_ms);
            if delay > 0 {
                std::thread::sleep(std::time::Duration::from_millis(delay));
            }
        }
    }
    (attempts_allowed, Err(Error::Transport { attempts: attempts_allowed, message: last }))
}

/// Outcome bookkeeping for one baseline run. Parse failures are excluded
/// from the prediction set and listed here; transport exhaustion aborts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlmRunManifest {
    pub mode: VlmMode,
    pub transport: String,
    pub n_rows: usize,
    pub parsed: usize,
    pub missing: usize,
    pub total_attempts: u64,
    pub retry: RetryPolicy,
    pub missing_item_ids: Vec<String>,
}

impl VlmRunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::serde(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Queries the model once per row and collects parseable answers into a
/// prediction set. Single-image modes use the first view; the with-context
/// mode passes the ground-truth class label as context.
pub fn run_vlm_baseline(
    rows: &[TrainRow],
    mode: VlmMode,
    transport: &dyn ChatTransport,
    policy: &RetryPolicy,
) -> Result<(PredictionSet, VlmRunManifest)> {
    if rows.is_empty() {
        return Err(Error::DataEmpty);
    }
    let mut out = Vec::new();
    let mut missing_item_ids = Vec::new();
    let mut total_attempts = 0u64;
    for row in rows {
        let needed = mode.image_count();
        if row.views.len() < needed {
            return Err(Error::DimMismatch {
                expected: needed,
                got: row.views.len(),
                context: format!("views of `{}`", row.item_id),
            });
        }
        let context = mode.needs_context().then(|| row.class_label.clone());
        let query = VlmQuery::new(mode, row.views[..needed].to_vec(), context)?;
        let (attempts, response) = complete_with_retry(transport, &query, policy);
        total_attempts += u64::from(attempts);
        let response = response?;
        match parse_vlm_volume(&response, mode) {
            Ok(volume_est_ml) => out.push(PredictionRow {
                item_id: row.item_id.clone(),
                class_label: row.class_label.clone(),
                volume_est_ml,
                volume_gt_ml: row.volume_gt_ml,
                predicted_class: None,
                prompt: None,
                clipped: false,
            }),
            Err(_) => missing_item_ids.push(row.item_id.clone()),
        }
    }
    let manifest = VlmRunManifest {
        mode,
        transport: transport.describe(),
        n_rows: rows.len(),
        parsed: out.len(),
        missing: missing_item_ids.len(),
        total_attempts,
        retry: *policy,
        missing_item_ids,
    };
    Ok((PredictionSet::new(out)?, manifest))
}
