//! Hierarchical dataset schema: narrative videos made of narrated clips,
//! silent videos that only carry a title, and the line-delimited manifest
//! that stores both.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::persist::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VideoKind {
    Narrative,
    Silent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub narration: Option<String>,
    pub frames: Vec<String>,
    /// Per-frame class labels for downstream evaluation manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels: Option<Vec<Vec<String>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub kind: VideoKind,
    pub title: String,
    pub clip_ids: Vec<String>,
    /// Optional `train` / `test` assignment used by linear probing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ManifestRecord {
    Video(VideoRecord),
    Clip(ClipRecord),
}

/// Immutable collection of videos and clips with all cross-record
/// invariants checked at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    videos: BTreeMap<String, VideoRecord>,
    clips: BTreeMap<String, ClipRecord>,
}

impl Dataset {
    pub fn new(
        videos: impl IntoIterator<Item = VideoRecord>,
        clips: impl IntoIterator<Item = ClipRecord>,
    ) -> Result<Self> {
        let mut video_map = BTreeMap::new();
        for v in videos {
            let id = v.video_id.clone();
            if video_map.insert(id.clone(), v).is_some() {
                return Err(Error::Integrity(format!("duplicate video_id `{id}`")));
            }
        }
        let mut clip_map = BTreeMap::new();
        for c in clips {
            let id = c.clip_id.clone();
            if clip_map.insert(id.clone(), c).is_some() {
                return Err(Error::Integrity(format!("duplicate clip_id `{id}`")));
            }
        }
        let ds = Dataset {
            videos: video_map,
            clips: clip_map,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let mut referenced = BTreeSet::new();
        for video in self.videos.values() {
            if video.title.trim().is_empty() {
                return Err(Error::Integrity(format!(
                    "video `{}` has an empty title",
                    video.video_id
                )));
            }
            if video.clip_ids.is_empty() {
                return Err(Error::Integrity(format!(
                    "video `{}` has no clips",
                    video.video_id
                )));
            }
            let mut prev_end = f64::NEG_INFINITY;
            for clip_id in &video.clip_ids {
                let clip = self.clips.get(clip_id).ok_or_else(|| {
                    Error::Integrity(format!(
                        "video `{}` references unknown clip `{clip_id}`",
                        video.video_id
                    ))
                })?;
                if !referenced.insert(clip_id.as_str()) {
                    return Err(Error::Integrity(format!(
                        "clip `{clip_id}` is referenced more than once"
                    )));
                }
                if clip.video_id != video.video_id {
                    return Err(Error::Integrity(format!(
                        "clip `{clip_id}` belongs to `{}` but is listed by `{}`",
                        clip.video_id, video.video_id
                    )));
                }
                if clip.t_start < prev_end {
                    return Err(Error::Integrity(format!(
                        "clips of `{}` are unordered or overlap at `{clip_id}`",
                        video.video_id
                    )));
                }
                prev_end = clip.t_end;
                match (video.kind, &clip.narration) {
                    (VideoKind::Narrative, Some(n)) if !n.trim().is_empty() => {}
                    (VideoKind::Narrative, _) => {
                        return Err(Error::Integrity(format!(
                            "narrative clip `{clip_id}` has no narration"
                        )))
                    }
                    (VideoKind::Silent, None) => {}
                    (VideoKind::Silent, Some(_)) => {
                        return Err(Error::Integrity(format!(
                            "silent clip `{clip_id}` carries a narration"
                        )))
                    }
                }
            }
        }
        for clip in self.clips.values() {
            if !self.videos.contains_key(&clip.video_id) {
                return Err(Error::Integrity(format!(
                    "clip `{}` references unknown video `{}`",
                    clip.clip_id, clip.video_id
                )));
            }
            if !referenced.contains(clip.clip_id.as_str()) {
                return Err(Error::Integrity(format!("orphan clip `{}`", clip.clip_id)));
            }
            check_clip_fields(clip).map_err(|field| {
                Error::Integrity(format!("clip `{}`: invalid {field}", clip.clip_id))
            })?;
        }
        Ok(())
    }

    pub fn videos(&self) -> impl Iterator<Item = &VideoRecord> {
        self.videos.values()
    }

    pub fn clips(&self) -> impl Iterator<Item = &ClipRecord> {
        self.clips.values()
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.get(id)
    }

    pub fn clip(&self, id: &str) -> Option<&ClipRecord> {
        self.clips.get(id)
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn num_clips(&self) -> usize {
        self.clips.len()
    }

    pub fn narrative_videos(&self) -> Vec<&VideoRecord> {
        self.videos_of_kind(VideoKind::Narrative)
    }

    pub fn silent_videos(&self) -> Vec<&VideoRecord> {
        self.videos_of_kind(VideoKind::Silent)
    }

    fn videos_of_kind(&self, kind: VideoKind) -> Vec<&VideoRecord> {
        self.videos.values().filter(|v| v.kind == kind).collect()
    }

    /// Clips of a video in temporal order.
    pub fn clips_of(&self, video: &VideoRecord) -> Vec<&ClipRecord> {
        video.clip_ids.iter().map(|id| &self.clips[id]).collect()
    }

    /// All narrated clips, ordered by video then time.
    pub fn narrated_clips(&self) -> Vec<&ClipRecord> {
        self.narrative_videos()
            .into_iter()
            .flat_map(|v| self.clips_of(v))
            .collect()
    }
}

fn check_clip_fields(clip: &ClipRecord) -> std::result::Result<(), &'static str> {
    if !(clip.t_start.is_finite() && clip.t_start >= 0.0) {
        return Err("t_start");
    }
    if !(clip.t_end.is_finite() && clip.t_end > clip.t_start) {
        return Err("t_end");
    }
    if clip.frames.is_empty() {
        return Err("frames");
    }
    if let Some(labels) = &clip.frame_labels {
        if labels.len() != clip.frames.len() {
            return Err("frame_labels");
        }
    }
    Ok(())
}

fn schema(line: usize, field: &str) -> Error {
    Error::Schema {
        line,
        field: field.to_string(),
    }
}

fn expect_field(
    obj: &serde_json::Map<String, Value>,
    line: usize,
    field: &str,
    ok: fn(&Value) -> bool,
) -> Result<()> {
    match obj.get(field) {
        Some(v) if ok(v) => Ok(()),
        _ => Err(schema(line, field)),
    }
}

fn is_string_list(v: &Value) -> bool {
    v.as_array().is_some_and(|a| a.iter().all(Value::is_string))
}

fn parse_record(text: &str, line: usize) -> Result<ManifestRecord> {
    let value: Value = serde_json::from_str(text).map_err(|_| schema(line, "<json>"))?;
    let obj = value.as_object().ok_or_else(|| schema(line, "<record>"))?;
    match obj.get("type").and_then(Value::as_str) {
        Some("video") => {
            expect_field(obj, line, "video_id", Value::is_string)?;
            expect_field(obj, line, "kind", |v| {
                matches!(v.as_str(), Some("narrative" | "silent"))
            })?;
            expect_field(obj, line, "title", Value::is_string)?;
            expect_field(obj, line, "clip_ids", is_string_list)?;
        }
        Some("clip") => {
            expect_field(obj, line, "clip_id", Value::is_string)?;
            expect_field(obj, line, "video_id", Value::is_string)?;
            expect_field(obj, line, "t_start", Value::is_number)?;
            expect_field(obj, line, "t_end", Value::is_number)?;
            expect_field(obj, line, "narration", |v| v.is_null() || v.is_string())?;
            expect_field(obj, line, "frames", is_string_list)?;
        }
        _ => return Err(schema(line, "type")),
    }
    let record: ManifestRecord =
        serde_json::from_value(value).map_err(|e| schema(line, &e.to_string()))?;
    if let ManifestRecord::Clip(clip) = &record {
        check_clip_fields(clip).map_err(|field| schema(line, field))?;
    }
    Ok(record)
}

/// Parses a manifest from its text. Line numbers in errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<Dataset> {
    let mut videos = Vec::new();
    let mut clips = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        match parse_record(raw, idx + 1)? {
            ManifestRecord::Video(v) => videos.push(v),
            ManifestRecord::Clip(c) => clips.push(c),
        }
    }
    Dataset::new(videos, clips)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_manifest(&fs::read_to_string(path)?)
}

/// Serializes a dataset: each video record followed by its clips.
pub fn manifest_to_string(ds: &Dataset) -> Result<String> {
    let mut out = Vec::new();
    for video in ds.videos() {
        serde_json::to_writer(&mut out, &ManifestRecord::Video(video.clone()))?;
        out.push(b'\n');
        for clip in ds.clips_of(video) {
            serde_json::to_writer(&mut out, &ManifestRecord::Clip(clip.clone()))?;
            out.push(b'\n');
        }
    }
    Ok(String::from_utf8(out).expect("serde_json emits utf-8"))
}

pub fn save_manifest(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), manifest_to_string(ds)?.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptSegment {
    pub text: String,
    pub t_start: f64,
    pub t_end: f64,
}

impl TranscriptSegment {
    pub fn new(text: impl Into<String>, t_start: f64, t_end: f64) -> Self {
        Self {
            text: text.into(),
            t_start,
            t_end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub terminal_punctuation: Vec<char>,
    pub linking_words: Vec<String>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            terminal_punctuation: vec!['.', '?', '!'],
            linking_words: ["and", "which", "so", "then", "because", "but"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl MergeConfig {
    fn ends_sentence(&self, text: &str) -> bool {
        text.trim_end()
            .chars()
            .next_back()
            .is_some_and(|c| self.terminal_punctuation.contains(&c))
    }

    fn starts_with_link(&self, text: &str) -> bool {
        let Some(first) = text.split_whitespace().next() else {
            return false;
        };
        let word = first
            .trim_end_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        self.linking_words
            .iter()
            .any(|w| w.eq_ignore_ascii_case(&word))
    }

    fn should_merge(&self, earlier: &TranscriptSegment, later: &TranscriptSegment) -> bool {
        !self.ends_sentence(&earlier.text) || self.starts_with_link(&later.text)
    }
}

/// Joins ASR segments that split one sentence across timestamps.
///
/// Two neighbours merge when the earlier one lacks terminal punctuation or the
/// later one opens with a linking word. Passes repeat until nothing changes.
pub fn merge_transcript_segments(
    segments: &[TranscriptSegment],
    cfg: &MergeConfig,
) -> Result<Vec<TranscriptSegment>> {
    if segments.is_empty() {
        return Err(Error::EmptyInput);
    }
    for (index, seg) in segments.iter().enumerate() {
        let reason = if seg.text.trim().is_empty() {
            Some("empty text")
        } else if !(seg.t_end > seg.t_start) {
            Some("t_end must exceed t_start")
        } else if index > 0 && seg.t_start < segments[index - 1].t_start {
            Some("segments not sorted by t_start")
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(Error::InvalidSegment {
                index,
                reason: reason.into(),
            });
        }
    }

    let mut current = segments.to_vec();
    loop {
        let mut merged: Vec<TranscriptSegment> = Vec::with_capacity(current.len());
        for seg in current.iter() {
            match merged.last_mut() {
                Some(prev) if cfg.should_merge(prev, seg) => {
                    prev.text = format!("{} {}", prev.text, seg.text);
                    prev.t_end = prev.t_end.max(seg.t_end);
                }
                _ => merged.push(seg.clone()),
            }
        }
        if merged.len() == current.len() {
            return Ok(merged);
        }
        current = merged;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_narrative: usize,
    pub n_silent: usize,
    pub clips_per_video: usize,
    pub n_concepts: usize,
}

pub const PHASE_WORDS: [&str; 10] = [
    "incision",
    "viscoelastic",
    "capsulorhexis",
    "hydrodissection",
    "phacoemulsification",
    "aspiration",
    "polishing",
    "implantation",
    "positioning",
    "flushing",
];

pub const INSTRUMENT_WORDS: [&str; 8] = [
    "keratome",
    "cannula",
    "forceps",
    "cystotome",
    "handpiece",
    "spatula",
    "injector",
    "hook",
];

const TITLE_TEMPLATES: [&str; 3] = [
    "{concept} {phase} with the {instrument} {variant}",
    "Surgical video of {concept} {phase} using a {instrument} {variant}",
    "{concept} {phase} technique: {instrument} {variant}",
];

const NARRATION_TEMPLATES: [&str; 3] = [
    "Here we perform {concept} {phase} {step} with the {instrument} {variant}.",
    "Now the {instrument} {variant} is used for {concept} {phase} {step}.",
    "In this {step} of {concept} {phase} the {instrument} {variant} enters the eye.",
];

/// Label used for concept `c` in titles, narrations, and frame labels.
pub fn concept_token(c: usize) -> String {
    format!("concept-{c}")
}

fn fill(template: &str, concept: usize, variant: usize, step: Option<usize>) -> String {
    let mut s = template
        .replace("{concept}", &concept_token(concept))
        .replace("{phase}", PHASE_WORDS[concept % PHASE_WORDS.len()])
        .replace(
            "{instrument}",
            INSTRUMENT_WORDS[variant % INSTRUMENT_WORDS.len()],
        )
        .replace("{variant}", &format!("variant-{variant}"));
    if let Some(step) = step {
        s = s.replace("{step}", &format!("step-{step}"));
    }
    s
}

/// Reference to a procedurally rendered frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticFrameRef {
    pub concept: usize,
    pub variant: usize,
    pub step: usize,
    pub noise: u32,
}

impl SyntheticFrameRef {
    pub const PREFIX: &'static str = "synth:";

    pub fn encode(&self) -> String {
        format!(
            "synth:c{}:v{}:s{}:n{:08x}",
            self.concept, self.variant, self.step, self.noise
        )
    }

    pub fn parse(reference: &str) -> Option<Self> {
        let rest = reference.strip_prefix(Self::PREFIX)?;
        let mut parts = rest.split(':');
        let mut field = |tag: char| parts.next()?.strip_prefix(tag).map(str::to_owned);
        let concept = field('c')?.parse().ok()?;
        let variant = field('v')?.parse().ok()?;
        let step = field('s')?.parse().ok()?;
        let noise = u32::from_str_radix(&field('n')?, 16).ok()?;
        Some(Self {
            concept,
            variant,
            step,
            noise,
        })
    }
}

/// Deterministic desk-scale dataset whose frames and texts encode a latent
/// concept per video.
///
/// Narrative video `i` gets concept `(i + offset) % n_concepts` and variant
/// `i / n_concepts`, so two narrative videos never share both. Silent videos
/// follow the same rule over their own index with variants shifted past the
/// narrative range. With `labeled`, every frame carries its concept token as
/// a label.
pub fn synthesize_dataset(spec: &SynthSpec, seed: u64, labeled: bool) -> Result<Dataset> {
    for (name, n) in [
        ("n_narrative", spec.n_narrative),
        ("n_silent", spec.n_silent),
        ("clips_per_video", spec.clips_per_video),
        ("n_concepts", spec.n_concepts),
    ] {
        if n == 0 {
            return Err(Error::InvalidSpec(format!("{name} must be >= 1")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..spec.n_concepts);
    let narrative_variants = spec.n_narrative.div_ceil(spec.n_concepts);

    let mut videos = Vec::new();
    let mut clips = Vec::new();
    let plan = (0..spec.n_narrative)
        .map(|i| {
            (
                VideoKind::Narrative,
                i,
                format!("nar-{i:03}"),
                i / spec.n_concepts,
            )
        })
        .chain((0..spec.n_silent).map(|j| {
            (
                VideoKind::Silent,
                j,
                format!("sil-{j:03}"),
                narrative_variants + j / spec.n_concepts,
            )
        }));
    for (kind, index, video_id, variant) in plan {
        let concept = (index + offset) % spec.n_concepts;
        let title = fill(
            TITLE_TEMPLATES.choose(&mut rng).expect("non-empty"),
            concept,
            variant,
            None,
        );
        let mut clip_ids = Vec::with_capacity(spec.clips_per_video);
        let mut t = 0.0_f64;
        for step in 0..spec.clips_per_video {
            let duration: f64 = f64::from(rng.gen_range(20u32..=40));
            // 0.5 frames per second
            let n_frames = (duration * 0.5) as usize;
            let frames: Vec<String> = (0..n_frames)
                .map(|_| {
                    SyntheticFrameRef {
                        concept,
                        variant,
                        step,
                        noise: rng.gen(),
                    }
                    .encode()
                })
                .collect();
            let narration = match kind {
                VideoKind::Narrative => Some(fill(
                    NARRATION_TEMPLATES.choose(&mut rng).expect("non-empty"),
                    concept,
                    variant,
                    Some(step),
                )),
                VideoKind::Silent => None,
            };
            let clip_id = format!("{video_id}-c{step:02}");
            clip_ids.push(clip_id.clone());
            clips.push(ClipRecord {
                clip_id,
                video_id: video_id.clone(),
                t_start: t,
                t_end: t + duration,
                narration,
                frame_labels: labeled.then(|| vec![vec![concept_token(concept)]; frames.len()]),
                frames,
            });
            t += duration;
        }
        videos.push(VideoRecord {
            video_id,
            kind,
            title,
            clip_ids,
            split: None,
        });
    }
    Dataset::new(videos, clips)
}

/// Picks `n_frames` frame references at evenly spaced positions.
///
/// Output index `i` maps to source index `floor(i * len / n_frames)`. When the
/// clip is longer this is a uniform stride; when shorter, each source frame is
/// repeated in order (3 frames to 8 gives `0,0,0,1,1,1,2,2`).
pub fn sample_frames(clip: &ClipRecord, n_frames: usize) -> Vec<&str> {
    let len = clip.frames.len();
    assert!(len > 0, "clip `{}` has no frames", clip.clip_id);
    (0..n_frames)
        .map(|i| clip.frames[i * len / n_frames].as_str())
        .collect()
}
