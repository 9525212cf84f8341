//! JSON-lines parsers for frame metadata, detections, annotations, video
//! records and embedding key sidecars.
//!
//! Blank lines are skipped. Line numbers in errors are 1-based.

use std::collections::{btree_map::Entry, BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{FrameKey, FrameMeta, IngestError, PolypTrack, Rect, ScoredBox, VideoRecord};

/// Lenient parsing ignores unknown JSON fields; strict parsing rejects them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Lenient,
    Strict,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RawFrame {
    pub video_id: String,
    pub frame_idx: u32,
    pub nbi: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce: Option<bool>,
    pub inside: bool,
    #[serde(default)]
    pub polyp_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RawScoredBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RawDetections {
    pub video_id: String,
    pub frame_idx: u32,
    pub boxes: Vec<RawScoredBox>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RawGtBox {
    pub polyp_id: String,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RawAnnotations {
    pub video_id: String,
    pub frame_idx: u32,
    pub gt: Vec<RawGtBox>,
}

/// Walks `input` and reports the first key that does not survive a
/// deserialize/serialize cycle through the typed record.
fn first_unknown_field(input: &Value, canonical: &Value, path: &str) -> Option<String> {
    match (input, canonical) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in a {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get(k) {
                    None => return Some(here),
                    Some(cv) => {
                        if let Some(f) = first_unknown_field(v, cv, &here) {
                            return Some(f);
                        }
                    }
                }
            }
            None
        }
        (Value::Array(a), Value::Array(b)) => a
            .iter()
            .zip(b)
            .enumerate()
            .find_map(|(i, (x, y))| first_unknown_field(x, y, &format!("{path}[{i}]"))),
        _ => None,
    }
}

fn for_each_record<T, R, F>(reader: R, mode: ParseMode, mut f: F) -> Result<(), IngestError>
where
    T: DeserializeOwned + Serialize,
    R: BufRead,
    F: FnMut(usize, T) -> Result<(), IngestError>,
{
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| IngestError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| IngestError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if !value.is_object() {
            return Err(IngestError::MalformedLine {
                line: line_no,
                message: "expected a JSON object".into(),
            });
        }
        let record: T = serde_json::from_value(value.clone()).map_err(|e| {
            IngestError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            }
        })?;
        if mode == ParseMode::Strict {
            let canonical = serde_json::to_value(&record).expect("record serializes");
            if let Some(field) = first_unknown_field(&value, &canonical, "") {
                return Err(IngestError::UnknownField {
                    line: line_no,
                    field,
                });
            }
        }
        f(line_no, record)?;
    }
    Ok(())
}

fn check_video_id(line: usize, id: &str) -> Result<(), IngestError> {
    if id.is_empty() {
        return Err(IngestError::RangeError {
            line,
            message: "video_id must be nonempty".into(),
        });
    }
    Ok(())
}

fn rect(line: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Rect, IngestError> {
    Rect::new(x0, y0, x1, y1).map_err(|message| IngestError::RangeError { line, message })
}

pub fn parse_frames_meta<R: BufRead>(
    reader: R,
    mode: ParseMode,
) -> Result<Vec<FrameMeta>, IngestError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for_each_record(reader, mode, |line, raw: RawFrame| {
        check_video_id(line, &raw.video_id)?;
        let key = FrameKey::new(raw.video_id, raw.frame_idx);
        if !seen.insert(key.clone()) {
            return Err(IngestError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        out.push(FrameMeta {
            key,
            nbi: raw.nbi,
            ce: raw.ce,
            inside_body: raw.inside,
            polyp_ids: raw.polyp_ids.into_iter().collect::<BTreeSet<_>>(),
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn parse_detections<R: BufRead>(
    reader: R,
    mode: ParseMode,
) -> Result<BTreeMap<FrameKey, Vec<ScoredBox>>, IngestError> {
    let mut out = BTreeMap::new();
    for_each_record(reader, mode, |line, raw: RawDetections| {
        check_video_id(line, &raw.video_id)?;
        let key = FrameKey::new(raw.video_id, raw.frame_idx);
        let mut boxes = Vec::with_capacity(raw.boxes.len());
        for b in raw.boxes {
            let r = rect(line, b.x0, b.y0, b.x1, b.y1)?;
            if !b.score.is_finite() || !(0.0..=1.0).contains(&b.score) {
                return Err(IngestError::RangeError {
                    line,
                    message: format!("score {} outside [0,1]", b.score),
                });
            }
            boxes.push(ScoredBox {
                rect: r,
                score: b.score,
            });
        }
        match out.entry(key) {
            Entry::Occupied(e) => Err(IngestError::DuplicateKey {
                line,
                key: e.key().to_string(),
            }),
            Entry::Vacant(e) => {
                e.insert(boxes);
                Ok(())
            }
        }
    })?;
    Ok(out)
}

/// Groups per-frame ground-truth boxes into polyp tracks, sorted by polyp id.
pub fn parse_annotations<R: BufRead>(
    reader: R,
    mode: ParseMode,
) -> Result<Vec<PolypTrack>, IngestError> {
    let mut seen_frames = HashSet::new();
    let mut tracks: BTreeMap<String, PolypTrack> = BTreeMap::new();
    for_each_record(reader, mode, |line, raw: RawAnnotations| {
        check_video_id(line, &raw.video_id)?;
        let key = FrameKey::new(raw.video_id, raw.frame_idx);
        if !seen_frames.insert(key.clone()) {
            return Err(IngestError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        for g in raw.gt {
            if g.polyp_id.is_empty() {
                return Err(IngestError::RangeError {
                    line,
                    message: "polyp_id must be nonempty".into(),
                });
            }
            let r = rect(line, g.x0, g.y0, g.x1, g.y1)?;
            let track = tracks
                .entry(g.polyp_id.clone())
                .or_insert_with(|| PolypTrack {
                    polyp_id: g.polyp_id.clone(),
                    video_id: key.video_id.clone(),
                    visible_frames: Vec::new(),
                });
            if track.video_id != key.video_id {
                return Err(IngestError::CrossVideoPolyp {
                    polyp_id: g.polyp_id,
                    first: track.video_id.clone(),
                    second: key.video_id.clone(),
                });
            }
            track.visible_frames.push((key.frame_idx, r));
        }
        Ok(())
    })?;

    let mut out = Vec::with_capacity(tracks.len());
    for (_, mut t) in tracks {
        t.visible_frames.sort_by_key(|(f, _)| *f);
        if t.visible_frames.windows(2).any(|w| w[0].0 == w[1].0) {
            let dup = t
                .visible_frames
                .windows(2)
                .find(|w| w[0].0 == w[1].0)
                .map(|w| w[0].0)
                .unwrap_or_default();
            return Err(IngestError::DuplicateKey {
                line: 0,
                key: format!("{}@{}", t.polyp_id, FrameKey::new(t.video_id.clone(), dup)),
            });
        }
        out.push(t);
    }
    Ok(out)
}

pub fn parse_videos<R: BufRead>(
    reader: R,
    mode: ParseMode,
) -> Result<Vec<VideoRecord>, IngestError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for_each_record(reader, mode, |line, v: VideoRecord| {
        check_video_id(line, &v.video_id)?;
        if !v.fps.is_finite() || v.fps <= 0.0 {
            return Err(IngestError::RangeError {
                line,
                message: format!("fps {} must be > 0", v.fps),
            });
        }
        if v.n_frames == 0 {
            return Err(IngestError::RangeError {
                line,
                message: "n_frames must be >= 1".into(),
            });
        }
        if !seen.insert(v.video_id.clone()) {
            return Err(IngestError::DuplicateKey {
                line,
                key: v.video_id,
            });
        }
        out.push(v);
        Ok(())
    })?;
    Ok(out)
}

/// Embedding key sidecar: one `{"video_id", "frame_idx"}` object per row.
pub fn parse_embedding_keys<R: BufRead>(
    reader: R,
    mode: ParseMode,
) -> Result<Vec<FrameKey>, IngestError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for_each_record(reader, mode, |line, k: FrameKey| {
        check_video_id(line, &k.video_id)?;
        if !seen.insert(k.clone()) {
            return Err(IngestError::DuplicateKey {
                line,
                key: k.to_string(),
            });
        }
        out.push(k);
        Ok(())
    })?;
    Ok(out)
}
