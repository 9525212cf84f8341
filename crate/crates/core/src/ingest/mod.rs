//! Parsing, validation and cross-linking of every input artifact.
//!
//! All parsers are pure functions over byte streams. A [`DatasetBundle`] can
//! only be obtained through [`validate_bundle`], so downstream code never has
//! to re-check that a frame, video or polyp reference resolves.

mod bundle;
mod embeddings;
mod jsonl;
mod ppm;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{
    load_bundle_dir, validate_bundle, write_bundle_dir, BundleParts, DatasetBundle, VideoView,
};
pub use embeddings::{
    parse_embeddings, read_embedding_set, read_embeddings, write_embedding_keys, write_embeddings,
    EmbeddingSet, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use jsonl::{
    parse_annotations, parse_detections, parse_embedding_keys, parse_frames_meta, parse_videos,
    ParseMode,
};
pub use ppm::{parse_ppm, read_ppm, write_ppm, Frame};

/// Identifies one frame of one video.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameKey {
    pub video_id: String,
    pub frame_idx: u32,
}

impl FrameKey {
    pub fn new(video_id: impl Into<String>, frame_idx: u32) -> Self {
        Self {
            video_id: video_id.into(),
            frame_idx,
        }
    }
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.video_id, self.frame_idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub fps: f64,
    pub n_frames: u32,
    pub site: String,
}

impl VideoRecord {
    pub fn duration_minutes(&self) -> f64 {
        self.n_frames as f64 / (self.fps * 60.0)
    }
}

/// Per-frame metadata. `ce == None` means the chromoendoscopy flag still has
/// to be computed from pixels; `Some(false)` asserts white light.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMeta {
    pub key: FrameKey,
    pub nbi: bool,
    pub ce: Option<bool>,
    pub inside_body: bool,
    pub polyp_ids: std::collections::BTreeSet<String>,
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, String> {
        let r = Self { x0, y0, x1, y1 };
        r.check()?;
        Ok(r)
    }

    pub(crate) fn check(&self) -> Result<(), String> {
        for (name, v) in [("x0", self.x0), ("y0", self.y0), ("x1", self.x1), ("y1", self.y1)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(format!("{name}={v} outside [0,1]"));
            }
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(format!(
                "degenerate box ({}, {}, {}, {}): need x0<x1 and y0<y1",
                self.x0, self.y0, self.x1, self.y1
            ));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub rect: Rect,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub polyp_id: String,
    pub rect: Rect,
}

/// Frames (strictly increasing) on which one polyp is visible in one video.
#[derive(Debug, Clone, PartialEq)]
pub struct PolypTrack {
    pub polyp_id: String,
    pub video_id: String,
    pub visible_frames: Vec<(u32, Rect)>,
}

impl PolypTrack {
    pub fn len(&self) -> usize {
        self.visible_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible_frames.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // embedding binary
    #[error("bad magic: expected \"MACE\", found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported embedding format version {0}")]
    VersionUnsupported(u16),
    #[error("header truncated: {len} bytes, need 16")]
    TruncatedHeader { len: usize },
    #[error("reserved header field is {0}, must be 0")]
    ReservedNonZero(u16),
    #[error("embedding dimension d must be >= 1")]
    ZeroDimension,
    #[error("payload size n*d*4 overflows (n={n}, d={d})")]
    SizeOverflow { n: u32, d: u32 },
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("trailing bytes after payload: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("{keys} frame keys for {rows} embedding rows")]
    KeyCountMismatch { keys: usize, rows: usize },

    // JSONL streams
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: duplicate key {key}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: unknown field `{field}`")]
    UnknownField { line: usize, field: String },
    #[error("line {line}: value out of range: {message}")]
    RangeError { line: usize, message: String },
    #[error("polyp {polyp_id} appears in videos {first} and {second}")]
    CrossVideoPolyp {
        polyp_id: String,
        first: String,
        second: String,
    },

    // PPM
    #[error("bad PPM header: {0}")]
    BadHeader(String),
    #[error("unsupported PPM maxval {0} (only 255)")]
    UnsupportedMaxval(u32),
    #[error("PPM pixel data truncated: expected {expected} bytes, found {actual}")]
    TruncatedPixels { expected: usize, actual: usize },

    // bundle cross-references
    #[error("{stream}: record {record} references unknown video {video_id}")]
    DanglingVideoRef {
        stream: &'static str,
        record: String,
        video_id: String,
    },
    #[error("frames: record {record} lists polyp {polyp_id} absent from annotations of that video")]
    DanglingPolypRef { record: String, polyp_id: String },
    #[error("{stream}: record {record} is beyond the video's {n_frames} frames")]
    FrameOutOfRange {
        stream: &'static str,
        record: String,
        n_frames: u32,
    },
    #[error("embeddings `{model}`: {detail}")]
    EmbeddingKeyMismatch { model: String, detail: String },
    #[error("annotations: track {polyp_id} is empty or not strictly increasing")]
    InvalidTrack { polyp_id: String },
}

impl IngestError {
    pub fn is_io(&self) -> bool {
        matches!(self, IngestError::Io { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.into(),
            source,
        }
    }
}
