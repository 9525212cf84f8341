use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use super::embeddings::{read_embedding_set, write_embedding_keys, write_embeddings, EmbeddingSet};
use super::jsonl::{
    parse_annotations, parse_detections, parse_frames_meta, parse_videos, ParseMode, RawAnnotations,
    RawDetections, RawFrame, RawGtBox, RawScoredBox,
};
use super::{FrameKey, FrameMeta, IngestError, PolypTrack, Rect, ScoredBox, VideoRecord};

/// Parsed but not yet cross-checked streams.
#[derive(Debug, Clone, Default)]
pub struct BundleParts {
    pub videos: Vec<VideoRecord>,
    pub frames: Vec<FrameMeta>,
    pub detections: BTreeMap<FrameKey, Vec<ScoredBox>>,
    pub tracks: Vec<PolypTrack>,
    pub embeddings: BTreeMap<String, EmbeddingSet>,
}

/// Cross-validated dataset. Every stream is held in canonical
/// `(video_id, frame_idx)` order, so the line order of the inputs does not
/// matter. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    videos: BTreeMap<String, VideoRecord>,
    frames: BTreeMap<FrameKey, FrameMeta>,
    detections: BTreeMap<FrameKey, Vec<ScoredBox>>,
    tracks: BTreeMap<String, PolypTrack>,
    tracks_by_video: BTreeMap<String, Vec<String>>,
    embeddings: BTreeMap<String, EmbeddingSet>,
}

/// Dense per-frame view of one video.
#[derive(Debug, Clone)]
pub struct VideoView<'a> {
    pub record: &'a VideoRecord,
    /// Frames without metadata count as inside the body.
    pub inside: Vec<bool>,
    pub boxes: Vec<Vec<ScoredBox>>,
    pub tracks: Vec<&'a PolypTrack>,
}

impl VideoView<'_> {
    /// Ground-truth rectangles per frame, across all tracks of the video.
    pub fn gt_per_frame(&self) -> Vec<Vec<Rect>> {
        let mut gt = vec![Vec::new(); self.inside.len()];
        for t in &self.tracks {
            for (f, r) in &t.visible_frames {
                gt[*f as usize].push(*r);
            }
        }
        gt
    }
}

fn first_dup<'a, I: Iterator<Item = &'a str>>(ids: I) -> Option<&'a str> {
    let mut seen = BTreeSet::new();
    ids.into_iter().find(|id| !seen.insert(*id))
}

/// Cross-links parsed streams. Errors name the first offending record in
/// canonical order.
pub fn validate_bundle(parts: BundleParts) -> Result<DatasetBundle, IngestError> {
    let BundleParts {
        videos,
        frames,
        detections,
        tracks,
        embeddings,
    } = parts;

    if let Some(dup) = first_dup(videos.iter().map(|v| v.video_id.as_str())) {
        return Err(IngestError::DuplicateKey {
            line: 0,
            key: dup.to_string(),
        });
    }
    for v in &videos {
        if v.video_id.is_empty() || !(v.fps.is_finite() && v.fps > 0.0) || v.n_frames == 0 {
            return Err(IngestError::RangeError {
                line: 0,
                message: format!("invalid video record {}", v.video_id),
            });
        }
    }
    let videos: BTreeMap<String, VideoRecord> =
        videos.into_iter().map(|v| (v.video_id.clone(), v)).collect();

    let resolve = |stream: &'static str, key: &FrameKey| -> Result<(), IngestError> {
        let v = videos
            .get(&key.video_id)
            .ok_or_else(|| IngestError::DanglingVideoRef {
                stream,
                record: key.to_string(),
                video_id: key.video_id.clone(),
            })?;
        if key.frame_idx >= v.n_frames {
            return Err(IngestError::FrameOutOfRange {
                stream,
                record: key.to_string(),
                n_frames: v.n_frames,
            });
        }
        Ok(())
    };

    let mut frame_map = BTreeMap::new();
    for f in frames {
        if let Some(prev) = frame_map.insert(f.key.clone(), f) {
            return Err(IngestError::DuplicateKey {
                line: 0,
                key: prev.key.to_string(),
            });
        }
    }
    for key in frame_map.keys() {
        resolve("frames", key)?;
    }
    for key in detections.keys() {
        resolve("detections", key)?;
    }

    let mut track_map = BTreeMap::new();
    for t in tracks {
        if track_map.contains_key(&t.polyp_id) {
            return Err(IngestError::DuplicateKey {
                line: 0,
                key: t.polyp_id.clone(),
            });
        }
        track_map.insert(t.polyp_id.clone(), t);
    }
    let mut tracks_by_video: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for t in track_map.values() {
        if t.visible_frames.is_empty() || t.visible_frames.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(IngestError::InvalidTrack {
                polyp_id: t.polyp_id.clone(),
            });
        }
        for (f, r) in &t.visible_frames {
            resolve("annotations", &FrameKey::new(t.video_id.clone(), *f))?;
            r.check().map_err(|message| IngestError::RangeError { line: 0, message })?;
        }
        tracks_by_video
            .entry(t.video_id.clone())
            .or_default()
            .push(t.polyp_id.clone());
    }

    for meta in frame_map.values() {
        for pid in &meta.polyp_ids {
            let ok = track_map
                .get(pid)
                .is_some_and(|t| t.video_id == meta.key.video_id);
            if !ok {
                return Err(IngestError::DanglingPolypRef {
                    record: meta.key.to_string(),
                    polyp_id: pid.clone(),
                });
            }
        }
    }

    for (model, set) in &embeddings {
        if !set.has_keys() {
            return Err(IngestError::EmbeddingKeyMismatch {
                model: model.clone(),
                detail: "no frame keys attached".into(),
            });
        }
        if let Some(k) = set.keys().iter().find(|k| !frame_map.contains_key(*k)) {
            return Err(IngestError::EmbeddingKeyMismatch {
                model: model.clone(),
                detail: format!("row key {k} has no frame metadata"),
            });
        }
    }

    Ok(DatasetBundle {
        videos,
        frames: frame_map,
        detections,
        tracks: track_map,
        tracks_by_video,
        embeddings,
    })
}

impl DatasetBundle {
    pub fn videos(&self) -> &BTreeMap<String, VideoRecord> {
        &self.videos
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.get(id)
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.videos.keys().cloned().collect()
    }

    pub fn frames(&self) -> &BTreeMap<FrameKey, FrameMeta> {
        &self.frames
    }

    pub fn frame(&self, key: &FrameKey) -> Option<&FrameMeta> {
        self.frames.get(key)
    }

    pub fn detections(&self) -> &BTreeMap<FrameKey, Vec<ScoredBox>> {
        &self.detections
    }

    pub fn tracks(&self) -> &BTreeMap<String, PolypTrack> {
        &self.tracks
    }

    pub fn tracks_in_video(&self, video_id: &str) -> impl Iterator<Item = &PolypTrack> {
        self.tracks_by_video
            .get(video_id)
            .into_iter()
            .flatten()
            .map(|id| &self.tracks[id])
    }

    pub fn embeddings(&self) -> &BTreeMap<String, EmbeddingSet> {
        &self.embeddings
    }

    pub fn frames_of_video(&self, video_id: &str) -> impl Iterator<Item = &FrameMeta> {
        let lo = FrameKey::new(video_id, 0);
        let hi = FrameKey::new(video_id, u32::MAX);
        self.frames.range(lo..=hi).map(|(_, m)| m)
    }

    pub fn video_view(&self, video_id: &str) -> Option<VideoView<'_>> {
        let record = self.videos.get(video_id)?;
        let n = record.n_frames as usize;
        let mut inside = vec![true; n];
        for m in self.frames_of_video(video_id) {
            inside[m.key.frame_idx as usize] = m.inside_body;
        }
        let mut boxes = vec![Vec::new(); n];
        let lo = FrameKey::new(video_id, 0);
        let hi = FrameKey::new(video_id, u32::MAX);
        for (k, b) in self.detections.range(lo..=hi) {
            boxes[k.frame_idx as usize] = b.clone();
        }
        Some(VideoView {
            record,
            inside,
            boxes,
            tracks: self.tracks_in_video(video_id).collect(),
        })
    }

    /// Replaces computed-on-demand chromoendoscopy flags. Only frames whose
    /// `ce` is still `None` are touched.
    pub fn with_resolved_ce(&self, resolved: &BTreeMap<FrameKey, bool>) -> DatasetBundle {
        let mut out = self.clone();
        for (k, v) in resolved {
            if let Some(m) = out.frames.get_mut(k) {
                if m.ce.is_none() {
                    m.ce = Some(*v);
                }
            }
        }
        out
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>, IngestError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| IngestError::io(path, e))
}

/// Loads `videos.jsonl`, `frames.jsonl`, `detections.jsonl`,
/// `annotations.jsonl` and every `embeddings/<name>.bin` (with its
/// `<name>.keys.jsonl` sidecar) from `dir`.
pub fn load_bundle_dir(dir: &Path, mode: ParseMode) -> Result<DatasetBundle, IngestError> {
    let videos = parse_videos(open(&dir.join("videos.jsonl"))?, mode)?;
    let frames = parse_frames_meta(open(&dir.join("frames.jsonl"))?, mode)?;
    let detections = parse_detections(open(&dir.join("detections.jsonl"))?, mode)?;
    let tracks = parse_annotations(open(&dir.join("annotations.jsonl"))?, mode)?;

    let mut embeddings = BTreeMap::new();
    let emb_dir = dir.join("embeddings");
    if emb_dir.is_dir() {
        let mut names = Vec::new();
        for entry in fs::read_dir(&emb_dir).map_err(|e| IngestError::io(&emb_dir, e))? {
            let path = entry.map_err(|e| IngestError::io(&emb_dir, e))?.path();
            if path.extension().is_some_and(|x| x == "bin") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    names.push(stem.to_string());
                }
            }
        }
        names.sort();
        for name in names {
            let bin = emb_dir.join(format!("{name}.bin"));
            let keys = emb_dir.join(format!("{name}.keys.jsonl"));
            let set = read_embedding_set(&bin, keys.exists().then_some(keys.as_path()), mode)?;
            embeddings.insert(name, set);
        }
    }

    validate_bundle(BundleParts {
        videos,
        frames,
        detections,
        tracks,
        embeddings,
    })
}

fn jsonl_line<T: serde::Serialize>(out: &mut Vec<u8>, v: &T) {
    serde_json::to_writer(&mut *out, v).expect("record serializes");
    out.push(b'\n');
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    let mut f = fs::File::create(path).map_err(|e| IngestError::io(path, e))?;
    f.write_all(bytes).map_err(|e| IngestError::io(path, e))
}

/// Writes the bundle in the same layout [`load_bundle_dir`] reads, in
/// canonical order.
pub fn write_bundle_dir(bundle: &DatasetBundle, dir: &Path) -> Result<(), IngestError> {
    fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;

    let mut buf = Vec::new();
    for v in bundle.videos.values() {
        jsonl_line(&mut buf, v);
    }
    write_file(&dir.join("videos.jsonl"), &buf)?;

    buf.clear();
    for m in bundle.frames.values() {
        jsonl_line(
            &mut buf,
            &RawFrame {
                video_id: m.key.video_id.clone(),
                frame_idx: m.key.frame_idx,
                nbi: m.nbi,
                ce: m.ce,
                inside: m.inside_body,
                polyp_ids: m.polyp_ids.iter().cloned().collect(),
            },
        );
    }
    write_file(&dir.join("frames.jsonl"), &buf)?;

    buf.clear();
    for (k, boxes) in &bundle.detections {
        jsonl_line(
            &mut buf,
            &RawDetections {
                video_id: k.video_id.clone(),
                frame_idx: k.frame_idx,
                boxes: boxes
                    .iter()
                    .map(|b| RawScoredBox {
                        x0: b.rect.x0,
                        y0: b.rect.y0,
                        x1: b.rect.x1,
                        y1: b.rect.y1,
                        score: b.score,
                    })
                    .collect(),
            },
        );
    }
    write_file(&dir.join("detections.jsonl"), &buf)?;

    let mut per_frame: BTreeMap<FrameKey, Vec<RawGtBox>> = BTreeMap::new();
    for t in bundle.tracks.values() {
        for (f, r) in &t.visible_frames {
            per_frame
                .entry(FrameKey::new(t.video_id.clone(), *f))
                .or_default()
                .push(RawGtBox {
                    polyp_id: t.polyp_id.clone(),
                    x0: r.x0,
                    y0: r.y0,
                    x1: r.x1,
                    y1: r.y1,
                });
        }
    }
    buf.clear();
    for (k, gt) in per_frame {
        jsonl_line(
            &mut buf,
            &RawAnnotations {
                video_id: k.video_id,
                frame_idx: k.frame_idx,
                gt,
            },
        );
    }
    write_file(&dir.join("annotations.jsonl"), &buf)?;

    if !bundle.embeddings.is_empty() {
        let emb_dir = dir.join("embeddings");
        fs::create_dir_all(&emb_dir).map_err(|e| IngestError::io(&emb_dir, e))?;
        for (name, set) in &bundle.embeddings {
            write_file(&emb_dir.join(format!("{name}.bin")), &write_embeddings(set))?;
            write_file(
                &emb_dir.join(format!("{name}.keys.jsonl")),
                &write_embedding_keys(set.keys()),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> BundleParts {
        let rect = Rect::new(0.1, 0.1, 0.4, 0.4).unwrap();
        BundleParts {
            videos: vec![VideoRecord {
                video_id: "v1".into(),
                fps: 30.0,
                n_frames: 100,
                site: "IL".into(),
            }],
            frames: (0..100)
                .map(|i| FrameMeta {
                    key: FrameKey::new("v1", i),
                    nbi: false,
                    ce: Some(false),
                    inside_body: true,
                    polyp_ids: if (10..13).contains(&i) {
                        ["p1".to_string()].into()
                    } else {
                        BTreeSet::new()
                    },
                })
                .collect(),
            detections: [(
                FrameKey::new("v1", 11),
                vec![ScoredBox { rect, score: 0.9 }],
            )]
            .into(),
            tracks: vec![PolypTrack {
                polyp_id: "p1".into(),
                video_id: "v1".into(),
                visible_frames: (10..13).map(|i| (i, rect)).collect(),
            }],
            embeddings: BTreeMap::new(),
        }
    }

    #[test]
    fn consistent_fixture_validates() {
        let b = validate_bundle(fixture()).unwrap();
        assert_eq!(b.tracks_in_video("v1").count(), 1);
        let view = b.video_view("v1").unwrap();
        assert_eq!(view.boxes[11].len(), 1);
        assert_eq!(view.gt_per_frame()[12].len(), 1);
    }

    #[test]
    fn detection_out_of_range() {
        let mut p = fixture();
        p.detections.insert(FrameKey::new("v1", 999), vec![]);
        match validate_bundle(p) {
            Err(IngestError::FrameOutOfRange { stream, record, n_frames }) => {
                assert_eq!((stream, record.as_str(), n_frames), ("detections", "v1#999", 100));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dangling_polyp_and_video() {
        let mut p = fixture();
        p.frames[50].polyp_ids.insert("ghost".into());
        match validate_bundle(p) {
            Err(IngestError::DanglingPolypRef { record, polyp_id }) => {
                assert_eq!(record, "v1#50");
                assert_eq!(polyp_id, "ghost");
            }
            other => panic!("{other:?}"),
        }
        let mut p = fixture();
        p.tracks[0].video_id = "v9".into();
        assert!(matches!(validate_bundle(p), Err(IngestError::DanglingVideoRef { .. })));
    }

    #[test]
    fn embedding_keys_must_resolve() {
        let mut p = fixture();
        let set = EmbeddingSet::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])
            .unwrap()
            .with_keys(vec![FrameKey::new("v1", 3), FrameKey::new("v2", 0)])
            .unwrap();
        p.embeddings.insert("vit".into(), set);
        assert!(matches!(
            validate_bundle(p),
            Err(IngestError::EmbeddingKeyMismatch { .. })
        ));
    }

    #[test]
    fn directory_round_trip() {
        let mut p = fixture();
        let set = EmbeddingSet::from_rows(&[vec![0.5, 1.0], vec![1.0, 0.25]])
            .unwrap()
            .with_keys(vec![FrameKey::new("v1", 3), FrameKey::new("v1", 4)])
            .unwrap();
        p.embeddings.insert("vit".into(), set);
        let b = validate_bundle(p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle_dir(&b, dir.path()).unwrap();
        let back = load_bundle_dir(dir.path(), ParseMode::Strict).unwrap();
        assert_eq!(back, b);
    }
}
