//! Seeded synthetic data with planted ground truth: Gaussian embedding
//! groups with closed-form distances, and detection bundles with planted
//! hit rates and false-alarm processes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    self, validate_bundle, BundleParts, DatasetBundle, EmbeddingSet, Frame, FrameKey, FrameMeta,
    IngestError, PolypTrack, Rect, ScoredBox, VideoRecord,
};
use crate::mace::{self, GaussianMoments, MaceError};
use crate::modality::{hsv_to_rgb, Modality};
use crate::stats;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error(transparent)]
    Mace(#[from] MaceError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SynthError> {
    Err(SynthError::InvalidScenario(msg.into()))
}

/// One Gaussian embedding population. Exactly one of `cov_diag` and `cov`
/// must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub tag: String,
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    pub n: usize,
    /// Rows are spread round-robin over this many pseudo-videos, which act
    /// as bootstrap units.
    #[serde(default = "default_units")]
    pub units: usize,
}

fn default_units() -> usize {
    50
}

impl GroupSpec {
    pub fn d(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match (&self.cov_diag, &self.cov) {
            (Some(diag), _) => DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            (None, Some(rows)) => DMatrix::from_fn(self.d(), self.d(), |i, j| rows[i][j]),
            (None, None) => DMatrix::identity(self.d(), self.d()),
        }
    }

    pub fn moments(&self) -> GaussianMoments {
        GaussianMoments::from_parts(DVector::from_column_slice(&self.mean), self.covariance(), self.n)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let d = self.d();
        if self.tag.is_empty() || self.tag.contains(['/', '\\']) {
            return invalid(format!("bad group tag {:?}", self.tag));
        }
        if d == 0 || self.mean.iter().any(|v| !v.is_finite()) {
            return invalid(format!("{}: mean must be a nonempty finite vector", self.tag));
        }
        if self.n < 2 {
            return invalid(format!("{}: n must be >= 2", self.tag));
        }
        if self.units == 0 || self.units > self.n {
            return invalid(format!("{}: units must lie in 1..=n", self.tag));
        }
        match (&self.cov_diag, &self.cov) {
            (Some(_), Some(_)) | (None, None) => {
                return invalid(format!("{}: give exactly one of cov_diag and cov", self.tag))
            }
            (Some(diag), None) => {
                if diag.len() != d || diag.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return invalid(format!("{}: cov_diag must hold {d} values >= 0", self.tag));
                }
            }
            (None, Some(rows)) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return invalid(format!("{}: cov must be {d}x{d}", self.tag));
                }
                let c = self.covariance();
                if c.iter().any(|v| !v.is_finite()) || (&c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
                    return invalid(format!("{}: cov must be finite and symmetric", self.tag));
                }
                mace::matrix_sqrt_psd(&c)
                    .map_err(|e| SynthError::InvalidScenario(format!("{}: cov not PSD ({e})", self.tag)))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftScenario {
    #[serde(default)]
    pub seed: Option<u64>,
    pub groups: Vec<GroupSpec>,
}

impl ShiftScenario {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(17)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.groups.is_empty() {
            return invalid("no groups");
        }
        let mut tags = BTreeSet::new();
        for g in &self.groups {
            g.validate()?;
            if !tags.insert(g.tag.as_str()) {
                return invalid(format!("duplicate group tag {}", g.tag));
            }
        }
        Ok(())
    }

    pub fn group(&self, tag: &str) -> Result<&GroupSpec, SynthError> {
        self.groups
            .iter()
            .find(|g| g.tag == tag)
            .ok_or_else(|| SynthError::UnknownGroup(tag.to_string()))
    }

    /// Population Fréchet distance between two group specs.
    pub fn closed_form(&self, a: &str, b: &str) -> Result<f64, SynthError> {
        let (a, b) = (self.group(a)?, self.group(b)?);
        Ok(mace::frechet_distance(&a.moments(), &b.moments())?.value)
    }
}

/// Samples every group from its own stream. Rows are rounded to `f32` so the
/// sets survive a binary round trip unchanged. Row `i` of group `tag` is keyed
/// `(<tag>-u<i mod units>, i / units)`.
pub fn gen_embeddings(scenario: &ShiftScenario) -> Result<BTreeMap<String, EmbeddingSet>, SynthError> {
    scenario.validate()?;
    let seed = scenario.seed();
    let sets: Vec<(String, EmbeddingSet)> = scenario
        .groups
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            let d = g.d();
            let root = match &g.cov_diag {
                Some(diag) => DMatrix::from_diagonal(&DVector::from_iterator(d, diag.iter().map(|v| v.sqrt()))),
                None => mace::matrix_sqrt_psd(&g.covariance())?,
            };
            let mut rng = stats::rng_for(seed, gi as u64);
            let mut values = Vec::with_capacity(g.n * d);
            let mut z = DVector::zeros(d);
            for _ in 0..g.n {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let x = &root * &z;
                values.extend(x.iter().zip(&g.mean).map(|(x, m)| (x + m) as f32 as f64));
            }
            let keys = (0..g.n)
                .map(|i| FrameKey::new(format!("{}-u{:04}", g.tag, i % g.units), (i / g.units) as u32))
                .collect();
            let set = EmbeddingSet::new(DMatrix::from_row_slice(g.n, d, &values), keys)?;
            Ok((g.tag.clone(), set))
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(sets.into_iter().collect())
}

/// Per-modality values (probabilities or mixture weights).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerModality {
    pub wl: f64,
    pub nbi: f64,
    pub ce: f64,
}

impl PerModality {
    fn get(&self, m: Option<Modality>) -> f64 {
        match m {
            None => self.wl,
            Some(Modality::Nbi) => self.nbi,
            Some(Modality::Ce) => self.ce,
        }
    }
}

fn default_fps() -> f64 {
    30.0
}
fn default_minutes() -> (f64, f64) {
    (4.0, 8.0)
}
fn default_outside() -> f64 {
    10.0
}
fn default_polyps() -> (usize, usize) {
    (0, 3)
}
fn default_track() -> (usize, usize) {
    (8, 60)
}
fn default_hit() -> PerModality {
    PerModality { wl: 0.9, nbi: 0.9, ce: 0.9 }
}
fn default_mix() -> PerModality {
    PerModality { wl: 1.0, nbi: 0.0, ce: 0.0 }
}
fn default_coverage() -> (f64, f64) {
    (0.2, 1.0)
}
fn default_fa_rate() -> f64 {
    0.5
}
fn default_fa_run() -> (usize, usize) {
    (7, 21)
}
fn default_guard() -> usize {
    14
}
fn default_box() -> (f64, f64) {
    (0.08, 0.25)
}
fn default_site() -> String {
    "synthetic".into()
}

/// Detection-bundle scenario. Each polyp gets one modality drawn from
/// `modality_mix`; a `coverage` share of its visible frames (a leading
/// block) is flagged with that modality, and it is hit with the modality's
/// probability. False alarms are Poisson runs in frames away from polyps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorScenario {
    #[serde(default)]
    pub seed: Option<u64>,
    pub n_videos: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Per-video duration range in minutes.
    #[serde(default = "default_minutes")]
    pub minutes: (f64, f64),
    /// Outside-body seconds at each end of every video.
    #[serde(default = "default_outside")]
    pub outside_seconds: f64,
    #[serde(default = "default_polyps")]
    pub polyps_per_video: (usize, usize),
    /// Visible-frame count range of one track.
    #[serde(default = "default_track")]
    pub track_frames: (usize, usize),
    #[serde(default = "default_hit")]
    pub hit_probability: PerModality,
    #[serde(default = "default_mix")]
    pub modality_mix: PerModality,
    #[serde(default = "default_coverage")]
    pub coverage: (f64, f64),
    #[serde(default = "default_fa_rate")]
    pub fa_rate_per_min: f64,
    #[serde(default = "default_fa_run")]
    pub fa_run_frames: (usize, usize),
    /// Minimum frame gap between a false-alarm run and any track or other run.
    #[serde(default = "default_guard")]
    pub guard_frames: usize,
    /// Box side length range (normalized).
    #[serde(default = "default_box")]
    pub box_size: (f64, f64),
    /// Leave the CE flag unset on track frames and emit PPM frames instead.
    #[serde(default)]
    pub ce_from_pixels: bool,
    #[serde(default = "default_site")]
    pub site: String,
}

impl DetectorScenario {
    pub fn new(n_videos: usize) -> Self {
        Self {
            seed: None,
            n_videos,
            fps: default_fps(),
            minutes: default_minutes(),
            outside_seconds: default_outside(),
            polyps_per_video: default_polyps(),
            track_frames: default_track(),
            hit_probability: default_hit(),
            modality_mix: default_mix(),
            coverage: default_coverage(),
            fa_rate_per_min: default_fa_rate(),
            fa_run_frames: default_fa_run(),
            guard_frames: default_guard(),
            box_size: default_box(),
            ce_from_pixels: false,
            site: default_site(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(17)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        let range = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if self.n_videos == 0 {
            return invalid("n_videos must be >= 1");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return invalid("fps must be > 0");
        }
        if !range(self.minutes) || self.minutes.0 <= 0.0 {
            return invalid("minutes must be a positive range");
        }
        if !(self.outside_seconds.is_finite() && self.outside_seconds >= 0.0) {
            return invalid("outside_seconds must be >= 0");
        }
        if self.polyps_per_video.0 > self.polyps_per_video.1 {
            return invalid("polyps_per_video range is reversed");
        }
        if self.track_frames.0 < 4 || self.track_frames.0 > self.track_frames.1 {
            return invalid("track_frames must be a range with minimum >= 4");
        }
        let h = self.hit_probability;
        if ![h.wl, h.nbi, h.ce].into_iter().all(prob) {
            return invalid("hit probabilities must lie in [0,1]");
        }
        let m = self.modality_mix;
        if ![m.wl, m.nbi, m.ce].iter().all(|v| v.is_finite() && *v >= 0.0) || m.wl + m.nbi + m.ce <= 0.0 {
            return invalid("modality_mix weights must be >= 0 with a positive sum");
        }
        if !range(self.coverage) || !prob(self.coverage.0) || !prob(self.coverage.1) {
            return invalid("coverage must be a range within [0,1]");
        }
        if !(self.fa_rate_per_min.is_finite() && self.fa_rate_per_min >= 0.0) {
            return invalid("fa_rate_per_min must be >= 0");
        }
        if self.fa_run_frames.0 == 0 || self.fa_run_frames.0 > self.fa_run_frames.1 {
            return invalid("fa_run_frames must be a positive range");
        }
        let b = self.box_size;
        if !range(b) || b.0 <= 0.0 || b.1 > 0.5 {
            return invalid("box_size must be a range within (0, 0.5]");
        }
        let (inside, _) = self.inside_span(self.minutes.0);
        let need = self.polyps_per_video.1 * (self.track_frames.1 + 2 * self.guard_frames);
        if inside < need.max(1) {
            return invalid(format!(
                "shortest video has {inside} inside-body frames, {need} needed for the polyp layout"
            ));
        }
        Ok(())
    }

    /// `(inside-body frames, head offset)` for a video of `minutes`.
    fn inside_span(&self, minutes: f64) -> (usize, usize) {
        let total = (minutes * 60.0 * self.fps).round() as usize;
        let head = (self.outside_seconds * self.fps).round() as usize;
        (total.saturating_sub(2 * head), head)
    }
}

/// Everything planted by the generator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantedTruth {
    pub hits: BTreeMap<String, bool>,
    pub polyp_modality: BTreeMap<String, Option<Modality>>,
    pub fa_events: usize,
    pub minutes: f64,
}

impl PlantedTruth {
    pub fn tpr(&self) -> f64 {
        self.hits.values().filter(|h| **h).count() as f64 / self.hits.len().max(1) as f64
    }

    pub fn fapm(&self) -> f64 {
        self.fa_events as f64 / self.minutes
    }
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub bundle: DatasetBundle,
    pub truth: PlantedTruth,
    /// Frames whose CE flag must be computed from pixels, with the planted
    /// answer.
    pub pixel_frames: BTreeMap<FrameKey, bool>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn rect(x0: f64, y0: f64, w: f64, h: f64) -> Rect {
    let (x0, y0) = (round4(x0), round4(y0));
    Rect::new(x0, y0, round4(x0 + w).min(1.0), round4(y0 + h).min(1.0)).expect("generated box is valid")
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

fn uniform_usize(rng: &mut ChaCha8Rng, r: (usize, usize)) -> usize {
    rng.random_range(r.0..=r.1)
}

struct VideoParts {
    record: VideoRecord,
    frames: Vec<FrameMeta>,
    detections: Vec<(FrameKey, Vec<ScoredBox>)>,
    tracks: Vec<PolypTrack>,
    hits: Vec<(String, bool, Option<Modality>)>,
    fa_events: usize,
    pixel_frames: Vec<(FrameKey, bool)>,
}

fn gen_video(s: &DetectorScenario, vi: usize) -> VideoParts {
    let mut rng = stats::rng_for(s.seed(), vi as u64);
    let video_id = format!("vid{vi:04}");
    let minutes = uniform(&mut rng, s.minutes);
    let (inside, head) = s.inside_span(minutes);
    let n_frames = inside + 2 * head;
    let record = VideoRecord {
        video_id: video_id.clone(),
        fps: s.fps,
        n_frames: n_frames as u32,
        site: s.site.clone(),
    };

    let mut nbi = vec![false; n_frames];
    let mut ce = vec![false; n_frames];
    let mut polyps_at: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n_frames];
    let mut boxes: Vec<Vec<ScoredBox>> = vec![Vec::new(); n_frames];
    let mut busy = vec![false; n_frames];
    for (i, b) in busy.iter_mut().enumerate() {
        *b = i < head || i >= head + inside;
    }

    let n_polyps = uniform_usize(&mut rng, s.polyps_per_video);
    let mix = s.modality_mix;
    let total_w = mix.wl + mix.nbi + mix.ce;
    let mut tracks = Vec::new();
    let mut hits = Vec::new();
    let seg = if n_polyps > 0 { inside / n_polyps } else { 0 };
    for k in 0..n_polyps {
        let polyp_id = format!("{video_id}-p{k:02}");
        let len = uniform_usize(&mut rng, s.track_frames);
        let lo = head + k * seg + s.guard_frames;
        let hi = head + (k + 1) * seg - s.guard_frames - len;
        let start = rng.random_range(lo..=hi);

        let u = rng.random::<f64>() * total_w;
        let modality = if u < mix.wl {
            None
        } else if u < mix.wl + mix.nbi {
            Some(Modality::Nbi)
        } else {
            Some(Modality::Ce)
        };
        let flagged = match modality {
            None => 0,
            Some(_) => (uniform(&mut rng, s.coverage) * len as f64).round() as usize,
        };
        let hit = rng.random::<f64>() < s.hit_probability.get(modality);
        let score = if hit {
            rng.random_range(0.55..1.0)
        } else {
            rng.random_range(0.05..0.45)
        };

        let w = uniform(&mut rng, s.box_size);
        let h = uniform(&mut rng, s.box_size);
        let x0 = rng.random_range(0.0..(0.5 - w).max(1e-9));
        let y0 = rng.random_range(0.0..(1.0 - h).max(1e-9));
        let gt = rect(x0, y0, w, h);
        // hits sit on the polyp; misses are displaced into the right half
        let det = if hit {
            rect(x0 + 0.05 * w, y0 + 0.05 * h, w, h)
        } else {
            rect(x0 + 0.5, y0, w, h)
        };
        let mut visible = Vec::with_capacity(len);
        for (j, f) in (start..start + len).enumerate() {
            visible.push((f as u32, gt));
            polyps_at[f].insert(polyp_id.clone());
            boxes[f].push(ScoredBox { rect: det, score: round4(score) });
            match modality {
                Some(Modality::Nbi) if j < flagged => nbi[f] = true,
                Some(Modality::Ce) if j < flagged => ce[f] = true,
                _ => {}
            }
        }
        let guard_lo = start.saturating_sub(s.guard_frames);
        let guard_hi = (start + len + s.guard_frames).min(n_frames);
        busy[guard_lo..guard_hi].iter_mut().for_each(|b| *b = true);
        tracks.push(PolypTrack {
            polyp_id: polyp_id.clone(),
            video_id: video_id.clone(),
            visible_frames: visible,
        });
        hits.push((polyp_id, hit, modality));
    }

    let lambda = s.fa_rate_per_min * n_frames as f64 / (s.fps * 60.0);
    let wanted = if lambda > 0.0 {
        Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    let mut fa_events = 0;
    for _ in 0..wanted {
        let len = uniform_usize(&mut rng, s.fa_run_frames);
        let mut placed = false;
        for _ in 0..10_000 {
            if inside < len {
                break;
            }
            let start = head + rng.random_range(0..=inside - len);
            let lo = start.saturating_sub(s.guard_frames);
            let hi = (start + len + s.guard_frames).min(n_frames);
            if busy[lo..hi].iter().any(|b| *b) {
                continue;
            }
            let w = uniform(&mut rng, s.box_size);
            let h = uniform(&mut rng, s.box_size);
            let x0 = rng.random_range(0.5..(1.0 - w));
            let y0 = rng.random_range(0.0..(1.0 - h).max(1e-9));
            let r = rect(x0, y0, w, h);
            let score = round4(rng.random_range(0.55..1.0));
            for b in &mut boxes[start..start + len] {
                b.push(ScoredBox { rect: r, score });
            }
            busy[start..start + len].iter_mut().for_each(|b| *b = true);
            placed = true;
            break;
        }
        if placed {
            fa_events += 1;
        } else {
            log::warn!("{video_id}: could not place a false-alarm run");
        }
    }

    let mut pixel_frames = Vec::new();
    let frames = (0..n_frames)
        .map(|f| {
            let key = FrameKey::new(video_id.clone(), f as u32);
            let on_track = !polyps_at[f].is_empty();
            let ce_flag = if s.ce_from_pixels && on_track {
                pixel_frames.push((key.clone(), ce[f]));
                None
            } else {
                Some(ce[f])
            };
            FrameMeta {
                key,
                nbi: nbi[f],
                ce: ce_flag,
                inside_body: f >= head && f < head + inside,
                polyp_ids: std::mem::take(&mut polyps_at[f]),
            }
        })
        .collect();
    let detections = boxes
        .into_iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(f, b)| (FrameKey::new(video_id.clone(), f as u32), b))
        .collect();

    VideoParts {
        record,
        frames,
        detections,
        tracks,
        hits,
        fa_events,
        pixel_frames,
    }
}

/// Generates a validated bundle; videos are generated in parallel, each
/// from its own stream.
pub fn gen_detection_bundle(scenario: &DetectorScenario) -> Result<DetectorOutput, SynthError> {
    scenario.validate()?;
    let videos: Vec<VideoParts> = (0..scenario.n_videos)
        .into_par_iter()
        .map(|vi| gen_video(scenario, vi))
        .collect();

    let mut parts = BundleParts::default();
    let mut truth = PlantedTruth {
        hits: BTreeMap::new(),
        polyp_modality: BTreeMap::new(),
        fa_events: 0,
        minutes: 0.0,
    };
    let mut pixel_frames = BTreeMap::new();
    for v in videos {
        truth.minutes += v.record.duration_minutes();
        truth.fa_events += v.fa_events;
        for (id, hit, m) in v.hits {
            truth.hits.insert(id.clone(), hit);
            truth.polyp_modality.insert(id, m);
        }
        pixel_frames.extend(v.pixel_frames);
        parts.videos.push(v.record);
        parts.frames.extend(v.frames);
        parts.detections.extend(v.detections);
        parts.tracks.extend(v.tracks);
    }
    Ok(DetectorOutput {
        bundle: validate_bundle(parts)?,
        truth,
        pixel_frames,
    })
}

/// 8x8 two-tone frame: mucosa pink, with a dye-blue lower half when `ce`.
pub fn render_frame(ce: bool) -> Frame {
    let to_u8 = |c: [f64; 3]| c.map(|v| (v * 255.0).round() as u8);
    let pink = to_u8(hsv_to_rgb(5.0, 0.45, 0.85));
    let blue = to_u8(hsv_to_rgb(230.0, 0.8, 0.7));
    let mut f = Frame::filled(8, 8, pink);
    if ce {
        for y in 4..8 {
            for x in 0..8 {
                f.set_pixel(x, y, blue);
            }
        }
    }
    f
}

/// Input for the `synth` command: either or both scenario kinds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthScenario {
    #[serde(default)]
    pub shift: Option<ShiftScenario>,
    #[serde(default)]
    pub detector: Option<DetectorScenario>,
}

impl SynthScenario {
    pub fn from_json(s: &str) -> Result<Self, SynthError> {
        serde_json::from_str(s).map_err(|e| SynthError::InvalidScenario(e.to_string()))
    }

    /// Fills unset scenario seeds with `seed`.
    pub fn with_default_seed(mut self, seed: u64) -> Self {
        if let Some(s) = &mut self.shift {
            s.seed.get_or_insert(seed);
        }
        if let Some(d) = &mut self.detector {
            d.seed.get_or_insert(seed);
        }
        self
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| IngestError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| {
        IngestError::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

#[derive(Debug, Serialize)]
struct TruthFile<'a> {
    detector: Option<DetectorTruth<'a>>,
    shift: Option<Vec<PairTruth>>,
}

#[derive(Debug, Serialize)]
struct DetectorTruth<'a> {
    tpr: f64,
    fapm: f64,
    fa_events: usize,
    minutes: f64,
    polyps: &'a BTreeMap<String, bool>,
}

#[derive(Debug, Serialize)]
struct PairTruth {
    a: String,
    b: String,
    mace: f64,
}

/// Writes the artifact tree:
///
/// * `bundle/`: JSONL streams, plus `bundle/frames/<video>/<idx>.ppm` for
///   frames whose CE flag is left to pixels
/// * `embeddings/<tag>.bin` and `<tag>.keys.jsonl` per shift group
/// * `truth.json`: planted values
pub fn write_synth_tree(scenario: &SynthScenario, out: &Path) -> Result<(), SynthError> {
    if scenario.shift.is_none() && scenario.detector.is_none() {
        return invalid("scenario has neither a shift nor a detector section");
    }
    let mut truth = TruthFile {
        detector: None,
        shift: None,
    };

    let det = scenario.detector.as_ref().map(gen_detection_bundle).transpose()?;
    if let Some(det) = &det {
        let dir = out.join("bundle");
        ingest::write_bundle_dir(&det.bundle, &dir)?;
        for (k, ce) in &det.pixel_frames {
            let p = dir
                .join("frames")
                .join(&k.video_id)
                .join(format!("{}.ppm", k.frame_idx));
            write(&p, &ingest::write_ppm(&render_frame(*ce)))?;
        }
        truth.detector = Some(DetectorTruth {
            tpr: det.truth.tpr(),
            fapm: det.truth.fapm(),
            fa_events: det.truth.fa_events,
            minutes: det.truth.minutes,
            polyps: &det.truth.hits,
        });
    }

    if let Some(shift) = &scenario.shift {
        let sets = gen_embeddings(shift)?;
        for (tag, set) in &sets {
            let dir = out.join("embeddings");
            write(&dir.join(format!("{tag}.bin")), &ingest::write_embeddings(set))?;
            write(&dir.join(format!("{tag}.keys.jsonl")), &ingest::write_embedding_keys(set.keys()))?;
        }
        let mut pairs = Vec::new();
        for (i, a) in shift.groups.iter().enumerate() {
            for b in &shift.groups[i + 1..] {
                if a.d() == b.d() {
                    pairs.push(PairTruth {
                        a: a.tag.clone(),
                        b: b.tag.clone(),
                        mace: shift.closed_form(&a.tag, &b.tag)?,
                    });
                }
            }
        }
        truth.shift = Some(pairs);
    }

    let mut json = serde_json::to_vec_pretty(&truth).expect("truth serializes");
    json.push(b'\n');
    write(&out.join("truth.json"), &json)
}
