//! Detection evaluation: score thresholding, temporal majority filtering,
//! polyp matching, TPR / FAPM operating points and curves, and bootstrapped
//! curve comparisons.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{DatasetBundle, PolypTrack, Rect, ScoredBox, VideoView};
use crate::stats::{self, BootstrapConfig, StatsError, TestResult};

pub const DEFAULT_WINDOW: usize = 7;
pub const DEFAULT_IOU: f64 = 0.2;
pub const DEFAULT_THRESHOLD_STEPS: usize = 50;
pub const DEFAULT_FAPM_POINTS: [f64; 2] = [0.5, 1.0];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("not estimable: {0}")]
    NotEstimable(String),
    #[error("selected videos have zero total duration")]
    ZeroDuration,
    #[error("curve has no points")]
    EmptyCurve,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown video {0}")]
    UnknownVideo(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Temporal filter: a frame is positive when at least `votes` of the
/// `window` frames centred on it pass `score_threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub window: usize,
    pub votes: usize,
    pub score_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            votes: DEFAULT_WINDOW / 2 + 1,
            score_threshold: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn new(window: usize, votes: usize, score_threshold: f64) -> Result<Self, EvalError> {
        let c = Self {
            window,
            votes,
            score_threshold,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(EvalError::InvalidConfig(format!(
                "window {} must be odd and >= 1",
                self.window
            )));
        }
        if self.votes == 0 || self.votes > self.window {
            return Err(EvalError::InvalidConfig(format!(
                "votes {} must lie in [1, {}]",
                self.votes, self.window
            )));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(EvalError::InvalidConfig(format!(
                "score threshold {} outside [0,1]",
                self.score_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU,
        }
    }
}

impl MatchConfig {
    pub fn new(iou_threshold: f64) -> Result<Self, EvalError> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(EvalError::InvalidConfig(format!(
                "iou threshold {iou_threshold} outside (0,1]"
            )));
        }
        Ok(Self { iou_threshold })
    }
}

/// Every vote count for `window` crossed with `steps` evenly spaced score
/// thresholds `0, 1/steps, ..., (steps-1)/steps`.
pub fn default_sweep(window: usize, steps: usize) -> Vec<FilterConfig> {
    let mut out = Vec::with_capacity(window * steps);
    for votes in 1..=window {
        for i in 0..steps {
            out.push(FilterConfig {
                window,
                votes,
                score_threshold: i as f64 / steps as f64,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binarized {
    pub positive: Vec<bool>,
    pub retained: Vec<Vec<ScoredBox>>,
}

/// Keeps boxes scoring at least `threshold`; frames outside the body are
/// forced negative.
pub fn binarize_frames(dets: &[Vec<ScoredBox>], inside: &[bool], threshold: f64) -> Binarized {
    let retained: Vec<Vec<ScoredBox>> = dets
        .iter()
        .enumerate()
        .map(|(i, boxes)| {
            if inside.get(i).copied().unwrap_or(true) {
                boxes
                    .iter()
                    .filter(|b| b.score >= threshold)
                    .copied()
                    .collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    Binarized {
        positive: retained.iter().map(|r| !r.is_empty()).collect(),
        retained,
    }
}

/// Centred vote filter with zero padding at the stream ends.
pub fn median_filter(stream: &[bool], cfg: &FilterConfig) -> Vec<bool> {
    let n = stream.len();
    let half = cfg.window / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0usize);
    for &b in stream {
        prefix.push(prefix.last().unwrap() + b as usize);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            prefix[hi] - prefix[lo] >= cfg.votes
        })
        .collect()
}

/// Filtered alarm stream with the boxes each alarm frame carries.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredStream {
    pub positive: Vec<bool>,
    pub boxes: Vec<Vec<Rect>>,
}

/// Threshold, filter, and attach boxes to filtered alarms. A filtered-positive
/// frame keeps its own retained boxes; one that was filled in by its
/// neighbours carries the boxes of the nearest raw-positive frame in its
/// window (earlier frame on ties).
pub fn filter_stream(dets: &[Vec<ScoredBox>], inside: &[bool], cfg: &FilterConfig) -> FilteredStream {
    let bin = binarize_frames(dets, inside, cfg.score_threshold);
    let positive = median_filter(&bin.positive, cfg);
    let n = positive.len();
    let half = cfg.window / 2;
    let rects = |i: usize| -> Vec<Rect> { bin.retained[i].iter().map(|b| b.rect).collect() };
    let boxes = (0..n)
        .map(|i| {
            if !positive[i] {
                return Vec::new();
            }
            if bin.positive[i] {
                return rects(i);
            }
            for off in 1..=half {
                if i >= off && bin.positive[i - off] {
                    return rects(i - off);
                }
                if i + off < n && bin.positive[i + off] {
                    return rects(i + off);
                }
            }
            Vec::new()
        })
        .collect();
    FilteredStream { positive, boxes }
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Whether any filtered box on any visible frame of the track overlaps the
/// ground truth at the IoU threshold.
pub fn polyp_detected(track: &PolypTrack, filtered: &[Vec<Rect>], m: &MatchConfig) -> bool {
    track.visible_frames.iter().any(|(f, gt)| {
        filtered
            .get(*f as usize)
            .is_some_and(|boxes| boxes.iter().any(|b| iou(b, gt) >= m.iou_threshold))
    })
}

/// Number of maximal runs of consecutive false-positive frames, where a
/// false-positive frame has boxes and none of them matches any ground truth.
pub fn false_alarm_events(filtered: &[Vec<Rect>], gt: &[Vec<Rect>], m: &MatchConfig) -> usize {
    let mut events = 0;
    let mut in_run = false;
    for (i, boxes) in filtered.iter().enumerate() {
        let fp = !boxes.is_empty()
            && !boxes.iter().any(|b| {
                gt.get(i)
                    .is_some_and(|g| g.iter().any(|t| iou(b, t) >= m.iou_threshold))
            });
        if fp && !in_run {
            events += 1;
        }
        in_run = fp;
    }
    events
}

/// Per-video evaluation under one filter configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoResult {
    /// One flag per track of the video, in track order.
    pub detected: Vec<bool>,
    pub fa_events: usize,
    pub minutes: f64,
}

pub fn evaluate_video(view: &VideoView<'_>, fcfg: &FilterConfig, mcfg: &MatchConfig) -> VideoResult {
    let filtered = filter_stream(&view.boxes, &view.inside, fcfg);
    let gt = view.gt_per_frame();
    VideoResult {
        detected: view
            .tracks
            .iter()
            .map(|t| polyp_detected(t, &filtered.boxes, mcfg))
            .collect(),
        fa_events: false_alarm_events(&filtered.boxes, &gt, mcfg),
        minutes: view.record.duration_minutes(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fapm: f64,
    pub tpr: f64,
}

/// TPR and FAPM over a multiset of videos (a video listed twice counts
/// twice).
pub fn dataset_tpr_fapm(
    bundle: &DatasetBundle,
    videos: &[String],
    fcfg: &FilterConfig,
    mcfg: &MatchConfig,
) -> Result<CurvePoint, EvalError> {
    if videos.is_empty() {
        return Err(EvalError::NotEstimable("empty video subset".into()));
    }
    fcfg.validate()?;
    let (mut hits, mut polyps, mut fas, mut minutes) = (0usize, 0usize, 0usize, 0.0f64);
    for id in videos {
        let view = bundle
            .video_view(id)
            .ok_or_else(|| EvalError::UnknownVideo(id.clone()))?;
        let r = evaluate_video(&view, fcfg, mcfg);
        hits += r.detected.iter().filter(|d| **d).count();
        polyps += r.detected.len();
        fas += r.fa_events;
        minutes += r.minutes;
    }
    ratios(hits, polyps, fas, minutes)
}

fn ratios(hits: usize, polyps: usize, fas: usize, minutes: f64) -> Result<CurvePoint, EvalError> {
    if polyps == 0 {
        return Err(EvalError::NotEstimable("zero polyps in subset".into()));
    }
    if minutes <= 0.0 {
        return Err(EvalError::ZeroDuration);
    }
    Ok(CurvePoint {
        fapm: fas as f64 / minutes,
        tpr: hits as f64 / polyps as f64,
    })
}

/// Pareto upper envelope of (FAPM, TPR) points: FAPM strictly increasing,
/// TPR nondecreasing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Clamp {
    Below,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interpolated {
    pub tpr: f64,
    pub clamped: Option<Clamp>,
}

impl Curve {
    /// Drops every point whose TPR does not beat all points at smaller or
    /// equal FAPM.
    pub fn envelope(points: &[CurvePoint]) -> Curve {
        let mut sorted: Vec<CurvePoint> = points.to_vec();
        sorted.sort_by(|a, b| a.fapm.total_cmp(&b.fapm).then(b.tpr.total_cmp(&a.tpr)));
        let mut out: Vec<CurvePoint> = Vec::new();
        for p in sorted {
            match out.last() {
                Some(last) if p.tpr <= last.tpr => {}
                _ => out.push(p),
            }
        }
        Curve { points: out }
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Linear interpolation between bracketing points; outside the FAPM
    /// range the nearest end point is returned and flagged.
    pub fn tpr_at_fapm(&self, target: f64) -> Result<Interpolated, EvalError> {
        let pts = &self.points;
        let (first, last) = match (pts.first(), pts.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(EvalError::EmptyCurve),
        };
        if target.is_nan() {
            return Err(EvalError::InvalidConfig("target FAPM is NaN".into()));
        }
        if target < first.fapm {
            return Ok(Interpolated {
                tpr: first.tpr,
                clamped: Some(Clamp::Below),
            });
        }
        if target > last.fapm {
            return Ok(Interpolated {
                tpr: last.tpr,
                clamped: Some(Clamp::Above),
            });
        }
        let j = pts.partition_point(|p| p.fapm < target);
        let right = pts[j];
        if right.fapm == target || j == 0 {
            return Ok(Interpolated {
                tpr: right.tpr,
                clamped: None,
            });
        }
        let left = pts[j - 1];
        let w = (target - left.fapm) / (right.fapm - left.fapm);
        Ok(Interpolated {
            tpr: left.tpr + w * (right.tpr - left.tpr),
            clamped: None,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fapm,tpr\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.fapm, p.tpr));
        }
        s
    }
}

pub fn tpr_at_fapm(curve: &Curve, target: f64) -> Result<Interpolated, EvalError> {
    curve.tpr_at_fapm(target)
}

pub fn build_curve(
    bundle: &DatasetBundle,
    videos: &[String],
    sweep: &[FilterConfig],
    mcfg: &MatchConfig,
) -> Result<Curve, EvalError> {
    if sweep.is_empty() {
        return Err(EvalError::InvalidConfig("empty filter sweep".into()));
    }
    let points = sweep
        .iter()
        .map(|f| dataset_tpr_fapm(bundle, videos, f, mcfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Curve::envelope(&points))
}

#[derive(Debug, Clone)]
struct VideoOutcomes {
    video_id: String,
    minutes: f64,
    polyp_ids: Vec<String>,
    /// `[config][track]`
    detected: Vec<Vec<bool>>,
    /// `[config]`
    hits: Vec<usize>,
    /// `[config]`
    fa_events: Vec<usize>,
}

/// Every video evaluated under every configuration of a sweep, so that
/// bootstrap resamples only have to re-aggregate counts.
#[derive(Debug, Clone)]
pub struct EvalTable {
    configs: Vec<FilterConfig>,
    videos: Vec<VideoOutcomes>,
}

impl EvalTable {
    pub fn build(
        bundle: &DatasetBundle,
        sweep: &[FilterConfig],
        mcfg: &MatchConfig,
    ) -> Result<Self, EvalError> {
        if sweep.is_empty() {
            return Err(EvalError::InvalidConfig("empty filter sweep".into()));
        }
        for c in sweep {
            c.validate()?;
        }
        let ids = bundle.video_ids();
        let videos = ids
            .par_iter()
            .map(|id| {
                let view = bundle.video_view(id).expect("bundle video resolves");
                let mut detected = Vec::with_capacity(sweep.len());
                let mut fa_events = Vec::with_capacity(sweep.len());
                for c in sweep {
                    let r = evaluate_video(&view, c, mcfg);
                    detected.push(r.detected);
                    fa_events.push(r.fa_events);
                }
                VideoOutcomes {
                    video_id: id.clone(),
                    minutes: view.record.duration_minutes(),
                    polyp_ids: view.tracks.iter().map(|t| t.polyp_id.clone()).collect(),
                    hits: detected.iter().map(|d| d.iter().filter(|h| **h).count()).collect(),
                    detected,
                    fa_events,
                }
            })
            .collect();
        Ok(Self {
            configs: sweep.to_vec(),
            videos,
        })
    }

    pub fn n_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn configs(&self) -> &[FilterConfig] {
        &self.configs
    }

    pub fn video_ids(&self) -> Vec<&str> {
        self.videos.iter().map(|v| v.video_id.as_str()).collect()
    }

    fn includes(v: &VideoOutcomes, cohort: Option<&BTreeSet<String>>) -> bool {
        cohort.is_none_or(|c| v.polyp_ids.iter().any(|p| c.contains(p)))
    }

    /// Operating point of configuration `config` over a multiset of video
    /// indices. With a cohort, TPR counts only cohort polyps and videos
    /// without any cohort polyp are left out entirely.
    pub fn point(
        &self,
        draw: &[usize],
        config: usize,
        cohort: Option<&BTreeSet<String>>,
    ) -> Result<CurvePoint, EvalError> {
        let (mut hits, mut polyps, mut fas, mut minutes) = (0usize, 0usize, 0usize, 0.0f64);
        for &vi in draw {
            let v = &self.videos[vi];
            if !Self::includes(v, cohort) {
                continue;
            }
            match cohort {
                None => {
                    polyps += v.polyp_ids.len();
                    hits += v.hits[config];
                }
                Some(c) => {
                    for (pid, det) in v.polyp_ids.iter().zip(&v.detected[config]) {
                        if c.contains(pid) {
                            polyps += 1;
                            hits += *det as usize;
                        }
                    }
                }
            }
            fas += v.fa_events[config];
            minutes += v.minutes;
        }
        ratios(hits, polyps, fas, minutes)
    }

    pub fn curve(
        &self,
        draw: &[usize],
        cohort: Option<&BTreeSet<String>>,
    ) -> Result<Curve, EvalError> {
        let points = (0..self.configs.len())
            .map(|c| self.point(draw, c, cohort))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Curve::envelope(&points))
    }

    pub fn all_videos(&self) -> Vec<usize> {
        (0..self.videos.len()).collect()
    }

    /// Indices of videos holding at least one cohort polyp.
    pub fn cohort_videos(&self, cohort: &BTreeSet<String>) -> Vec<usize> {
        (0..self.videos.len())
            .filter(|&i| Self::includes(&self.videos[i], Some(cohort)))
            .collect()
    }
}

fn tprs_at(curve: &Curve, fapm_points: &[f64]) -> Result<Vec<f64>, EvalError> {
    fapm_points
        .iter()
        .map(|&f| curve.tpr_at_fapm(f).map(|i| i.tpr))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMode {
    Superiority,
    NonInferiority,
}

/// Bootstrap distributions of TPR differences at fixed FAPM points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaBootstrap {
    pub fapm_points: Vec<f64>,
    /// Observed TPR of the reference and the candidate at each point.
    pub observed_reference: Vec<f64>,
    pub observed_candidate: Vec<f64>,
    /// `deltas[k]` holds candidate minus reference at `fapm_points[k]`, one
    /// value per estimable resample.
    pub deltas: Vec<Vec<f64>>,
    /// Candidate TPR per resample at each point (for confidence intervals).
    pub candidate_samples: Vec<Vec<f64>>,
    pub dropped: usize,
}

impl DeltaBootstrap {
    fn from_rows(
        fapm_points: &[f64],
        observed_reference: Vec<f64>,
        observed_candidate: Vec<f64>,
        rows: Vec<(Vec<f64>, Vec<f64>)>,
        dropped: usize,
    ) -> Self {
        let k = fapm_points.len();
        let mut deltas = vec![Vec::with_capacity(rows.len()); k];
        let mut candidate_samples = vec![Vec::with_capacity(rows.len()); k];
        for (d, c) in rows {
            for j in 0..k {
                deltas[j].push(d[j]);
                candidate_samples[j].push(c[j]);
            }
        }
        Self {
            fapm_points: fapm_points.to_vec(),
            observed_reference,
            observed_candidate,
            deltas,
            candidate_samples,
            dropped,
        }
    }

    pub fn test(
        &self,
        mode: CompareMode,
        margin: f64,
        level: f64,
    ) -> Result<Vec<TestResult>, EvalError> {
        self.deltas
            .iter()
            .map(|d| match mode {
                CompareMode::Superiority => stats::superiority_one_sided(d, level),
                CompareMode::NonInferiority => stats::non_inferiority(d, margin, level),
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(EvalError::from)
    }
}

fn check_points(fapm_points: &[f64]) -> Result<(), EvalError> {
    if fapm_points.is_empty() || fapm_points.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(EvalError::InvalidConfig(
            "FAPM operating points must be nonempty, finite and >= 0".into(),
        ));
    }
    Ok(())
}

/// Resamples the videos of both datasets independently, rebuilds both curves
/// per resample and records the candidate-minus-reference TPR difference at
/// every operating point.
pub fn bootstrap_tpr_deltas(
    reference: &EvalTable,
    candidate: &EvalTable,
    fapm_points: &[f64],
    cfg: &BootstrapConfig,
) -> Result<DeltaBootstrap, EvalError> {
    check_points(fapm_points)?;
    let obs_ref = tprs_at(&reference.curve(&reference.all_videos(), None)?, fapm_points)?;
    let obs_cand = tprs_at(&candidate.curve(&candidate.all_videos(), None)?, fapm_points)?;
    let cand_cfg = cfg.substream(1);
    let (rows, dropped) = stats::bootstrap_map(cfg, |i| {
        let ra = stats::resample_units(reference.n_videos(), cfg, i);
        let rb = stats::resample_units(candidate.n_videos(), &cand_cfg, i);
        let ta = tprs_at(&reference.curve(&ra, None).ok()?, fapm_points).ok()?;
        let tb = tprs_at(&candidate.curve(&rb, None).ok()?, fapm_points).ok()?;
        let d = tb.iter().zip(&ta).map(|(b, a)| b - a).collect();
        Some((d, tb))
    })?;
    Ok(DeltaBootstrap::from_rows(fapm_points, obs_ref, obs_cand, rows, dropped))
}

/// Compares two datasets' curves at the FAPM operating points.
pub fn compare_datasets(
    reference: &EvalTable,
    candidate: &EvalTable,
    fapm_points: &[f64],
    cfg: &BootstrapConfig,
    mode: CompareMode,
    margin: f64,
    level: f64,
) -> Result<Vec<TestResult>, EvalError> {
    bootstrap_tpr_deltas(reference, candidate, fapm_points, cfg)?.test(mode, margin, level)
}

/// Paired comparison within one dataset: cohort TPR minus all-polyp TPR,
/// both computed on the same video resample. The cohort curve only sees
/// videos that hold a cohort polyp.
pub fn bootstrap_cohort_deltas(
    table: &EvalTable,
    cohort: &BTreeSet<String>,
    fapm_points: &[f64],
    cfg: &BootstrapConfig,
) -> Result<DeltaBootstrap, EvalError> {
    check_points(fapm_points)?;
    let all = table.all_videos();
    let obs_ref = tprs_at(&table.curve(&all, None)?, fapm_points)?;
    let obs_cand = tprs_at(&table.curve(&all, Some(cohort))?, fapm_points)?;
    let (rows, dropped) = stats::bootstrap_map(cfg, |i| {
        let draw = stats::resample_units(table.n_videos(), cfg, i);
        let ta = tprs_at(&table.curve(&draw, None).ok()?, fapm_points).ok()?;
        let tb = tprs_at(&table.curve(&draw, Some(cohort)).ok()?, fapm_points).ok()?;
        let d = tb.iter().zip(&ta).map(|(b, a)| b - a).collect();
        Some((d, tb))
    })?;
    Ok(DeltaBootstrap::from_rows(fapm_points, obs_ref, obs_cand, rows, dropped))
}
