//! NBI / chromoendoscopy handling: pixel-range CE classification, per-frame
//! modality flags, lesion visibility fractions, cohorts and histograms.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, DatasetBundle, Frame, FrameKey, IngestError, PolypTrack};

#[derive(Debug, Error)]
pub enum ModalityError {
    #[error("region of interest contains no pixels")]
    EmptyRoi,
    #[error("invalid pixel rule: {0}")]
    InvalidRule(String),
    #[error("invalid histogram bins: {0}")]
    InvalidBins(String),
    #[error("threshold {0} outside [0,1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Nbi,
    Ce,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Nbi => "nbi",
            Modality::Ce => "ce",
        })
    }
}

/// Hexcone RGB -> HSV. Channels in `[0,1]`; hue in degrees `[0,360)`, gray
/// pixels get hue 0.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (if h >= 360.0 { h - 360.0 } else { h }, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Hsv,
}

/// Inclusive per-channel bounds plus the pixel fraction needed to call a
/// frame CE. In HSV the first channel is hue in degrees and may wrap
/// (`min > max`); every other channel lives in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PixelRangeRule {
    pub space: ColorSpace,
    pub channels: [(f64, f64); 3],
    pub min_fraction: f64,
}

impl Default for PixelRangeRule {
    /// Indigo-carmine blue.
    fn default() -> Self {
        Self {
            space: ColorSpace::Hsv,
            channels: [(200.0, 260.0), (0.3, 1.0), (0.15, 1.0)],
            min_fraction: 0.05,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleConfig {
    space: ColorSpace,
    hue: Option<(f64, f64)>,
    sat_min: Option<f64>,
    sat_max: Option<f64>,
    val_min: Option<f64>,
    val_max: Option<f64>,
    r: Option<(f64, f64)>,
    g: Option<(f64, f64)>,
    b: Option<(f64, f64)>,
    min_fraction: f64,
}

impl PixelRangeRule {
    pub fn from_json(s: &str) -> Result<Self, ModalityError> {
        let c: RuleConfig =
            serde_json::from_str(s).map_err(|e| ModalityError::InvalidRule(e.to_string()))?;
        let rule = match c.space {
            ColorSpace::Hsv => Self {
                space: ColorSpace::Hsv,
                channels: [
                    c.hue.unwrap_or((0.0, 360.0)),
                    (c.sat_min.unwrap_or(0.0), c.sat_max.unwrap_or(1.0)),
                    (c.val_min.unwrap_or(0.0), c.val_max.unwrap_or(1.0)),
                ],
                min_fraction: c.min_fraction,
            },
            ColorSpace::Rgb => Self {
                space: ColorSpace::Rgb,
                channels: [
                    c.r.unwrap_or((0.0, 1.0)),
                    c.g.unwrap_or((0.0, 1.0)),
                    c.b.unwrap_or((0.0, 1.0)),
                ],
                min_fraction: c.min_fraction,
            },
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn to_json(&self) -> String {
        let [a, b, c] = self.channels;
        let v = match self.space {
            ColorSpace::Hsv => serde_json::json!({
                "space": "hsv", "hue": [a.0, a.1], "sat_min": b.0, "sat_max": b.1,
                "val_min": c.0, "val_max": c.1, "min_fraction": self.min_fraction,
            }),
            ColorSpace::Rgb => serde_json::json!({
                "space": "rgb", "r": [a.0, a.1], "g": [b.0, b.1], "b": [c.0, c.1],
                "min_fraction": self.min_fraction,
            }),
        };
        v.to_string()
    }

    pub fn validate(&self) -> Result<(), ModalityError> {
        if !(self.min_fraction > 0.0 && self.min_fraction <= 1.0) {
            return Err(ModalityError::InvalidRule(format!(
                "min_fraction {} outside (0,1]",
                self.min_fraction
            )));
        }
        for (i, (lo, hi)) in self.channels.iter().enumerate() {
            let hue = self.space == ColorSpace::Hsv && i == 0;
            let top = if hue { 360.0 } else { 1.0 };
            if !(lo.is_finite() && hi.is_finite() && *lo >= 0.0 && *hi <= top && *lo <= top) {
                return Err(ModalityError::InvalidRule(format!(
                    "channel {i} bounds ({lo}, {hi}) outside [0,{top}]"
                )));
            }
            if !hue && lo > hi {
                return Err(ModalityError::InvalidRule(format!(
                    "channel {i} min {lo} > max {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, rgb: [u8; 3]) -> bool {
        let unit = rgb.map(|c| c as f64 / 255.0);
        let vals = match self.space {
            ColorSpace::Rgb => unit,
            ColorSpace::Hsv => {
                let (h, s, v) = rgb_to_hsv(unit);
                [h, s, v]
            }
        };
        vals.iter().zip(&self.channels).enumerate().all(|(i, (v, (lo, hi)))| {
            if self.space == ColorSpace::Hsv && i == 0 && lo > hi {
                *v >= *lo || *v <= *hi
            } else {
                *v >= *lo && *v <= *hi
            }
        })
    }
}

/// Normalized crop rectangle; the default covers the whole frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Default for Roi {
    fn default() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }
}

impl Roi {
    fn pixel_bounds(&self, frame: &Frame) -> (usize, usize, usize, usize) {
        let px = |f: f64, n: usize| ((f.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        (
            px(self.x0, frame.width),
            px(self.y0, frame.height),
            px(self.x1, frame.width),
            px(self.y1, frame.height),
        )
    }
}

/// Fraction of ROI pixels inside the rule's range.
pub fn in_range_fraction(frame: &Frame, rule: &PixelRangeRule, roi: &Roi) -> Result<f64, ModalityError> {
    let (x0, y0, x1, y1) = roi.pixel_bounds(frame);
    if x1 <= x0 || y1 <= y0 {
        return Err(ModalityError::EmptyRoi);
    }
    let mut hits = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            hits += rule.contains(frame.pixel(x, y)) as usize;
        }
    }
    Ok(hits as f64 / ((x1 - x0) * (y1 - y0)) as f64)
}

pub fn ce_classify_frame(frame: &Frame, rule: &PixelRangeRule, roi: &Roi) -> Result<bool, ModalityError> {
    Ok(in_range_fraction(frame, rule, roi)? >= rule.min_fraction)
}

/// Classifies every frame whose CE flag is still unknown from
/// `<frames_root>/<video_id>/<frame_idx>.ppm`.
pub fn resolve_ce_flags(
    bundle: &DatasetBundle,
    frames_root: &Path,
    rule: &PixelRangeRule,
    roi: &Roi,
) -> Result<BTreeMap<FrameKey, bool>, ModalityError> {
    let pending: Vec<&FrameKey> = bundle
        .frames()
        .values()
        .filter(|m| m.ce.is_none())
        .map(|m| &m.key)
        .collect();
    pending
        .par_iter()
        .map(|k| {
            let path = frames_root
                .join(&k.video_id)
                .join(format!("{}.ppm", k.frame_idx));
            let frame = ingest::read_ppm(&path)?;
            Ok(((*k).clone(), ce_classify_frame(&frame, rule, roi)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ModalityFlags {
    pub nbi: bool,
    pub ce: bool,
}

impl ModalityFlags {
    pub fn get(&self, which: Modality) -> bool {
        match which {
            Modality::Nbi => self.nbi,
            Modality::Ce => self.ce,
        }
    }
}

/// Per-frame flags with per-video and per-polyp fractions derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityProfile {
    frames: BTreeMap<FrameKey, ModalityFlags>,
    /// `(nbi, ce)` fraction over inside-body frames.
    video_fractions: BTreeMap<String, (f64, f64)>,
    video_has_polyp: BTreeMap<String, bool>,
    /// `(nbi, ce)` fraction over the polyp's visible frames.
    polyp_fractions: BTreeMap<String, (f64, f64)>,
    unresolved_ce: usize,
}

/// Share of a track's visible frames flagged for `which`.
pub fn lesion_modality_fraction<F>(track: &PolypTrack, flags: F, which: Modality) -> f64
where
    F: Fn(&FrameKey) -> ModalityFlags,
{
    if track.visible_frames.is_empty() {
        return 0.0;
    }
    let flagged = track
        .visible_frames
        .iter()
        .filter(|(f, _)| flags(&FrameKey::new(track.video_id.clone(), *f)).get(which))
        .count();
    flagged as f64 / track.visible_frames.len() as f64
}

impl ModalityProfile {
    /// Frames still lacking a CE flag count as white light; see
    /// [`ModalityProfile::unresolved_ce`].
    pub fn from_bundle(bundle: &DatasetBundle) -> Self {
        let mut unresolved_ce = 0;
        let frames: BTreeMap<FrameKey, ModalityFlags> = bundle
            .frames()
            .iter()
            .map(|(k, m)| {
                unresolved_ce += m.ce.is_none() as usize;
                (
                    k.clone(),
                    ModalityFlags {
                        nbi: m.nbi,
                        ce: m.ce.unwrap_or(false),
                    },
                )
            })
            .collect();
        if unresolved_ce > 0 {
            log::warn!("{unresolved_ce} frames have no CE flag; treating them as white light");
        }

        let mut video_fractions = BTreeMap::new();
        let mut video_has_polyp = BTreeMap::new();
        for id in bundle.videos().keys() {
            let (mut inside, mut nbi, mut ce) = (0usize, 0usize, 0usize);
            for m in bundle.frames_of_video(id).filter(|m| m.inside_body) {
                let f = frames[&m.key];
                inside += 1;
                nbi += f.nbi as usize;
                ce += f.ce as usize;
            }
            let frac = |c: usize| if inside == 0 { 0.0 } else { c as f64 / inside as f64 };
            video_fractions.insert(id.clone(), (frac(nbi), frac(ce)));
            video_has_polyp.insert(id.clone(), bundle.tracks_in_video(id).next().is_some());
        }

        let lookup = |k: &FrameKey| frames.get(k).copied().unwrap_or_default();
        let polyp_fractions = bundle
            .tracks()
            .iter()
            .map(|(id, t)| {
                (
                    id.clone(),
                    (
                        lesion_modality_fraction(t, lookup, Modality::Nbi),
                        lesion_modality_fraction(t, lookup, Modality::Ce),
                    ),
                )
            })
            .collect();

        Self {
            frames,
            video_fractions,
            video_has_polyp,
            polyp_fractions,
            unresolved_ce,
        }
    }

    pub fn flags(&self, key: &FrameKey) -> ModalityFlags {
        self.frames.get(key).copied().unwrap_or_default()
    }

    pub fn unresolved_ce(&self) -> usize {
        self.unresolved_ce
    }

    pub fn video_fraction(&self, video_id: &str, which: Modality) -> Option<f64> {
        self.video_fractions.get(video_id).map(|&(n, c)| pick(n, c, which))
    }

    /// Polyp id -> fraction of its visible frames flagged for `which`.
    pub fn polyp_fractions(&self, which: Modality) -> BTreeMap<String, f64> {
        self.polyp_fractions
            .iter()
            .map(|(id, &(n, c))| (id.clone(), pick(n, c, which)))
            .collect()
    }

    /// Videos with at least `cut` of their inside-body frames flagged.
    pub fn videos_at_least(&self, which: Modality, cut: f64) -> usize {
        self.video_fractions
            .values()
            .filter(|&&(n, c)| pick(n, c, which) >= cut)
            .count()
    }
}

fn pick(nbi: f64, ce: f64, which: Modality) -> f64 {
    match which {
        Modality::Nbi => nbi,
        Modality::Ce => ce,
    }
}

fn check_threshold(t: f64) -> Result<(), ModalityError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(ModalityError::InvalidThreshold(t))
    }
}

/// Polyps whose visibility fraction is at least `threshold`.
pub fn cohort_by_fraction(
    fractions: &BTreeMap<String, f64>,
    threshold: f64,
) -> Result<BTreeSet<String>, ModalityError> {
    check_threshold(threshold)?;
    Ok(fractions
        .iter()
        .filter(|(_, f)| **f >= threshold)
        .map(|(id, _)| id.clone())
        .collect())
}

/// Thresholds `step, 2*step, ...` (up to 1) while the cohort keeps at least
/// `min_cohort` polyps; stops at the first smaller cohort.
pub fn fraction_sweep(
    fractions: &BTreeMap<String, f64>,
    step: f64,
    min_cohort: usize,
) -> Result<Vec<(f64, BTreeSet<String>)>, ModalityError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(ModalityError::InvalidThreshold(step));
    }
    let mut out = Vec::new();
    for k in 1.. {
        // rounded so that 3 * 0.1 compares equal to a stored 0.3
        let t = ((k as f64 * step) * 1e9).round() / 1e9;
        if t > 1.0 {
            break;
        }
        let cohort = cohort_by_fraction(fractions, t)?;
        if cohort.len() < min_cohort {
            break;
        }
        out.push((t, cohort));
    }
    Ok(out)
}

/// Counts per bin `[edges[i], edges[i+1])` (last bin closed), split by
/// whether the video holds any polyp.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub with_polyp: Vec<usize>,
    pub without_polyp: Vec<usize>,
}

impl Histogram {
    fn new(edges: &[f64]) -> Result<Self, ModalityError> {
        if edges.len() < 2 {
            return Err(ModalityError::InvalidBins("need at least two edges".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ModalityError::InvalidBins("edges must be strictly increasing".into()));
        }
        if edges[0] > 0.0 || *edges.last().unwrap() < 1.0 {
            return Err(ModalityError::InvalidBins("bins must cover [0,1]".into()));
        }
        let k = edges.len() - 1;
        Ok(Self {
            edges: edges.to_vec(),
            with_polyp: vec![0; k],
            without_polyp: vec![0; k],
        })
    }

    fn bin(&self, v: f64) -> usize {
        let k = self.edges.len() - 1;
        self.edges[1..k].partition_point(|e| *e <= v)
    }

    pub fn totals(&self) -> Vec<usize> {
        self.with_polyp
            .iter()
            .zip(&self.without_polyp)
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,with_polyp,without_polyp,total\n");
        for i in 0..self.with_polyp.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.with_polyp[i],
                self.without_polyp[i],
                self.with_polyp[i] + self.without_polyp[i]
            ));
        }
        s
    }
}

pub fn uniform_edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| i as f64 / bins as f64).collect()
}

/// Videos binned by the fraction of inside-body frames flagged for `which`.
pub fn video_modality_histogram(
    profile: &ModalityProfile,
    which: Modality,
    edges: &[f64],
) -> Result<Histogram, ModalityError> {
    let mut h = Histogram::new(edges)?;
    for (id, &(n, c)) in &profile.video_fractions {
        let b = h.bin(pick(n, c, which));
        if profile.video_has_polyp[id] {
            h.with_polyp[b] += 1;
        } else {
            h.without_polyp[b] += 1;
        }
    }
    Ok(h)
}

/// Lesions binned by visibility fraction (every lesion counts as
/// `with_polyp`).
pub fn lesion_modality_histogram(
    fractions: &BTreeMap<String, f64>,
    edges: &[f64],
) -> Result<Histogram, ModalityError> {
    let mut h = Histogram::new(edges)?;
    for f in fractions.values() {
        let b = h.bin(*f);
        h.with_polyp[b] += 1;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Rect;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hsv_examples() {
        assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0]), (0.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([0.5, 0.5, 0.5]), (0.0, 0.0, 0.5));
        // blue: max = b, (r - g)/delta + 4 = 4 -> 240 degrees
        assert_eq!(rgb_to_hsv([0.0, 0.0, 1.0]), (240.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([1.0, 0.0, 1.0]).0, 300.0);
    }

    #[test]
    fn hsv_round_trip_grid() {
        for hi in 0..36 {
            for s in [0.1, 0.5, 1.0] {
                for v in [0.2, 0.7, 1.0] {
                    let h = hi as f64 * 10.0;
                    let (h2, s2, v2) = rgb_to_hsv(hsv_to_rgb(h, s, v));
                    assert_abs_diff_eq!(h2, h, epsilon = 1e-6);
                    assert_abs_diff_eq!(s2, s, epsilon = 1e-6);
                    assert_abs_diff_eq!(v2, v, epsilon = 1e-6);
                }
            }
        }
    }

    fn blue() -> [u8; 3] {
        [20, 40, 200]
    }

    #[test]
    fn classify_counts() {
        let rule = PixelRangeRule::default();
        assert!(rule.contains(blue()));
        assert!(!rule.contains([200, 120, 110]));

        let all = Frame::filled(10, 10, blue());
        assert!(ce_classify_frame(&all, &rule, &Roi::default()).unwrap());
        let none = Frame::filled(10, 10, [200, 120, 110]);
        assert!(!ce_classify_frame(&none, &rule, &Roi::default()).unwrap());

        let mut four = none.clone();
        for x in 0..4 {
            four.set_pixel(x, 0, blue());
        }
        assert_abs_diff_eq!(in_range_fraction(&four, &rule, &Roi::default()).unwrap(), 0.04);
        assert!(!ce_classify_frame(&four, &rule, &Roi::default()).unwrap());
        let lenient = PixelRangeRule {
            min_fraction: 0.04,
            ..rule.clone()
        };
        assert!(ce_classify_frame(&four, &lenient, &Roi::default()).unwrap());

        // the ROI excludes the blue row entirely
        let crop = Roi {
            y0: 0.5,
            ..Roi::default()
        };
        assert!(!ce_classify_frame(&all.clone(), &rule, &crop).unwrap() == false);
        assert_eq!(in_range_fraction(&four, &lenient, &crop).unwrap(), 0.0);

        let empty = Roi {
            x0: 0.5,
            x1: 0.5,
            ..Roi::default()
        };
        assert!(matches!(
            ce_classify_frame(&all, &rule, &empty),
            Err(ModalityError::EmptyRoi)
        ));
    }

    #[test]
    fn rule_json() {
        let r = PixelRangeRule::from_json(
            r#"{"space":"hsv","hue":[200,260],"sat_min":0.3,"val_min":0.15,"min_fraction":0.05}"#,
        )
        .unwrap();
        assert_eq!(r, PixelRangeRule::default());
        assert_eq!(PixelRangeRule::from_json(&r.to_json()).unwrap(), r);

        let wrap = PixelRangeRule::from_json(r#"{"space":"hsv","hue":[340,20],"min_fraction":0.5}"#).unwrap();
        assert!(wrap.contains([255, 0, 0]));
        assert!(!wrap.contains([0, 255, 0]));

        let rgb = PixelRangeRule::from_json(r#"{"space":"rgb","b":[0.5,1.0],"min_fraction":1.0}"#).unwrap();
        assert!(rgb.contains(blue()));

        for bad in [
            r#"{"space":"hsv","min_fraction":0}"#,
            r#"{"space":"hsv","sat_min":0.8,"sat_max":0.2,"min_fraction":0.1}"#,
            r#"{"space":"hsv","hue":[0,400],"min_fraction":0.1}"#,
            r#"{"space":"lab","min_fraction":0.1}"#,
            r#"{"space":"hsv","min_fraction":0.1,"typo":1}"#,
        ] {
            assert!(PixelRangeRule::from_json(bad).is_err(), "{bad}");
        }
    }

    fn track(n: u32) -> PolypTrack {
        let r = Rect::new(0.1, 0.1, 0.2, 0.2).unwrap();
        PolypTrack {
            polyp_id: "p".into(),
            video_id: "v".into(),
            visible_frames: (0..n).map(|i| (i, r)).collect(),
        }
    }

    #[test]
    fn lesion_fractions() {
        let t = track(10);
        let four = |k: &FrameKey| ModalityFlags {
            nbi: k.frame_idx < 4,
            ce: false,
        };
        assert_abs_diff_eq!(lesion_modality_fraction(&t, four, Modality::Nbi), 0.4);
        assert_eq!(lesion_modality_fraction(&t, four, Modality::Ce), 0.0);
        let all = |_: &FrameKey| ModalityFlags { nbi: true, ce: true };
        assert_eq!(lesion_modality_fraction(&t, all, Modality::Ce), 1.0);
    }

    fn fractions(v: &[f64]) -> BTreeMap<String, f64> {
        v.iter()
            .enumerate()
            .map(|(i, f)| (format!("p{i:03}"), *f))
            .collect()
    }

    #[test]
    fn cohorts() {
        let f = fractions(&[0.05, 0.3, 0.7]);
        assert_eq!(cohort_by_fraction(&f, 0.0).unwrap().len(), 3);
        assert_eq!(cohort_by_fraction(&f, 0.3).unwrap().len(), 2);
        let full = fractions(&[1.0, 0.999, 1.0]);
        assert_eq!(cohort_by_fraction(&full, 1.0).unwrap().len(), 2);
        assert!(cohort_by_fraction(&f, 1.2).is_err());
    }

    #[test]
    fn sweep_stop_rule() {
        // 150 polyps >= 0.1, 120 >= 0.2, 90 >= 0.3
        let mut v = vec![0.15; 30];
        v.extend(vec![0.25; 30]);
        v.extend(vec![0.35; 90]);
        let s = fraction_sweep(&fractions(&v), 0.1, 100).unwrap();
        let ts: Vec<f64> = s.iter().map(|x| x.0).collect();
        assert_eq!(ts, vec![0.1, 0.2]);
        assert_eq!(s[0].1.len(), 150);
        assert_eq!(s[1].1.len(), 120);

        assert!(fraction_sweep(&fractions(&[0.9; 50]), 0.1, 100).unwrap().is_empty());

        // exact multiples of the step are kept
        let s = fraction_sweep(&fractions(&[0.3; 5]), 0.1, 5).unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn histogram_bins() {
        let mut h = Histogram::new(&[0.0, 0.05, 0.2, 1.0]).unwrap();
        assert_eq!(h.bin(0.0), 0);
        assert_eq!(h.bin(0.05), 1);
        assert_eq!(h.bin(0.5), 2);
        assert_eq!(h.bin(1.0), 2);
        h.with_polyp[1] = 2;
        h.without_polyp[1] = 1;
        assert_eq!(h.totals(), vec![0, 3, 0]);
        assert!(Histogram::new(&[0.1, 1.0]).is_err());
        assert!(Histogram::new(&[0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(Histogram::new(&[0.0, 0.9]).is_err());

        let lesions = lesion_modality_histogram(&fractions(&[0.0, 0.1, 0.95]), &uniform_edges(10)).unwrap();
        assert_eq!(lesions.with_polyp.iter().sum::<usize>(), 3);
        assert_eq!(lesions.with_polyp[9], 1);
    }
}
