//! 2-D projections of embedding sets: PCA and exact t-SNE.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::EmbeddingSet;
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("perplexity {perplexity} too large for {n} points (need perplexity < n/3)")]
    PerplexityTooLarge { perplexity: f64, n: usize },
    #[error("row {0} has no positive distance")]
    DegenerateRow(usize),
    #[error("expected {expected} labels, got {got}")]
    LabelMismatch { expected: usize, got: usize },
    #[error("invalid t-SNE configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in projection input")]
    NonFinite,
    #[error("eigendecomposition failed")]
    EigenFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub exaggeration: f64,
    /// Iterations run with early exaggeration and the initial momentum.
    pub switch_iteration: usize,
    /// Standard deviation of seeded noise added to the PCA start (0 = none).
    pub jitter: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            exaggeration: 12.0,
            switch_iteration: 250,
            jitter: 0.0,
            seed: 17,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<(), ProjectError> {
        let bad = |m: &str| Err(ProjectError::InvalidConfig(m.to_string()));
        if !(self.perplexity.is_finite() && self.perplexity > 1.0) {
            return bad("perplexity must be > 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be > 0");
        }
        if !(self.exaggeration.is_finite() && self.exaggeration >= 1.0) {
            return bad("exaggeration must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.final_momentum) {
            return bad("momentum must lie in [0,1)");
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return bad("jitter must be >= 0");
        }
        if n < MIN_TSNE_POINTS {
            return Err(ProjectError::TooFewSamples {
                needed: MIN_TSNE_POINTS,
                got: n,
            });
        }
        if 3.0 * self.perplexity >= n as f64 {
            return Err(ProjectError::PerplexityTooLarge {
                perplexity: self.perplexity,
                n,
            });
        }
        Ok(())
    }
}

pub const MIN_TSNE_POINTS: usize = 10;

/// Labelled 2-D points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection2D {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<String>,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

impl Projection2D {
    pub fn new(coords: Vec<[f64; 2]>, labels: Vec<String>) -> Result<Self, ProjectError> {
        if coords.len() != labels.len() {
            return Err(ProjectError::LabelMismatch {
                expected: coords.len(),
                got: labels.len(),
            });
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ProjectError::NonFinite);
        }
        Ok(Self { coords, labels })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Distinct labels in order of first appearance.
    pub fn label_groups(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for l in &self.labels {
            if !out.contains(&l.as_str()) {
                out.push(l);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,label\n");
        for (c, l) in self.coords.iter().zip(&self.labels) {
            s.push_str(&format!("{:.9e},{:.9e},{}\n", c[0], c[1], l));
        }
        s
    }

    /// Scatter plot, one color per label group.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 480.0, 40.0);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for c in &self.coords {
            x0 = x0.min(c[0]);
            x1 = x1.max(c[0]);
            y0 = y0.min(c[1]);
            y1 = y1.max(c[1]);
        }
        let sx = if x1 > x0 { (w - 2.0 * pad) / (x1 - x0) } else { 0.0 };
        let sy = if y1 > y0 { (h - 2.0 * pad) / (y1 - y0) } else { 0.0 };
        let groups = self.label_groups();
        let color = |l: &str| PALETTE[groups.iter().position(|g| *g == l).unwrap_or(0) % PALETTE.len()];

        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
        );
        for (c, l) in self.coords.iter().zip(&self.labels) {
            let px = pad + (c[0] - x0) * sx;
            let py = h - pad - (c[1] - y0) * sy;
            s.push_str(&format!(
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
                color(l)
            ));
        }
        for (i, g) in groups.iter().enumerate() {
            let y = 16.0 + 16.0 * i as f64;
            s.push_str(&format!(
                "<rect x=\"8\" y=\"{:.0}\" width=\"10\" height=\"10\" fill=\"{}\"/>\
                 <text x=\"22\" y=\"{:.0}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
                y - 9.0,
                color(g),
                y,
                xml_escape(g)
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn check_labels(n: usize, labels: &[String]) -> Result<(), ProjectError> {
    if labels.len() != n {
        return Err(ProjectError::LabelMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    Ok(())
}

/// Scores of the mean-centered rows of `x` on the top-2 principal axes, each
/// axis signed so its first nonzero loading is positive. Missing axes (d < 2)
/// score zero.
pub fn pca_scores(x: &DMatrix<f64>) -> Result<DMatrix<f64>, ProjectError> {
    let (n, d) = x.shape();
    if n < 3 {
        return Err(ProjectError::TooFewSamples { needed: 3, got: n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ProjectError::NonFinite);
    }
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(cov, f64::EPSILON, 0).ok_or(ProjectError::EigenFailure)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut scores = DMatrix::zeros(n, 2);
    for (k, &j) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(j).into_owned();
        let scale = v.amax();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            if *first < 0.0 {
                v = -v;
            }
        }
        scores.set_column(k, &(&centered * v));
    }
    Ok(scores)
}

pub fn pca_2d(set: &EmbeddingSet, labels: &[String]) -> Result<Projection2D, ProjectError> {
    check_labels(set.n(), labels)?;
    let s = pca_scores(set.matrix())?;
    Projection2D::new(
        s.row_iter().map(|r| [r[0], r[1]]).collect(),
        labels.to_vec(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CalibrationStatus {
    Calibrated,
    /// The target is above the largest reachable perplexity; sigma is the
    /// upper bracket.
    UnachievableHigh,
    /// The target is below the smallest reachable perplexity; sigma is the
    /// lower bracket.
    UnachievableLow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    pub probabilities: Vec<f64>,
    /// `2^H` of the returned distribution.
    pub perplexity: f64,
    pub status: CalibrationStatus,
}

pub const SIGMA_BRACKET: (f64, f64) = (1e-20, 1e20);
pub const CALIBRATION_STEPS: usize = 50;
pub const PERPLEXITY_TOLERANCE: f64 = 1e-5;

/// Conditional distribution `p_j ∝ exp(-d_j / (2 sigma^2))` and its
/// perplexity `2^H`.
fn conditional(sq: &[f64], dmin: f64, sigma: f64) -> (Vec<f64>, f64) {
    let s2 = 2.0 * sigma * sigma;
    let mut p: Vec<f64> = sq.iter().map(|d| (-(d - dmin) / s2).exp()).collect();
    let z: f64 = p.iter().sum();
    let mut h = 0.0;
    for v in &mut p {
        *v /= z;
        if *v > 0.0 {
            h -= *v * v.log2();
        }
    }
    (p, h.exp2())
}

/// Bandwidth of one point's Gaussian kernel, found by bisection on
/// `log(sigma)` over [`SIGMA_BRACKET`].
pub fn perplexity_calibration(sq_distances: &[f64], perplexity: f64) -> Result<Calibration, ProjectError> {
    if sq_distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(ProjectError::NonFinite);
    }
    if !sq_distances.iter().any(|d| *d > 0.0) {
        return Err(ProjectError::DegenerateRow(0));
    }
    let dmin = sq_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let eval = |log_sigma: f64| conditional(sq_distances, dmin, log_sigma.exp());
    let done = |perp: f64| (perp - perplexity).abs() <= PERPLEXITY_TOLERANCE;
    let build = |sigma: f64, status| {
        let (p, perp) = conditional(sq_distances, dmin, sigma);
        Calibration {
            sigma,
            probabilities: p,
            perplexity: perp,
            status,
        }
    };

    let (mut lo, mut hi) = (SIGMA_BRACKET.0.ln(), SIGMA_BRACKET.1.ln());
    let top = eval(hi).1;
    if top < perplexity && !done(top) {
        return Ok(build(SIGMA_BRACKET.1, CalibrationStatus::UnachievableHigh));
    }
    let bottom = eval(lo).1;
    if bottom > perplexity && !done(bottom) {
        return Ok(build(SIGMA_BRACKET.0, CalibrationStatus::UnachievableLow));
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..CALIBRATION_STEPS {
        mid = 0.5 * (lo + hi);
        let perp = eval(mid).1;
        if done(perp) {
            break;
        }
        if perp < perplexity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(build(mid.exp(), CalibrationStatus::Calibrated))
}

fn squared_distances(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ri = &rows[i];
            rows.iter()
                .map(move |rj| ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        })
        .collect()
}

/// Symmetrized joint probabilities `(P_{j|i} + P_{i|j}) / 2n`, row-major
/// `n x n` with a zero diagonal.
pub fn joint_probabilities(x: &DMatrix<f64>, perplexity: f64) -> Result<DMatrix<f64>, ProjectError> {
    let n = x.nrows();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ProjectError::NonFinite);
    }
    let d = squared_distances(x);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i * n + j]).collect();
            let cal = perplexity_calibration(&others, perplexity).map_err(|e| match e {
                ProjectError::DegenerateRow(_) => ProjectError::DegenerateRow(i),
                e => e,
            })?;
            if cal.status != CalibrationStatus::Calibrated {
                log::warn!("perplexity {perplexity} not reachable for point {i}");
            }
            let mut row = cal.probabilities;
            row.insert(i, 0.0);
            Ok(row)
        })
        .collect::<Result<_, ProjectError>>()?;
    let cond = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    Ok((&cond + cond.transpose()) / (2.0 * n as f64))
}

fn student_kernel(y: &DMatrix<f64>) -> (Vec<f64>, f64) {
    let n = y.nrows();
    let mut w = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[(i, 0)] - y[(j, 0)];
            let dy = y[(i, 1)] - y[(j, 1)];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * n + j] = v;
            w[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (w, z)
}

/// `KL(P || Q)` for the Student-t similarities `Q` of the `n x 2` layout `y`.
pub fn kl_divergence(p: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = y.nrows();
    let (w, z) = student_kernel(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[(i, j)];
            if i != j && pij > 0.0 {
                kl += pij * (pij * z / w[i * n + j]).ln();
            }
        }
    }
    kl
}

/// Gradient of [`kl_divergence`] with respect to `y`:
/// `4 * sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)`.
pub fn kl_gradient(p: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    gradient_scaled(p, y, 1.0)
}

fn gradient_scaled(p: &DMatrix<f64>, y: &DMatrix<f64>, exaggeration: f64) -> DMatrix<f64> {
    let n = y.nrows();
    let (w, z) = student_kernel(y);
    let mut g = DMatrix::zeros(n, 2);
    for i in 0..n {
        let (mut gx, mut gy) = (0.0, 0.0);
        for j in 0..n {
            if i == j {
                continue;
            }
            let wij = w[i * n + j];
            let f = (exaggeration * p[(i, j)] - wij / z) * wij;
            gx += f * (y[(i, 0)] - y[(j, 0)]);
            gy += f * (y[(i, 1)] - y[(j, 1)]);
        }
        g[(i, 0)] = 4.0 * gx;
        g[(i, 1)] = 4.0 * gy;
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TsneResult {
    pub projection: Projection2D,
    pub initial_kl: f64,
    pub final_kl: f64,
}

fn initial_layout(x: &DMatrix<f64>, cfg: &TsneConfig) -> Result<DMatrix<f64>, ProjectError> {
    let mut y = pca_scores(x)?;
    let n = y.nrows();
    let col0: Vec<f64> = y.column(0).iter().copied().collect();
    let sd = stats::variance(&col0).sqrt();
    let mut rng = stats::rng_for(cfg.seed, 0);
    if sd > 0.0 {
        y *= 1e-4 / sd;
    } else {
        y = DMatrix::from_fn(n, 2, |_, _| 1e-4 * rng.sample::<f64, _>(StandardNormal));
    }
    if cfg.jitter > 0.0 {
        for v in y.iter_mut() {
            *v += cfg.jitter * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(y)
}

/// Exact `O(n^2)` t-SNE started from the scaled PCA layout. The optimisation
/// loop is sequential, so results do not depend on the thread count.
pub fn tsne_2d(set: &EmbeddingSet, labels: &[String], cfg: &TsneConfig) -> Result<TsneResult, ProjectError> {
    check_labels(set.n(), labels)?;
    cfg.validate(set.n())?;
    let x = set.matrix();
    let p = joint_probabilities(x, cfg.perplexity)?;
    let mut y = initial_layout(x, cfg)?;
    let n = y.nrows();
    let initial_kl = kl_divergence(&p, &y);

    let mut update = DMatrix::<f64>::zeros(n, 2);
    let mut gains = DMatrix::<f64>::from_element(n, 2, 1.0);
    for it in 0..cfg.iterations {
        let early = it < cfg.switch_iteration;
        let exag = if early { cfg.exaggeration } else { 1.0 };
        let momentum = if early { cfg.momentum } else { cfg.final_momentum };
        let grad = gradient_scaled(&p, &y, exag);
        for k in 0..n * 2 {
            gains[k] = if update[k] * grad[k] < 0.0 { gains[k] + 0.2 } else { gains[k] * 0.8 };
            gains[k] = gains[k].max(0.01);
            update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        let mean = y.row_mean();
        for mut row in y.row_iter_mut() {
            row -= &mean;
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ProjectError::NonFinite);
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(TsneResult {
        projection: Projection2D::new(y.row_iter().map(|r| [r[0], r[1]]).collect(), labels.to_vec())?,
        initial_kl,
        final_kl,
    })
}
