//! Seeded bootstrap engine and the test families built on it.
//!
//! Every resample draws from its own generator keyed by `(seed, resample
//! index)`, so a bootstrap run is a pure function of its inputs and seed no
//! matter how the resamples are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// p-values below this are reported as `"<1e-8"`.
pub const P_FLOOR: f64 = 1e-8;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_MARGIN: f64 = 0.015;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("only {valid} of {total} resamples were estimable")]
    TooFewValidResamples { valid: usize, total: usize },
    #[error("need at least {needed} samples, got {got}")]
    EmptySamples { needed: usize, got: usize },
    #[error("confidence level {0} must lie in (0, 1)")]
    InvalidLevel(f64),
    #[error("margin {0} must be a positive finite number")]
    InvalidMargin(f64),
    #[error("sample {index} is not finite")]
    NonFiniteSample { index: usize },
    #[error("invalid bootstrap configuration: {0}")]
    InvalidConfig(String),
}

/// What a bootstrap resample draws: whole videos, or caller-defined groups
/// of rows (typically polyps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResampleUnit {
    #[default]
    Video,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
    pub unit: ResampleUnit,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_resamples: DEFAULT_RESAMPLES,
            seed: 17,
            unit: ResampleUnit::Video,
        }
    }
}

impl BootstrapConfig {
    pub fn new(n_resamples: usize, seed: u64) -> Self {
        Self {
            n_resamples,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.n_resamples < 2 {
            return Err(StatsError::InvalidConfig(format!(
                "n_resamples = {} (need >= 2)",
                self.n_resamples
            )));
        }
        Ok(())
    }

    /// Independent stream for a second population resampled alongside the
    /// first (e.g. the other dataset in a comparison).
    pub fn substream(&self, stream: u64) -> BootstrapConfig {
        BootstrapConfig {
            seed: derive_seed(self.seed, stream ^ 0xD1B5_4A32_D192_ED03),
            ..*self
        }
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a counter into an independent 64-bit key.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    splitmix64(seed ^ splitmix64(counter))
}

pub fn rng_for(seed: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, counter))
}

/// `n_units` indices drawn uniformly with replacement for resample `idx`.
pub fn resample_units(n_units: usize, cfg: &BootstrapConfig, idx: usize) -> Vec<usize> {
    let mut rng = rng_for(cfg.seed, idx as u64);
    (0..n_units).map(|_| rng.random_range(0..n_units)).collect()
}

/// Runs `f(resample_index)` for every resample in parallel and returns the
/// estimable results in index order plus the number dropped. Fails when more
/// than half the resamples are not estimable.
pub fn bootstrap_map<T, F>(cfg: &BootstrapConfig, f: F) -> Result<(Vec<T>, usize), StatsError>
where
    T: Send,
    F: Fn(usize) -> Option<T> + Sync,
{
    cfg.validate()?;
    let results: Vec<Option<T>> = (0..cfg.n_resamples).into_par_iter().map(&f).collect();
    let total = results.len();
    let values: Vec<T> = results.into_iter().flatten().collect();
    let dropped = total - values.len();
    if dropped * 2 > total {
        return Err(StatsError::TooFewValidResamples {
            valid: values.len(),
            total,
        });
    }
    Ok((values, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapDistribution {
    pub values: Vec<f64>,
    pub dropped: usize,
}

/// `stat_fn` maps a multiset of unit indices to a statistic, or `None` when
/// that resample is not estimable.
pub fn bootstrap_distribution<F>(
    stat_fn: F,
    n_units: usize,
    cfg: &BootstrapConfig,
) -> Result<BootstrapDistribution, StatsError>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n_units == 0 {
        return Err(StatsError::InvalidConfig("no units to resample".into()));
    }
    let (values, dropped) = bootstrap_map(cfg, |i| stat_fn(&resample_units(n_units, cfg, i)))?;
    Ok(BootstrapDistribution { values, dropped })
}

fn check_finite(samples: &[f64]) -> Result<(), StatsError> {
    match samples.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(StatsError::NonFiniteSample { index }),
        None => Ok(()),
    }
}

fn check_level(level: f64) -> Result<(), StatsError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(StatsError::InvalidLevel(level))
    }
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Type-7 (linear interpolation) quantile of an already sorted sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Two-sided percentile interval at `level`.
pub fn percentile_ci(samples: &[f64], level: f64) -> Result<(f64, f64), StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::EmptySamples {
            needed: 2,
            got: samples.len(),
        });
    }
    check_level(level)?;
    check_finite(samples)?;
    let s = sorted(samples);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&s, tail), quantile_sorted(&s, 1.0 - tail)))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; exactly zero for constant input.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 || xs.iter().all(|x| *x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Reject,
    FailToReject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    ZTwoSided,
    Superiority,
    NonInferiority,
}

fn real<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// Outcome of one bootstrapped test. `statistic` is the bootstrap mean over
/// the bootstrap standard deviation (shifted by the margin for
/// non-inferiority); it can be infinite when the spread is zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub kind: TestKind,
    #[serde(serialize_with = "real")]
    pub statistic: f64,
    /// Floored at [`P_FLOOR`].
    pub p_value: f64,
    pub p_display: String,
    pub ci: (f64, f64),
    pub level: f64,
    pub decision: Decision,
    pub margin: Option<f64>,
    pub n_samples: usize,
}

impl TestResult {
    pub fn rejected(&self) -> bool {
        self.decision == Decision::Reject
    }
}

pub fn format_p(p: f64) -> String {
    if p < P_FLOOR {
        "<1e-8".to_string()
    } else {
        format!("{p:.4e}")
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Upper normal tail P(Z > x).
fn upper_tail(x: f64) -> f64 {
    if x == f64::INFINITY {
        0.0
    } else if x == f64::NEG_INFINITY {
        1.0
    } else {
        std_normal().sf(x)
    }
}

fn ratio(num: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        num / sd
    } else if num > 0.0 {
        f64::INFINITY
    } else if num < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

/// Two-sided z-test between two bootstrap distributions (e.g. of MACE
/// distances): `z = (mean_a - mean_b) / sqrt(var_a + var_b)`.
pub fn z_test_two_sided(a: &[f64], b: &[f64], level: f64) -> Result<TestResult, StatsError> {
    for s in [a, b] {
        if s.is_empty() {
            return Err(StatsError::EmptySamples { needed: 1, got: 0 });
        }
        check_finite(s)?;
    }
    check_level(level)?;
    let diff = mean(a) - mean(b);
    let se = (variance(a) + variance(b)).sqrt();
    let z = ratio(diff, se);
    let p = (2.0 * upper_tail(z.abs())).min(1.0);
    let crit = std_normal().inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let alpha = 1.0 - level;
    Ok(TestResult {
        kind: TestKind::ZTwoSided,
        statistic: z,
        p_value: p.max(P_FLOOR),
        p_display: format_p(p),
        ci: (diff - crit * se, diff + crit * se),
        level,
        decision: if p < alpha {
            Decision::Reject
        } else {
            Decision::FailToReject
        },
        margin: None,
        n_samples: a.len().min(b.len()),
    })
}

fn one_sided(
    kind: TestKind,
    delta: &[f64],
    margin: f64,
    level: f64,
) -> Result<TestResult, StatsError> {
    if delta.is_empty() {
        return Err(StatsError::EmptySamples { needed: 1, got: 0 });
    }
    check_finite(delta)?;
    check_level(level)?;
    let s = sorted(delta);
    let lo = quantile_sorted(&s, 1.0 - level);
    let hi = quantile_sorted(&s, level);
    let sd = variance(delta).sqrt();
    let t = ratio(mean(delta) + margin, sd);
    let p = upper_tail(t);
    Ok(TestResult {
        kind,
        statistic: t,
        p_value: p.max(P_FLOOR),
        p_display: format_p(p),
        ci: (lo, hi),
        level,
        decision: if lo > -margin {
            Decision::Reject
        } else {
            Decision::FailToReject
        },
        margin: (kind == TestKind::NonInferiority).then_some(margin),
        n_samples: delta.len(),
    })
}

/// One-sided superiority test on bootstrap differences: superior when the
/// lower `level` percentile bound of Δ exceeds zero.
pub fn superiority_one_sided(delta: &[f64], level: f64) -> Result<TestResult, StatsError> {
    one_sided(TestKind::Superiority, delta, 0.0, level)
}

/// Non-inferior when the lower `level` percentile bound of Δ exceeds
/// `-margin`.
pub fn non_inferiority(delta: &[f64], margin: f64, level: f64) -> Result<TestResult, StatsError> {
    if !(margin.is_finite() && margin > 0.0) {
        return Err(StatsError::InvalidMargin(margin));
    }
    one_sided(TestKind::NonInferiority, delta, margin, level)
}
