//! The `mace` command-line tool.
//!
//! Every command returns its report as pretty JSON on stdout; with `--out`
//! the report and any CSV / SVG side files are also written to that
//! directory. Exit codes: 0 success, 2 invalid input or arguments, 3 I/O,
//! 4 statistically non-estimable.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::deteval::{
    self, bootstrap_cohort_deltas, bootstrap_tpr_deltas, default_sweep, Clamp, CompareMode, Curve,
    CurvePoint, EvalError, EvalTable, MatchConfig, DEFAULT_THRESHOLD_STEPS,
};
use crate::ingest::{
    self, load_bundle_dir, DatasetBundle, EmbeddingSet, FrameKey, IngestError, ParseMode,
};
use crate::mace::{self, GroupedEmbeddings, MaceError};
use crate::modality::{
    self, Histogram, Modality, ModalityError, ModalityProfile, PixelRangeRule, Roi,
};
use crate::project::{self, ProjectError, TsneConfig};
use crate::report::{self, cell, InputDigest, Provenance, Report};
use crate::stats::{self, BootstrapConfig, StatsError, TestResult};
use crate::synth::{self, SynthError, SynthScenario};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Mace(#[from] MaceError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Modality(#[from] ModalityError),
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NOT_ESTIMABLE: i32 = 4;

fn ingest_code(e: &IngestError) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

fn stats_code(e: &StatsError) -> i32 {
    match e {
        StatsError::TooFewValidResamples { .. } | StatsError::EmptySamples { .. } => EXIT_NOT_ESTIMABLE,
        _ => EXIT_INVALID,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_INVALID,
            CliError::Ingest(e) => ingest_code(e),
            CliError::Mace(e) => match e {
                MaceError::TooFewSamples(_) | MaceError::EigenFailure(_) => EXIT_NOT_ESTIMABLE,
                MaceError::Stats(s) => stats_code(s),
                _ => EXIT_INVALID,
            },
            CliError::Stats(e) => stats_code(e),
            CliError::Eval(e) => match e {
                EvalError::NotEstimable(_) | EvalError::ZeroDuration | EvalError::EmptyCurve => {
                    EXIT_NOT_ESTIMABLE
                }
                EvalError::Stats(s) => stats_code(s),
                _ => EXIT_INVALID,
            },
            CliError::Modality(ModalityError::Ingest(e)) => ingest_code(e),
            CliError::Modality(_) => EXIT_INVALID,
            CliError::Project(e) => match e {
                ProjectError::TooFewSamples { .. } | ProjectError::DegenerateRow(_) => EXIT_NOT_ESTIMABLE,
                _ => EXIT_INVALID,
            },
            CliError::Synth(SynthError::Ingest(e)) => ingest_code(e),
            CliError::Synth(_) => EXIT_INVALID,
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

/// Settings shared by every command; echoed into each report.
#[derive(Debug, Clone, PartialEq, Args, Serialize)]
pub struct RunConfig {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 17)]
    pub seed: u64,
    /// Bootstrap resamples.
    #[arg(long, global = true, default_value_t = stats::DEFAULT_RESAMPLES)]
    pub resamples: usize,
    /// Non-inferiority margin on TPR.
    #[arg(long, global = true, default_value_t = stats::DEFAULT_MARGIN)]
    pub margin: f64,
    /// FAPM operating points, comma separated.
    #[arg(long, global = true, value_delimiter = ',', default_values_t = deteval::DEFAULT_FAPM_POINTS.to_vec())]
    pub fapm: Vec<f64>,
    /// Temporal filter window (odd).
    #[arg(long, global = true, default_value_t = deteval::DEFAULT_WINDOW)]
    pub window: usize,
    /// IoU needed for a box to match a polyp.
    #[arg(long, global = true, default_value_t = deteval::DEFAULT_IOU)]
    pub iou: f64,
    /// Confidence level for intervals and tests.
    #[arg(long, global = true, default_value_t = stats::DEFAULT_LEVEL)]
    pub level: f64,
    /// JSON pixel rule for chromoendoscopy frames.
    #[arg(long = "ce-rule", global = true)]
    pub ce_rule: Option<PathBuf>,
    /// Directory for report files.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Reject unknown fields in JSONL inputs.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Also emit SVG figures.
    #[arg(long, global = true)]
    pub svg: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.resamples < 2 {
            return usage("--resamples must be >= 2");
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return usage("--margin must be > 0");
        }
        if self.fapm.is_empty() || self.fapm.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return usage("--fapm needs finite values >= 0");
        }
        if self.window == 0 || self.window % 2 == 0 {
            return usage("--window must be odd and >= 1");
        }
        if !(self.iou > 0.0 && self.iou <= 1.0) {
            return usage("--iou must lie in (0,1]");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return usage("--level must lie in (0,1)");
        }
        Ok(())
    }

    fn mode(&self) -> ParseMode {
        if self.strict {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        }
    }

    fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig::new(self.resamples, self.seed)
    }

    fn matcher(&self) -> Result<MatchConfig, CliError> {
        Ok(MatchConfig::new(self.iou)?)
    }

    fn ce_rule(&self) -> Result<PixelRangeRule, CliError> {
        match &self.ce_rule {
            None => Ok(PixelRangeRule::default()),
            Some(p) => Ok(PixelRangeRule::from_json(&read_string(p)?)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitArg {
    Video,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityArg {
    Nbi,
    Ce,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Nbi => Modality::Nbi,
            ModalityArg::Ce => Modality::Ce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Pca,
    Tsne,
}

/// `NAME=PATH`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Named {
    pub name: String,
    pub path: PathBuf,
}

fn parse_named(s: &str) -> Result<Named, String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok(Named {
            name: n.to_string(),
            path: PathBuf::from(p),
        }),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Check bundle directories or single artifacts (.bin, .ppm, .jsonl).
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// MACE distance between two embedding sets with a bootstrap interval.
    Mace {
        /// Reference embeddings (`.bin`; a sibling `.keys.jsonl` is used
        /// when present).
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "a")]
        label_a: String,
        #[arg(long, default_value = "b")]
        label_b: String,
        /// Embedding model name for the report row.
        #[arg(long, default_value = "embedding")]
        embedding: String,
        /// Bootstrap unit: whole videos, or (video, polyp) groups.
        #[arg(long, value_enum, default_value_t = UnitArg::Video)]
        unit: UnitArg,
        /// frames.jsonl giving polyp membership of `a` rows (group unit).
        #[arg(long)]
        frames_a: Option<PathBuf>,
        #[arg(long)]
        frames_b: Option<PathBuf>,
    },
    /// Two-sided z-tests between MACE distributions of several sets against
    /// one reference.
    MaceTest {
        #[arg(long, value_parser = parse_named)]
        reference: Named,
        /// Sets to compare, as NAME=PATH.
        #[arg(required = true, value_parser = parse_named)]
        sets: Vec<Named>,
        #[arg(long, default_value = "embedding")]
        embedding: String,
    },
    /// TPR / FAPM curve of a bundle; with `--candidate`, superiority and
    /// non-inferiority of the candidate against it.
    Eval {
        bundle: PathBuf,
        #[arg(long)]
        candidate: Option<PathBuf>,
        /// Score thresholds in the sweep.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD_STEPS)]
        steps: usize,
    },
    /// TPR of lesions seen under a modality for at least a fraction of their
    /// frames, against all lesions.
    Cohort {
        bundle: PathBuf,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, default_value_t = 100)]
        min_cohort: usize,
        /// Root of `<video>/<frame>.ppm` files for unresolved CE flags
        /// (default: `<bundle>/frames`).
        #[arg(long)]
        frames_root: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD_STEPS)]
        steps: usize,
    },
    /// 2-D projection of labelled embedding sets.
    Project {
        #[arg(required = true, value_parser = parse_named)]
        sets: Vec<Named>,
        #[arg(long, value_enum, default_value_t = MethodArg::Tsne)]
        method: MethodArg,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        /// Seeded subsample of at most this many rows per set.
        #[arg(long)]
        max_per_set: Option<usize>,
    },
    /// Write a synthetic artifact tree from a scenario file into `--out`.
    Synth { scenario: PathBuf },
}

#[derive(Debug, Clone, Parser)]
#[command(name = "mace", version, about = "Dataset dissimilarity and detector generalization reports")]
pub struct Cli {
    #[command(flatten)]
    pub config: RunConfig,
    #[command(subcommand)]
    pub command: Command,
}

/// What a command produced: the JSON report plus side files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub report: String,
    pub report_name: String,
    pub files: Vec<(String, String)>,
}

fn read_string(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(|e| CliError::Ingest(IngestError::Io { path: p.to_path_buf(), source: e }))
}

fn keys_path(bin: &Path) -> PathBuf {
    bin.with_extension("keys.jsonl")
}

fn load_embeddings(path: &Path, cfg: &RunConfig) -> Result<(EmbeddingSet, Vec<PathBuf>), CliError> {
    let keys = keys_path(path);
    let has_keys = keys.is_file();
    let set = ingest::read_embedding_set(path, has_keys.then_some(keys.as_path()), cfg.mode())?;
    let mut inputs = vec![path.to_path_buf()];
    if has_keys {
        inputs.push(keys);
    }
    Ok((set, inputs))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<InputDigest>, CliError> {
    Ok(report::digest_inputs(paths.iter().map(|p| p.as_path()))?)
}

fn envelope<B: Serialize>(command: &str, cfg: &RunConfig, inputs: &[PathBuf], body: B) -> Result<String, CliError> {
    Ok(Report {
        provenance: Provenance {
            tool: report::TOOL_NAME,
            version: report::TOOL_VERSION,
            command: command.to_string(),
            config: cfg.clone(),
            seed: cfg.seed,
            inputs: digests(inputs)?,
        },
        result: body,
    }
    .to_json())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{}", out.report);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and writes its files when `--out` is set.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let cfg = &cli.config;
    cfg.validate()?;
    let out = match &cli.command {
        Command::Validate { paths } => cmd_validate(paths, cfg)?,
        Command::Mace {
            a,
            b,
            label_a,
            label_b,
            embedding,
            unit,
            frames_a,
            frames_b,
        } => cmd_mace(
            MaceSide { path: a, label: label_a, frames: frames_a.as_deref() },
            MaceSide { path: b, label: label_b, frames: frames_b.as_deref() },
            embedding,
            *unit,
            cfg,
        )?,
        Command::MaceTest { reference, sets, embedding } => cmd_mace_test(reference, sets, embedding, cfg)?,
        Command::Eval { bundle, candidate, steps } => cmd_eval(bundle, candidate.as_deref(), *steps, cfg)?,
        Command::Cohort {
            bundle,
            modality,
            step,
            min_cohort,
            frames_root,
            bins,
            steps,
        } => cmd_cohort(
            bundle,
            (*modality).into(),
            CohortArgs {
                step: *step,
                min_cohort: *min_cohort,
                frames_root: frames_root.as_deref(),
                bins: *bins,
                steps: *steps,
            },
            cfg,
        )?,
        Command::Project {
            sets,
            method,
            perplexity,
            iterations,
            max_per_set,
        } => cmd_project(sets, *method, *perplexity, *iterations, *max_per_set, cfg)?,
        Command::Synth { scenario } => cmd_synth(scenario, cfg)?,
    };
    if let Some(dir) = &cfg.out {
        report::write_text(dir, &out.report_name, &out.report)?;
        for (name, text) in &out.files {
            report::write_text(dir, name, text)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ValidatedItem {
    path: String,
    kind: &'static str,
    summary: BTreeMap<&'static str, usize>,
}

fn validate_one(p: &Path, cfg: &RunConfig) -> Result<ValidatedItem, CliError> {
    let mode = cfg.mode();
    let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    let open = || -> Result<BufReader<fs::File>, CliError> {
        fs::File::open(p)
            .map(BufReader::new)
            .map_err(|e| CliError::Ingest(IngestError::Io { path: p.to_path_buf(), source: e }))
    };
    let mut summary = BTreeMap::new();
    let kind = if p.is_dir() {
        let b = load_bundle_dir(p, mode)?;
        summary.insert("videos", b.videos().len());
        summary.insert("frames", b.frames().len());
        summary.insert("detection_frames", b.detections().len());
        summary.insert("polyps", b.tracks().len());
        summary.insert("embedding_sets", b.embeddings().len());
        "bundle"
    } else if name.ends_with(".bin") {
        let (set, _) = load_embeddings(p, cfg)?;
        summary.insert("rows", set.n());
        summary.insert("dim", set.d());
        "embeddings"
    } else if name.ends_with(".ppm") {
        let f = ingest::read_ppm(p)?;
        summary.insert("width", f.width);
        summary.insert("height", f.height);
        "ppm"
    } else if name.ends_with(".keys.jsonl") {
        summary.insert("keys", ingest::parse_embedding_keys(open()?, mode)?.len());
        "embedding_keys"
    } else {
        match name {
            "videos.jsonl" => summary.insert("records", ingest::parse_videos(open()?, mode)?.len()),
            "frames.jsonl" => summary.insert("records", ingest::parse_frames_meta(open()?, mode)?.len()),
            "detections.jsonl" => summary.insert("records", ingest::parse_detections(open()?, mode)?.len()),
            "annotations.jsonl" => summary.insert("tracks", ingest::parse_annotations(open()?, mode)?.len()),
            _ => {
                if !p.exists() {
                    open()?;
                }
                return usage(format!("cannot tell the artifact type of {}", p.display()));
            }
        };
        "jsonl"
    };
    Ok(ValidatedItem {
        path: p.display().to_string(),
        kind,
        summary,
    })
}

fn cmd_validate(paths: &[PathBuf], cfg: &RunConfig) -> Result<Outcome, CliError> {
    let items = paths
        .iter()
        .map(|p| {
            validate_one(p, cfg).map_err(|e| {
                log::error!("{}: {e}", p.display());
                e
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Outcome {
        report: envelope("validate", cfg, paths, items)?,
        report_name: "validate.json".into(),
        files: vec![],
    })
}

struct MaceSide<'a> {
    path: &'a Path,
    label: &'a str,
    frames: Option<&'a Path>,
}

/// One Table-2 style row.
#[derive(Debug, Clone, Serialize)]
struct MaceRow {
    comparison: String,
    embedding: String,
    estimate: f64,
    ci_lo: f64,
    ci_hi: f64,
    level: f64,
    d: usize,
    n_a: usize,
    n_b: usize,
    units_a: usize,
    units_b: usize,
    unit: UnitArg,
    n_resamples: usize,
    dropped: usize,
}

fn grouped(set: &EmbeddingSet, unit: UnitArg, frames: Option<&Path>, cfg: &RunConfig) -> Result<GroupedEmbeddings, CliError> {
    match unit {
        UnitArg::Video => Ok(GroupedEmbeddings::by_video(set)),
        UnitArg::Group => {
            let Some(frames) = frames else {
                return usage("--unit group needs --frames-a / --frames-b");
            };
            if !set.has_keys() {
                return usage("--unit group needs a .keys.jsonl sidecar for every set");
            }
            let file = fs::File::open(frames)
                .map_err(|e| CliError::Ingest(IngestError::Io { path: frames.to_path_buf(), source: e }))?;
            let metas = ingest::parse_frames_meta(BufReader::new(file), cfg.mode())?;
            let polyps: BTreeMap<FrameKey, BTreeSet<String>> =
                metas.into_iter().map(|m| (m.key, m.polyp_ids)).collect();
            let labels: Vec<String> = set
                .keys()
                .iter()
                .map(|k| {
                    let ids = polyps.get(k).map(|s| s.iter().cloned().collect::<Vec<_>>().join("+"));
                    format!("{}/{}", k.video_id, ids.unwrap_or_default())
                })
                .collect();
            Ok(GroupedEmbeddings::by_label(set, &labels))
        }
    }
}

fn ci_of(values: &[f64], level: f64) -> Result<(f64, f64), CliError> {
    Ok(stats::percentile_ci(values, level)?)
}

fn cmd_mace(a: MaceSide, b: MaceSide, embedding: &str, unit: UnitArg, cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (set_a, mut inputs) = load_embeddings(a.path, cfg)?;
    let (set_b, inputs_b) = load_embeddings(b.path, cfg)?;
    inputs.extend(inputs_b);
    inputs.extend(a.frames.map(Path::to_path_buf));
    inputs.extend(b.frames.map(Path::to_path_buf));

    let score = mace::mace_between(&set_a, &set_b)?;
    let ga = grouped(&set_a, unit, a.frames, cfg)?;
    let gb = grouped(&set_b, unit, b.frames, cfg)?;
    let dist = mace::mace_bootstrap(&ga, &gb, &cfg.bootstrap(), 1)?;
    let (ci_lo, ci_hi) = ci_of(&dist.values, cfg.level)?;
    let row = MaceRow {
        comparison: format!("{} vs {}", a.label, b.label),
        embedding: embedding.to_string(),
        estimate: score.value,
        ci_lo,
        ci_hi,
        level: cfg.level,
        d: score.d,
        n_a: score.n_a,
        n_b: score.n_b,
        units_a: ga.n_groups(),
        units_b: gb.n_groups(),
        unit,
        n_resamples: cfg.resamples,
        dropped: dist.dropped,
    };
    let csv = format!(
        "comparison,embedding,estimate,ci_lo,ci_hi,level,n_resamples,seed\n{},{},{},{},{},{},{},{}\n",
        row.comparison,
        row.embedding,
        cell(row.estimate),
        cell(ci_lo),
        cell(ci_hi),
        cfg.level,
        cfg.resamples,
        cfg.seed
    );
    Ok(Outcome {
        report: envelope("mace", cfg, &inputs, &row)?,
        report_name: "mace.json".into(),
        files: vec![("mace.csv".into(), csv)],
    })
}

#[derive(Debug, Serialize)]
struct SetSummary {
    name: String,
    estimate: f64,
    ci_lo: f64,
    ci_hi: f64,
    units: usize,
    dropped: usize,
}

#[derive(Debug, Serialize)]
struct PairTest {
    a: String,
    b: String,
    test: TestResult,
}

#[derive(Debug, Serialize)]
struct MaceTestBody {
    reference: String,
    embedding: String,
    sets: Vec<SetSummary>,
    tests: Vec<PairTest>,
    ordering: String,
}

/// Sets by decreasing estimate, joined by `>` where the adjacent pair's
/// test rejects and `~` where it does not.
fn ordering_summary(sets: &[SetSummary], tests: &[PairTest]) -> String {
    let mut idx: Vec<usize> = (0..sets.len()).collect();
    idx.sort_by(|&i, &j| sets[j].estimate.total_cmp(&sets[i].estimate).then(i.cmp(&j)));
    let mut s = String::new();
    for (k, &i) in idx.iter().enumerate() {
        if k > 0 {
            let prev = &sets[idx[k - 1]].name;
            let cur = &sets[i].name;
            let rejected = tests
                .iter()
                .find(|t| (&t.a == prev && &t.b == cur) || (&t.a == cur && &t.b == prev))
                .is_some_and(|t| t.test.rejected());
            s.push_str(if rejected { " > " } else { " ~ " });
        }
        s.push_str(&sets[i].name);
    }
    s
}

fn cmd_mace_test(reference: &Named, sets: &[Named], embedding: &str, cfg: &RunConfig) -> Result<Outcome, CliError> {
    let mut names = BTreeSet::new();
    for n in sets {
        if !names.insert(n.name.as_str()) || n.name == reference.name {
            return usage(format!("duplicate set name {}", n.name));
        }
    }
    let (ref_set, mut inputs) = load_embeddings(&reference.path, cfg)?;
    let ref_groups = GroupedEmbeddings::by_video(&ref_set);
    let boot = cfg.bootstrap();

    let mut summaries = Vec::new();
    let mut dists = Vec::new();
    for (i, named) in sets.iter().enumerate() {
        let (set, more) = load_embeddings(&named.path, cfg)?;
        inputs.extend(more);
        let g = GroupedEmbeddings::by_video(&set);
        let estimate = mace::mace_between(&ref_set, &set)?.value;
        let dist = mace::mace_bootstrap(&ref_groups, &g, &boot, i as u64 + 1)?;
        let (ci_lo, ci_hi) = ci_of(&dist.values, cfg.level)?;
        summaries.push(SetSummary {
            name: named.name.clone(),
            estimate,
            ci_lo,
            ci_hi,
            units: g.n_groups(),
            dropped: dist.dropped,
        });
        dists.push(dist.values);
    }

    let mut tests = Vec::new();
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            tests.push(PairTest {
                a: sets[i].name.clone(),
                b: sets[j].name.clone(),
                test: stats::z_test_two_sided(&dists[i], &dists[j], cfg.level)?,
            });
        }
    }
    let ordering = ordering_summary(&summaries, &tests);
    let mut csv = String::from("a,b,statistic,p_value,decision\n");
    for t in &tests {
        csv.push_str(&format!(
            "{},{},{},{},{:?}\n",
            t.a,
            t.b,
            cell(t.test.statistic),
            t.test.p_display,
            t.test.decision
        ));
    }
    let body = MaceTestBody {
        reference: reference.name.clone(),
        embedding: embedding.to_string(),
        sets: summaries,
        tests,
        ordering,
    };
    Ok(Outcome {
        report: envelope("mace-test", cfg, &inputs, &body)?,
        report_name: "mace_test.json".into(),
        files: vec![("mace_test.csv".into(), csv)],
    })
}

#[derive(Debug, Serialize)]
struct OperatingPoint {
    fapm: f64,
    tpr: f64,
    clamped: Option<Clamp>,
    ci_lo: f64,
    ci_hi: f64,
}

#[derive(Debug, Serialize)]
struct DatasetSummary {
    videos: usize,
    polyps: usize,
    minutes: f64,
    curve: Vec<CurvePoint>,
    operating_points: Vec<OperatingPoint>,
    dropped: usize,
}

#[derive(Debug, Serialize)]
struct Comparison {
    candidate: DatasetSummary,
    observed_delta: Vec<f64>,
    superiority: Vec<TestResult>,
    non_inferiority: Vec<TestResult>,
    dropped: usize,
}

#[derive(Debug, Serialize)]
struct EvalBody {
    configs: usize,
    reference: DatasetSummary,
    comparison: Option<Comparison>,
}

fn load_bundle(p: &Path, cfg: &RunConfig) -> Result<DatasetBundle, CliError> {
    Ok(load_bundle_dir(p, cfg.mode())?)
}

fn sweep(cfg: &RunConfig, steps: usize) -> Result<Vec<deteval::FilterConfig>, CliError> {
    if steps == 0 {
        return usage("--steps must be >= 1");
    }
    Ok(default_sweep(cfg.window, steps))
}

/// Observed curve and operating points with bootstrap percentile intervals.
fn summarize(
    bundle: &DatasetBundle,
    table: &EvalTable,
    cohort: Option<&BTreeSet<String>>,
    cfg: &RunConfig,
) -> Result<(DatasetSummary, Curve), CliError> {
    let videos = match cohort {
        Some(c) => table.cohort_videos(c),
        None => table.all_videos(),
    };
    let curve = table.curve(&videos, cohort)?;
    let boot = cfg.bootstrap();
    let (rows, dropped) = stats::bootstrap_map(&boot, |i| {
        let draw: Vec<usize> = stats::resample_units(videos.len(), &boot, i)
            .into_iter()
            .map(|k| videos[k])
            .collect();
        let c = table.curve(&draw, cohort).ok()?;
        cfg.fapm
            .iter()
            .map(|f| c.tpr_at_fapm(*f).ok().map(|x| x.tpr))
            .collect::<Option<Vec<f64>>>()
    })?;
    let mut points = Vec::new();
    for (k, f) in cfg.fapm.iter().enumerate() {
        let at = curve.tpr_at_fapm(*f)?;
        let samples: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let (ci_lo, ci_hi) = ci_of(&samples, cfg.level)?;
        points.push(OperatingPoint {
            fapm: *f,
            tpr: at.tpr,
            clamped: at.clamped,
            ci_lo,
            ci_hi,
        });
    }
    let ids: BTreeSet<&str> = videos.iter().map(|&i| table.video_ids()[i]).collect();
    let polyps = bundle
        .tracks()
        .values()
        .filter(|t| ids.contains(t.video_id.as_str()) && cohort.is_none_or(|c| c.contains(&t.polyp_id)))
        .count();
    let minutes = ids.iter().map(|id| bundle.videos()[*id].duration_minutes()).sum();
    Ok((
        DatasetSummary {
            videos: videos.len(),
            polyps,
            minutes,
            curve: curve.points().to_vec(),
            operating_points: points,
            dropped,
        },
        curve,
    ))
}

fn curve_svg(curves: &[(&str, &Curve)]) -> String {
    let (w, h, pad) = (640.0, 480.0, 50.0);
    let fmax = curves
        .iter()
        .flat_map(|(_, c)| c.points().iter().map(|p| p.fapm))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let px = |f: f64| pad + f / fmax * (w - 2.0 * pad);
    let py = |t: f64| h - pad - t * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">false alarms per minute (max {fmax:.3})</text>\n\
         <text x=\"8\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">TPR</text>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad,
        w / 2.0 - 80.0,
        h - 15.0,
        pad - 10.0
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = c
            .points()
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.fapm), py(p.tpr)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\" fill=\"{color}\">{name}</text>\n",
            pts.join(" "),
            w - pad - 120.0,
            pad + 16.0 * i as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn cmd_eval(bundle_path: &Path, candidate: Option<&Path>, steps: usize, cfg: &RunConfig) -> Result<Outcome, CliError> {
    let sweep = sweep(cfg, steps)?;
    let m = cfg.matcher()?;
    let bundle = load_bundle(bundle_path, cfg)?;
    let table = EvalTable::build(&bundle, &sweep, &m)?;
    let (reference, ref_curve) = summarize(&bundle, &table, None, cfg)?;
    let mut inputs = vec![bundle_path.to_path_buf()];
    let mut files = vec![("curve.csv".to_string(), ref_curve.to_csv())];

    let mut comparison = None;
    let mut cand_curve = None;
    if let Some(cp) = candidate {
        inputs.push(cp.to_path_buf());
        let cb = load_bundle(cp, cfg)?;
        let ct = EvalTable::build(&cb, &sweep, &m)?;
        let (cand, curve) = summarize(&cb, &ct, None, cfg)?;
        let deltas = bootstrap_tpr_deltas(&table, &ct, &cfg.fapm, &cfg.bootstrap())?;
        files.push(("candidate_curve.csv".into(), curve.to_csv()));
        comparison = Some(Comparison {
            candidate: cand,
            observed_delta: deltas
                .observed_candidate
                .iter()
                .zip(&deltas.observed_reference)
                .map(|(c, r)| c - r)
                .collect(),
            superiority: deltas.test(CompareMode::Superiority, cfg.margin, cfg.level)?,
            non_inferiority: deltas.test(CompareMode::NonInferiority, cfg.margin, cfg.level)?,
            dropped: deltas.dropped,
        });
        cand_curve = Some(curve);
    }
    if cfg.svg {
        let mut curves = vec![("reference", &ref_curve)];
        if let Some(c) = &cand_curve {
            curves.push(("candidate", c));
        }
        files.push(("curve.svg".into(), curve_svg(&curves)));
    }
    let body = EvalBody {
        configs: sweep.len(),
        reference,
        comparison,
    };
    Ok(Outcome {
        report: envelope("eval", cfg, &inputs, &body)?,
        report_name: "eval.json".into(),
        files,
    })
}

struct CohortArgs<'a> {
    step: f64,
    min_cohort: usize,
    frames_root: Option<&'a Path>,
    bins: usize,
    steps: usize,
}

#[derive(Debug, Serialize)]
struct CohortRow {
    threshold: f64,
    polyps: usize,
    videos: usize,
    operating_points: Vec<OperatingPoint>,
    /// Cohort TPR minus all-lesion TPR.
    observed_delta: Vec<f64>,
    non_inferiority: Vec<TestResult>,
    dropped: usize,
}

#[derive(Debug, Serialize)]
struct CutCount {
    cut: f64,
    videos: usize,
}

#[derive(Debug, Serialize)]
struct CohortBody {
    modality: Modality,
    step: f64,
    min_cohort: usize,
    polyps: usize,
    unresolved_ce: usize,
    video_histogram: Histogram,
    lesion_histogram: Histogram,
    videos_at_least: Vec<CutCount>,
    all_lesions: DatasetSummary,
    thresholds: Vec<CohortRow>,
}

fn cmd_cohort(bundle_path: &Path, which: Modality, args: CohortArgs, cfg: &RunConfig) -> Result<Outcome, CliError> {
    if args.bins == 0 {
        return usage("--bins must be >= 1");
    }
    let sweep = sweep(cfg, args.steps)?;
    let mut inputs = vec![bundle_path.to_path_buf()];
    if let Some(r) = &cfg.ce_rule {
        inputs.push(r.clone());
    }
    let mut bundle = load_bundle(bundle_path, cfg)?;
    if which == Modality::Ce && bundle.frames().values().any(|m| m.ce.is_none()) {
        let root = args
            .frames_root
            .map(Path::to_path_buf)
            .unwrap_or_else(|| bundle_path.join("frames"));
        let resolved = modality::resolve_ce_flags(&bundle, &root, &cfg.ce_rule()?, &Roi::default())?;
        bundle = bundle.with_resolved_ce(&resolved);
        if args.frames_root.is_some() {
            inputs.push(root);
        }
    }
    let profile = ModalityProfile::from_bundle(&bundle);
    let fractions = profile.polyp_fractions(which);
    let edges = modality::uniform_edges(args.bins);
    let video_histogram = modality::video_modality_histogram(&profile, which, &edges)?;
    let lesion_histogram = modality::lesion_modality_histogram(&fractions, &edges)?;
    let videos_at_least = [0.05, 0.25, 0.5]
        .into_iter()
        .map(|cut| CutCount { cut, videos: profile.videos_at_least(which, cut) })
        .collect();

    let table = EvalTable::build(&bundle, &sweep, &cfg.matcher()?)?;
    let (all_lesions, _) = summarize(&bundle, &table, None, cfg)?;
    let boot = cfg.bootstrap();
    let mut thresholds = Vec::new();
    let mut csv = String::from("threshold,polyps,fapm,tpr,ci_lo,ci_hi,delta,p_value,decision\n");
    for (t, cohort) in modality::fraction_sweep(&fractions, args.step, args.min_cohort)? {
        let (summary, _) = summarize(&bundle, &table, Some(&cohort), cfg)?;
        let deltas = bootstrap_cohort_deltas(&table, &cohort, &cfg.fapm, &boot)?;
        let tests = deltas.test(CompareMode::NonInferiority, cfg.margin, cfg.level)?;
        let observed_delta: Vec<f64> = deltas
            .observed_candidate
            .iter()
            .zip(&deltas.observed_reference)
            .map(|(c, r)| c - r)
            .collect();
        for (k, op) in summary.operating_points.iter().enumerate() {
            csv.push_str(&format!(
                "{t},{},{},{},{},{},{},{},{:?}\n",
                summary.polyps,
                op.fapm,
                cell(op.tpr),
                cell(op.ci_lo),
                cell(op.ci_hi),
                cell(observed_delta[k]),
                tests[k].p_display,
                tests[k].decision
            ));
        }
        thresholds.push(CohortRow {
            threshold: t,
            polyps: cohort.len(),
            videos: summary.videos,
            operating_points: summary.operating_points,
            observed_delta,
            non_inferiority: tests,
            dropped: deltas.dropped,
        });
    }
    let files = vec![
        ("cohort.csv".to_string(), csv),
        ("video_histogram.csv".to_string(), video_histogram.to_csv()),
        ("lesion_histogram.csv".to_string(), lesion_histogram.to_csv()),
    ];
    let body = CohortBody {
        modality: which,
        step: args.step,
        min_cohort: args.min_cohort,
        polyps: fractions.len(),
        unresolved_ce: profile.unresolved_ce(),
        video_histogram,
        lesion_histogram,
        videos_at_least,
        all_lesions,
        thresholds,
    };
    Ok(Outcome {
        report: envelope("cohort", cfg, &inputs, &body)?,
        report_name: "cohort.json".into(),
        files,
    })
}

#[derive(Debug, Serialize)]
struct ProjectBody {
    method: MethodArg,
    points: usize,
    per_label: BTreeMap<String, usize>,
    initial_kl: Option<f64>,
    final_kl: Option<f64>,
    tsne: Option<TsneConfig>,
}

fn cmd_project(
    sets: &[Named],
    method: MethodArg,
    perplexity: f64,
    iterations: usize,
    max_per_set: Option<usize>,
    cfg: &RunConfig,
) -> Result<Outcome, CliError> {
    let mut inputs = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut per_label = BTreeMap::new();
    let mut d = None;
    for (si, named) in sets.iter().enumerate() {
        let (set, more) = load_embeddings(&named.path, cfg)?;
        inputs.extend(more);
        if *d.get_or_insert(set.d()) != set.d() {
            return Err(MaceError::DimensionMismatch { a: d.unwrap_or(0), b: set.d() }.into());
        }
        let mut idx: Vec<usize> = (0..set.n()).collect();
        if let Some(m) = max_per_set {
            if m < set.n() {
                idx.shuffle(&mut stats::rng_for(cfg.seed, si as u64));
                idx.truncate(m);
                idx.sort_unstable();
            }
        }
        for &i in &idx {
            rows.push(set.matrix().row(i).iter().copied().collect());
            labels.push(named.name.clone());
        }
        *per_label.entry(named.name.clone()).or_insert(0) += idx.len();
    }
    let all = EmbeddingSet::from_rows(&rows)?;
    let (projection, initial_kl, final_kl, tsne) = match method {
        MethodArg::Pca => (project::pca_2d(&all, &labels)?, None, None, None),
        MethodArg::Tsne => {
            let tc = TsneConfig {
                perplexity,
                iterations,
                seed: cfg.seed,
                ..TsneConfig::default()
            };
            let r = project::tsne_2d(&all, &labels, &tc)?;
            (r.projection, Some(r.initial_kl), Some(r.final_kl), Some(tc))
        }
    };
    let mut files = vec![("projection.csv".to_string(), projection.to_csv())];
    if cfg.svg {
        files.push(("projection.svg".into(), projection.to_svg()));
    }
    let body = ProjectBody {
        method,
        points: projection.len(),
        per_label,
        initial_kl,
        final_kl,
        tsne,
    };
    Ok(Outcome {
        report: envelope("project", cfg, &inputs, &body)?,
        report_name: "project.json".into(),
        files,
    })
}

#[derive(Debug, Serialize)]
struct SynthBody {
    scenario: SynthScenario,
}

fn cmd_synth(path: &Path, cfg: &RunConfig) -> Result<Outcome, CliError> {
    let Some(out) = &cfg.out else {
        return usage("synth needs --out");
    };
    let scenario = SynthScenario::from_json(&read_string(path)?)?.with_default_seed(cfg.seed);
    synth::write_synth_tree(&scenario, out)?;
    Ok(Outcome {
        report: envelope("synth", cfg, &[path.to_path_buf()], SynthBody { scenario })?,
        report_name: "synth.json".into(),
        files: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("mace").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults() {
        let c = parse(&["validate", "x"]);
        assert_eq!(c.config.seed, 17);
        assert_eq!(c.config.resamples, 1000);
        assert_eq!(c.config.margin, 0.015);
        assert_eq!(c.config.fapm, vec![0.5, 1.0]);
        assert_eq!(c.config.window, 7);
        assert_eq!(c.config.iou, 0.2);
        assert!(!c.config.strict);
    }

    #[test]
    fn global_flags_after_subcommand() {
        let c = parse(&["eval", "b", "--fapm", "0.25,2", "--seed", "3", "--strict"]);
        assert_eq!(c.config.fapm, vec![0.25, 2.0]);
        assert_eq!(c.config.seed, 3);
        assert!(c.config.strict);
    }

    #[test]
    fn named_sets() {
        assert_eq!(
            parse_named("ce=a/b.bin").unwrap(),
            Named { name: "ce".into(), path: "a/b.bin".into() }
        );
        assert!(parse_named("a.bin").is_err());
        assert!(parse_named("=a.bin").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = parse(&["validate", "x"]).config;
        assert!(c.validate().is_ok());
        c.window = 6;
        assert_eq!(c.validate().unwrap_err().exit_code(), EXIT_INVALID);
        c.window = 7;
        c.fapm.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn exit_codes() {
        let io = CliError::Ingest(IngestError::Io {
            path: "x".into(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        });
        assert_eq!(io.exit_code(), EXIT_IO);
        assert_eq!(CliError::Ingest(IngestError::ZeroDimension).exit_code(), EXIT_INVALID);
        assert_eq!(CliError::Eval(EvalError::NotEstimable("x".into())).exit_code(), EXIT_NOT_ESTIMABLE);
        assert_eq!(
            CliError::Stats(StatsError::TooFewValidResamples { valid: 1, total: 10 }).exit_code(),
            EXIT_NOT_ESTIMABLE
        );
    }

    fn summary(name: &str, estimate: f64) -> SetSummary {
        SetSummary { name: name.into(), estimate, ci_lo: 0.0, ci_hi: 0.0, units: 1, dropped: 0 }
    }

    #[test]
    fn ordering_uses_adjacent_tests() {
        let sets = vec![summary("wl", 1.0), summary("ce", 3.0), summary("nbi", 2.0)];
        let test = |reject: bool| TestResult {
            kind: stats::TestKind::ZTwoSided,
            statistic: 0.0,
            p_value: 0.5,
            p_display: String::new(),
            ci: (0.0, 0.0),
            level: 0.95,
            decision: if reject { stats::Decision::Reject } else { stats::Decision::FailToReject },
            margin: None,
            n_samples: 2,
        };
        let tests = vec![
            PairTest { a: "wl".into(), b: "ce".into(), test: test(true) },
            PairTest { a: "wl".into(), b: "nbi".into(), test: test(false) },
            PairTest { a: "ce".into(), b: "nbi".into(), test: test(true) },
        ];
        assert_eq!(ordering_summary(&sets, &tests), "ce > nbi ~ wl");
    }
}
