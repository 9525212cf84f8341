//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mace_core::deteval::{self, CompareMode, EvalTable, FilterConfig, MatchConfig};
use mace_core::ingest::{self, EmbeddingSet, IngestError};
use mace_core::mace::{self, GroupedEmbeddings};
use mace_core::project::{self, TsneConfig};
use mace_core::stats::{self, BootstrapConfig};
use mace_core::synth::{self, DetectorScenario, GroupSpec, PerModality, ShiftScenario};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

fn group(tag: &str, mean: Vec<f64>, var: Vec<f64>, n: usize, units: usize) -> GroupSpec {
    GroupSpec {
        tag: tag.into(),
        mean,
        cov_diag: Some(var),
        cov: None,
        n,
        units,
    }
}

const MEAN_B: [f64; 8] = [1.0, -0.5, 0.5, 0.0, 0.25, -1.0, 0.75, 0.0];
const VAR_A: [f64; 8] = [1.0, 2.0, 0.5, 1.0, 3.0, 1.0, 0.8, 1.5];
const VAR_B: [f64; 8] = [2.0, 1.0, 0.5, 4.0, 1.0, 0.6, 1.2, 1.0];

fn diagonal_closed_form(ma: &[f64], va: &[f64], mb: &[f64], vb: &[f64]) -> f64 {
    let mean: f64 = ma.iter().zip(mb).map(|(a, b)| (a - b).powi(2)).sum();
    let cov: f64 = va.iter().zip(vb).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    mean + cov
}

fn reference_sets() -> BTreeMap<String, EmbeddingSet> {
    let scenario = ShiftScenario {
        seed: Some(101),
        groups: vec![
            group("a", vec![0.0; 8], VAR_A.to_vec(), 50_000, 50),
            group("b", MEAN_B.to_vec(), VAR_B.to_vec(), 50_000, 50),
            group("a2", vec![0.0; 8], VAR_A.to_vec(), 50_000, 50),
        ],
    };
    synth::gen_embeddings(&scenario).expect("scenario generates")
}

fn criterion_1() -> Outcome {
    let sets = reference_sets();
    let cf = diagonal_closed_form(&[0.0; 8], &VAR_A, &MEAN_B, &VAR_B);
    let t = Instant::now();
    let got = mace::mace_between(&sets["a"], &sets["b"]).map_err(|e| e.to_string())?.value;
    let secs = t.elapsed().as_secs_f64();
    let rel = (got - cf).abs() / cf;
    check(
        rel < 0.05 && secs < 10.0,
        format!("mace {got:.4} vs closed form {cf:.4} (rel {rel:.4}), {secs:.2} s"),
    )
}

fn criterion_2() -> Outcome {
    let sets = reference_sets();
    let m = mace::fit_gaussian(&sets["a"]).map_err(|e| e.to_string())?;
    let moment = mace::frechet_distance(&m, &m).map_err(|e| e.to_string())?.value;
    let sampled = mace::mace_between(&sets["a"], &sets["a2"]).map_err(|e| e.to_string())?.value;
    let cf = diagonal_closed_form(&[0.0; 8], &VAR_A, &MEAN_B, &VAR_B);
    check(
        moment.abs() < 1e-8 && sampled < 0.02 * cf,
        format!("moment-level {moment:.2e}, sampled {sampled:.5} (limit {:.5})", 0.02 * cf),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = stats::rng_for(303, 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(2..=64);
        let n = 2 * d + 40;
        let scale_a: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let scale_b: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let shift: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let a = DMatrix::from_fn(n, d, |_, j| scale_a[j] * normal(&mut rng));
        let b = DMatrix::from_fn(n, d, |_, j| shift[j] + scale_b[j] * normal(&mut rng));
        let q = gaussian_matrix(&mut rng, d, d).qr().q();
        let score = |x: DMatrix<f64>, y: DMatrix<f64>| -> Result<f64, String> {
            let x = EmbeddingSet::new(x, vec![]).map_err(|e| e.to_string())?;
            let y = EmbeddingSet::new(y, vec![]).map_err(|e| e.to_string())?;
            Ok(mace::mace_between(&x, &y).map_err(|e| e.to_string())?.value)
        };
        let base = score(a.clone(), b.clone())?;
        let rotated = score(&a * &q, &b * &q)?;
        worst = worst.max((base - rotated).abs() / base);
    }
    check(worst < 1e-8, format!("20 trials, worst relative change {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = stats::rng_for(404, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=64);
        let k = rng.random_range(1..=d);
        let g = gaussian_matrix(&mut rng, d, k);
        let s = &g * g.transpose();
        let s = (&s + s.transpose()) * 0.5;
        let r = mace::matrix_sqrt_psd(&s).map_err(|e| e.to_string())?;
        worst = worst.max((&r * &r - &s).norm() / s.norm());
    }
    check(worst < 1e-6, format!("100 matrices, worst relative Frobenius error {worst:.2e}"))
}

fn brute_force_filter(stream: &[bool], window: usize, votes: usize) -> Vec<bool> {
    let h = window as isize / 2;
    (0..stream.len() as isize)
        .map(|i| {
            let count = (i - h..=i + h)
                .filter(|&j| j >= 0 && (j as usize) < stream.len() && stream[j as usize])
                .count();
            count >= votes
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let mut rng = stats::rng_for(505, 0);
    let mut cases = 0usize;
    for s in 0..1000 {
        let len = rng.random_range(0..=500);
        let density: f64 = rng.random();
        let stream: Vec<bool> = (0..len).map(|_| rng.random_bool(density)).collect();
        for window in [1, 3, 5, 7, 9] {
            for votes in 1..=window {
                let cfg = FilterConfig::new(window, votes, 0.5).map_err(|e| e.to_string())?;
                if deteval::median_filter(&stream, &cfg) != brute_force_filter(&stream, window, votes) {
                    return Err(format!("mismatch on stream {s} (len {len}), window {window}, votes {votes}"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("1000 streams, {cases} (stream, window, votes) cases match"))
}

fn flat_hit(p: f64) -> PerModality {
    PerModality { wl: p, nbi: p, ce: p }
}

fn criterion_6() -> Outcome {
    let mut sc = DetectorScenario::new(500);
    sc.seed = Some(606);
    sc.fps = 5.0;
    sc.minutes = (4.0, 4.0);
    sc.outside_seconds = 0.0;
    sc.polyps_per_video = (8, 12);
    sc.track_frames = (4, 20);
    sc.hit_probability = flat_hit(0.8);
    sc.fa_rate_per_min = 0.5;
    let out = synth::gen_detection_bundle(&sc).map_err(|e| e.to_string())?;
    let ids = out.bundle.video_ids();
    let p = deteval::dataset_tpr_fapm(
        &out.bundle,
        &ids,
        &FilterConfig::default(),
        &MatchConfig::new(0.2).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    check(
        (p.tpr - 0.8).abs() <= 0.02 && (p.fapm - 0.5).abs() <= 0.05 && out.truth.minutes >= 1000.0,
        format!(
            "{} polyps over {:.0} min: tpr {:.4}, fapm {:.4}",
            out.truth.hits.len(),
            out.truth.minutes,
            p.tpr,
            p.fapm
        ),
    )
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let mcfg = MatchConfig::new(0.2).map_err(|e| e.to_string())?;
    let mut covered = 0usize;
    for trial in 0..200u64 {
        let mut sc = DetectorScenario::new(60);
        sc.seed = Some(7_000 + trial);
        sc.fps = 5.0;
        sc.minutes = (2.0, 2.0);
        sc.outside_seconds = 0.0;
        sc.polyps_per_video = (1, 5);
        sc.track_frames = (4, 20);
        sc.hit_probability = flat_hit(0.8);
        let out = synth::gen_detection_bundle(&sc).map_err(|e| e.to_string())?;
        let table = EvalTable::build(&out.bundle, &[FilterConfig::default()], &mcfg).map_err(|e| e.to_string())?;
        let cfg = BootstrapConfig::new(200, 70_000 + trial);
        let dist = stats::bootstrap_distribution(
            |draw| table.point(draw, 0, None).ok().map(|p| p.tpr),
            table.n_videos(),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let (lo, hi) = stats::percentile_ci(&dist.values, 0.95).map_err(|e| e.to_string())?;
        covered += (lo <= 0.8 && 0.8 <= hi) as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        covered >= 180 && secs < 300.0,
        format!("{covered}/200 intervals cover 0.8, {secs:.1} s"),
    )
}

fn noninferiority_bundle(seed: u64, hit: f64) -> Result<EvalTable, String> {
    let mut sc = DetectorScenario::new(1000);
    sc.seed = Some(seed);
    sc.fps = 5.0;
    sc.minutes = (1.0, 1.0);
    sc.outside_seconds = 0.0;
    sc.polyps_per_video = (5, 7);
    sc.track_frames = (4, 10);
    sc.hit_probability = flat_hit(hit);
    sc.fa_rate_per_min = 0.2;
    let out = synth::gen_detection_bundle(&sc).map_err(|e| e.to_string())?;
    let sweep: Vec<FilterConfig> = (1..10)
        .map(|i| FilterConfig::new(7, 4, i as f64 / 10.0))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    EvalTable::build(&out.bundle, &sweep, &MatchConfig::new(0.2).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())
}

fn non_inferior(reference: &EvalTable, candidate: &EvalTable, seed: u64) -> Result<bool, String> {
    let cfg = BootstrapConfig::new(1000, seed);
    let tests = deteval::compare_datasets(
        reference,
        candidate,
        &[0.5, 1.0],
        &cfg,
        CompareMode::NonInferiority,
        0.015,
        0.95,
    )
    .map_err(|e| e.to_string())?;
    Ok(tests.iter().all(|t| t.rejected()))
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let (mut same, mut deficit) = (0usize, 0usize);
    for trial in 0..100u64 {
        let reference = noninferiority_bundle(8_000 + trial, 0.9)?;
        same += non_inferior(&reference, &reference, 80_000 + trial)? as usize;
        let worse = noninferiority_bundle(9_000 + trial, 0.8)?;
        deficit += !non_inferior(&reference, &worse, 90_000 + trial)? as usize;
    }
    check(
        same >= 95 && deficit >= 95,
        format!(
            "identical: {same}/100 non-inferior; 0.10 deficit: {deficit}/100 not non-inferior, {:.1} s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_9() -> Outcome {
    let d = 8;
    let shifted = |tag: &str, shift: f64, var: f64| {
        let mean = (0..d).map(|j| if j < 4 { shift } else { 0.0 }).collect();
        group(tag, mean, vec![var; d], 2000, 40)
    };
    let mut ok_runs = 0usize;
    let mut detail = String::new();
    for run in 0..20u64 {
        let scenario = ShiftScenario {
            seed: Some(900 + run),
            groups: vec![
                group("train", vec![0.0; d], vec![1.0; d], 2000, 40),
                shifted("wl", 0.15, 1.0),
                shifted("nbi", 0.35, 1.3),
                shifted("ce", 0.6, 1.8),
            ],
        };
        let sets = synth::gen_embeddings(&scenario).map_err(|e| e.to_string())?;
        let grouped: BTreeMap<&str, GroupedEmbeddings> =
            sets.iter().map(|(k, v)| (k.as_str(), GroupedEmbeddings::by_video(v))).collect();
        let cfg = BootstrapConfig::new(1000, 9_000 + run);
        let dist = |tag: &str, stream: u64| -> Result<Vec<f64>, String> {
            Ok(mace::mace_bootstrap(&grouped["train"], &grouped[tag], &cfg, stream)
                .map_err(|e| e.to_string())?
                .values)
        };
        let (wl, nbi, ce) = (dist("wl", 1)?, dist("nbi", 2)?, dist("ce", 3)?);
        let est = |tag: &str| mace::mace_between(&sets["train"], &sets[tag]).map(|s| s.value);
        let (ewl, enbi, ece) = (
            est("wl").map_err(|e| e.to_string())?,
            est("nbi").map_err(|e| e.to_string())?,
            est("ce").map_err(|e| e.to_string())?,
        );
        let z = |a: &[f64], b: &[f64]| stats::z_test_two_sided(a, b, 0.95).map(|t| t.rejected());
        let rejects = [z(&ce, &nbi), z(&nbi, &wl), z(&ce, &wl)]
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        if ece > enbi && enbi > ewl && rejects.iter().all(|r| *r) {
            ok_runs += 1;
        }
        if run == 0 {
            detail = format!("run 0: wl {ewl:.3} < nbi {enbi:.3} < ce {ece:.3}");
        }
    }
    check(ok_runs == 20, format!("{ok_runs}/20 runs ordered with all z-tests rejecting; {detail}"))
}

fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> f64 {
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let n = coords.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(coords[i], coords[j]);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        let a = sums[own] / counts[own] as f64;
        let b = sums[1 - own] / counts[1 - own] as f64;
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

fn criterion_10() -> Outcome {
    let mut rng = stats::rng_for(1010, 0);
    let d = 10;
    let rows: Vec<Vec<f64>> = (0..500)
        .map(|i| {
            let c = if i < 250 { 0.0 } else { 10.0 };
            (0..d).map(|j| if j == 0 { c } else { 0.0 } + normal(&mut rng)).collect()
        })
        .collect();
    let set = EmbeddingSet::from_rows(&rows).map_err(|e| e.to_string())?;
    let names: Vec<String> = (0..500).map(|i| if i < 250 { "a" } else { "b" }.to_string()).collect();
    let truth: Vec<usize> = (0..500).map(|i| (i >= 250) as usize).collect();
    let cfg = TsneConfig::default();
    let run = |threads: usize| -> Result<(project::TsneResult, f64), String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        let t = Instant::now();
        let r = pool.install(|| project::tsne_2d(&set, &names, &cfg)).map_err(|e| e.to_string())?;
        Ok((r, t.elapsed().as_secs_f64()))
    };
    let (one, secs) = run(1)?;
    let (four, _) = run(4)?;
    let coords = &one.projection.coords;
    let same = coords
        .iter()
        .zip(&four.projection.coords)
        .all(|(a, b)| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits());
    let s = silhouette(coords, &truth);
    check(
        one.final_kl < one.initial_kl && same && s > 0.5 && secs < 60.0,
        format!(
            "KL {:.3} -> {:.3}, identical across 1/4 threads: {same}, silhouette {s:.3}, {secs:.1} s",
            one.initial_kl, one.final_kl
        ),
    )
}

const PIPELINE_SCENARIO: &str = r#"{
  "shift": {
    "groups": [
      {"tag": "train", "mean": [0, 0, 0, 0], "cov_diag": [1, 1, 1, 1], "n": 400, "units": 20},
      {"tag": "wl", "mean": [0.2, 0, 0, 0], "cov_diag": [1, 1, 1, 1], "n": 400, "units": 20},
      {"tag": "ce", "mean": [0.8, 0.4, 0, 0], "cov_diag": [1.5, 1, 1, 1], "n": 400, "units": 20}
    ]
  },
  "detector": {
    "n_videos": 12,
    "fps": 10,
    "minutes": [1, 2],
    "polyps_per_video": [1, 3],
    "hit_probability": {"wl": 0.9, "nbi": 0.8, "ce": 0.7},
    "modality_mix": {"wl": 0.6, "nbi": 0.2, "ce": 0.2},
    "ce_from_pixels": true
  }
}
"#;

fn files_under(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in fs::read_dir(dir).expect("readable dir") {
        let path = entry.expect("dir entry").path();
        if path.is_dir() {
            files_under(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).expect("under root").to_path_buf();
            out.insert(rel, fs::read(&path).expect("readable file"));
        }
    }
}

fn pipeline_once(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    fs::write(dir.join("scenario.json"), PIPELINE_SCENARIO).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 3] = [
        &["--seed", "23", "synth", "scenario.json", "--out", "run"],
        &["--seed", "23", "--resamples", "200", "eval", "run/bundle", "--out", "eval"],
        &[
            "--seed",
            "23",
            "--resamples",
            "200",
            "mace-test",
            "--reference",
            "train=run/embeddings/train.bin",
            "wl=run/embeddings/wl.bin",
            "ce=run/embeddings/ce.bin",
            "--out",
            "mace_test",
        ],
    ];
    let mut files = BTreeMap::new();
    for (i, args) in steps.iter().enumerate() {
        let out = Command::new(env!("CARGO_BIN_EXE_mace"))
            .args(*args)
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "step {i} exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        files.insert(PathBuf::from(format!("stdout-{i}")), out.stdout);
    }
    for sub in ["run", "eval", "mace_test"] {
        files_under(dir, &dir.join(sub), &mut files);
    }
    Ok(files)
}

fn criterion_11() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline_once(a.path())?;
    let second = pipeline_once(b.path())?;
    let names: Vec<_> = first.keys().collect();
    if first.keys().ne(second.keys()) {
        return Err("runs produced different file sets".into());
    }
    let differing: Vec<_> = first
        .iter()
        .filter(|(k, v)| second[*k] != **v)
        .map(|(k, _)| k.display().to_string())
        .collect();
    let has = |p: &str| first.contains_key(Path::new(p));
    check(
        differing.is_empty() && has("eval/eval.json") && has("mace_test/mace_test.json"),
        format!("{} files compared, differing: {differing:?}", names.len()),
    )
}

fn valid_embedding_bytes(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<u8> {
    let mut bytes = b"MACE".to_vec();
    bytes.extend(1u16.to_le_bytes());
    bytes.extend(0u16.to_le_bytes());
    bytes.extend((n as u32).to_le_bytes());
    bytes.extend((d as u32).to_le_bytes());
    let mut written = 0;
    while written < n * d {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            bytes.extend(v.to_le_bytes());
            written += 1;
        }
    }
    bytes
}

fn error_name(e: &IngestError) -> &'static str {
    match e {
        IngestError::BadMagic { .. } => "BadMagic",
        IngestError::VersionUnsupported(_) => "VersionUnsupported",
        IngestError::TruncatedHeader { .. } => "TruncatedHeader",
        IngestError::ReservedNonZero(_) => "ReservedNonZero",
        IngestError::ZeroDimension => "ZeroDimension",
        IngestError::SizeOverflow { .. } => "SizeOverflow",
        IngestError::TruncatedPayload { .. } => "TruncatedPayload",
        IngestError::TrailingBytes { .. } => "TrailingBytes",
        IngestError::NonFiniteValue { .. } => "NonFiniteValue",
        _ => "other",
    }
}

fn malformed_corpus(rng: &mut ChaCha8Rng) -> Vec<(Vec<u8>, &'static str)> {
    let mut corpus = Vec::new();
    for _ in 0..5 {
        let n = rng.random_range(1..20);
        let d = rng.random_range(1..20);
        let good = valid_embedding_bytes(rng, n, d);
        let set_u32 = |b: &mut Vec<u8>, at: usize, v: u32| b[at..at + 4].copy_from_slice(&v.to_le_bytes());

        let mut b = good.clone();
        b[rng.random_range(0..4)] ^= 1 << rng.random_range(0..8);
        corpus.push((b, "BadMagic"));

        corpus.push((good[..rng.random_range(4..16)].to_vec(), "TruncatedHeader"));

        let mut b = good.clone();
        let version: u16 = rng.random_range(2..=u16::MAX);
        b[4..6].copy_from_slice(&version.to_le_bytes());
        corpus.push((b, "VersionUnsupported"));

        let mut b = good.clone();
        let reserved: u16 = rng.random_range(1..=u16::MAX);
        b[6..8].copy_from_slice(&reserved.to_le_bytes());
        corpus.push((b, "ReservedNonZero"));

        let mut b = good.clone();
        set_u32(&mut b, 12, 0);
        corpus.push((b, "ZeroDimension"));

        let mut b = good.clone();
        set_u32(&mut b, 8, rng.random_range(1 << 31..=u32::MAX));
        set_u32(&mut b, 12, rng.random_range(1 << 31..=u32::MAX));
        corpus.push((b, "SizeOverflow"));

        let mut b = good.clone();
        b.truncate(good.len() - rng.random_range(1..=4 * n * d));
        corpus.push((b, "TruncatedPayload"));

        let mut b = good.clone();
        set_u32(&mut b, 8, (n + rng.random_range(1..5)) as u32);
        corpus.push((b, "TruncatedPayload"));

        let mut b = good.clone();
        b.extend((0..rng.random_range(1..9)).map(|_| rng.random::<u8>()));
        corpus.push((b, "TrailingBytes"));

        let mut b = good.clone();
        let at = 16 + 4 * rng.random_range(0..n * d);
        let bad = [f32::NAN, f32::INFINITY, f32::NEG_INFINITY][rng.random_range(0..3)];
        b[at..at + 4].copy_from_slice(&bad.to_le_bytes());
        corpus.push((b, "NonFiniteValue"));
    }
    corpus
}

fn criterion_12() -> Outcome {
    let mut rng = stats::rng_for(1212, 0);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    for i in 0..20 {
        let (n, d) = (rng.random_range(0..30), rng.random_range(1..40));
        let bytes = valid_embedding_bytes(&mut rng, n, d);
        let path = dir.path().join(format!("good{i}.bin"));
        fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        let set = ingest::read_embeddings(&path).map_err(|e| e.to_string())?;
        if ingest::write_embeddings(&set) != bytes {
            return Err(format!("round trip of a {n}x{d} file is not byte-exact"));
        }
    }
    let sampled = DMatrix::from_fn(7, 5, |_, _| f64::from(normal(&mut rng) as f32));
    let set = EmbeddingSet::new(sampled, vec![]).map_err(|e| e.to_string())?;
    let bytes = ingest::write_embeddings(&set);
    let back = ingest::parse_embeddings(&bytes).map_err(|e| e.to_string())?;
    if back != set || ingest::write_embeddings(&back) != bytes {
        return Err("write/parse cycle changed an f32-representable matrix".into());
    }

    let corpus = malformed_corpus(&mut rng);
    let mut named = 0usize;
    for (i, (bytes, expected)) in corpus.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.bin"));
        fs::write(&path, bytes).map_err(|e| e.to_string())?;
        match panic::catch_unwind(|| ingest::read_embeddings(&path)) {
            Err(_) => return Err(format!("file {i} ({expected}) panicked")),
            Ok(Ok(_)) => return Err(format!("file {i} ({expected}) was accepted")),
            Ok(Err(e)) if error_name(&e) != *expected => {
                return Err(format!("file {i}: expected {expected}, got {e}"))
            }
            Ok(Err(_)) => named += 1,
        }
    }
    check(
        corpus.len() == 50 && named == 50,
        format!("21 round trips byte-exact; {named}/{} malformed files rejected with the expected error", corpus.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("MACE closed-form agreement", criterion_1),
        ("MACE self-distance", criterion_2),
        ("rotation invariance", criterion_3),
        ("matrix square root", criterion_4),
        ("median filter oracle", criterion_5),
        ("planted detector recovery", criterion_6),
        ("bootstrap coverage", criterion_7),
        ("non-inferiority behaviour", criterion_8),
        ("MACE ordering test", criterion_9),
        ("t-SNE sanity", criterion_10),
        ("end-to-end determinism", criterion_11),
        ("format fidelity", criterion_12),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS criterion {:>2} {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {d} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
