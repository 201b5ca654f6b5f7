//! Acceptance checks. Each test prints one `PASS` or `FAIL` line for its
//! criterion and then asserts it. Run with `--nocapture` to see the report:
//!
//! ```text
//! cargo test --release -p epiad-cli --test acceptance -- --nocapture
//! ```

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use epiad::attention::{eam_forward, ProjectionWeights};
use epiad::features::{CameraRig, Dataset, FeatureStack};
use epiad::geometry::{build_epipolar_mask, estimate_fundamental_8pt, BinaryMask, EpipolarMaskSet, PatchGrid};
use epiad::membank::{coreset_size, greedy_coreset_from};
use epiad::metrics::{ap, auroc, run_ablation, AblationSpec, AblationTable, LabeledScores, Level};
use epiad::membank::BankLayout;
use epiad::pipeline::{prepare_arm, run_pipeline, Fusion, Pretraining, RunOptions};
use epiad::pretrain::{batch_objective, forward_with_negatives, forward_with_selection, ClusterCenters, ForwardOptions};
use epiad::rng::keyed_rng;
use epiad::synth::{make_rig, synth_in_memory, SceneConfig};
use nalgebra::{DMatrix, Vector3};
use rand::Rng;

fn report(criterion: u32, title: &str, pass: bool, detail: &str) -> bool {
    let mut out = std::io::stdout().lock();
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "{verdict} criterion {criterion} ({title}): {detail}");
    let _ = out.flush();
    pass
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

#[test]
fn criterion_1_geometry() {
    let start = Instant::now();
    let grids = [(8, 8, 8), (16, 16, 4), (32, 32, 2), (24, 20, 3)];
    let (mut worst_angle, mut worst_residual, mut mask_mismatches, mut masks_checked) = (0.0f64, 0.0f64, 0, 0);
    for seed in 0..50u64 {
        let mut rng = keyed_rng(seed, 0, "acceptance-rig");
        let (cols, rows, p) = grids[seed as usize % grids.len()];
        let cfg = SceneConfig {
            seed,
            grid: PatchGrid::with_cells(cols, rows, p).unwrap(),
            camera_baseline: rng.random_range(0.8..2.4),
            camera_distance: rng.random_range(3.0..6.0),
            camera_elevation_deg: rng.random_range(-30.0..30.0),
            ..SceneConfig::default()
        };
        let rig = make_rig(&cfg).unwrap();
        let cams = rig.cameras().unwrap();
        let (a, b) = (seed as usize % 3, (seed as usize + 1) % 3);
        let pairs: Vec<_> = (0..20)
            .map(|_| {
                let x = Vector3::new(
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                );
                (cams[a].project(&x).unwrap(), cams[b].project(&x).unwrap())
            })
            .collect();
        let f = estimate_fundamental_8pt(&pairs, a, b).unwrap();
        worst_angle = worst_angle.max(matrix_angle(f.matrix(), &fundamental_from_projections(&cams[a], &cams[b])));
        for &(pa, pb) in &pairs {
            worst_residual = worst_residual.max(f.residual(pa, pb).abs());
        }
        let analytic = rig.fundamental(a, b).unwrap();
        for delta in [0.0, 1.0, 2.5] {
            let m = build_epipolar_mask(&cfg.grid, analytic, delta).unwrap();
            masks_checked += 1;
            if mask_rows(&m) != mask_oracle(&cfg.grid, analytic.matrix(), delta) {
                mask_mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_angle < 1e-6 && worst_residual < 1e-9 && mask_mismatches == 0 && elapsed < Duration::from_secs(10);
    let detail = format!(
        "50 rigs, max angular error {worst_angle:.2e} (< 1e-6), max residual {worst_residual:.2e} (< 1e-9), \
         {mask_mismatches}/{masks_checked} masks differ from brute force (T up to 1024), {} (< 10s)",
        secs(elapsed)
    );
    assert!(report(1, "geometry exactness", pass, &detail), "{detail}");
}

fn oracle_for(z: &FeatureStack, w: &ProjectionWeights, masks: &EpipolarMaskSet) -> Vec<DMatrix<f64>> {
    let m = w.matrices();
    attention_oracle(z.views(), [m[0], m[1], m[2], m[3]], |a, b, j, k| masks.get(a, b).unwrap().get(j, k))
}

fn random_masks(v: usize, t: usize, p: f64, rng: &mut impl Rng) -> EpipolarMaskSet {
    let mut masks = BTreeMap::new();
    for a in 0..v {
        for b in 0..v {
            if a != b {
                masks.insert((a, b), BinaryMask::from_fn(t, |_, _| rng.random_bool(p)));
            }
        }
    }
    EpipolarMaskSet::from_masks(v, t, 1.0, masks).unwrap()
}

#[test]
fn criterion_2_attention() {
    let (mut dense_err, mut masked_weight, mut passthrough_ok) = (0.0f64, 0.0f64, true);
    for inst in 0..60u64 {
        let mut rng = keyed_rng(inst, 0, "acceptance-attention");
        let (v, t, d) = (2 + inst as usize % 3, 1 + inst as usize % 16, 1 + inst as usize % 8);
        let z = random_stack(v, t, d, &mut rng);
        let w = ProjectionWeights::random(d, inst);

        let ones = EpipolarMaskSet::uniform(v, t, true);
        let (fused, _) = eam_forward(&z, &ones, &w).unwrap();
        for (x, y) in fused.views().iter().zip(oracle_for(&z, &w, &ones)) {
            dense_err = dense_err.max(max_rel_err(x, &y));
        }

        let masks = random_masks(v, t, 0.4, &mut rng);
        let (fused, cache) = eam_forward(&z, &masks, &w).unwrap();
        for (x, y) in fused.views().iter().zip(oracle_for(&z, &w, &masks)) {
            dense_err = dense_err.max(max_rel_err(x, &y));
        }
        for ((a, b), m) in masks.pairs() {
            let att = cache.attention(*a, *b).unwrap();
            for j in 0..t {
                for k in 0..t {
                    if !m.get(j, k) {
                        masked_weight = masked_weight.max(att[(j, k)].abs());
                    }
                }
            }
        }
        // token 0 of every view sees nothing in any support view
        let mut empty = BTreeMap::new();
        for a in 0..v {
            for b in 0..v {
                if a != b {
                    empty.insert((a, b), BinaryMask::from_fn(t, |j, _| j != 0));
                }
            }
        }
        let empty = EpipolarMaskSet::from_masks(v, t, 1.0, empty).unwrap();
        let (fused, _) = eam_forward(&z, &empty, &w).unwrap();
        for a in 0..v {
            passthrough_ok &= fused.view(a).column(0) == z.view(a).column(0);
        }
    }
    let pass = dense_err < 1e-9 && masked_weight == 0.0 && passthrough_ok;
    let detail = format!(
        "60 instances, max rel. error vs dense oracle {dense_err:.2e} (< 1e-9), max masked weight {masked_weight:e}, \
         empty rows pass through exactly: {passthrough_ok}"
    );
    assert!(report(2, "attention correctness", pass, &detail), "{detail}");
}

fn random_support_masks(v: usize, t: usize, rng: &mut impl Rng) -> EpipolarMaskSet {
    let mut masks = BTreeMap::new();
    for a in 0..v {
        for b in 0..v {
            if a != b {
                masks.insert((a, b), BinaryMask::from_fn(t, |_, k| k == 0 || rng.random_bool(0.5)));
            }
        }
    }
    EpipolarMaskSet::from_masks(v, t, 1.0, masks).unwrap()
}

#[test]
fn criterion_3_gradients() {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let instances = 50u64;
    for inst in 0..instances {
        let mut rng = keyed_rng(inst, 0, "acceptance-grad");
        let v = 2 + inst as usize % 2;
        let t = 2 + inst as usize % 15;
        let d = 2 + inst as usize % 7;
        let samples: Vec<FeatureStack> = (0..2).map(|_| random_stack(v, t, d, &mut rng)).collect();
        let masks = random_support_masks(v, t, &mut rng);
        let w = ProjectionWeights::random(d, inst);
        let centers = |k: usize, rng: &mut epiad::rng::KeyedRng| {
            ClusterCenters::new(DMatrix::from_fn(d, k, |_, _| rng.random_range(-2.0..2.0)))
        };
        let shared = centers(3, &mut rng);
        let per_view: Vec<_> = (0..v).map(|_| centers(2, &mut rng)).collect();
        let opts = ForwardOptions::default();
        let lambda = 0.1;
        let states: Vec<_> = samples
            .iter()
            .map(|z| forward_with_negatives(z, &masks, &w, opts, 1, &mut rng).unwrap())
            .collect();
        let selections: Vec<_> = states.iter().map(|s| s.selection().cloned()).collect();
        let (_, grads) = batch_objective(&states, &shared, &per_view, lambda).unwrap();
        let loss_at = |w: &ProjectionWeights| {
            let states: Vec<_> = samples
                .iter()
                .zip(&selections)
                .map(|(z, sel)| forward_with_selection(z, &masks, w, opts, sel.clone()).unwrap())
                .collect();
            batch_objective(&states, &shared, &per_view, lambda).unwrap().0.total
        };
        for m in 0..4 {
            for i in 0..d * d {
                let mut plus = w.clone();
                plus.matrices_mut()[m][i] += h;
                let mut minus = w.clone();
                minus.matrices_mut()[m][i] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let an = grads.matrices()[m][i];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "{instances} instances (V 2-3, T <= 16, D <= 8), worst rel. error {worst:.2e} (< 1e-4), {} (< 60s)",
        secs(elapsed)
    );
    assert!(report(3, "gradient correctness", pass, &detail), "{detail}");
}

#[test]
fn criterion_4_metrics() {
    let mut rng = keyed_rng(0, 0, "acceptance-metrics");
    let mut worst = 0.0f64;
    for inst in 0..1000 {
        let n = rng.random_range(2..80);
        let levels = if inst % 2 == 0 { 4 } else { 10_000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let s = LabeledScores::new(Level::Image, scores.clone(), labels.clone()).unwrap();
        worst = worst.max((auroc(&s).unwrap() - auroc_pairs(&scores, &labels)).abs());
        worst = worst.max((ap(&s).unwrap() - ap_sweep(&scores, &labels)).abs());
    }
    let hand_scores = vec![0.1, 0.4, 0.35, 0.8];
    let hand_labels = vec![false, false, true, true];
    let hand = auroc(&LabeledScores::new(Level::Image, hand_scores.clone(), hand_labels.clone()).unwrap()).unwrap();
    let hand_oracle = auroc_pairs(&hand_scores, &hand_labels);
    let pinned = 0.875;
    let pass = worst < 1e-12 && (hand - pinned).abs() < 1e-12;
    let detail = format!(
        "1000 instances with ties, max deviation from sweep oracles {worst:.2e} (< 1e-12); \
         hand case AUROC {hand} (pinned {pinned}, pairwise oracle {hand_oracle})"
    );
    assert!(report(4, "metric exactness", pass, &detail), "{detail}");
}

#[test]
fn criterion_5_coreset() {
    let mut mismatches = 0;
    let mut largest = 0;
    for seed in 0..20u64 {
        let mut rng = keyed_rng(seed, 0, "acceptance-coreset");
        let n = if seed == 0 { 500 } else { rng.random_range(10..=500) };
        largest = largest.max(n);
        let d = rng.random_range(2..16);
        let pts = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
        let count = coreset_size(n, rng.random_range(0.01..0.5));
        let start = rng.random_range(0..n);
        if greedy_coreset_from(&pts, count, start) != coreset_oracle(&pts, count, start) {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    let detail = format!("20 seeds, n up to {largest}, {mismatches} selections differ from the quadratic oracle");
    assert!(report(5, "coreset exactness", pass, &detail), "{detail}");
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn benchmark_data() -> &'static (Dataset, CameraRig) {
    static DATA: OnceLock<(Dataset, CameraRig)> = OnceLock::new();
    DATA.get_or_init(|| synth_in_memory(&SceneConfig::benchmark(), 200, 100).unwrap())
}

/// The standard ablation matrix on the benchmark, with its runtime.
fn benchmark_ablation() -> &'static (AblationTable, Duration) {
    static TABLE: OnceLock<(AblationTable, Duration)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let (ds, rig) = benchmark_data();
        let start = Instant::now();
        let table = run_ablation(ds, rig, &AblationSpec::standard_matrix(), &SEEDS, &RunOptions::default()).unwrap();
        (table, start.elapsed())
    })
}

fn full_method() -> AblationSpec {
    AblationSpec::new(Fusion::Epipolar, Pretraining::MultiCenterReg, BankLayout::PerView)
}

#[test]
fn criterion_6_ablation_ordering() {
    let (table, elapsed) = benchmark_ablation();
    let m = |f, p, b| table.median_image_auroc(&AblationSpec::new(f, p, b));
    use BankLayout::Shared;
    let none = m(Fusion::None, Pretraining::None, Shared);
    let copy = m(Fusion::Epipolar, Pretraining::CopyProxy, Shared);
    let single = m(Fusion::Epipolar, Pretraining::SingleCenter, Shared);
    let mcp = m(Fusion::Epipolar, Pretraining::MultiCenter, Shared);
    let reg = m(Fusion::Epipolar, Pretraining::MultiCenterReg, Shared);
    let full = table.median_image_auroc(&full_method());
    let a = full - none >= 0.02;
    let b = copy < none;
    let c = mcp >= single;
    let d = reg >= mcp;
    let fast = *elapsed < Duration::from_secs(600);
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    let detail = format!(
        "median image AUROC none {none:.4}, copy {copy:.4}, single-center {single:.4}, multi-center {mcp:.4}, \
         multi-center+reg {reg:.4}, full {full:.4}; (a) full - none = {:+.4} >= 0.02 {}; (b) copy < none {}; \
         (c) multi-center >= single-center {}; (d) multi-center+reg >= multi-center {}; {} (< 600s) {}",
        full - none,
        mark(a),
        mark(b),
        mark(c),
        mark(d),
        secs(*elapsed),
        mark(fast)
    );
    let pass = a && b && c && d && fast;
    assert!(report(6, "directional ablation", pass, &detail), "{detail}");
}

#[test]
fn criterion_7_collapse_regularization() {
    let (ds, rig) = benchmark_data();
    let run = |lambda: f64| {
        let mut opts = RunOptions::default();
        opts.pretraining = Pretraining::MultiCenterReg;
        opts.train.lambda = lambda;
        opts.train.epochs = 50;
        let arm = prepare_arm(ds, rig, &opts).unwrap();
        let first = arm.trace.first().unwrap().collapse_indicator;
        let last = arm.trace.last().unwrap().collapse_indicator;
        (first, last, last / first)
    };
    let (f0, l0, r0) = run(0.0);
    let (f1, l1, r1) = run(0.1);
    let pass = r0 < 0.5 && r1 >= 0.5;
    let detail = format!(
        "collapse indicator epoch 1 -> 50: lambda 0 {f0:.4} -> {l0:.4} ({:.1}%, needs < 50%), \
         lambda 0.1 {f1:.4} -> {l1:.4} ({:.1}%, needs >= 50%)",
        100.0 * r0,
        100.0 * r1
    );
    assert!(report(7, "collapse regularization", pass, &detail), "{detail}");
}

#[test]
fn criterion_8_threshold_degeneration() {
    let cfg = SceneConfig {
        feature_dims: 8,
        surface_points: 1500,
        ..SceneConfig::default()
    };
    let (small, small_rig) = synth_in_memory(&cfg, 16, 10).unwrap();
    let mut opts = RunOptions::default();
    opts.train.epochs = 3;
    opts.train.k_centers = 4;
    let mut unbounded = opts.clone();
    unbounded.train.delta_patches = f64::INFINITY;
    let mut unmasked = opts.clone();
    unmasked.fusion = Fusion::Unmasked;
    let x = run_pipeline(&small, &small_rig, &unbounded).unwrap();
    let y = run_pipeline(&small, &small_rig, &unmasked).unwrap();
    let identical = x.weights == y.weights
        && x.bank == y.bank
        && x.scores.samples == y.scores.samples
        && x.metrics.to_csv() == y.metrics.to_csv()
        && x.trace.iter().zip(&y.trace).all(|(p, q)| p.total.to_bits() == q.total.to_bits());

    let (table, _) = benchmark_ablation();
    let (ds, rig) = benchmark_data();
    let mut inf = RunOptions::default();
    inf.train.delta_patches = f64::INFINITY;
    let inf_table = run_ablation(ds, rig, &[full_method()], &SEEDS, &inf).unwrap();
    let at_one = table.median_image_auroc(&full_method());
    let at_inf = inf_table.median_image_auroc(&full_method());
    let pass = identical && at_one >= at_inf;
    let detail = format!(
        "delta = inf bit-identical to unmasked: {identical}; median image AUROC delta = 1 {at_one:.4} vs delta = inf {at_inf:.4}"
    );
    assert!(report(8, "threshold degeneration", pass, &detail), "{detail}");
}

fn epiad(args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_epiad")).args(args).output().expect("binary runs");
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes; `summary.json` loses its timestamp.
fn digest(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().unwrap() == "summary.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("timestamp");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), bytes);
        }
    }
    out
}

/// Run every command twice into fresh directories.
fn run_all_commands(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let cfg = root.join("config.json");
    fs::write(
        &cfg,
        r#"{"scene": {"feature_dims": 8, "surface_points": 1500}, "n_train": 12, "n_test": 8,
            "run": {"train": {"epochs": 2, "k_centers": 3}}}"#,
    )
    .unwrap();
    let out = root.join("out");
    let ds = out.join("ds");
    let m = ds.join("manifest.json");
    epiad(&["synth", "--config", s(&cfg), "--seed", "3", "--out", s(&ds)]);
    let with = |cmd: &str, dir: &str, extra: &[&str]| {
        let target = out.join(dir);
        let mut args = vec![cmd, "--config", s(&cfg), "--manifest", s(&m), "--out", s(&target)];
        args.extend_from_slice(extra);
        epiad(&args);
    };
    with("pipeline", "pipeline", &["--heatmaps", "--refine"]);
    with("pretrain", "pretrain", &[]);
    let weights = out.join("pretrain/weights.mvft");
    with("build-bank", "bank", &["--weights", s(&weights)]);
    let bank = out.join("bank");
    with("score", "score", &["--weights", s(&weights), "--bank", s(&bank)]);
    let scores = out.join("score/scores.json");
    with("eval", "eval", &["--scores", s(&scores)]);
    with("ablate", "ablate", &["--seeds", "0-1"]);
    epiad(&["mask", "--manifest", s(&m), "--pair", "0,2", "--delta", "1.5", "--out", s(&out.join("mask.pgm"))]);

    let rig = CameraRig::load(ds.join("rig.json")).unwrap();
    let cams = rig.cameras().unwrap();
    let rows: Vec<[f64; 4]> = (0..16)
        .map(|i| {
            let t = i as f64 * 0.9;
            let x = Vector3::new(0.7 * t.sin(), 0.5 * (1.7 * t).cos(), 0.6 * (0.4 * t).sin());
            let (a, b) = (cams[0].project(&x).unwrap(), cams[1].project(&x).unwrap());
            [a.u, a.v, b.u, b.v]
        })
        .collect();
    let corr = root.join("corr.json");
    fs::write(&corr, serde_json::json!({ "points": rows }).to_string()).unwrap();
    epiad(&["estimate-f", "--correspondences", s(&corr), "--out", s(&out.join("f.json"))]);
    digest(&out)
}

#[test]
fn criterion_9_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_all_commands(a.path());
    let second = run_all_commands(b.path());
    let differing: Vec<_> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let pass = differing.is_empty() && !first.is_empty();
    let detail = format!(
        "{} artifacts from synth, pipeline, pretrain, build-bank, score, eval, ablate, mask and estimate-f; \
         differing: {differing:?}",
        first.len()
    );
    assert!(report(9, "determinism", pass, &detail), "{detail}");
}
