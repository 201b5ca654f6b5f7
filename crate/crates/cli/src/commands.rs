use std::fs;
use std::path::Path;

use epiad::attention::ProjectionWeights;
use epiad::features::{load_manifest, CameraRig, Dataset, Split};
use epiad::geometry::{build_epipolar_mask, estimate_fundamental_8pt, PatchGrid, PixelPoint};
use epiad::membank::{build_bank, score_samples, MemoryBank, ScoreReport};
use epiad::metrics::{evaluate, run_ablation, AblationSpec, MetricTable};
use epiad::pipeline::{fuse_split, fusion_masks, obtain_weights, run_pipeline, Fusion};
use epiad::pretrain::trace_csv;
use epiad::synth::synth_dataset;
use epiad::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::summary::Summary;

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::IoAt {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::IoAt {
        path: path.to_path_buf(),
        source: e,
    })
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out()?;
    fs::create_dir_all(out).map_err(|e| Error::IoAt {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(out)
}

fn load_inputs(cfg: &RunConfig) -> Result<(Dataset, CameraRig)> {
    let manifest = load_manifest(cfg.manifest()?)?;
    let rig_path = cfg.paths.rig.clone().unwrap_or_else(|| manifest.rig_file());
    let rig = CameraRig::load(rig_path)?;
    let dataset = Dataset::load(&manifest)?;
    if rig.view_count() != dataset.shape.views {
        return Err(Error::ShapeMismatch(format!(
            "rig has {} views, dataset has {}",
            rig.view_count(),
            dataset.shape.views
        )));
    }
    Ok((dataset, rig))
}

fn load_weights(cfg: &RunConfig, path: Option<&Path>) -> Result<Option<ProjectionWeights>> {
    if cfg.run.fusion == Fusion::None {
        return Ok(None);
    }
    let path = path.ok_or_else(|| {
        Error::InvalidConfig(format!("fusion {} needs --weights", cfg.run.fusion.as_str()))
    })?;
    ProjectionWeights::load(path).map(Some)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    synth_dataset(&cfg.scene, cfg.n_train, cfg.n_test, out)?;
    let mut s = Summary::new("synth", cfg);
    s.artifact("manifest.json").artifact("rig.json").artifact("features/");
    s.write(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrespondenceFile {
    #[serde(default)]
    src_view: usize,
    #[serde(default = "one")]
    dst_view: usize,
    /// Rows of `[u_a, v_a, u_b, v_b]`.
    points: Vec<[f64; 4]>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Serialize)]
struct FundamentalFile {
    src_view: usize,
    dst_view: usize,
    /// Row-major, unit Frobenius norm, `p_aᵀ F p_b = 0`.
    fundamental: [f64; 9],
    max_residual: f64,
}

pub fn estimate_f(input: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(input).map_err(|e| Error::IoAt {
        path: input.to_path_buf(),
        source: e,
    })?;
    let file: CorrespondenceFile = serde_json::from_str(&text).map_err(|e| {
        Error::Schema(format!("{}: {e} (line {}, column {})", input.display(), e.line(), e.column()))
    })?;
    let pairs: Vec<_> = file
        .points
        .iter()
        .map(|p| (PixelPoint::new(p[0], p[1]), PixelPoint::new(p[2], p[3])))
        .collect();
    let f = estimate_fundamental_8pt(&pairs, file.src_view, file.dst_view)?;
    let max_residual = pairs.iter().map(|&(a, b)| f.residual(a, b).abs()).fold(0.0, f64::max);
    let doc = FundamentalFile {
        src_view: file.src_view,
        dst_view: file.dst_view,
        fundamental: f.to_row_major(),
        max_residual,
    };
    write(out, serde_json::to_string_pretty(&doc).expect("serializes") + "\n")
}

fn view_index(rig: &CameraRig, id: &str) -> Result<usize> {
    rig.view_index(id)
        .or_else(|| id.parse::<usize>().ok().filter(|&i| i < rig.view_count()))
        .ok_or_else(|| Error::InvalidConfig(format!("unknown view {id:?}")))
}

/// Dump the mask between two views as a `T × T` PGM (white = admissible).
pub fn mask(cfg: &RunConfig, pair: &str) -> Result<()> {
    let (grid, rig): (PatchGrid, CameraRig) = match (&cfg.paths.manifest, &cfg.paths.rig) {
        (Some(m), rig) => {
            let manifest = load_manifest(m)?;
            let rig_path = rig.clone().unwrap_or_else(|| manifest.rig_file());
            (manifest.grid, CameraRig::load(rig_path)?)
        }
        (None, Some(r)) => (cfg.scene.grid, CameraRig::load(r)?),
        (None, None) => return Err(Error::InvalidConfig("mask needs --rig or --manifest".into())),
    };
    let (a, b) = pair
        .split_once(',')
        .ok_or_else(|| Error::InvalidConfig(format!("pair must be 'a,b', got {pair:?}")))?;
    let (a, b) = (view_index(&rig, a.trim())?, view_index(&rig, b.trim())?);
    if a == b {
        return Err(Error::InvalidConfig("pair must name two different views".into()));
    }
    let f = rig.fundamental(a, b).ok_or(Error::MissingMaskPair(a, b))?;
    let m = build_epipolar_mask(&grid, f, cfg.run.train.delta_patches)?;
    write(cfg.out()?, m.to_pgm())
}

fn pretrain_into(cfg: &RunConfig, dataset: &Dataset, rig: &CameraRig, out: &Path, s: &mut Summary) -> Result<()> {
    let masks = fusion_masks(rig, dataset, cfg.run.fusion, cfg.run.train.delta_patches)?;
    let (weights, trace) = obtain_weights(dataset, &masks, &cfg.run)?;
    let Some(w) = weights else {
        return Err(Error::InvalidConfig("fusion none has no projection weights".into()));
    };
    w.save(out.join("weights.mvft"))?;
    s.artifact("weights.mvft").artifact("weights.mvft.json");
    if !trace.is_empty() {
        write(&out.join("trace.csv"), trace_csv(&trace))?;
        s.artifact("trace.csv");
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let (dataset, rig) = load_inputs(cfg)?;
    let mut s = Summary::new("pretrain", cfg);
    pretrain_into(cfg, &dataset, &rig, out, &mut s)?;
    s.write(out)
}

pub fn build_bank_cmd(cfg: &RunConfig, weights: Option<&Path>) -> Result<()> {
    let out = out_dir(cfg)?;
    let (dataset, rig) = load_inputs(cfg)?;
    let w = load_weights(cfg, weights)?;
    let masks = fusion_masks(&rig, &dataset, cfg.run.fusion, cfg.run.train.delta_patches)?;
    let train = fuse_split(&dataset, Split::Train, &masks, w.as_ref(), &cfg.run)?;
    let stacks: Vec<_> = train.into_iter().map(|(_, z)| z).collect();
    let bank = build_bank(&stacks, cfg.run.bank, cfg.run.ratio(), cfg.run.seed())?;
    bank.save(out)?;
    let mut s = Summary::new("build-bank", cfg);
    s.artifact("bank.json");
    for i in 0..bank.bank_count() {
        s.artifact(&format!("bank_{i}.mvft"));
    }
    s.write(out)
}

fn write_scores(report: &ScoreReport, grid: &PatchGrid, out: &Path, heatmaps: bool, s: &mut Summary) -> Result<()> {
    write(&out.join("scores.json"), report.to_json())?;
    write(&out.join("scores.csv"), report.summary_csv())?;
    s.artifact("scores.json").artifact("scores.csv");
    if heatmaps {
        let max = report.samples.iter().map(|x| x.sample_score).fold(0.0, f64::max);
        for smp in &report.samples {
            for v in 0..smp.image_scores.len() {
                let name = format!("heatmaps/{}_v{v}.pgm", smp.sample_id);
                write(&out.join(&name), smp.heatmap_pgm(v, grid.grid_w(), grid.grid_h(), max))?;
            }
        }
        s.artifact("heatmaps/");
    }
    Ok(())
}

pub fn score(cfg: &RunConfig, bank: &Path, weights: Option<&Path>, heatmaps: bool) -> Result<()> {
    let out = out_dir(cfg)?;
    let (dataset, rig) = load_inputs(cfg)?;
    let w = load_weights(cfg, weights)?;
    let bank = MemoryBank::load(bank)?;
    let masks = fusion_masks(&rig, &dataset, cfg.run.fusion, cfg.run.train.delta_patches)?;
    let test = fuse_split(&dataset, Split::Test, &masks, w.as_ref(), &cfg.run)?;
    let refine = if cfg.run.refine {
        Some(rig.mask_set(&dataset.grid, cfg.run.train.delta_patches)?)
    } else {
        None
    };
    let samples = score_samples(&test, &bank, refine.as_ref().map(|m| (m, cfg.run.alpha)))?;
    if samples.iter().any(|x| !x.sample_score.is_finite()) {
        return Err(Error::Numeric("non-finite anomaly score".into()));
    }
    let report = ScoreReport {
        metadata: cfg.run.score_metadata(),
        samples,
    };
    let mut s = Summary::new("score", cfg);
    write_scores(&report, &dataset.grid, out, heatmaps, &mut s)?;
    s.write(out)
}

fn write_metrics(m: &MetricTable, out: &Path, s: &mut Summary) -> Result<()> {
    write(&out.join("metrics.csv"), m.to_csv())?;
    write(&out.join("metrics.json"), m.to_json())?;
    s.artifact("metrics.csv").artifact("metrics.json");
    for r in &m.rows {
        s.metric(&format!("{}_{}", r.level.as_str(), r.metric), r.value);
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, scores: &Path) -> Result<()> {
    let out = out_dir(cfg)?;
    let manifest = load_manifest(cfg.manifest()?)?;
    let dataset = Dataset::load(&manifest)?;
    let text = fs::read_to_string(scores).map_err(|e| Error::IoAt {
        path: scores.to_path_buf(),
        source: e,
    })?;
    let report = ScoreReport::from_json(&text)?;
    let metrics = evaluate(&dataset, &report.samples)?;
    let mut s = Summary::new("eval", cfg);
    write_metrics(&metrics, out, &mut s)?;
    s.write(out)
}

/// Parse `0-4` or `0,2,7` into seeds.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::InvalidConfig(format!("bad seed list {text:?}"));
    if let Some((lo, hi)) = text.split_once('-') {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

pub fn ablate(cfg: &RunConfig, seeds: &[u64]) -> Result<()> {
    let out = out_dir(cfg)?;
    let (dataset, rig) = load_inputs(cfg)?;
    let specs = AblationSpec::standard_matrix();
    let table = run_ablation(&dataset, &rig, &specs, seeds, &cfg.run)?;
    write(&out.join("ablation.csv"), table.to_csv())?;
    let mut medians = String::from("fusion,pretraining,bank,median_image_auroc,median_sample_auroc\n");
    for spec in &specs {
        medians.push_str(&format!(
            "{},{},{},{:.12},{:.12}\n",
            spec.fusion.as_str(),
            spec.pretraining.as_str(),
            spec.bank.as_str(),
            table.median_image_auroc(spec),
            table.median_sample_auroc(spec)
        ));
    }
    write(&out.join("ablation_medians.csv"), medians)?;
    let mut s = Summary::new("ablate", cfg);
    s.artifact("ablation.csv").artifact("ablation_medians.csv");
    s.write(out)
}

pub fn pipeline(cfg: &RunConfig, heatmaps: bool) -> Result<()> {
    let out = out_dir(cfg)?;
    let (dataset, rig) = load_inputs(cfg)?;
    let outcome = run_pipeline(&dataset, &rig, &cfg.run)?;
    let mut s = Summary::new("pipeline", cfg);
    if let Some(w) = &outcome.weights {
        w.save(out.join("weights.mvft"))?;
        s.artifact("weights.mvft").artifact("weights.mvft.json");
    }
    if !outcome.trace.is_empty() {
        write(&out.join("trace.csv"), trace_csv(&outcome.trace))?;
        s.artifact("trace.csv");
    }
    outcome.bank.save(out.join("bank"))?;
    s.artifact("bank/");
    write_scores(&outcome.scores, &dataset.grid, out, heatmaps, &mut s)?;
    write_metrics(&outcome.metrics, out, &mut s)?;
    s.write(out)
}
