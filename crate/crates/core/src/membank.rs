//! Coreset memory banks and nearest-prototype scoring.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_feature_tensor, write_feature_tensor, FeatureStack, FeatureTensor};
use crate::geometry::{encode_pgm, EpipolarMaskSet};
use crate::kernels::{col, sq_dist};
use crate::rng::keyed_rng;

pub const SINGLE_CLASS_RATIO: f64 = 0.10;
pub const MULTI_CLASS_RATIO: f64 = 0.0033;
pub const DEFAULT_REFINE_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankLayout {
    /// One bank pooled over all views.
    Shared,
    /// One bank per view.
    #[default]
    PerView,
}

impl BankLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            BankLayout::Shared => "shared",
            BankLayout::PerView => "per-view",
        }
    }
}

/// Prototype sets; either one per view or a single shared set.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    layout: BankLayout,
    views: usize,
    /// `D × n_v` prototype columns.
    banks: Vec<DMatrix<f64>>,
    coreset_ratio: f64,
    source_counts: Vec<usize>,
}

/// Number of prototypes kept from `n` source tokens.
pub fn coreset_size(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// Greedy farthest-point selection over the columns of `points`, starting at
/// `start`. Ties go to the lowest index.
pub fn greedy_coreset_from(points: &DMatrix<f64>, count: usize, start: usize) -> Vec<usize> {
    let n = points.ncols();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut selected = Vec::with_capacity(count);
    selected.push(start);
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(col(points, i), col(points, start))).collect();
    while selected.len() < count {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(sq_dist(col(points, i), col(points, best)));
        }
    }
    selected
}

/// Seeded greedy k-center coreset.
pub fn greedy_coreset(points: &DMatrix<f64>, count: usize, seed: u64) -> Vec<usize> {
    if points.ncols() == 0 {
        return Vec::new();
    }
    let start = keyed_rng(seed, 0, "coreset/start").random_range(0..points.ncols());
    greedy_coreset_from(points, count, start)
}

fn view_tokens(train: &[FeatureStack], view: Option<usize>) -> DMatrix<f64> {
    let d = train.first().map(|s| s.dims()).unwrap_or(0);
    let cols: Vec<_> = train
        .iter()
        .flat_map(|s| {
            (0..s.view_count())
                .filter(move |&v| view.is_none_or(|x| x == v))
                .flat_map(move |v| s.view(v).column_iter())
        })
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Build banks from fused training features.
pub fn build_bank(train: &[FeatureStack], layout: BankLayout, ratio: f64, seed: u64) -> Result<MemoryBank> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("coreset ratio {ratio} outside (0, 1]")));
    }
    let views = train.first().map(|s| s.view_count()).ok_or(Error::EmptyTrainSplit)?;
    let sources: Vec<DMatrix<f64>> = match layout {
        BankLayout::PerView => (0..views).map(|v| view_tokens(train, Some(v))).collect(),
        BankLayout::Shared => vec![view_tokens(train, None)],
    };
    let mut banks = Vec::with_capacity(sources.len());
    let mut source_counts = Vec::with_capacity(sources.len());
    for (v, pts) in sources.iter().enumerate() {
        if pts.ncols() == 0 {
            return Err(Error::EmptyView(v));
        }
        let idx = greedy_coreset(pts, coreset_size(pts.ncols(), ratio), seed.wrapping_add(v as u64));
        banks.push(pts.select_columns(&idx));
        source_counts.push(pts.ncols());
    }
    Ok(MemoryBank {
        layout,
        views,
        banks,
        coreset_ratio: ratio,
        source_counts,
    })
}

/// Per-bank statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankStats {
    pub prototypes: Vec<usize>,
    pub source_counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub total_prototypes: usize,
}

pub fn bank_stats(bank: &MemoryBank) -> BankStats {
    let prototypes: Vec<usize> = bank.banks.iter().map(|b| b.ncols()).collect();
    let fractions = prototypes
        .iter()
        .zip(&bank.source_counts)
        .map(|(&p, &n)| p as f64 / n as f64)
        .collect();
    BankStats {
        total_prototypes: prototypes.iter().sum(),
        prototypes,
        source_counts: bank.source_counts.clone(),
        fractions,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankIndex {
    layout: BankLayout,
    views: usize,
    coreset_ratio: f64,
    source_counts: Vec<usize>,
    files: Vec<String>,
}

impl MemoryBank {
    pub fn from_parts(
        layout: BankLayout,
        views: usize,
        banks: Vec<DMatrix<f64>>,
        coreset_ratio: f64,
        source_counts: Vec<usize>,
    ) -> Result<Self> {
        let expected = match layout {
            BankLayout::PerView => views,
            BankLayout::Shared => 1,
        };
        if banks.len() != expected || source_counts.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{layout:?} layout over {views} views needs {expected} banks, got {}",
                banks.len()
            )));
        }
        if let Some(v) = banks.iter().position(|b| b.ncols() == 0) {
            return Err(Error::EmptyBank(v));
        }
        Ok(MemoryBank {
            layout,
            views,
            banks,
            coreset_ratio,
            source_counts,
        })
    }

    pub fn layout(&self) -> BankLayout {
        self.layout
    }

    pub fn views(&self) -> usize {
        self.views
    }

    /// Number of stored prototype sets: one, or one per view.
    pub fn bank_count(&self) -> usize {
        self.banks.len()
    }

    pub fn coreset_ratio(&self) -> f64 {
        self.coreset_ratio
    }

    /// Prototypes consulted when scoring view `v`.
    pub fn prototypes(&self, v: usize) -> &DMatrix<f64> {
        match self.layout {
            BankLayout::PerView => &self.banks[v],
            BankLayout::Shared => &self.banks[0],
        }
    }

    /// Writes `<dir>/bank.json` and one MVFT file per bank.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let mut files = Vec::new();
        for (i, b) in self.banks.iter().enumerate() {
            let name = format!("bank_{i}.mvft");
            let data: Vec<f32> = b.iter().map(|&x| x as f32).collect();
            let t = FeatureTensor::new(1, b.ncols(), b.nrows(), data)?;
            write_feature_tensor(&t, dir.join(&name))?;
            files.push(name);
        }
        let index = BankIndex {
            layout: self.layout,
            views: self.views,
            coreset_ratio: self.coreset_ratio,
            source_counts: self.source_counts.clone(),
            files,
        };
        let path = dir.join("bank.json");
        let text = serde_json::to_string_pretty(&index).expect("bank index serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io_at(&path, e))?;
        Ok(path)
    }

    /// Load from a bank index file or the directory that contains it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let index_path = if path.is_dir() { path.join("bank.json") } else { path.to_path_buf() };
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io_at(&index_path, e))?;
        let index: BankIndex = serde_json::from_str(&text).map_err(|e| Error::json("bank index", &e))?;
        let base = index_path.parent().unwrap_or(Path::new("."));
        let banks = index
            .files
            .iter()
            .map(|f| {
                let t = read_feature_tensor(base.join(f))?;
                Ok(DMatrix::from_iterator(t.dims(), t.tokens(), t.data().iter().map(|&x| f64::from(x))))
            })
            .collect::<Result<Vec<_>>>()?;
        MemoryBank::from_parts(index.layout, index.views, banks, index.coreset_ratio, index.source_counts)
    }

    /// Copy with every prototype rounded through `f32`, matching a save/load round trip.
    pub fn rounded_to_storage(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.banks {
            b.apply(|x| *x = f64::from(*x as f32));
        }
        out
    }
}

/// Token scores of one view and their maximum.
pub fn score_view(z_v: &DMatrix<f64>, bank: &MemoryBank, v: usize) -> Result<(Vec<f64>, f64)> {
    let protos = bank.prototypes(v);
    if protos.ncols() == 0 {
        return Err(Error::EmptyBank(v));
    }
    if protos.nrows() != z_v.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} dims, bank has {}",
            z_v.nrows(),
            protos.nrows()
        )));
    }
    let scores: Vec<f64> = (0..z_v.ncols())
        .map(|j| {
            let z = col(z_v, j);
            (0..protos.ncols())
                .map(|k| sq_dist(z, col(protos, k)))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    let image = scores.iter().copied().fold(0.0, f64::max);
    Ok((scores, image))
}

pub fn sample_score(image_scores: &[f64]) -> f64 {
    image_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Blend each token score with the mean score of its epipolar neighbours in
/// all other views. Tokens without neighbours keep their score.
pub fn refine_scores_epipolar(scores: &[Vec<f64>], masks: &EpipolarMaskSet, alpha: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("refinement alpha {alpha} outside [0, 1]")));
    }
    let views = scores.len();
    let mut out = scores.to_vec();
    for a in 0..views {
        for j in 0..scores[a].len() {
            let mut sum = 0.0;
            let mut count = 0usize;
            for b in (0..views).filter(|&b| b != a) {
                let m = masks.get(a, b)?;
                for (k, &s) in scores[b].iter().enumerate() {
                    if m.get(j, k) {
                        sum += s;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                out[a][j] = alpha * scores[a][j] + (1.0 - alpha) * sum / count as f64;
            }
        }
    }
    Ok(out)
}

/// Scores of one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    /// `[view][token]`.
    pub token_scores: Vec<Vec<f64>>,
    pub image_scores: Vec<f64>,
    pub sample_score: f64,
}

impl SampleScores {
    pub fn from_token_scores(sample_id: String, token_scores: Vec<Vec<f64>>) -> Self {
        let image_scores: Vec<f64> = token_scores
            .iter()
            .map(|t| t.iter().copied().fold(0.0, f64::max))
            .collect();
        SampleScores {
            sample_id,
            sample_score: sample_score(&image_scores),
            token_scores,
            image_scores,
        }
    }

    /// One 8-bit PGM per view, scaled so that `max_score` maps to 255.
    pub fn heatmap_pgm(&self, view: usize, grid_w: usize, grid_h: usize, max_score: f64) -> Vec<u8> {
        let scale = if max_score > 0.0 { 255.0 / max_score } else { 0.0 };
        let pixels: Vec<u8> = self.token_scores[view]
            .iter()
            .map(|&s| (s * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        encode_pgm(grid_w, grid_h, &pixels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metadata: ScoreMetadata,
    pub samples: Vec<SampleScores>,
}

/// Scoring settings recorded next to the scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMetadata {
    /// `null` stands for an unbounded band.
    pub delta_patches: Option<f64>,
    pub refine: bool,
    pub alpha: f64,
    pub fusion: String,
    pub bank_layout: BankLayout,
}

/// Score every sample against the bank, optionally with epipolar refinement.
pub fn score_samples(
    samples: &[(String, FeatureStack)],
    bank: &MemoryBank,
    refine: Option<(&EpipolarMaskSet, f64)>,
) -> Result<Vec<SampleScores>> {
    samples
        .iter()
        .map(|(id, z)| {
            let mut tokens = Vec::with_capacity(z.view_count());
            for v in 0..z.view_count() {
                tokens.push(score_view(z.view(v), bank, v)?.0);
            }
            if let Some((masks, alpha)) = refine {
                tokens = refine_scores_epipolar(&tokens, masks, alpha)?;
            }
            Ok(SampleScores::from_token_scores(id.clone(), tokens))
        })
        .collect()
}

impl ScoreReport {
    /// CSV with columns `sample_id,sample_score,image_score_0,…`.
    pub fn summary_csv(&self) -> String {
        let views = self.samples.first().map(|s| s.image_scores.len()).unwrap_or(0);
        let mut out = String::from("sample_id,sample_score");
        for v in 0..views {
            out.push_str(&format!(",image_score_{v}"));
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{},{:.9e}", s.sample_id, s.sample_score));
            for x in &s.image_scores {
                out.push_str(&format!(",{x:.9e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("score report", &e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(cols: &[[f64; 2]]) -> FeatureStack {
        let flat: Vec<f64> = cols.iter().flatten().copied().collect();
        FeatureStack::new(vec![DMatrix::from_column_slice(2, cols.len(), &flat)]).unwrap()
    }

    #[test]
    fn square_corners_pick_the_opposite_corner() {
        let pts = DMatrix::from_column_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(greedy_coreset_from(&pts, 2, 0), vec![0, 2]);
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let s = stack(&[[0.0, 0.0], [1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]);
        let bank = build_bank(&[s], BankLayout::PerView, 1.0, 4).unwrap();
        let mut got: Vec<(i64, i64)> = bank
            .prototypes(0)
            .column_iter()
            .map(|c| ((c[0] * 10.0) as i64, (c[1] * 10.0) as i64))
            .collect();
        got.sort();
        assert_eq!(got, vec![(0, 0), (5, 5), (10, 20), (30, -10)]);
    }

    #[test]
    fn coreset_counts() {
        assert_eq!(coreset_size(640, 0.1), 64);
        assert_eq!(coreset_size(640, MULTI_CLASS_RATIO), 3);
        assert_eq!(coreset_size(5, 1e-6), 1);
    }

    #[test]
    fn scoring_cases() {
        let bank = build_bank(&[stack(&[[3.0, 4.0]])], BankLayout::PerView, 1.0, 0).unwrap();
        let (s, img) = score_view(&DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]), &bank, 0).unwrap();
        assert_eq!(s, vec![5.0, 0.0]);
        assert_eq!(img, 5.0);
        assert_eq!(sample_score(&[0.1, 0.9, 0.3]), 0.9);
        assert_eq!(sample_score(&[0.4]), 0.4);
    }

    #[test]
    fn refinement_cases() {
        let mut masks = EpipolarMaskSet::uniform(2, 1, false);
        let scores = vec![vec![0.0], vec![2.0]];
        assert_eq!(refine_scores_epipolar(&scores, &masks, 0.5).unwrap(), scores);
        masks = EpipolarMaskSet::uniform(2, 1, true);
        let r = refine_scores_epipolar(&scores, &masks, 0.5).unwrap();
        assert_eq!(r[0][0], 1.0);
        assert_eq!(refine_scores_epipolar(&scores, &masks, 1.0).unwrap(), scores);
    }

    #[test]
    fn bank_round_trip() {
        let s = stack(&[[0.25, 1.0], [2.0, -3.5], [1.0, 1.0]]);
        let bank = build_bank(&[s], BankLayout::Shared, 0.5, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        assert_eq!(MemoryBank::load(dir.path()).unwrap(), bank.rounded_to_storage());
        assert_eq!(bank_stats(&bank).prototypes, vec![2]);
    }
}
