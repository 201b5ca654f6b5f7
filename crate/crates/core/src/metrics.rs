//! Ranking metrics, evaluation tables and the ablation harness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CameraRig, Dataset, Label, Split};
use crate::membank::{BankLayout, SampleScores};
use crate::pipeline::{finish_arm, prepare_arm, Fusion, Pretraining, RunOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Image,
    Sample,
    Patch,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Image => "image",
            Level::Sample => "sample",
            Level::Patch => "patch",
        }
    }
}

/// Scores with binary labels at one evaluation level.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    pub level: Level,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(level: Level, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Numeric("NaN score".into()));
        }
        Ok(LabeledScores { level, scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    /// Indices sorted by score, ascending.
    fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        idx
    }
}

/// Area under the ROC curve from the rank-sum statistic, ties sharing their
/// average rank.
pub fn auroc(s: &LabeledScores) -> Result<f64> {
    let (n_pos, n_neg) = (s.positives(), s.negatives());
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let order = s.order();
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| s.labels[k]).count();
        rank_sum += avg * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision over descending thresholds, one threshold per distinct
/// score.
pub fn ap(s: &LabeledScores) -> Result<f64> {
    let n_pos = s.positives();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order = s.order();
    order.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut total = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if s.labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        total += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub level: Level,
    pub metric: String,
    pub value: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn get(&self, level: Level, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.level == level && r.metric == metric)
            .map(|r| r.value)
    }

    /// CSV with columns `level,metric,value,n_pos,n_neg`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,metric,value,n_pos,n_neg\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.12},{},{}", r.level.as_str(), r.metric, r.value, r.n_pos, r.n_neg);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric table serializes") + "\n"
    }
}

/// Image, sample and patch level metrics for the test split of `dataset`.
///
/// A view counts as anomalous at image level only if its own patch mask marks
/// a defect. Patch-level AUROC pools every token of every test view and is
/// reported only when patch masks are available.
pub fn evaluate(dataset: &Dataset, scores: &[SampleScores]) -> Result<MetricTable> {
    let by_id: std::collections::HashMap<&str, &SampleScores> =
        scores.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut image = (Vec::new(), Vec::new());
    let mut sample = (Vec::new(), Vec::new());
    let mut patch = (Vec::new(), Vec::new());
    let mut have_masks = true;
    for s in dataset.split(Split::Test) {
        let sc = by_id
            .get(s.sample_id.as_str())
            .ok_or_else(|| Error::ShapeMismatch(format!("no scores for test sample {}", s.sample_id)))?;
        if sc.image_scores.len() != s.features.views() {
            return Err(Error::ShapeMismatch(format!("view count differs for {}", s.sample_id)));
        }
        sample.0.push(sc.sample_score);
        sample.1.push(s.label == Label::Anomalous);
        for v in 0..s.features.views() {
            image.0.push(sc.image_scores[v]);
            image.1.push(s.image_label(v) == 1);
            match &s.patch_masks {
                Some(m) => {
                    patch.0.extend_from_slice(&sc.token_scores[v]);
                    patch.1.extend(m[v].iter().map(|&b| b == 1));
                }
                None => have_masks = false,
            }
        }
    }
    let mut levels = vec![(Level::Image, image), (Level::Sample, sample)];
    if have_masks {
        levels.push((Level::Patch, patch));
    }
    let mut rows = Vec::new();
    for (level, (sc, lab)) in levels {
        let ls = LabeledScores::new(level, sc, lab)?;
        let (n_pos, n_neg) = (ls.positives(), ls.negatives());
        let mut push = |metric: &str, value: f64| {
            rows.push(MetricRow {
                level,
                metric: metric.to_string(),
                value,
                n_pos,
                n_neg,
            })
        };
        push("auroc", auroc(&ls)?);
        if level != Level::Patch {
            push("ap", ap(&ls)?);
        }
    }
    Ok(MetricTable { rows })
}

/// One arm of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub fusion: Fusion,
    pub pretraining: Pretraining,
    pub bank: BankLayout,
}

impl AblationSpec {
    pub const fn new(fusion: Fusion, pretraining: Pretraining, bank: BankLayout) -> Self {
        AblationSpec {
            fusion,
            pretraining,
            bank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let none_fusion = self.fusion == Fusion::None;
        let none_pretrain = self.pretraining == Pretraining::None;
        if none_fusion != none_pretrain {
            return Err(Error::InvalidConfig(format!(
                "fusion {:?} cannot be combined with pretraining {:?}",
                self.fusion, self.pretraining
            )));
        }
        Ok(())
    }

    /// The six arms compared in the ablation study.
    pub fn standard_matrix() -> Vec<AblationSpec> {
        use BankLayout::{PerView, Shared};
        vec![
            AblationSpec::new(Fusion::None, Pretraining::None, Shared),
            AblationSpec::new(Fusion::Epipolar, Pretraining::CopyProxy, Shared),
            AblationSpec::new(Fusion::Epipolar, Pretraining::SingleCenter, Shared),
            AblationSpec::new(Fusion::Epipolar, Pretraining::MultiCenter, Shared),
            AblationSpec::new(Fusion::Epipolar, Pretraining::MultiCenterReg, Shared),
            AblationSpec::new(Fusion::Epipolar, Pretraining::MultiCenterReg, PerView),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub seed: u64,
    pub image_auroc: f64,
    pub sample_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl AblationTable {
    /// Median image-level AUROC of one arm across seeds.
    pub fn median_image_auroc(&self, spec: &AblationSpec) -> f64 {
        median(self.rows.iter().filter(|r| r.spec == *spec).map(|r| r.image_auroc).collect())
    }

    pub fn median_sample_auroc(&self, spec: &AblationSpec) -> f64 {
        median(self.rows.iter().filter(|r| r.spec == *spec).map(|r| r.sample_auroc).collect())
    }

    /// CSV with columns `fusion,pretraining,bank,seed,image_auroc,sample_auroc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fusion,pretraining,bank,seed,image_auroc,sample_auroc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.12},{:.12}",
                r.spec.fusion.as_str(),
                r.spec.pretraining.as_str(),
                r.spec.bank.as_str(),
                r.seed,
                r.image_auroc,
                r.sample_auroc
            );
        }
        out
    }
}

/// Run every spec under every seed. `base` supplies the shared settings; the
/// spec overrides fusion, pretraining and bank layout and the seed overrides
/// every model-side seed. The dataset itself is held fixed. Arms that differ
/// only in bank layout share one set of trained weights.
pub fn run_ablation(
    dataset: &Dataset,
    rig: &CameraRig,
    specs: &[AblationSpec],
    seeds: &[u64],
    base: &RunOptions,
) -> Result<AblationTable> {
    use rayon::prelude::*;
    for s in specs {
        s.validate()?;
    }
    let mut groups: Vec<((Fusion, Pretraining, u64), Vec<AblationSpec>)> = Vec::new();
    for &seed in seeds {
        for &spec in specs {
            let key = (spec.fusion, spec.pretraining, seed);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, members)) => members.push(spec),
                None => groups.push((key, vec![spec])),
            }
        }
    }
    let results = groups
        .par_iter()
        .map(|((_, _, seed), members)| {
            let arm = prepare_arm(dataset, rig, &base.for_arm(members[0], *seed))?;
            members
                .iter()
                .map(|&spec| {
                    let out = finish_arm(dataset, rig, &arm, &base.for_arm(spec, *seed))?;
                    Ok(AblationRow {
                        spec,
                        seed: *seed,
                        image_auroc: out.metrics.get(Level::Image, "auroc").unwrap_or(f64::NAN),
                        sample_auroc: out.metrics.get(Level::Sample, "auroc").unwrap_or(f64::NAN),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<AblationRow> = results.into_iter().flatten().collect();
    let position = |s: &AblationSpec| specs.iter().position(|x| x == s).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (position(&r.spec), r.seed));
    Ok(AblationTable { rows })
}
