//! End-to-end runs: fusion, optional pretraining, bank construction, scoring
//! and evaluation.

use serde::{Deserialize, Serialize};

use crate::attention::{eam_forward_with, ProjectionWeights};
use crate::error::{Error, Result};
use crate::features::{CameraRig, Dataset, FeatureStack, Split};
use crate::geometry::EpipolarMaskSet;
use crate::membank::{
    build_bank, score_samples, BankLayout, MemoryBank, ScoreMetadata, ScoreReport, DEFAULT_REFINE_ALPHA,
    MULTI_CLASS_RATIO, SINGLE_CLASS_RATIO,
};
use crate::metrics::{evaluate, AblationSpec, MetricTable};
use crate::pretrain::{train_from, EpochStats, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Raw features, no cross-view attention.
    None,
    /// Attention over every token pair.
    Unmasked,
    #[default]
    Epipolar,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::None => "none",
            Fusion::Unmasked => "unmasked",
            Fusion::Epipolar => "epipolar",
        }
    }
}

/// How the attention projections are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pretraining {
    /// Only valid without fusion.
    #[serde(rename = "none")]
    None,
    /// Random projections, no training.
    #[serde(rename = "random-init")]
    RandomInit,
    /// Stand-in for copying pretrained backbone attention weights, which are
    /// not available here: random projections, no training.
    #[serde(rename = "copy-proxy")]
    CopyProxy,
    /// One center, no negatives.
    #[serde(rename = "single-center")]
    SingleCenter,
    /// `K` centers, no negatives.
    #[serde(rename = "multi-center")]
    MultiCenter,
    /// `K` centers with the negative regularizer.
    #[default]
    #[serde(rename = "multi-center+reg")]
    MultiCenterReg,
}

impl Pretraining {
    pub fn as_str(self) -> &'static str {
        match self {
            Pretraining::None => "none",
            Pretraining::RandomInit => "random-init",
            Pretraining::CopyProxy => "copy-proxy",
            Pretraining::SingleCenter => "single-center",
            Pretraining::MultiCenter => "multi-center",
            Pretraining::MultiCenterReg => "multi-center+reg",
        }
    }

    /// Training settings for this arm, or `None` if the arm is not trained.
    pub fn train_config(self, base: &TrainConfig) -> Option<TrainConfig> {
        match self {
            Pretraining::None | Pretraining::RandomInit | Pretraining::CopyProxy => None,
            Pretraining::SingleCenter => Some(TrainConfig {
                k_centers: 1,
                lambda: 0.0,
                ..base.clone()
            }),
            Pretraining::MultiCenter => Some(TrainConfig {
                lambda: 0.0,
                ..base.clone()
            }),
            Pretraining::MultiCenterReg => Some(base.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassMode {
    #[default]
    SingleClass,
    MultiClass,
}

impl ClassMode {
    pub fn default_ratio(self) -> f64 {
        match self {
            ClassMode::SingleClass => SINGLE_CLASS_RATIO,
            ClassMode::MultiClass => MULTI_CLASS_RATIO,
        }
    }
}

/// Settings of a single pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub fusion: Fusion,
    pub pretraining: Pretraining,
    pub bank: BankLayout,
    pub mode: ClassMode,
    /// Overrides the mode's default coreset ratio.
    pub coreset_ratio: Option<f64>,
    pub refine: bool,
    pub alpha: f64,
    /// Band half-width and all training settings; `train.seed` seeds the
    /// whole model side of the run.
    pub train: TrainConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            fusion: Fusion::Epipolar,
            pretraining: Pretraining::MultiCenterReg,
            bank: BankLayout::PerView,
            mode: ClassMode::SingleClass,
            coreset_ratio: None,
            refine: false,
            alpha: DEFAULT_REFINE_ALPHA,
            train: TrainConfig::default(),
        }
    }
}

impl RunOptions {
    pub fn ratio(&self) -> f64 {
        self.coreset_ratio.unwrap_or_else(|| self.mode.default_ratio())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn for_arm(&self, spec: AblationSpec, seed: u64) -> RunOptions {
        let mut out = self.clone();
        out.fusion = spec.fusion;
        out.pretraining = spec.pretraining;
        out.bank = spec.bank;
        out.train.seed = seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        AblationSpec::new(self.fusion, self.pretraining, self.bank).validate()?;
        self.train.validate()?;
        let r = self.ratio();
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidConfig(format!("coreset ratio {r} outside (0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    pub fn score_metadata(&self) -> ScoreMetadata {
        ScoreMetadata {
            delta_patches: self.train.delta_patches.is_finite().then_some(self.train.delta_patches),
            refine: self.refine,
            alpha: self.alpha,
            fusion: self.fusion.as_str().to_string(),
            bank_layout: self.bank,
        }
    }
}

/// Attention masks used for fusion under `fusion`.
pub fn fusion_masks(rig: &CameraRig, dataset: &Dataset, fusion: Fusion, delta: f64) -> Result<EpipolarMaskSet> {
    match fusion {
        Fusion::Unmasked | Fusion::None => Ok(EpipolarMaskSet::uniform(
            dataset.shape.views,
            dataset.shape.tokens,
            true,
        )),
        Fusion::Epipolar => rig.mask_set(&dataset.grid, delta),
    }
}

/// Fused features of one split, or the raw features when `weights` is `None`.
pub fn fuse_split(
    dataset: &Dataset,
    split: Split,
    masks: &EpipolarMaskSet,
    weights: Option<&ProjectionWeights>,
    opts: &RunOptions,
) -> Result<Vec<(String, FeatureStack)>> {
    dataset
        .split(split)
        .map(|s| {
            let z = s.features.to_stack();
            let fused = match weights {
                Some(w) => eam_forward_with(&z, masks, w, opts.train.aggregation)?.0,
                None => z,
            };
            Ok((s.sample_id.clone(), fused))
        })
        .collect()
}

/// Projection weights for the arm: trained, random, or absent.
pub fn obtain_weights(
    dataset: &Dataset,
    masks: &EpipolarMaskSet,
    opts: &RunOptions,
) -> Result<(Option<ProjectionWeights>, Vec<EpochStats>)> {
    if opts.fusion == Fusion::None {
        return Ok((None, Vec::new()));
    }
    let init = ProjectionWeights::random(dataset.shape.dims, opts.seed());
    match opts.pretraining.train_config(&opts.train) {
        Some(cfg) => {
            let out = train_from(dataset, masks, &cfg, init)?;
            Ok((Some(out.weights), out.trace))
        }
        None => Ok((Some(init.rounded_to_storage()), Vec::new())),
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub weights: Option<ProjectionWeights>,
    pub trace: Vec<EpochStats>,
    pub bank: MemoryBank,
    pub scores: ScoreReport,
    pub metrics: MetricTable,
}

/// Masks and projection weights of one arm, ready for bank construction.
#[derive(Debug, Clone)]
pub struct PreparedArm {
    pub masks: EpipolarMaskSet,
    pub weights: Option<ProjectionWeights>,
    pub trace: Vec<EpochStats>,
}

pub fn prepare_arm(dataset: &Dataset, rig: &CameraRig, opts: &RunOptions) -> Result<PreparedArm> {
    opts.validate()?;
    let masks = fusion_masks(rig, dataset, opts.fusion, opts.train.delta_patches)?;
    let (weights, trace) = obtain_weights(dataset, &masks, opts)?;
    Ok(PreparedArm { masks, weights, trace })
}

/// Build the bank on the fused training split, score the fused test split
/// and evaluate. `opts.bank` selects the bank layout.
pub fn finish_arm(dataset: &Dataset, rig: &CameraRig, arm: &PreparedArm, opts: &RunOptions) -> Result<PipelineOutcome> {
    let train = fuse_split(dataset, Split::Train, &arm.masks, arm.weights.as_ref(), opts)?;
    let test = fuse_split(dataset, Split::Test, &arm.masks, arm.weights.as_ref(), opts)?;
    if train.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    let train_stacks: Vec<FeatureStack> = train.into_iter().map(|(_, z)| z).collect();
    let bank = build_bank(&train_stacks, opts.bank, opts.ratio(), opts.seed())?.rounded_to_storage();
    let refine_masks = if opts.refine {
        Some(rig.mask_set(&dataset.grid, opts.train.delta_patches)?)
    } else {
        None
    };
    let samples = score_samples(&test, &bank, refine_masks.as_ref().map(|m| (m, opts.alpha)))?;
    if samples.iter().any(|s| !s.sample_score.is_finite()) {
        return Err(Error::Numeric("non-finite anomaly score".into()));
    }
    let metrics = evaluate(dataset, &samples)?;
    Ok(PipelineOutcome {
        weights: arm.weights.clone(),
        trace: arm.trace.clone(),
        bank,
        scores: ScoreReport {
            metadata: opts.score_metadata(),
            samples,
        },
        metrics,
    })
}

/// Train (if the arm asks for it), build the bank on the fused training
/// split, score the fused test split and evaluate.
pub fn run_pipeline(dataset: &Dataset, rig: &CameraRig, opts: &RunOptions) -> Result<PipelineOutcome> {
    let arm = prepare_arm(dataset, rig, opts)?;
    finish_arm(dataset, rig, &arm, opts)
}
