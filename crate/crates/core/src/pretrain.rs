//! Multi-center pretraining of the attention projections.
//!
//! Normal patch features are pulled towards their nearest of `K` k-means
//! centers. To keep that objective from shrinking everything onto a few
//! points, each sample also yields a handful of synthesized negatives: one
//! support-view token is erased, the forward pass is repeated, and the
//! reference-view tokens on its epipolar band whose fused features moved the
//! most are pushed away from the per-view centers together with the erased
//! token itself.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{eam_backward, eam_forward_with, Aggregation, AttentionCache, ProjectionWeights};
use crate::error::{Error, Result};
use crate::features::{Dataset, FeatureStack, Split};
use crate::geometry::EpipolarMaskSet;
use crate::kernels::{col, sq_dist};
use crate::rng::{keyed_rng, KeyedRng};

/// Floor inside the logarithm of the negative loss.
pub const NEG_LOG_EPS: f64 = 1e-12;
const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 100;

/// `K` prototypes stored as the columns of a `D × K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCenters {
    pub centers: DMatrix<f64>,
    pub per_view: bool,
}

impl ClusterCenters {
    pub fn new(centers: DMatrix<f64>) -> Self {
        ClusterCenters {
            centers,
            per_view: false,
        }
    }

    pub fn count(&self) -> usize {
        self.centers.ncols()
    }

    pub fn dims(&self) -> usize {
        self.centers.nrows()
    }
}

/// Index of the nearest center; ties go to the lowest index.
pub fn assign_nearest(z: &[f64], centers: &ClusterCenters) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..centers.count() {
        let d = sq_dist(z, col(&centers.centers, k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations on the columns of `points`.
pub fn kmeans_init(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<ClusterCenters> {
    let n = points.ncols();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { points: n, k });
    }
    let mut rng = keyed_rng(seed, 0, "kmeans++");
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(col(points, i), col(points, chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // guard against rounding walking past the last positive weight
            if nearest[pick] == 0.0 {
                pick = nearest.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(col(points, i), col(points, next)));
        }
    }
    let centers = DMatrix::from_fn(points.nrows(), k, |r, c| points[(r, chosen[c])]);
    Ok(lloyd(points, ClusterCenters::new(centers)))
}

/// Lloyd iterations from the given centers until no center moves by more
/// than 1e-6 or 100 rounds have run. Empty clusters keep their center.
pub fn lloyd(points: &DMatrix<f64>, start: ClusterCenters) -> ClusterCenters {
    let per_view = start.per_view;
    let mut current = start;
    let k = current.count();
    let n = points.ncols();
    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, a) in assignment.iter_mut().enumerate() {
            *a = assign_nearest(col(points, i), &current);
        }
        let mut sums = DMatrix::<f64>::zeros(points.nrows(), k);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            let mut c = sums.column_mut(a);
            c += points.column(i);
            counts[a] += 1;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean = sums.column(c) / counts[c] as f64;
            shift = shift.max((&mean - current.centers.column(c)).norm());
            current.centers.set_column(c, &mean);
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    current.per_view = per_view;
    current
}

/// Mean distance of every token in the batch to its nearest center.
pub fn positive_loss(batch: &[FeatureStack], centers: &ClusterCenters) -> f64 {
    positive_loss_and_grad(batch, centers, false).0
}

fn positive_loss_and_grad(
    batch: &[FeatureStack],
    centers: &ClusterCenters,
    want_grad: bool,
) -> (f64, Vec<FeatureStack>) {
    let n: usize = batch.iter().map(|s| s.view_count() * s.tokens()).sum();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for s in batch {
        let mut g_views = Vec::with_capacity(s.view_count());
        for v in 0..s.view_count() {
            let x = s.view(v);
            let mut g = if want_grad {
                DMatrix::zeros(x.nrows(), x.ncols())
            } else {
                DMatrix::zeros(0, 0)
            };
            for j in 0..x.ncols() {
                let k = assign_nearest(col(x, j), centers);
                let diff = x.column(j) - centers.centers.column(k);
                let dist = diff.norm();
                total += dist;
                if want_grad && dist > 0.0 {
                    g.set_column(j, &(diff * (inv_n / dist)));
                }
            }
            g_views.push(g);
        }
        if want_grad {
            grads.push(FeatureStack::new(g_views).expect("same shapes"));
        }
    }
    (total * inv_n, grads)
}

/// How the erased support token is filled before the second forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFill {
    #[default]
    Zero,
    /// Mean feature of the support view.
    Mean,
}

/// Which tokens become negatives for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSelection {
    pub support_view: usize,
    pub support_token: usize,
    /// `(reference view, token)` picks, excluding the erased support token.
    pub picks: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeEntry {
    pub view: usize,
    pub token: usize,
    pub feature: DVector<f64>,
}

/// Altered reference tokens plus the erased support token, with their fused
/// features from the erased forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub entries: Vec<NegativeEntry>,
    pub support_view: usize,
    pub support_token: usize,
}

fn erase_token(z: &FeatureStack, view: usize, token: usize, fill: MaskFill) -> FeatureStack {
    let mut out = z.clone();
    let value = match fill {
        MaskFill::Zero => DVector::zeros(z.dims()),
        MaskFill::Mean => z.view(view).column_mean(),
    };
    out.view_mut(view).set_column(token, &value);
    out
}

/// Support tokens with at least one epipolar correspondent in another view.
pub fn eligible_support_tokens(masks: &EpipolarMaskSet, b: usize) -> Vec<usize> {
    (0..masks.tokens())
        .filter(|&k| {
            (0..masks.views())
                .filter(|&a| a != b)
                .any(|a| masks.get(a, b).map(|m| m.column_nonempty(k)).unwrap_or(false))
        })
        .collect()
}

/// For every reference view `a ≠ b`, the `n_k` tokens on the epipolar band of
/// support token `k` whose fused features changed the most (ties to the lower
/// index).
pub fn select_most_altered(
    original: &FeatureStack,
    altered: &FeatureStack,
    masks: &EpipolarMaskSet,
    b: usize,
    k: usize,
    n_k: usize,
) -> Result<Vec<(usize, usize)>> {
    let mut picks = Vec::new();
    for a in 0..original.view_count() {
        if a == b {
            continue;
        }
        let m = masks.get(a, b)?;
        let mut cands: Vec<(f64, usize)> = (0..original.tokens())
            .filter(|&j| m.get(j, k))
            .map(|j| ((original.view(a).column(j) - altered.view(a).column(j)).norm(), j))
            .collect();
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        picks.extend(cands.into_iter().take(n_k).map(|(_, j)| (a, j)));
    }
    Ok(picks)
}

/// Forward state of one sample, optionally with its erased companion pass.
pub struct SampleState {
    pub fused: FeatureStack,
    cache: AttentionCache,
    negative: Option<ErasedPass>,
}

struct ErasedPass {
    selection: NegativeSelection,
    fused: FeatureStack,
    cache: AttentionCache,
}

impl SampleState {
    pub fn selection(&self) -> Option<&NegativeSelection> {
        self.negative.as_ref().map(|n| &n.selection)
    }

    pub fn negative_set(&self) -> Option<NegativeSet> {
        let n = self.negative.as_ref()?;
        let sel = &n.selection;
        let mut entries: Vec<NegativeEntry> = sel
            .picks
            .iter()
            .map(|&(v, j)| NegativeEntry {
                view: v,
                token: j,
                feature: n.fused.view(v).column(j).into_owned(),
            })
            .collect();
        entries.push(NegativeEntry {
            view: sel.support_view,
            token: sel.support_token,
            feature: n.fused.view(sel.support_view).column(sel.support_token).into_owned(),
        });
        Some(NegativeSet {
            entries,
            support_view: sel.support_view,
            support_token: sel.support_token,
        })
    }
}

/// Options shared by the forward passes of one training run.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub aggregation: Aggregation,
    pub fill: MaskFill,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            aggregation: Aggregation::Sum,
            fill: MaskFill::Zero,
        }
    }
}

/// Run the forward pass and, if `selection` is given, the erased pass for
/// that fixed negative selection.
pub fn forward_with_selection(
    z: &FeatureStack,
    masks: &EpipolarMaskSet,
    w: &ProjectionWeights,
    opts: ForwardOptions,
    selection: Option<NegativeSelection>,
) -> Result<SampleState> {
    let (fused, cache) = eam_forward_with(z, masks, w, opts.aggregation)?;
    let negative = match selection {
        Some(selection) => {
            let erased = erase_token(z, selection.support_view, selection.support_token, opts.fill);
            let (fused, cache) = eam_forward_with(&erased, masks, w, opts.aggregation)?;
            Some(ErasedPass {
                selection,
                fused,
                cache,
            })
        }
        None => None,
    };
    Ok(SampleState {
        fused,
        cache,
        negative,
    })
}

/// Forward pass plus randomized negative synthesis.
pub fn forward_with_negatives(
    z: &FeatureStack,
    masks: &EpipolarMaskSet,
    w: &ProjectionWeights,
    opts: ForwardOptions,
    n_k: usize,
    rng: &mut KeyedRng,
) -> Result<SampleState> {
    let (fused, cache) = eam_forward_with(z, masks, w, opts.aggregation)?;
    let v_count = z.view_count();
    let b = rng.random_range(0..v_count);
    let eligible = eligible_support_tokens(masks, b);
    if eligible.is_empty() {
        return Err(Error::NoEligibleSupportToken);
    }
    let k = eligible[rng.random_range(0..eligible.len())];
    let erased = erase_token(z, b, k, opts.fill);
    let (m_fused, m_cache) = eam_forward_with(&erased, masks, w, opts.aggregation)?;
    let picks = select_most_altered(&fused, &m_fused, masks, b, k, n_k)?;
    Ok(SampleState {
        fused,
        cache,
        negative: Some(ErasedPass {
            selection: NegativeSelection {
                support_view: b,
                support_token: k,
                picks,
            },
            fused: m_fused,
            cache: m_cache,
        }),
    })
}

/// Erase a random support token and collect the most altered reference tokens.
pub fn synthesize_negatives(
    z: &FeatureStack,
    masks: &EpipolarMaskSet,
    w: &ProjectionWeights,
    n_k: usize,
    rng: &mut KeyedRng,
) -> Result<NegativeSet> {
    let state = forward_with_negatives(z, masks, w, ForwardOptions::default(), n_k, rng)?;
    Ok(state.negative_set().expect("negatives were synthesized"))
}

/// Mean distance from `z` to the centers, and its gradient.
fn mean_center_distance(z: DVectorView<f64>, centers: &ClusterCenters) -> (f64, DVector<f64>) {
    let k = centers.count() as f64;
    let mut total = 0.0;
    let mut grad = DVector::zeros(z.len());
    for c in centers.centers.column_iter() {
        let diff = z - c;
        let d = diff.norm();
        total += d;
        if d > 0.0 {
            grad.axpy(1.0 / (d * k), &diff, 1.0);
        }
    }
    (total / k, grad)
}

/// `−Σ log(max(ε, mean_k ‖z̃ − m_k‖))` over the entries, with the bank of each
/// entry's own view.
pub fn negative_loss(neg: &NegativeSet, per_view_centers: &[ClusterCenters]) -> f64 {
    neg.entries
        .iter()
        .map(|e| {
            let (avg, _) = mean_center_distance(e.feature.as_view(), &per_view_centers[e.view]);
            -avg.max(NEG_LOG_EPS).ln()
        })
        .sum()
}

pub fn total_loss(pos: f64, neg: f64, lambda: f64) -> f64 {
    pos + lambda * neg
}

/// Loss terms of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub positive: f64,
    pub negative: Option<f64>,
    pub total: f64,
}

/// Evaluate the combined objective on forward states and backpropagate it to
/// the projection weights. Assignments and negative picks are taken as fixed.
pub fn batch_objective(
    states: &[SampleState],
    centers: &ClusterCenters,
    view_centers: &[ClusterCenters],
    lambda: f64,
) -> Result<(LossBreakdown, ProjectionWeights)> {
    let dims = centers.dims();
    let fused: Vec<FeatureStack> = states.iter().map(|s| s.fused.clone()).collect();
    let (pos, pos_grads) = positive_loss_and_grad(&fused, centers, true);
    let mut grads = ProjectionWeights::zeros(dims);
    for (s, g) in states.iter().zip(&pos_grads) {
        add_into(&mut grads, &eam_backward(&s.cache, g)?);
    }

    let mut neg_total = None;
    if states.iter().any(|s| s.negative.is_some()) {
        let mut neg_sum = 0.0;
        for s in states {
            let Some(n) = &s.negative else { continue };
            let set = s.negative_set().expect("negative pass present");
            let mut g_views: Vec<DMatrix<f64>> =
                (0..n.fused.view_count()).map(|_| DMatrix::zeros(dims, n.fused.tokens())).collect();
            for e in &set.entries {
                let (avg, d_avg) = mean_center_distance(e.feature.as_view(), &view_centers[e.view]);
                neg_sum -= avg.max(NEG_LOG_EPS).ln();
                if avg > NEG_LOG_EPS {
                    // ∂(−λ log avg)/∂z̃ = −λ/avg · ∂avg/∂z̃
                    let mut col = g_views[e.view].column_mut(e.token);
                    col.axpy(-lambda / avg, &d_avg, 1.0);
                }
            }
            if lambda != 0.0 {
                let g = FeatureStack::new(g_views)?;
                add_into(&mut grads, &eam_backward(&n.cache, &g)?);
            }
        }
        neg_total = Some(neg_sum);
    }
    let total = total_loss(pos, neg_total.unwrap_or(0.0), lambda);
    Ok((
        LossBreakdown {
            positive: pos,
            negative: neg_total,
            total,
        },
        grads,
    ))
}

fn add_into(acc: &mut ProjectionWeights, g: &ProjectionWeights) {
    for (a, b) in acc.matrices_mut().into_iter().zip(g.matrices()) {
        *a += b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterRefresh {
    /// Re-cluster the current fused features at the start of every epoch.
    #[default]
    PerEpoch,
    /// Cluster once before the first epoch.
    Fixed,
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() && *x > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_some(x)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub n_k: usize,
    pub k_centers: usize,
    /// Band half-width in patches; `null` in JSON is an unbounded band.
    #[serde(with = "unbounded")]
    pub delta_patches: f64,
    pub batch_samples: usize,
    pub seed: u64,
    pub center_refresh: CenterRefresh,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mask_fill: MaskFill,
    pub aggregation: Aggregation,
    /// Upper bound on the tokens fed to each k-means run.
    pub kmeans_max_points: usize,
    /// Tokens sampled for the collapse indicator.
    pub collapse_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 50,
            lambda: 0.1,
            n_k: 1,
            k_centers: 20,
            delta_patches: 1.0,
            batch_samples: 8,
            seed: 0,
            center_refresh: CenterRefresh::PerEpoch,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mask_fill: MaskFill::Zero,
            aggregation: Aggregation::Sum,
            kmeans_max_points: 4096,
            collapse_sample: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be > 0 and weight_decay >= 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if self.n_k == 0 || self.k_centers == 0 || self.batch_samples == 0 {
            return bad("n_k, k_centers and batch_samples must be positive");
        }
        if self.delta_patches.is_nan() || self.delta_patches < 0.0 {
            return bad("delta_patches must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("optimizer betas must lie in [0, 1) and eps > 0");
        }
        if self.kmeans_max_points < self.k_centers || self.collapse_sample < 2 {
            return bad("kmeans_max_points must be >= k_centers and collapse_sample >= 2");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: ProjectionWeights,
    second: ProjectionWeights,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, dims: usize) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            first: ProjectionWeights::zeros(dims),
            second: ProjectionWeights::zeros(dims),
        }
    }

    pub fn update(&mut self, w: &mut ProjectionWeights, g: &ProjectionWeights) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let params = w.matrices_mut();
        let firsts = self.first.matrices_mut();
        let seconds = self.second.matrices_mut();
        for (((p, m), v), g) in params.into_iter().zip(firsts).zip(seconds).zip(g.matrices()) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] *= 1.0 - self.lr * self.weight_decay;
                p[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub pos_loss: f64,
    pub neg_loss: Option<f64>,
    pub total: f64,
    /// Mean pairwise distance among a fixed sample of fused tokens.
    pub collapse_indicator: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ProjectionWeights,
    pub trace: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn trace_csv(&self) -> String {
        trace_csv(&self.trace)
    }
}

/// CSV with columns `epoch,pos_loss,neg_loss,total,collapse_indicator`.
/// `neg_loss` is empty for epochs trained without negatives.
pub fn trace_csv(trace: &[EpochStats]) -> String {
    let mut out = String::from("epoch,pos_loss,neg_loss,total,collapse_indicator\n");
    for s in trace {
        let neg = s.neg_loss.map(|x| format!("{x:.9e}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.9e},{},{:.9e},{:.9e}",
            s.epoch, s.pos_loss, neg, s.total, s.collapse_indicator
        );
    }
    out
}

/// Tokens of the listed stacks gathered as columns, subsampled to at most
/// `limit` with a keyed shuffle.
fn gather_tokens(
    stacks: &[FeatureStack],
    view: Option<usize>,
    limit: usize,
    rng: &mut KeyedRng,
) -> DMatrix<f64> {
    let mut refs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, s) in stacks.iter().enumerate() {
        for v in 0..s.view_count() {
            if view.is_some_and(|x| x != v) {
                continue;
            }
            refs.extend((0..s.tokens()).map(|j| (i, v, j)));
        }
    }
    if refs.len() > limit {
        refs.shuffle(rng);
        refs.truncate(limit);
        refs.sort_unstable();
    }
    let d = stacks[0].dims();
    let mut out = DMatrix::zeros(d, refs.len());
    for (c, &(i, v, j)) in refs.iter().enumerate() {
        out.set_column(c, &stacks[i].view(v).column(j));
    }
    out
}

fn mean_pairwise_distance(points: &DMatrix<f64>) -> f64 {
    let n = points.ncols();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += sq_dist(col(points, i), col(points, j)).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

type CenterSet = (ClusterCenters, Vec<ClusterCenters>);

/// Shared centers and, when negatives are in use, per-view centers fitted on
/// the current fused features. The first fit seeds with k-means++; later fits
/// continue Lloyd iterations from the previous centers.
fn fit_centers(fused: &[FeatureStack], cfg: &TrainConfig, epoch: usize, previous: Option<CenterSet>) -> Result<CenterSet> {
    let mut rng = keyed_rng(cfg.seed, epoch as u64, "centers/sample");
    let (prev_shared, prev_views) = match previous {
        Some((s, v)) => (Some(s), v.into_iter().map(Some).collect()),
        None => (None, vec![None; fused[0].view_count()]),
    };
    let fit = |pts: &DMatrix<f64>, prev: Option<ClusterCenters>, tag: u64| match prev {
        Some(p) => Ok(lloyd(pts, p)),
        None => kmeans_init(pts, cfg.k_centers, cfg.seed ^ (tag << 32)),
    };
    let all = gather_tokens(fused, None, cfg.kmeans_max_points, &mut rng);
    let shared = fit(&all, prev_shared, 0)?;
    let mut per_view = Vec::new();
    if cfg.lambda > 0.0 {
        for (v, prev) in prev_views.into_iter().enumerate() {
            let pts = gather_tokens(fused, Some(v), cfg.kmeans_max_points, &mut rng);
            let mut c = fit(&pts, prev, v as u64 + 1)?;
            c.per_view = true;
            per_view.push(c);
        }
    }
    Ok((shared, per_view))
}

/// Train the projections on the normal training split of `dataset`.
pub fn train(dataset: &Dataset, masks: &EpipolarMaskSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = ProjectionWeights::random(dataset.shape.dims, cfg.seed);
    train_from(dataset, masks, cfg, init)
}

pub fn train_from(
    dataset: &Dataset,
    masks: &EpipolarMaskSet,
    cfg: &TrainConfig,
    init: ProjectionWeights,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let inputs: Vec<(String, FeatureStack)> = dataset
        .split(Split::Train)
        .map(|s| (s.sample_id.clone(), s.features.to_stack()))
        .collect();
    if inputs.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    let opts = ForwardOptions {
        aggregation: cfg.aggregation,
        fill: cfg.mask_fill,
    };
    let mut w = init;
    let mut optimizer = AdamW::new(cfg, w.dims());

    let forward_all = |w: &ProjectionWeights, idx: &[usize]| -> Result<Vec<FeatureStack>> {
        idx.iter()
            .map(|&i| Ok(eam_forward_with(&inputs[i].1, masks, w, opts.aggregation)?.0))
            .collect()
    };
    let all_idx: Vec<usize> = (0..inputs.len()).collect();
    let collapse_idx: Vec<usize> = {
        let mut idx = all_idx.clone();
        idx.shuffle(&mut keyed_rng(cfg.seed, 0, "collapse/samples"));
        let per_sample = inputs[0].1.view_count() * inputs[0].1.tokens();
        idx.truncate(cfg.collapse_sample.div_ceil(per_sample).max(1));
        idx.sort_unstable();
        idx
    };

    let mut centers = None;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if centers.is_none() || cfg.center_refresh == CenterRefresh::PerEpoch {
            centers = Some(fit_centers(&forward_all(&w, &all_idx)?, cfg, epoch, centers.take())?);
        }
        let (shared, per_view) = centers.as_ref().expect("centers fitted");

        let mut order = all_idx.clone();
        order.shuffle(&mut keyed_rng(cfg.seed, epoch as u64, "batches"));
        let (mut pos_sum, mut neg_sum, mut tot_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_samples) {
            let states = batch
                .iter()
                .map(|&i| {
                    let (id, z) = &inputs[i];
                    if cfg.lambda > 0.0 {
                        let mut rng = keyed_rng(cfg.seed, epoch as u64, &format!("negatives/{id}"));
                        forward_with_negatives(z, masks, &w, opts, cfg.n_k, &mut rng)
                    } else {
                        forward_with_selection(z, masks, &w, opts, None)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = batch_objective(&states, shared, per_view, cfg.lambda)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss or gradient in epoch {epoch}")));
            }
            optimizer.update(&mut w, &grads);
            pos_sum += loss.positive;
            neg_sum += loss.negative.unwrap_or(0.0);
            tot_sum += loss.total;
            steps += 1;
        }
        if !w.is_finite() {
            return Err(Error::Numeric(format!("weights diverged in epoch {epoch}")));
        }

        let fused = forward_all(&w, &collapse_idx)?;
        let sample = gather_tokens(&fused, None, cfg.collapse_sample, &mut keyed_rng(cfg.seed, 0, "collapse/tokens"));
        let steps = steps as f64;
        trace.push(EpochStats {
            epoch,
            pos_loss: pos_sum / steps,
            neg_loss: (cfg.lambda > 0.0).then_some(neg_sum / steps),
            total: tot_sum / steps,
            collapse_indicator: mean_pairwise_distance(&sample),
        });
    }
    Ok(TrainOutcome {
        weights: w.rounded_to_storage(),
        trace,
    })
}
