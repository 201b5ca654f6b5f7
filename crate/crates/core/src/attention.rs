//! Masked cross-view attention with a residual connection.
//!
//! For reference view `a`, support view `b` and query token `j`:
//!
//! ```text
//! logits_b[j, k] = (W_Q z_aj) · (W_K z_bk) / √D      over k with M_ab[j, k] = 1
//! out_aj        = Σ_{b≠a} softmax_k(logits_b[j, ·]) · W_V z_b
//! fused_aj      = W_O out_aj + z_aj
//! ```
//!
//! Masked entries are excluded from the softmax rather than multiplied by
//! zero afterwards. A row with no admissible key contributes nothing, so a
//! token with empty rows towards every support view passes through unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_feature_tensor, write_feature_tensor, FeatureStack, FeatureTensor};
use crate::geometry::EpipolarMaskSet;
use crate::kernels::{axpy, col, col_mut, dot};
use crate::rng::keyed_rng;

/// The four `D × D` projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
}

impl ProjectionWeights {
    pub fn zeros(dims: usize) -> Self {
        let z = DMatrix::zeros(dims, dims);
        ProjectionWeights {
            w_q: z.clone(),
            w_k: z.clone(),
            w_v: z.clone(),
            w_o: z,
        }
    }

    /// Independent `N(0, 1/D)` entries, keyed by `seed`.
    pub fn random(dims: usize, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, 0, "eam/init");
        let std = 1.0 / (dims as f64).sqrt();
        let mut draw = || {
            DMatrix::from_fn(dims, dims, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
        };
        ProjectionWeights {
            w_q: draw(),
            w_k: draw(),
            w_v: draw(),
            w_o: draw(),
        }
    }

    pub fn dims(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn matrices(&self) -> [&DMatrix<f64>; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn matrices_mut(&mut self) -> [&mut DMatrix<f64>; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    fn check(&self) -> Result<()> {
        let d = self.dims();
        if self.matrices().iter().any(|m| m.shape() != (d, d)) {
            return Err(Error::ShapeMismatch("projection matrices differ in shape".into()));
        }
        Ok(())
    }

    /// Round every entry through binary32, the storage precision.
    pub fn rounded_to_storage(&self) -> Self {
        let r = |m: &DMatrix<f64>| m.map(|x| x as f32 as f64);
        ProjectionWeights {
            w_q: r(&self.w_q),
            w_k: r(&self.w_k),
            w_v: r(&self.w_v),
            w_o: r(&self.w_o),
        }
    }

    /// Pack as a `4 × D × D` tensor: "view" `i` is matrix `i` in the order
    /// Q, K, V, O, "token" `r` is row `r`.
    pub fn to_tensor(&self) -> Result<FeatureTensor> {
        let d = self.dims();
        let mut data = Vec::with_capacity(4 * d * d);
        for m in self.matrices() {
            for r in 0..d {
                data.extend(m.row(r).iter().map(|&x| x as f32));
            }
        }
        FeatureTensor::new(4, d, d, data)
    }

    pub fn from_tensor(t: &FeatureTensor) -> Result<Self> {
        if t.views() != 4 || t.tokens() != t.dims() {
            return Err(Error::ShapeMismatch(format!(
                "weights tensor must be 4xDxD, got {}x{}x{}",
                t.views(),
                t.tokens(),
                t.dims()
            )));
        }
        let d = t.dims();
        let m = |i: usize| DMatrix::from_row_iterator(d, d, t.view(i).iter().map(|&x| x as f64));
        Ok(ProjectionWeights {
            w_q: m(0),
            w_k: m(1),
            w_v: m(2),
            w_o: m(3),
        })
    }

    /// Write the MVFT tensor plus a `<path>.json` sidecar describing it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_feature_tensor(&self.to_tensor()?, path)?;
        let sidecar = WeightsSidecar {
            kind: "epipolar-attention-weights".into(),
            comment: "MVFT views 0..4 hold W_Q, W_K, W_V, W_O; tokens are matrix rows".into(),
            order: ["w_q", "w_k", "w_v", "w_o"].map(String::from).to_vec(),
            dims: self.dims(),
        };
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"))
            .map_err(|e| Error::io_at(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ProjectionWeights::from_tensor(&read_feature_tensor(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsSidecar {
    kind: String,
    comment: String,
    order: Vec<String>,
    dims: usize,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// How per-support-view outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    /// Divide the sum by `V − 1`.
    Mean,
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: FeatureStack,
    queries: Vec<DMatrix<f64>>,
    keys: Vec<DMatrix<f64>>,
    values: Vec<DMatrix<f64>>,
    /// Per `(a, b)`: `T × T` attention weights, row = query token of `a`.
    weights: BTreeMap<(usize, usize), DMatrix<f64>>,
    /// Per `(a, b)` and query row: admissible key indices.
    support: BTreeMap<(usize, usize), Vec<Vec<usize>>>,
    /// Per view: aggregated attention output before `W_O`, `D × T`.
    attended: Vec<DMatrix<f64>>,
    w_o: DMatrix<f64>,
    scale: f64,
}

impl AttentionCache {
    pub fn attention(&self, a: usize, b: usize) -> Option<&DMatrix<f64>> {
        self.weights.get(&(a, b))
    }

    pub fn input(&self) -> &FeatureStack {
        &self.input
    }

    /// Largest deviation from 1 over all non-empty softmax rows.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for w in self.weights.values() {
            for r in 0..w.nrows() {
                let s: f64 = w.row(r).iter().sum();
                if s != 0.0 {
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
        worst
    }
}

fn check_inputs(z: &FeatureStack, masks: &EpipolarMaskSet, w: &ProjectionWeights) -> Result<()> {
    w.check()?;
    if z.dims() != w.dims() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} channels, weights {}",
            z.dims(),
            w.dims()
        )));
    }
    if masks.tokens() != z.tokens() {
        return Err(Error::ShapeMismatch(format!(
            "masks cover {} tokens, features {}",
            masks.tokens(),
            z.tokens()
        )));
    }
    let v = z.view_count();
    for a in 0..v {
        for b in 0..v {
            if a != b {
                masks.get(a, b)?;
            }
        }
    }
    Ok(())
}

/// Admissible key indices of every query row.
fn admissible(mask: &crate::geometry::BinaryMask) -> Vec<Vec<usize>> {
    (0..mask.size())
        .map(|j| {
            mask.row(j)
                .iter()
                .enumerate()
                .filter_map(|(k, &on)| on.then_some(k))
                .collect()
        })
        .collect()
}

/// Forward pass with summed support views.
pub fn eam_forward(
    z: &FeatureStack,
    masks: &EpipolarMaskSet,
    w: &ProjectionWeights,
) -> Result<(FeatureStack, AttentionCache)> {
    eam_forward_with(z, masks, w, Aggregation::Sum)
}

pub fn eam_forward_with(
    z: &FeatureStack,
    masks: &EpipolarMaskSet,
    w: &ProjectionWeights,
    aggregation: Aggregation,
) -> Result<(FeatureStack, AttentionCache)> {
    check_inputs(z, masks, w)?;
    let v_count = z.view_count();
    let (d, t) = (z.dims(), z.tokens());
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let scale = match aggregation {
        Aggregation::Sum => 1.0,
        Aggregation::Mean if v_count > 1 => 1.0 / (v_count - 1) as f64,
        Aggregation::Mean => 1.0,
    };

    let queries: Vec<_> = z.views().iter().map(|x| &w.w_q * x).collect();
    let keys: Vec<_> = z.views().iter().map(|x| &w.w_k * x).collect();
    let values: Vec<_> = z.views().iter().map(|x| &w.w_v * x).collect();

    let mut weights = BTreeMap::new();
    let mut support = BTreeMap::new();
    let mut attended = Vec::with_capacity(v_count);
    let mut fused = Vec::with_capacity(v_count);
    let mut logits = Vec::with_capacity(t);
    for a in 0..v_count {
        let mut out = DMatrix::<f64>::zeros(d, t);
        for b in 0..v_count {
            if a == b {
                continue;
            }
            let rows = admissible(masks.get(a, b)?);
            let mut attn = DMatrix::<f64>::zeros(t, t);
            for (j, keys_j) in rows.iter().enumerate() {
                if keys_j.is_empty() {
                    continue;
                }
                let q = col(&queries[a], j);
                logits.clear();
                logits.extend(keys_j.iter().map(|&k| dot(q, col(&keys[b], k)) * inv_sqrt_d));
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    total += *l;
                }
                let o = col_mut(&mut out, j);
                for (&k, &e) in keys_j.iter().zip(&logits) {
                    let p = e / total;
                    attn[(j, k)] = p;
                    axpy(scale * p, col(&values[b], k), o);
                }
            }
            weights.insert((a, b), attn);
            support.insert((a, b), rows);
        }
        fused.push(&w.w_o * &out + z.view(a));
        attended.push(out);
    }

    Ok((
        FeatureStack::new(fused)?,
        AttentionCache {
            input: z.clone(),
            queries,
            keys,
            values,
            weights,
            support,
            attended,
            w_o: w.w_o.clone(),
            scale,
        },
    ))
}

/// Plain cross-view attention: the forward pass with every mask entry set.
pub fn unmasked_mode(z: &FeatureStack, w: &ProjectionWeights) -> Result<FeatureStack> {
    let masks = EpipolarMaskSet::uniform(z.view_count(), z.tokens(), true);
    Ok(eam_forward(z, &masks, w)?.0)
}

/// Weight gradients given `∂L/∂fused`.
pub fn eam_backward(cache: &AttentionCache, grad_fused: &FeatureStack) -> Result<ProjectionWeights> {
    let v_count = cache.input.view_count();
    let (d, t) = (cache.input.dims(), cache.input.tokens());
    if grad_fused.view_count() != v_count || grad_fused.dims() != d || grad_fused.tokens() != t {
        return Err(Error::StaleCache(format!(
            "gradient {}x{}x{} vs cache {}x{}x{}",
            grad_fused.view_count(),
            grad_fused.tokens(),
            grad_fused.dims(),
            v_count,
            t,
            d
        )));
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let s = cache.scale;

    let mut grads = ProjectionWeights::zeros(d);
    let mut d_q = vec![DMatrix::<f64>::zeros(d, t); v_count];
    let mut d_k = vec![DMatrix::<f64>::zeros(d, t); v_count];
    let mut d_v = vec![DMatrix::<f64>::zeros(d, t); v_count];
    let mut d_attn = Vec::with_capacity(t);

    for a in 0..v_count {
        let g = grad_fused.view(a);
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        grads.w_o.gemm(1.0, g, &cache.attended[a].transpose(), 1.0);
        let d_out = cache.w_o.tr_mul(g);
        for b in 0..v_count {
            if a == b {
                continue;
            }
            let attn = &cache.weights[&(a, b)];
            for (j, keys_j) in cache.support[&(a, b)].iter().enumerate() {
                if keys_j.is_empty() {
                    continue;
                }
                let go = col(&d_out, j);
                // dA[j, k] = s · d_out[:, j] · V_b[:, k]
                d_attn.clear();
                d_attn.extend(keys_j.iter().map(|&k| s * dot(go, col(&cache.values[b], k))));
                let row_dot: f64 = keys_j.iter().zip(&d_attn).map(|(&k, &da)| attn[(j, k)] * da).sum();
                for (&k, &da) in keys_j.iter().zip(&d_attn) {
                    let p = attn[(j, k)];
                    axpy(s * p, go, col_mut(&mut d_v[b], k));
                    let dl = p * (da - row_dot) * inv_sqrt_d;
                    if dl != 0.0 {
                        axpy(dl, col(&cache.keys[b], k), col_mut(&mut d_q[a], j));
                        axpy(dl, col(&cache.queries[a], j), col_mut(&mut d_k[b], k));
                    }
                }
            }
        }
    }
    for v in 0..v_count {
        let x = cache.input.view(v);
        grads.w_q.gemm(1.0, &d_q[v], &x.transpose(), 1.0);
        grads.w_k.gemm(1.0, &d_k[v], &x.transpose(), 1.0);
        grads.w_v.gemm(1.0, &d_v[v], &x.transpose(), 1.0);
    }
    Ok(grads)
}
