//! Independent reference implementations used as test oracles. Each one is
//! written straight from the definition, favouring clarity over speed, and
//! shares no code with the library beyond its data types.

#![allow(dead_code)]

use epiad::features::FeatureStack;
use epiad::geometry::{BinaryMask, PatchGrid, PinholeCamera};
use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector3};
use rand::Rng;

/// `F_ab` with `p_aᵀ F_ab p_b = 0`, from projection matrices:
/// the classical `F_ba = [e_b]ₓ P_b P_a⁺` transposed, scaled to unit norm.
pub fn fundamental_from_projections(a: &PinholeCamera, b: &PinholeCamera) -> Matrix3<f64> {
    let p = |c: &PinholeCamera| -> Matrix3x4<f64> { c.intrinsics * c.extrinsics() };
    let (pa, pb) = (p(a), p(b));
    let pa_dyn = DMatrix::from_column_slice(3, 4, pa.as_slice());
    let pa_pinv = pa_dyn.pseudo_inverse(1e-15).expect("pseudo-inverse");
    let center = a.center();
    let e_b = pb * center.push(1.0);
    let skew = Matrix3::new(0.0, -e_b.z, e_b.y, e_b.z, 0.0, -e_b.x, -e_b.y, e_b.x, 0.0);
    let pb_dyn = DMatrix::from_column_slice(3, 4, pb.as_slice());
    let m = DMatrix::from_column_slice(3, 3, skew.as_slice()) * pb_dyn * pa_pinv;
    let f_ba = Matrix3::from_column_slice(m.as_slice());
    let f = f_ba.transpose();
    f / f.norm()
}

/// Angle between two matrices seen as 9-vectors, sign-insensitive. Uses the
/// chord length, which stays accurate for tiny angles.
pub fn matrix_angle(x: &Matrix3<f64>, y: &Matrix3<f64>) -> f64 {
    let (x, y) = (x / x.norm(), y / y.norm());
    let chord = (x - y).norm().min((x + y).norm());
    2.0 * (chord / 2.0).asin()
}

/// Camera on a circle around the origin, looking at it, with a random
/// focal length and principal point.
pub fn random_camera(rng: &mut impl Rng, azimuth: f64, grid: &PatchGrid) -> PinholeCamera {
    let f = rng.random_range(40.0..120.0);
    let cx = grid.image_width() as f64 / 2.0 + rng.random_range(-3.0..3.0);
    let cy = grid.image_height() as f64 / 2.0 + rng.random_range(-3.0..3.0);
    let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
    let dist = rng.random_range(3.0..6.0);
    let elev: f64 = rng.random_range(-0.5..0.5);
    let center = Vector3::new(
        dist * azimuth.cos() * elev.cos(),
        dist * elev.sin(),
        dist * azimuth.sin() * elev.cos(),
    );
    let target = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0);
    PinholeCamera::look_at(k, center, target, Vector3::y()).expect("valid camera")
}

/// Patch centers in raster order.
pub fn centers(grid: &PatchGrid) -> Vec<(f64, f64)> {
    let p = grid.patch_size() as f64;
    let mut out = Vec::new();
    for row in 0..grid.grid_h() {
        for col in 0..grid.grid_w() {
            out.push(((col as f64 + 0.5) * p, (row as f64 + 0.5) * p));
        }
    }
    out
}

/// Brute-force mask: distance of every destination center to the line
/// `Fᵀ p_j`, compared with `(δ + tol)·P`.
pub fn mask_oracle(grid: &PatchGrid, f: &Matrix3<f64>, delta: f64) -> Vec<Vec<bool>> {
    let c = centers(grid);
    let thr = (delta + epiad::geometry::MASK_BOUNDARY_TOL) * grid.patch_size() as f64;
    let mut m = vec![vec![false; c.len()]; c.len()];
    for (j, &(uj, vj)) in c.iter().enumerate() {
        let l = f.transpose() * Vector3::new(uj, vj, 1.0);
        let n = l.x.hypot(l.y);
        for (k, &(uk, vk)) in c.iter().enumerate() {
            let d = (l.x * uk + l.y * vk + l.z).abs() / n;
            m[j][k] = d <= thr;
        }
    }
    m
}

pub fn mask_rows(m: &BinaryMask) -> Vec<Vec<bool>> {
    (0..m.size()).map(|j| m.row(j).to_vec()).collect()
}

/// Cross-view attention computed entry by entry. `mask(a, b, j, k)` decides
/// admissibility; rows without admissible keys contribute nothing.
pub fn attention_oracle(
    z: &[DMatrix<f64>],
    w: [&DMatrix<f64>; 4],
    mask: impl Fn(usize, usize, usize, usize) -> bool,
) -> Vec<DMatrix<f64>> {
    let [wq, wk, wv, wo] = w;
    let v = z.len();
    let (d, t) = z[0].shape();
    let mut fused = Vec::new();
    for a in 0..v {
        let mut out = DMatrix::<f64>::zeros(d, t);
        for j in 0..t {
            let q = wq * z[a].column(j);
            for b in (0..v).filter(|&b| b != a) {
                let mut num = DMatrix::<f64>::zeros(d, 1);
                let mut den = 0.0;
                for k in 0..t {
                    if !mask(a, b, j, k) {
                        continue;
                    }
                    let key = wk * z[b].column(k);
                    let e = (q.dot(&key) / (d as f64).sqrt()).exp();
                    num += (wv * z[b].column(k)) * e;
                    den += e;
                }
                if den > 0.0 {
                    let col = out.column(j) + num.column(0) / den;
                    out.set_column(j, &col);
                }
            }
        }
        fused.push(wo * out + &z[a]);
    }
    fused
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (k, &sk) in scores.iter().enumerate() {
            if labels[k] {
                continue;
            }
            pairs += 1.0;
            if si > sk {
                wins += 1.0;
            } else if si == sk {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Step-wise AP: every distinct score is a threshold, predictions are
/// `score >= threshold`, and recall increments are weighted by precision.
pub fn ap_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev = 0.0;
    let mut total = 0.0;
    for &t in &thresholds {
        let tp = scores.iter().zip(labels).filter(|&(&s, &l)| s >= t && l).count() as f64;
        let fp = scores.iter().zip(labels).filter(|&(&s, &l)| s >= t && !l).count() as f64;
        let recall = tp / n_pos;
        total += (recall - prev) * (tp / (tp + fp));
        prev = recall;
    }
    total
}

/// Farthest-point selection, recomputing every point's distance to the
/// whole selected set at each step.
pub fn coreset_oracle(points: &DMatrix<f64>, count: usize, start: usize) -> Vec<usize> {
    let n = points.ncols();
    let sq = |i: usize, k: usize| (points.column(i) - points.column(k)).norm_squared();
    let mut chosen = vec![start];
    while chosen.len() < count.min(n) {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..n {
            let d = chosen.iter().map(|&c| sq(i, c)).fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        chosen.push(best.0);
    }
    chosen
}

/// `min_m ‖z − m‖` for every column of `z`.
pub fn nearest_distances(z: &DMatrix<f64>, bank: &DMatrix<f64>) -> Vec<f64> {
    z.column_iter()
        .map(|c| {
            bank.column_iter()
                .map(|m| (c - m).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Neighbour-mean blending written as a gather over explicit neighbour lists.
pub fn refine_oracle(
    scores: &[Vec<f64>],
    mask: impl Fn(usize, usize, usize, usize) -> bool,
    alpha: f64,
) -> Vec<Vec<f64>> {
    let v = scores.len();
    let mut out = Vec::new();
    for a in 0..v {
        let mut row = Vec::new();
        for j in 0..scores[a].len() {
            let mut neigh = Vec::new();
            for b in (0..v).filter(|&b| b != a) {
                for k in 0..scores[b].len() {
                    if mask(a, b, j, k) {
                        neigh.push(scores[b][k]);
                    }
                }
            }
            if neigh.is_empty() {
                row.push(scores[a][j]);
            } else {
                let mean = neigh.iter().sum::<f64>() / neigh.len() as f64;
                row.push(alpha * scores[a][j] + (1.0 - alpha) * mean);
            }
        }
        out.push(row);
    }
    out
}

pub fn random_stack(v: usize, t: usize, d: usize, rng: &mut impl Rng) -> FeatureStack {
    FeatureStack::new((0..v).map(|_| DMatrix::from_fn(d, t, |_, _| rng.random_range(-1.0..1.0))).collect())
        .expect("consistent shapes")
}

pub fn max_rel_err(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let scale = y.amax().max(1e-300);
    (x - y).amax() / scale
}
