//! Epipolar geometry on a regular patch grid.
//!
//! Conventions used throughout the crate:
//!
//! * pixel points are homogeneous `[u, v, 1]` with `u` the column and `v` the
//!   row coordinate;
//! * a fundamental matrix `F_ab` relates view `a` to view `b` through
//!   `p_aᵀ F_ab p_b = 0`, so the epipolar line of `p_a` in view `b` is
//!   `l_b = F_abᵀ p_a`;
//! * tokens are numbered row-major over the grid, `j = row * grid_w + col`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Design-matrix condition number beyond which the 8-point system is rejected.
pub const MAX_DESIGN_CONDITION: f64 = 1e12;

/// Lines whose `(a, b)` coefficients fall below this (relative to the size of
/// the generating point) have no direction.
pub const DEGENERATE_LINE_EPS: f64 = 1e-15;

/// Slack added to `δ` (in patches) so that centers lying exactly on the band
/// edge stay inside despite rounding in the line coefficients.
pub const MASK_BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v, w: 1.0 }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, self.w)
    }

    /// Dehomogenize a 3-vector. Points at infinity come back with `w = 0`.
    pub fn from_vector(x: &Vector3<f64>) -> Self {
        if x.z == 0.0 {
            PixelPoint { u: x.x, v: x.y, w: 0.0 }
        } else {
            PixelPoint::new(x.x / x.z, x.y / x.z)
        }
    }
}

/// Image size and patch size of the token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct PatchGrid {
    image_width: u32,
    image_height: u32,
    patch_size: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    image_width: u32,
    image_height: u32,
    patch_size: u32,
}

impl TryFrom<RawGrid> for PatchGrid {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        PatchGrid::new(raw.image_width, raw.image_height, raw.patch_size)
    }
}

impl From<PatchGrid> for RawGrid {
    fn from(g: PatchGrid) -> Self {
        RawGrid {
            image_width: g.image_width,
            image_height: g.image_height,
            patch_size: g.patch_size,
        }
    }
}

impl PatchGrid {
    pub fn new(image_width: u32, image_height: u32, patch_size: u32) -> Result<Self> {
        if patch_size == 0 || image_width == 0 || image_height == 0 {
            return Err(Error::InvalidGrid("sizes must be positive".into()));
        }
        if image_width % patch_size != 0 || image_height % patch_size != 0 {
            return Err(Error::InvalidGrid(format!(
                "patch size {patch_size} does not divide {image_width}x{image_height}"
            )));
        }
        Ok(PatchGrid {
            image_width,
            image_height,
            patch_size,
        })
    }

    /// Grid of `cols × rows` patches of `patch_size` pixels.
    pub fn with_cells(cols: u32, rows: u32, patch_size: u32) -> Result<Self> {
        PatchGrid::new(cols * patch_size, rows * patch_size, patch_size)
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }
    pub fn image_height(&self) -> u32 {
        self.image_height
    }
    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }
    pub fn grid_w(&self) -> usize {
        (self.image_width / self.patch_size) as usize
    }
    pub fn grid_h(&self) -> usize {
        (self.image_height / self.patch_size) as usize
    }
    pub fn token_count(&self) -> usize {
        self.grid_w() * self.grid_h()
    }

    /// Token containing pixel `(u, v)`, if it lies inside the image.
    pub fn token_at(&self, u: f64, v: f64) -> Option<usize> {
        if !(u >= 0.0 && v >= 0.0 && u < self.image_width as f64 && v < self.image_height as f64) {
            return None;
        }
        let p = self.patch_size as f64;
        let col = (u / p).floor() as usize;
        let row = (v / p).floor() as usize;
        Some(row * self.grid_w() + col)
    }
}

/// Center of patch `j` in pixel coordinates.
pub fn patch_center(j: usize, grid: &PatchGrid) -> Result<PixelPoint> {
    let t = grid.token_count();
    if j >= t {
        return Err(Error::IndexOutOfRange { index: j, len: t });
    }
    let p = grid.patch_size as f64;
    let gw = grid.grid_w();
    let u = ((j % gw) as f64 + 0.5) * p;
    let v = ((j / gw) as f64 + 0.5) * p;
    Ok(PixelPoint::new(u, v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix {
    m: Matrix3<f64>,
    pub src_view: usize,
    pub dst_view: usize,
}

impl FundamentalMatrix {
    /// Wrap a matrix, scaling it to unit Frobenius norm with its largest
    /// magnitude entry positive. Rank is not touched.
    pub fn from_matrix(m: Matrix3<f64>, src_view: usize, dst_view: usize) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateConfiguration("non-finite entries".into()));
        }
        let norm = m.norm();
        if norm == 0.0 {
            return Err(Error::DegenerateConfiguration("zero matrix".into()));
        }
        let mut m = m / norm;
        let pivot = m
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            m = -m;
        }
        Ok(FundamentalMatrix {
            m,
            src_view,
            dst_view,
        })
    }

    /// Row-major 9-vector, the rig file layout.
    pub fn from_row_major(values: &[f64; 9], src_view: usize, dst_view: usize) -> Result<Self> {
        FundamentalMatrix::from_matrix(Matrix3::from_row_slice(values), src_view, dst_view)
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// `F_ba = F_abᵀ`.
    pub fn reversed(&self) -> Self {
        FundamentalMatrix {
            m: self.m.transpose(),
            src_view: self.dst_view,
            dst_view: self.src_view,
        }
    }

    /// Algebraic residual `p_aᵀ F p_b`.
    pub fn residual(&self, pa: PixelPoint, pb: PixelPoint) -> f64 {
        pa.to_vector().dot(&(self.m * pb.to_vector()))
    }

    /// Epipole in the source view: the null vector of `Fᵀ`.
    pub fn source_epipole(&self) -> Vector3<f64> {
        null_vector(&self.m.transpose())
    }

    /// `|sin|` of the angle between the two matrices seen as 9-vectors.
    pub fn angular_distance(&self, other: &FundamentalMatrix) -> f64 {
        let a = self.m / self.m.norm();
        let b = other.m / other.m.norm();
        let cos = a.dot(&b).abs().min(1.0);
        (1.0 - cos * cos).max(0.0).sqrt()
    }
}

fn null_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    v_t.row(idx).transpose()
}

/// Similarity transform moving the centroid to the origin with mean distance √2.
fn normalizing_transform(points: impl Iterator<Item = (f64, f64)> + Clone) -> Result<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    let (mx, my) = (sx / n, sy / n);
    let mean_dist = points
        .map(|(x, y)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return Err(Error::DegenerateConfiguration(
            "all points coincide in one view".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0))
}

/// Normalized 8-point estimate of `F_ab` from correspondences `(p_a, p_b)`.
///
/// Both point sets are isotropically normalized, the homogeneous system is
/// solved by SVD, rank 2 is enforced on the normalized estimate, and the
/// result is denormalized and scaled to unit Frobenius norm.
pub fn estimate_fundamental_8pt(
    correspondences: &[(PixelPoint, PixelPoint)],
    src_view: usize,
    dst_view: usize,
) -> Result<FundamentalMatrix> {
    let n = correspondences.len();
    if n < 8 {
        return Err(Error::TooFewCorrespondences(n));
    }
    let ta = normalizing_transform(correspondences.iter().map(|(a, _)| (a.u / a.w, a.v / a.w)))?;
    let tb = normalizing_transform(correspondences.iter().map(|(_, b)| (b.u / b.w, b.v / b.w)))?;

    // Pad to at least 9 rows so the thin SVD exposes the full right null space.
    let rows = n.max(9);
    let mut design = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pa, pb)) in correspondences.iter().enumerate() {
        let a = ta * (pa.to_vector() / pa.w);
        let b = tb * (pb.to_vector() / pb.w);
        for r in 0..3 {
            for c in 0..3 {
                design[(i, r * 3 + c)] = a[r] * b[c];
            }
        }
    }
    let svd = design.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let eighth = svd.singular_values[order[7]];
    if !(eighth > 0.0) || largest / eighth > MAX_DESIGN_CONDITION {
        return Err(Error::DegenerateConfiguration(format!(
            "design matrix condition number {:.3e}",
            largest / eighth
        )));
    }
    let f: Vec<f64> = v_t.row(order[8]).iter().copied().collect();
    let f_norm = Matrix3::from_row_slice(&f);

    let svd = f_norm.svd(true, true);
    let (u, v_t) = (svd.u.expect("U"), svd.v_t.expect("V"));
    let mut sigma = svd.singular_values;
    let (min_idx, _) = sigma.argmin();
    sigma[min_idx] = 0.0;
    let f_rank2 = u * Matrix3::from_diagonal(&sigma) * v_t;

    FundamentalMatrix::from_matrix(ta.transpose() * f_rank2 * tb, src_view, dst_view)
}

/// Line `a·u + b·v + c = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Epipolar line `Fᵀ p` in the destination view of `f`.
pub fn epipolar_line(p: PixelPoint, f: &FundamentalMatrix) -> Result<EpipolarLine> {
    let l = f.m.transpose() * p.to_vector();
    let scale = p.u.abs() + p.v.abs() + p.w.abs();
    let tol = DEGENERATE_LINE_EPS * scale.max(1.0);
    if l.x.abs() < tol && l.y.abs() < tol {
        return Err(Error::DegenerateLine);
    }
    Ok(EpipolarLine {
        a: l.x,
        b: l.y,
        c: l.z,
    })
}

/// Perpendicular pixel distance from `p` to `l`.
pub fn point_line_distance(p: PixelPoint, l: &EpipolarLine) -> Result<f64> {
    let norm = l.a.hypot(l.b);
    if norm == 0.0 {
        return Err(Error::DegenerateLine);
    }
    Ok((l.a * p.u / p.w + l.b * p.v / p.w + l.c).abs() / norm)
}

/// Square binary matrix over tokens, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    size: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(size: usize, value: bool) -> Self {
        BinaryMask {
            size,
            bits: vec![value; size * size],
        }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(size * size);
        for j in 0..size {
            for k in 0..size {
                bits.push(f(j, k));
            }
        }
        BinaryMask { size, bits }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, j: usize, k: usize) -> bool {
        self.bits[j * self.size + k]
    }

    pub fn set(&mut self, j: usize, k: usize, value: bool) {
        self.bits[j * self.size + k] = value;
    }

    pub fn row(&self, j: usize) -> &[bool] {
        &self.bits[j * self.size..(j + 1) * self.size]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Whether any row has a one in column `k`.
    pub fn column_nonempty(&self, k: usize) -> bool {
        (0..self.size).any(|j| self.get(j, k))
    }

    /// Binary PGM (P5): white where the mask is one.
    pub fn to_pgm(&self) -> Vec<u8> {
        let pixels: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_pgm(self.size, self.size, &pixels)
    }
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Epipolar attention mask between the source and destination view of `f`.
///
/// Entry `(j, k)` is one when the center of destination patch `k` lies within
/// `delta_patches · P` pixels of the epipolar line of source patch `j`, up to
/// [`MASK_BOUNDARY_TOL`]. A row whose patch center sits on the epipole is all
/// ones.
pub fn build_epipolar_mask(
    grid: &PatchGrid,
    f: &FundamentalMatrix,
    delta_patches: f64,
) -> Result<BinaryMask> {
    if delta_patches.is_nan() || delta_patches < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "mask threshold must be >= 0, got {delta_patches}"
        )));
    }
    let t = grid.token_count();
    let threshold = (delta_patches + MASK_BOUNDARY_TOL) * grid.patch_size as f64;
    let centers = (0..t)
        .map(|j| patch_center(j, grid))
        .collect::<Result<Vec<_>>>()?;
    let mut mask = BinaryMask::filled(t, false);
    for (j, &pj) in centers.iter().enumerate() {
        let line = match epipolar_line(pj, f) {
            Ok(line) => line,
            Err(Error::DegenerateLine) => {
                for k in 0..t {
                    mask.set(j, k, true);
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        for (k, &pk) in centers.iter().enumerate() {
            if point_line_distance(pk, &line)? <= threshold {
                mask.set(j, k, true);
            }
        }
    }
    Ok(mask)
}

/// Masks for every ordered pair of distinct views.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarMaskSet {
    views: usize,
    tokens: usize,
    delta_patches: f64,
    masks: BTreeMap<(usize, usize), BinaryMask>,
}

impl EpipolarMaskSet {
    /// Build from pairwise fundamental matrices, looked up by `fundamental(a, b)`.
    pub fn build(
        grid: &PatchGrid,
        views: usize,
        delta_patches: f64,
        mut fundamental: impl FnMut(usize, usize) -> Option<FundamentalMatrix>,
    ) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for a in 0..views {
            for b in 0..views {
                if a == b {
                    continue;
                }
                let f = fundamental(a, b).ok_or(Error::MissingMaskPair(a, b))?;
                masks.insert((a, b), build_epipolar_mask(grid, &f, delta_patches)?);
            }
        }
        Ok(EpipolarMaskSet {
            views,
            tokens: grid.token_count(),
            delta_patches,
            masks,
        })
    }

    /// Constant masks; `true` gives unrestricted attention.
    pub fn uniform(views: usize, tokens: usize, value: bool) -> Self {
        let mut masks = BTreeMap::new();
        for a in 0..views {
            for b in 0..views {
                if a != b {
                    masks.insert((a, b), BinaryMask::filled(tokens, value));
                }
            }
        }
        EpipolarMaskSet {
            views,
            tokens,
            delta_patches: if value { f64::INFINITY } else { 0.0 },
            masks,
        }
    }

    pub fn from_masks(
        views: usize,
        tokens: usize,
        delta_patches: f64,
        masks: BTreeMap<(usize, usize), BinaryMask>,
    ) -> Result<Self> {
        for (&(a, b), m) in &masks {
            if a >= views || b >= views || a == b || m.size() != tokens {
                return Err(Error::ShapeMismatch(format!("mask ({a}, {b})")));
            }
        }
        Ok(EpipolarMaskSet {
            views,
            tokens,
            delta_patches,
            masks,
        })
    }

    pub fn views(&self) -> usize {
        self.views
    }
    pub fn tokens(&self) -> usize {
        self.tokens
    }
    pub fn delta_patches(&self) -> f64 {
        self.delta_patches
    }

    pub fn get(&self, a: usize, b: usize) -> Result<&BinaryMask> {
        self.masks.get(&(a, b)).ok_or(Error::MissingMaskPair(a, b))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(usize, usize), &BinaryMask)> {
        self.masks.iter()
    }
}

/// Pinhole camera with world-to-camera pose `X_c = R X_w + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PinholeCamera {
    /// Camera at `center` looking at `target`, image `v` axis pointing along
    /// `-up`.
    pub fn look_at(
        intrinsics: Matrix3<f64>,
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = target - center;
        if forward.norm() == 0.0 {
            return Err(Error::DegenerateRig("camera center equals its target".into()));
        }
        let z = forward.normalize();
        let x = (-up).cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::DegenerateRig("viewing direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center);
        Ok(PinholeCamera {
            intrinsics,
            rotation,
            translation,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// `[R | t]`, row-major 3×4.
    pub fn extrinsics(&self) -> Matrix3x4<f64> {
        let mut e = Matrix3x4::zeros();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        e
    }

    pub fn from_parts(intrinsics: Matrix3<f64>, extrinsics: &Matrix3x4<f64>) -> Self {
        PinholeCamera {
            intrinsics,
            rotation: extrinsics.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: extrinsics.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Pixel projection of a world point, `None` behind the camera.
    pub fn project(&self, world: &Vector3<f64>) -> Option<PixelPoint> {
        let cam = self.rotation * world + self.translation;
        if cam.z <= 0.0 {
            return None;
        }
        Some(PixelPoint::from_vector(&(self.intrinsics * cam)))
    }
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Analytic `F_ab` from two calibrated cameras.
///
/// With the relative pose `X_b = R X_a + t` the classical matrix
/// `K_b⁻ᵀ [t]ₓ R K_a⁻¹` maps points of view `a` to lines of view `b`; the
/// crate convention `p_aᵀ F_ab p_b = 0` is its transpose.
pub fn fundamental_from_cameras(
    cam_a: &PinholeCamera,
    cam_b: &PinholeCamera,
    src_view: usize,
    dst_view: usize,
) -> Result<FundamentalMatrix> {
    let baseline = (cam_a.center() - cam_b.center()).norm();
    if baseline < 1e-12 {
        return Err(Error::DegenerateRig(format!(
            "views {src_view} and {dst_view} share a camera center"
        )));
    }
    let rel_r = cam_b.rotation * cam_a.rotation.transpose();
    let rel_t = cam_b.translation - rel_r * cam_a.translation;
    let ka_inv = cam_a
        .intrinsics
        .try_inverse()
        .ok_or_else(|| Error::DegenerateRig("singular intrinsics".into()))?;
    let kb_inv = cam_b
        .intrinsics
        .try_inverse()
        .ok_or_else(|| Error::DegenerateRig("singular intrinsics".into()))?;
    let classical = kb_inv.transpose() * skew(&rel_t) * rel_r * ka_inv;
    FundamentalMatrix::from_matrix(classical.transpose(), src_view, dst_view)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid224() -> PatchGrid {
        PatchGrid::new(224, 224, 28).unwrap()
    }

    #[test]
    fn patch_center_examples() {
        let g = grid224();
        assert_eq!(patch_center(0, &g).unwrap(), PixelPoint::new(14.0, 14.0));
        assert_eq!(
            patch_center(g.grid_w() - 1, &g).unwrap(),
            PixelPoint::new(210.0, 14.0)
        );
        assert_eq!(
            patch_center(g.token_count() - 1, &g).unwrap(),
            PixelPoint::new(210.0, 210.0)
        );
        assert!(matches!(
            patch_center(64, &g),
            Err(Error::IndexOutOfRange { index: 64, len: 64 })
        ));
    }

    #[test]
    fn patch_center_uses_column_for_u_on_non_square_grid() {
        let g = PatchGrid::new(64, 32, 8).unwrap();
        // token 9 is row 1, column 1 of an 8-wide grid
        assert_eq!(patch_center(9, &g).unwrap(), PixelPoint::new(12.0, 12.0));
        assert_eq!(patch_center(7, &g).unwrap(), PixelPoint::new(60.0, 4.0));
        assert_eq!(patch_center(8, &g).unwrap(), PixelPoint::new(4.0, 12.0));
    }

    #[test]
    fn grid_rejects_non_dividing_patch() {
        assert!(PatchGrid::new(100, 64, 8).is_err());
        assert!(PatchGrid::new(64, 64, 0).is_err());
    }

    #[test]
    fn horizontal_line_distance() {
        let l = EpipolarLine {
            a: 0.0,
            b: 1.0,
            c: -10.0,
        };
        assert_eq!(point_line_distance(PixelPoint::new(5.0, 14.0), &l).unwrap(), 4.0);
        assert_eq!(point_line_distance(PixelPoint::new(3.0, 10.0), &l).unwrap(), 0.0);
    }

    #[test]
    fn zero_line_has_no_distance() {
        let l = EpipolarLine {
            a: 0.0,
            b: 0.0,
            c: 1.0,
        };
        assert!(matches!(
            point_line_distance(PixelPoint::new(0.0, 0.0), &l),
            Err(Error::DegenerateLine)
        ));
    }

    #[test]
    fn too_few_correspondences() {
        let pts = vec![(PixelPoint::new(1.0, 2.0), PixelPoint::new(3.0, 4.0)); 7];
        assert!(matches!(
            estimate_fundamental_8pt(&pts, 0, 1),
            Err(Error::TooFewCorrespondences(7))
        ));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<_> = (0..12)
            .map(|i| {
                let x = i as f64;
                (PixelPoint::new(x, 2.0 * x + 1.0), PixelPoint::new(x + 3.0, 0.5 * x))
            })
            .collect();
        assert!(matches!(
            estimate_fundamental_8pt(&pts, 0, 1),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn rectified_pair_gives_horizontal_lines() {
        // pure translation along x with identical intrinsics: F ∝ [t]ₓ
        let f = FundamentalMatrix::from_matrix(skew(&Vector3::new(1.0, 0.0, 0.0)), 0, 1).unwrap();
        for &(u, v) in &[(10.0, 20.0), (100.0, 3.0), (0.5, 200.0)] {
            let l = epipolar_line(PixelPoint::new(u, v), &f).unwrap();
            assert!(l.a.abs() < 1e-12);
            // the line passes through the same row
            assert!((l.b * v + l.c).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_norm_and_sign() {
        let f = FundamentalMatrix::from_matrix(Matrix3::new(0.0, -2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0), 0, 1)
            .unwrap();
        assert!((f.matrix().norm() - 1.0).abs() < 1e-15);
        assert!(f.matrix()[(1, 0)] > 0.0 || f.matrix()[(0, 1)] > 0.0);
    }

    #[test]
    fn infinite_threshold_mask_is_all_ones() {
        let g = PatchGrid::with_cells(4, 4, 8).unwrap();
        let f = FundamentalMatrix::from_matrix(
            Matrix3::new(0.1, -0.3, 0.2, 0.5, 0.05, -0.4, -0.2, 0.6, 0.01),
            0,
            1,
        )
        .unwrap();
        let m = build_epipolar_mask(&g, &f, f64::INFINITY).unwrap();
        assert!(m.is_all_ones());
    }

    #[test]
    fn negative_threshold_rejected() {
        let g = PatchGrid::with_cells(2, 2, 8).unwrap();
        let f = FundamentalMatrix::from_matrix(skew(&Vector3::new(1.0, 0.0, 0.0)), 0, 1).unwrap();
        assert!(build_epipolar_mask(&g, &f, -1.0).is_err());
    }

    #[test]
    fn pgm_header() {
        let mut m = BinaryMask::filled(2, false);
        m.set(0, 1, true);
        assert_eq!(m.to_pgm(), b"P5\n2 2\n255\n\x00\xff\x00\x00".to_vec());
    }

    #[test]
    fn coincident_cameras_rejected() {
        let k = Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0);
        let c = PinholeCamera::look_at(k, Vector3::new(0.0, 0.0, 4.0), Vector3::zeros(), Vector3::y())
            .unwrap();
        assert!(matches!(
            fundamental_from_cameras(&c, &c, 0, 1),
            Err(Error::DegenerateRig(_))
        ));
    }
}
