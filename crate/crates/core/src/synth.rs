//! Deterministic synthetic multi-view scenes.
//!
//! The object is a unit sphere at the origin covered by `surface_points`
//! anchors. Each anchor carries an appearance vector from a smooth field: a
//! softly normalized mixture of a few Gaussian bumps on the sphere, each bump
//! owning a random direction in feature space, so normal patches cluster
//! around a handful of prototypes. Cameras sit on an arc around the sphere.
//! A patch feature is the mean appearance of the visible anchors that project
//! into it, plus independent per-view Gaussian noise.
//!
//! A defect perturbs every anchor within `anomaly_radius` of a random visible
//! surface point by the same random offset. Visibility is per view, so the
//! same defect marks different patches in different views, or none at all.

use std::path::{Path, PathBuf};

use nalgebra::{DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    write_feature_tensor, CameraRig, Dataset, DatasetManifest, DatasetShape, FeatureTensor, Label,
    Sample, SampleEntry, Split,
};
use crate::geometry::{PatchGrid, PinholeCamera};
use crate::rng::keyed_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub seed: u64,
    pub views: usize,
    pub grid: PatchGrid,
    pub feature_dims: usize,
    pub surface_points: usize,
    /// Fraction of test samples carrying a defect.
    pub anomaly_rate: f64,
    /// Defect radius on the unit sphere.
    pub anomaly_radius: f64,
    /// Per-channel standard deviation of the appearance offset applied to
    /// defective anchors.
    pub anomaly_strength: f64,
    /// Per-channel standard deviation of the per-view patch noise.
    pub noise_sigma: f64,
    /// Distance between adjacent camera centers.
    pub camera_baseline: f64,
    /// Distance of every camera from the sphere center.
    pub camera_distance: f64,
    pub camera_elevation_deg: f64,
    /// Number of bumps in the appearance field.
    pub appearance_modes: usize,
    /// Angular width of each bump (world units on the unit sphere).
    pub appearance_width: f64,
    /// Exponent `γ` of the view-dependent defect contrast `cos(θ)^γ`, where
    /// `θ` is the angle between the surface normal and the viewing ray. Zero
    /// gives every view the full offset.
    pub defect_view_falloff: f64,
    /// Standard deviation of a per-sample rotation of the object about the
    /// vertical axis, in degrees.
    pub pose_jitter_deg: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            views: 3,
            grid: PatchGrid::with_cells(8, 8, 8).expect("valid grid"),
            feature_dims: 32,
            surface_points: 4000,
            anomaly_rate: 0.5,
            anomaly_radius: 0.3,
            anomaly_strength: 1.0,
            noise_sigma: 0.05,
            camera_baseline: 1.6,
            camera_distance: 4.0,
            camera_elevation_deg: 20.0,
            appearance_modes: 8,
            appearance_width: 0.45,
            defect_view_falloff: 0.0,
            pose_jitter_deg: 0.0,
        }
    }
}

impl SceneConfig {
    /// The standard benchmark scene: three views, an 8×8 grid, 32 channels,
    /// patch noise and defect contrast of the same order so that no arm
    /// saturates.
    pub fn benchmark() -> Self {
        SceneConfig {
            noise_sigma: 0.5,
            anomaly_strength: 0.6,
            ..SceneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.views < 2 {
            return bad("scene needs at least two views");
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad("anomaly_rate must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) || !(self.anomaly_radius >= 0.0) || !(self.anomaly_strength >= 0.0) {
            return bad("noise_sigma, anomaly_radius and anomaly_strength must be >= 0");
        }
        if self.feature_dims == 0 || self.surface_points == 0 || self.appearance_modes == 0 {
            return bad("feature_dims, surface_points and appearance_modes must be positive");
        }
        if !(self.camera_distance > 1.0) {
            return bad("cameras must sit outside the unit sphere");
        }
        if !(self.camera_baseline >= 0.0) || self.camera_baseline > 2.0 * self.camera_distance {
            return bad("camera_baseline must lie in [0, 2 * camera_distance]");
        }
        if !(self.appearance_width > 0.0) {
            return bad("appearance_width must be positive");
        }
        if !(self.pose_jitter_deg >= 0.0) || !(self.defect_view_falloff >= 0.0) {
            return bad("pose_jitter_deg and defect_view_falloff must be >= 0");
        }
        Ok(())
    }

    /// Focal length placing the sphere's silhouette at 40% of the smaller
    /// image side from the principal point.
    fn focal(&self) -> f64 {
        let alpha = (1.0 / self.camera_distance).asin();
        let side = self.grid.image_width().min(self.grid.image_height()) as f64;
        0.4 * side / alpha.tan()
    }
}

/// Cameras on a horizontal arc at fixed elevation, all looking at the origin.
/// Adjacent centers are `camera_baseline` apart.
pub fn make_rig(cfg: &SceneConfig) -> Result<CameraRig> {
    cfg.validate()?;
    let d = cfg.camera_distance;
    let elevation = cfg.camera_elevation_deg.to_radians();
    let ring = d * elevation.cos();
    if !(ring > 0.0) {
        return Err(Error::DegenerateRig("cameras on the vertical axis".into()));
    }
    let chord = cfg.camera_baseline / ring;
    if chord > 2.0 {
        return Err(Error::DegenerateRig("baseline exceeds the camera ring".into()));
    }
    let step = 2.0 * (chord / 2.0).asin();
    let f = cfg.focal();
    let k = Matrix3::new(
        f,
        0.0,
        cfg.grid.image_width() as f64 / 2.0,
        0.0,
        f,
        cfg.grid.image_height() as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let mid = (cfg.views as f64 - 1.0) / 2.0;
    let cameras = (0..cfg.views)
        .map(|i| {
            let az = (i as f64 - mid) * step;
            let center = Vector3::new(ring * az.sin(), d * elevation.sin(), ring * az.cos());
            PinholeCamera::look_at(k, center, Vector3::zeros(), Vector3::y())
        })
        .collect::<Result<Vec<_>>>()?;
    let ids = (0..cfg.views).map(|i| format!("cam{i}")).collect();
    CameraRig::from_cameras(ids, cameras)
}

fn gaussian_vector(rng: &mut impl Rng, dims: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(dims, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            Vector3::new(r * th.cos(), y, r * th.sin())
        })
        .collect()
}

/// An anchor seen by one view.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Visible {
    anchor: usize,
    token: usize,
    /// Cosine between the surface normal and the ray to the camera.
    cos: f64,
}

fn visibility(
    cfg: &SceneConfig,
    cameras: &[PinholeCamera],
    anchors: &[Vector3<f64>],
    yaw: f64,
) -> Vec<Vec<Visible>> {
    let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    cameras
        .iter()
        .map(|cam| {
            let center = cam.center();
            let mut vis = Vec::new();
            for (i, x) in anchors.iter().enumerate() {
                let x = rot * x;
                // sphere normal equals the position
                let ray = center - x;
                let facing = x.dot(&ray);
                if facing <= 0.0 {
                    continue;
                }
                if let Some(p) = cam.project(&x) {
                    if let Some(token) = cfg.grid.token_at(p.u, p.v) {
                        vis.push(Visible {
                            anchor: i,
                            token,
                            cos: facing / ray.norm(),
                        });
                    }
                }
            }
            vis
        })
        .collect()
}

/// Anchor geometry, appearance field and per-view visibility of one scene.
#[derive(Debug, Clone)]
pub struct Scene {
    cfg: SceneConfig,
    cameras: Vec<PinholeCamera>,
    anchors: Vec<Vector3<f64>>,
    appearance: Vec<DVector<f64>>,
    background: DVector<f64>,
    /// Per view: every visible anchor at rest pose.
    visible: Vec<Vec<Visible>>,
    /// Anchors seen by at least one view.
    seen: Vec<usize>,
}

/// One rendered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub features: FeatureTensor,
    pub patch_masks: Vec<Vec<u8>>,
}

impl Scene {
    pub fn new(cfg: &SceneConfig, rig: &CameraRig) -> Result<Self> {
        cfg.validate()?;
        let cameras = rig
            .cameras()
            .ok_or_else(|| Error::InvalidConfig("synthetic scenes need a calibrated rig".into()))?;
        if cameras.len() != cfg.views {
            return Err(Error::ShapeMismatch(format!(
                "rig has {} views, config {}",
                cameras.len(),
                cfg.views
            )));
        }
        let d = cfg.feature_dims;
        let anchors = fibonacci_sphere(cfg.surface_points);

        let mut rng = keyed_rng(cfg.seed, 0, "scene/appearance");
        let background = gaussian_vector(&mut rng, d, 1.0);
        let modes: Vec<(Vector3<f64>, DVector<f64>)> = (0..cfg.appearance_modes)
            .map(|_| {
                // bump centers on the camera-facing cap
                let mut c;
                loop {
                    c = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(0.0..1.0),
                    );
                    let n = c.norm();
                    if n > 1e-3 && n <= 1.0 {
                        break;
                    }
                }
                (c.normalize(), gaussian_vector(&mut rng, d, 1.0))
            })
            .collect();
        let two_w2 = 2.0 * cfg.appearance_width * cfg.appearance_width;
        let appearance = anchors
            .iter()
            .map(|x| {
                let weights: Vec<f64> = modes
                    .iter()
                    .map(|(c, _)| (-(x - c).norm_squared() / two_w2).exp())
                    .collect();
                let total: f64 = weights.iter().sum::<f64>().max(1e-300);
                let mut a = DVector::zeros(d);
                for (w, (_, dir)) in weights.iter().zip(&modes) {
                    a.axpy(w / total, dir, 1.0);
                }
                a
            })
            .collect();

        let cameras = cameras.to_vec();
        let visible = visibility(cfg, &cameras, &anchors, 0.0);
        let mut seen_flag = vec![false; anchors.len()];
        for v in visible.iter().flatten() {
            seen_flag[v.anchor] = true;
        }
        let seen = (0..anchors.len()).filter(|&i| seen_flag[i]).collect();
        Ok(Scene {
            cfg: cfg.clone(),
            cameras,
            anchors,
            appearance,
            background,
            visible,
            seen,
        })
    }

    /// Per-view visibility with the object turned by `yaw` radians.
    fn visible_at(&self, yaw: f64) -> Vec<Vec<Visible>> {
        if yaw == 0.0 {
            self.visible.clone()
        } else {
            visibility(&self.cfg, &self.cameras, &self.anchors, yaw)
        }
    }

    fn sample_yaw(&self, sample_id: &str) -> f64 {
        if self.cfg.pose_jitter_deg == 0.0 {
            return 0.0;
        }
        let mut rng = keyed_rng(self.cfg.seed, 0, &format!("pose/{sample_id}"));
        let n: f64 = StandardNormal.sample(&mut rng);
        n * self.cfg.pose_jitter_deg.to_radians()
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn anchor(&self, i: usize) -> Vector3<f64> {
        self.anchors[i]
    }

    /// Token of anchor `i` in view `v`, if visible there.
    pub fn anchor_token(&self, v: usize, i: usize) -> Option<usize> {
        self.visible[v].iter().find(|x| x.anchor == i).map(|x| x.token)
    }

    /// `(token in a, token in b)` for every anchor visible in both views at
    /// rest pose, one entry per anchor.
    pub fn correspondences(&self, a: usize, b: usize) -> Vec<(usize, usize)> {
        let mut in_b = vec![None; self.anchors.len()];
        for x in &self.visible[b] {
            in_b[x.anchor] = Some(x.token);
        }
        self.visible[a]
            .iter()
            .filter_map(|x| in_b[x.anchor].map(|tb| (x.token, tb)))
            .collect()
    }

    /// Anchors seen by at least one view.
    pub fn seen_anchors(&self) -> &[usize] {
        &self.seen
    }

    /// Noise-free normal feature of every `(view, token)` at rest pose.
    pub fn clean_features(&self) -> Vec<Vec<DVector<f64>>> {
        self.accumulate(&self.visible, &[], None)
    }

    fn accumulate(
        &self,
        visible: &[Vec<Visible>],
        defect: &[bool],
        offset: Option<&DVector<f64>>,
    ) -> Vec<Vec<DVector<f64>>> {
        let d = self.cfg.feature_dims;
        let t = self.cfg.grid.token_count();
        visible
            .iter()
            .map(|vis| {
                let mut sums = vec![DVector::<f64>::zeros(d); t];
                let mut counts = vec![0usize; t];
                for x in vis {
                    sums[x.token] += &self.appearance[x.anchor];
                    if let Some(off) = offset {
                        if defect[x.anchor] {
                            let contrast = x.cos.powf(self.cfg.defect_view_falloff);
                            sums[x.token].axpy(contrast, off, 1.0);
                        }
                    }
                    counts[x.token] += 1;
                }
                sums.into_iter()
                    .zip(counts)
                    .map(|(s, c)| if c == 0 { self.background.clone() } else { s / c as f64 })
                    .collect()
            })
            .collect()
    }

    /// Render a sample. Deterministic in `(seed, sample_id)`.
    pub fn render(&self, sample_id: &str, anomalous: bool) -> SynthSample {
        let center = if anomalous {
            let mut rng = keyed_rng(self.cfg.seed, 0, &format!("defect-site/{sample_id}"));
            let pick = self.seen[rng.random_range(0..self.seen.len())];
            Some(self.anchors[pick])
        } else {
            None
        };
        self.render_with_defect(sample_id, center)
    }

    /// Render with an explicit defect center (`None` for a normal sample).
    pub fn render_with_defect(&self, sample_id: &str, defect_center: Option<Vector3<f64>>) -> SynthSample {
        let cfg = &self.cfg;
        let (v_count, t, d) = (cfg.views, cfg.grid.token_count(), cfg.feature_dims);
        let mut defect = vec![false; self.anchors.len()];
        let offset = defect_center.map(|c| {
            for (i, x) in self.anchors.iter().enumerate() {
                defect[i] = (x - c).norm() <= cfg.anomaly_radius;
            }
            let mut rng = keyed_rng(cfg.seed, 0, &format!("defect-offset/{sample_id}"));
            gaussian_vector(&mut rng, d, cfg.anomaly_strength)
        });
        let visible = self.visible_at(self.sample_yaw(sample_id));
        let clean = self.accumulate(&visible, &defect, offset.as_ref());

        let mut patch_masks = vec![vec![0u8; t]; v_count];
        if offset.is_some() {
            for (v, vis) in visible.iter().enumerate() {
                for x in vis {
                    if defect[x.anchor] {
                        patch_masks[v][x.token] = 1;
                    }
                }
            }
        }

        let mut rng = keyed_rng(cfg.seed, 0, &format!("noise/{sample_id}"));
        let mut data = Vec::with_capacity(v_count * t * d);
        for view in &clean {
            for token in view {
                for &x in token.iter() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    data.push((x + cfg.noise_sigma * n) as f32);
                }
            }
        }
        SynthSample {
            features: FeatureTensor::new(v_count, t, d, data).expect("finite synthetic features"),
            patch_masks,
        }
    }
}

/// Render one sample from scratch.
pub fn synth_sample(cfg: &SceneConfig, rig: &CameraRig, sample_id: &str, anomalous: bool) -> Result<SynthSample> {
    Ok(Scene::new(cfg, rig)?.render(sample_id, anomalous))
}

fn sample_ids(n_train: usize, n_test: usize) -> impl Iterator<Item = (Split, String)> {
    (0..n_train)
        .map(|i| (Split::Train, format!("train_{i:04}")))
        .chain((0..n_test).map(|i| (Split::Test, format!("test_{i:04}"))))
}

fn draw_label(cfg: &SceneConfig, split: Split, id: &str) -> bool {
    split == Split::Test && keyed_rng(cfg.seed, 0, &format!("label/{id}")).random_bool(cfg.anomaly_rate)
}

/// Generate a dataset in memory. Same samples as [`synth_dataset`].
pub fn synth_in_memory(cfg: &SceneConfig, n_train: usize, n_test: usize) -> Result<(Dataset, CameraRig)> {
    let rig = make_rig(cfg)?;
    let scene = Scene::new(cfg, &rig)?;
    let samples = sample_ids(n_train, n_test)
        .map(|(split, id)| {
            let anomalous = draw_label(cfg, split, &id);
            let s = scene.render(&id, anomalous);
            let view_labels = s.patch_masks.iter().map(|m| u8::from(m.contains(&1))).collect();
            Sample {
                sample_id: id,
                split,
                label: if anomalous { Label::Anomalous } else { Label::Normal },
                features: s.features,
                view_labels,
                patch_masks: Some(s.patch_masks),
            }
        })
        .collect();
    let shape = DatasetShape {
        views: cfg.views,
        tokens: cfg.grid.token_count(),
        dims: cfg.feature_dims,
    };
    Ok((
        Dataset {
            grid: cfg.grid,
            shape,
            samples,
        },
        rig,
    ))
}

/// Write a dataset to `out_dir`: `rig.json`, `manifest.json` and one MVFT
/// file per sample and view under `features/`.
pub fn synth_dataset(cfg: &SceneConfig, n_train: usize, n_test: usize, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let (dataset, rig) = synth_in_memory(cfg, n_train, n_test)?;
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io_at(&feat_dir, e))?;
    rig.save(out_dir.join("rig.json"))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let mut paths = Vec::with_capacity(cfg.views);
        for v in 0..cfg.views {
            let rel = PathBuf::from("features").join(format!("{}_v{v}.mvft", s.sample_id));
            let single = FeatureTensor::new(1, s.features.tokens(), s.features.dims(), s.features.view(v).to_vec())?;
            write_feature_tensor(&single, out_dir.join(&rel))?;
            paths.push(rel);
        }
        entries.push(SampleEntry {
            sample_id: s.sample_id.clone(),
            split: s.split,
            label: s.label,
            view_feature_paths: paths,
            view_labels: s.view_labels.clone(),
            patch_masks: s.patch_masks.clone(),
        });
    }
    let manifest = DatasetManifest {
        grid: cfg.grid,
        rig_path: PathBuf::from("rig.json"),
        samples: entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            feature_dims: 8,
            surface_points: 1500,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn normal_sample_has_empty_masks() {
        let cfg = small();
        let rig = make_rig(&cfg).unwrap();
        let s = synth_sample(&cfg, &rig, "n0", false).unwrap();
        assert!(s.patch_masks.iter().all(|m| m.iter().all(|&b| b == 0)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small();
        let rig = make_rig(&cfg).unwrap();
        let a = synth_sample(&cfg, &rig, "s7", true).unwrap();
        let b = synth_sample(&cfg, &rig, "s7", true).unwrap();
        assert_eq!(a, b);
        let c = synth_sample(&cfg, &rig, "s8", true).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let cfg = SceneConfig {
            camera_baseline: 0.0,
            views: 2,
            ..small()
        };
        assert!(matches!(make_rig(&cfg), Err(Error::DegenerateRig(_))));
    }

    #[test]
    fn five_views_have_twenty_rank_two_pairs() {
        let cfg = SceneConfig { views: 5, ..small() };
        let rig = make_rig(&cfg).unwrap();
        let mut n = 0;
        for a in 0..5 {
            for b in 0..5 {
                if a != b {
                    let f = rig.fundamental(a, b).unwrap();
                    let s = f.matrix().singular_values();
                    let mut s: Vec<f64> = s.iter().copied().collect();
                    s.sort_by(f64::total_cmp);
                    assert!(s[0] < 1e-12 * s[2], "pair {a}->{b} singular values {s:?}");
                    assert!(s[1] > 1e-6);
                    n += 1;
                }
            }
        }
        assert_eq!(n, 20);
    }

    #[test]
    fn config_validation() {
        assert!(SceneConfig { views: 1, ..small() }.validate().is_err());
        assert!(SceneConfig { anomaly_rate: 1.5, ..small() }.validate().is_err());
        assert!(SceneConfig { noise_sigma: -0.1, ..small() }.validate().is_err());
    }
}
