//! Feature tensors, camera rigs and dataset manifests.
//!
//! Tensors travel as MVFT files: a 28-byte little-endian header
//! (`"MVFT"`, version, V, T, D, 8 reserved zero bytes) followed by
//! `V·T·D` binary32 values, view-major then token then channel.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Matrix3x4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fundamental_from_cameras, EpipolarMaskSet, FundamentalMatrix, PatchGrid, PinholeCamera};

pub const MVFT_MAGIC: &[u8; 4] = b"MVFT";
pub const MVFT_VERSION: u32 = 1;
pub const MVFT_HEADER_LEN: usize = 28;

/// Stored per-sample features, `V × T × D` binary32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    views: usize,
    tokens: usize,
    dims: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(views: usize, tokens: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != views * tokens * dims {
            return Err(Error::InvalidTensor(format!(
                "{} values for shape {views}x{tokens}x{dims}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite value at index {i}")));
        }
        Ok(FeatureTensor {
            views,
            tokens,
            dims,
            data,
        })
    }

    pub fn zeros(views: usize, tokens: usize, dims: usize) -> Self {
        FeatureTensor {
            views,
            tokens,
            dims,
            data: vec![0.0; views * tokens * dims],
        }
    }

    pub fn views(&self) -> usize {
        self.views
    }
    pub fn tokens(&self) -> usize {
        self.tokens
    }
    pub fn dims(&self) -> usize {
        self.dims
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Contiguous `T × D` slice of one view.
    pub fn view(&self, v: usize) -> &[f32] {
        let n = self.tokens * self.dims;
        &self.data[v * n..(v + 1) * n]
    }

    pub fn token(&self, v: usize, j: usize) -> &[f32] {
        let start = (v * self.tokens + j) * self.dims;
        &self.data[start..start + self.dims]
    }

    /// Concatenate single- or multi-view tensors along the view axis.
    pub fn stack(parts: &[FeatureTensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("nothing to stack".into()))?;
        let mut data = Vec::new();
        let mut views = 0;
        for p in parts {
            if p.tokens != first.tokens || p.dims != first.dims {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {}x{} with {}x{}",
                    p.tokens, p.dims, first.tokens, first.dims
                )));
            }
            views += p.views;
            data.extend_from_slice(&p.data);
        }
        FeatureTensor::new(views, first.tokens, first.dims, data)
    }

    pub fn to_stack(&self) -> FeatureStack {
        let views = (0..self.views)
            .map(|v| {
                DMatrix::from_iterator(
                    self.dims,
                    self.tokens,
                    self.view(v).iter().map(|&x| x as f64),
                )
            })
            .collect();
        FeatureStack::new(views).expect("tensor shape is consistent")
    }

    /// Serialize to MVFT bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MVFT_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MVFT_MAGIC);
        out.extend_from_slice(&MVFT_VERSION.to_le_bytes());
        for n in [self.views, self.tokens, self.dims] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out.extend_from_slice(&[0u8; 8]);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = MvftHeader::parse(bytes)?;
        let payload = &bytes[MVFT_HEADER_LEN..];
        let expected = header.payload_len();
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        let data = payload[..expected]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureTensor::new(header.views, header.tokens, header.dims, data)
    }
}

/// Shape fields of an MVFT header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MvftHeader {
    pub views: usize,
    pub tokens: usize,
    pub dims: usize,
}

impl MvftHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MVFT_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < MVFT_HEADER_LEN {
            return Err(Error::TruncatedPayload {
                expected: MVFT_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let version = word(4);
        if version != MVFT_VERSION {
            return Err(Error::VersionMismatch(version));
        }
        Ok(MvftHeader {
            views: word(8) as usize,
            tokens: word(12) as usize,
            dims: word(16) as usize,
        })
    }

    pub fn payload_len(&self) -> usize {
        self.views * self.tokens * self.dims * 4
    }
}

pub fn write_feature_tensor(t: &FeatureTensor, path: impl AsRef<Path>) -> Result<()> {
    if let Some(i) = t.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidTensor(format!("non-finite value at index {i}")));
    }
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io_at(path, e))
}

pub fn read_feature_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    FeatureTensor::from_bytes(&bytes)
}

/// Read only the header of an MVFT file.
pub fn read_header(path: impl AsRef<Path>) -> Result<MvftHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut buf = Vec::with_capacity(MVFT_HEADER_LEN);
    file.by_ref()
        .take(MVFT_HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io_at(path, e))?;
    MvftHeader::parse(&buf)
}

/// 64-bit working copy of one sample: a `D × T` matrix per view, one column
/// per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    views: Vec<DMatrix<f64>>,
}

impl FeatureStack {
    pub fn new(views: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::ShapeMismatch("feature stack without views".into()))?;
        let shape = first.shape();
        if views.iter().any(|m| m.shape() != shape) {
            return Err(Error::ShapeMismatch("views differ in shape".into()));
        }
        Ok(FeatureStack { views })
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }
    pub fn tokens(&self) -> usize {
        self.views[0].ncols()
    }
    pub fn dims(&self) -> usize {
        self.views[0].nrows()
    }
    pub fn view(&self, v: usize) -> &DMatrix<f64> {
        &self.views[v]
    }
    pub fn view_mut(&mut self, v: usize) -> &mut DMatrix<f64> {
        &mut self.views[v]
    }
    pub fn views(&self) -> &[DMatrix<f64>] {
        &self.views
    }

    pub fn is_finite(&self) -> bool {
        self.views.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Round to binary32 storage.
    pub fn to_tensor(&self) -> Result<FeatureTensor> {
        let (d, t) = (self.dims(), self.tokens());
        let mut data = Vec::with_capacity(self.views.len() * t * d);
        for m in &self.views {
            data.extend(m.iter().map(|&x| x as f32));
        }
        FeatureTensor::new(self.views.len(), t, d, data)
    }
}

/// Calibrated or uncalibrated camera rig.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub view_ids: Vec<String>,
    fundamental: BTreeMap<(usize, usize), FundamentalMatrix>,
    cameras: Option<Vec<PinholeCamera>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    view_ids: Vec<String>,
    fundamental: BTreeMap<String, BTreeMap<String, [f64; 9]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<BTreeMap<String, [f64; 9]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extrinsics: Option<BTreeMap<String, [f64; 12]>>,
}

/// Tolerance for stored vs analytic fundamental matrices.
pub const RIG_CONSISTENCY_TOL: f64 = 1e-9;

impl CameraRig {
    /// Rig with every pairwise matrix derived analytically from the cameras.
    pub fn from_cameras(view_ids: Vec<String>, cameras: Vec<PinholeCamera>) -> Result<Self> {
        if view_ids.len() != cameras.len() || view_ids.len() < 2 {
            return Err(Error::DegenerateRig("need one camera per view and at least two views".into()));
        }
        let mut fundamental = BTreeMap::new();
        for a in 0..cameras.len() {
            for b in 0..cameras.len() {
                if a != b {
                    fundamental.insert((a, b), fundamental_from_cameras(&cameras[a], &cameras[b], a, b)?);
                }
            }
        }
        Ok(CameraRig {
            view_ids,
            fundamental,
            cameras: Some(cameras),
        })
    }

    /// Uncalibrated rig; every ordered pair must be present.
    pub fn from_fundamentals(
        view_ids: Vec<String>,
        fundamental: BTreeMap<(usize, usize), FundamentalMatrix>,
    ) -> Result<Self> {
        let rig = CameraRig {
            view_ids,
            fundamental,
            cameras: None,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn view_count(&self) -> usize {
        self.view_ids.len()
    }

    pub fn fundamental(&self, a: usize, b: usize) -> Option<&FundamentalMatrix> {
        self.fundamental.get(&(a, b))
    }

    pub fn cameras(&self) -> Option<&[PinholeCamera]> {
        self.cameras.as_deref()
    }

    pub fn view_index(&self, id: &str) -> Option<usize> {
        self.view_ids.iter().position(|v| v == id)
    }

    pub fn mask_set(&self, grid: &PatchGrid, delta_patches: f64) -> Result<EpipolarMaskSet> {
        EpipolarMaskSet::build(grid, self.view_count(), delta_patches, |a, b| {
            self.fundamental(a, b).copied()
        })
    }

    fn validate(&self) -> Result<()> {
        let v = self.view_count();
        if v < 2 {
            return Err(Error::Schema("rig needs at least two views".into()));
        }
        for a in 0..v {
            for b in 0..v {
                if a != b && !self.fundamental.contains_key(&(a, b)) {
                    return Err(Error::Schema(format!(
                        "missing fundamental matrix {} -> {}",
                        self.view_ids[a], self.view_ids[b]
                    )));
                }
            }
        }
        if let Some(cams) = &self.cameras {
            for (&(a, b), stored) in &self.fundamental {
                let analytic = fundamental_from_cameras(&cams[a], &cams[b], a, b)?;
                let diff = (stored.matrix() - analytic.matrix()).abs().max();
                if diff > RIG_CONSISTENCY_TOL {
                    return Err(Error::Schema(format!(
                        "stored F {a}->{b} deviates from cameras by {diff:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let id = |i: usize| self.view_ids[i].clone();
        let mut fundamental: BTreeMap<String, BTreeMap<String, [f64; 9]>> = BTreeMap::new();
        for (&(a, b), f) in &self.fundamental {
            fundamental.entry(id(a)).or_default().insert(id(b), f.to_row_major());
        }
        let (intrinsics, extrinsics) = match &self.cameras {
            Some(cams) => {
                let mut k = BTreeMap::new();
                let mut e = BTreeMap::new();
                for (i, c) in cams.iter().enumerate() {
                    k.insert(id(i), row_major(c.intrinsics.as_slice(), 3, 3).try_into().unwrap());
                    e.insert(id(i), row_major(c.extrinsics().as_slice(), 3, 4).try_into().unwrap());
                }
                (Some(k), Some(e))
            }
            None => (None, None),
        };
        let file = RigFile {
            view_ids: self.view_ids.clone(),
            fundamental,
            intrinsics,
            extrinsics,
        };
        serde_json::to_string_pretty(&file).expect("rig serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RigFile = serde_json::from_str(text).map_err(|e| Error::json("rig", &e))?;
        let index: BTreeMap<&str, usize> = file
            .view_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        if index.len() != file.view_ids.len() {
            return Err(Error::Schema("duplicate view id in rig".into()));
        }
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Schema(format!("unknown view id {s:?}")))
        };
        let mut fundamental = BTreeMap::new();
        for (a, row) in &file.fundamental {
            for (b, values) in row {
                let (ia, ib) = (lookup(a)?, lookup(b)?);
                if ia == ib {
                    return Err(Error::Schema(format!("fundamental matrix from {a} to itself")));
                }
                fundamental.insert((ia, ib), FundamentalMatrix::from_row_major(values, ia, ib)?);
            }
        }
        let cameras = match (&file.intrinsics, &file.extrinsics) {
            (Some(k), Some(e)) => {
                let mut cams = Vec::with_capacity(file.view_ids.len());
                for vid in &file.view_ids {
                    let k = k.get(vid).ok_or_else(|| Error::Schema(format!("no intrinsics for {vid}")))?;
                    let e = e.get(vid).ok_or_else(|| Error::Schema(format!("no extrinsics for {vid}")))?;
                    cams.push(PinholeCamera::from_parts(
                        Matrix3::from_row_slice(k),
                        &Matrix3x4::from_row_slice(e),
                    ));
                }
                Some(cams)
            }
            (None, None) => None,
            _ => return Err(Error::Schema("intrinsics and extrinsics must be given together".into())),
        };
        let rig = CameraRig {
            view_ids: file.view_ids,
            fundamental,
            cameras,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        CameraRig::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io_at(path, e))
    }
}

fn row_major(col_major: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(col_major[c * rows + r]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub sample_id: String,
    pub split: Split,
    pub label: Label,
    /// One MVFT file per view, or a single file holding every view.
    pub view_feature_paths: Vec<PathBuf>,
    pub view_labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_masks: Option<Vec<Vec<u8>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub grid: PatchGrid,
    pub rig_path: PathBuf,
    pub samples: Vec<SampleEntry>,
    /// Directory relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Shape shared by every sample in a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetShape {
    pub views: usize,
    pub tokens: usize,
    pub dims: usize,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn rig_file(&self) -> PathBuf {
        self.resolve(&self.rig_path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Check the normal-only training protocol and cross-file shape
    /// consistency, returning the common shape.
    pub fn validate(&self) -> Result<DatasetShape> {
        let mut shape: Option<DatasetShape> = None;
        let t_grid = self.grid.token_count();
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.sample_id.as_str()) {
                return Err(Error::Schema(format!("duplicate sample id {}", s.sample_id)));
            }
            if s.split == Split::Train && s.label != Label::Normal {
                return Err(Error::AnomalousTrainSample(s.sample_id.clone()));
            }
            if s.view_feature_paths.is_empty() {
                return Err(Error::Schema(format!("{}: no feature files", s.sample_id)));
            }
            let mut views = 0;
            let mut td: Option<(usize, usize)> = None;
            for p in &s.view_feature_paths {
                let h = read_header(self.resolve(p))?;
                if let Some(prev) = td {
                    if prev != (h.tokens, h.dims) {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: views disagree on tokens/dims",
                            s.sample_id
                        )));
                    }
                }
                td = Some((h.tokens, h.dims));
                views += h.views;
            }
            let (tokens, dims) = td.expect("at least one file");
            let this = DatasetShape { views, tokens, dims };
            match shape {
                None => {
                    if tokens != t_grid {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: {tokens} tokens but the grid has {t_grid}",
                            s.sample_id
                        )));
                    }
                    shape = Some(this)
                }
                Some(first) if first != this => {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: shape {}x{}x{} differs from first sample {}x{}x{}",
                        s.sample_id, views, tokens, dims, first.views, first.tokens, first.dims
                    )))
                }
                _ => {}
            }
            if s.view_labels.len() != views || s.view_labels.iter().any(|&l| l > 1) {
                return Err(Error::Schema(format!("{}: view_labels must be {views} bits", s.sample_id)));
            }
            if let Some(masks) = &s.patch_masks {
                if masks.len() != views
                    || masks.iter().any(|m| m.len() != tokens || m.iter().any(|&b| b > 1))
                {
                    return Err(Error::Schema(format!(
                        "{}: patch_masks must be {views} binary vectors of length {tokens}",
                        s.sample_id
                    )));
                }
            }
        }
        shape.ok_or_else(|| Error::Schema("manifest lists no samples".into()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io_at(path, e))
    }
}

/// Parse and validate a manifest; relative paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json("manifest", &e))?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

/// One sample held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub split: Split,
    pub label: Label,
    pub features: FeatureTensor,
    pub view_labels: Vec<u8>,
    pub patch_masks: Option<Vec<Vec<u8>>>,
}

impl Sample {
    /// Image-level label of view `v`: any marked patch, else the stored view label.
    pub fn image_label(&self, v: usize) -> u8 {
        match &self.patch_masks {
            Some(m) => u8::from(m[v].iter().any(|&b| b == 1)),
            None => self.view_labels[v],
        }
    }
}

/// A fully loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: PatchGrid,
    pub shape: DatasetShape,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let shape = manifest.validate()?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let parts = s
                .view_feature_paths
                .iter()
                .map(|p| read_feature_tensor(manifest.resolve(p)))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                sample_id: s.sample_id.clone(),
                split: s.split,
                label: s.label,
                features: FeatureTensor::stack(&parts)?,
                view_labels: s.view_labels.clone(),
                patch_masks: s.patch_masks.clone(),
            });
        }
        Ok(Dataset {
            grid: manifest.grid,
            shape,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}
