use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use epiad::membank::BankLayout;
use epiad::pipeline::{ClassMode, Fusion, Pretraining, RunOptions};
use epiad::synth::SceneConfig;
use epiad::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything a command can be configured with. Loaded from JSON, then
/// overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces both `scene.seed` and `run.train.seed`.
    pub seed: Option<u64>,
    pub scene: SceneConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub run: RunOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            scene: SceneConfig::default(),
            n_train: 200,
            n_test: 100,
            run: RunOptions::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub rig: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::IoAt {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Schema(format!(
                "{}: {e} (line {}, column {})",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }

    /// Defaults, then the file (if any), then the flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        flags.apply(&mut cfg)?;
        if let Some(seed) = cfg.seed {
            cfg.scene.seed = seed;
            cfg.run.train.seed = seed;
        }
        cfg.scene.validate()?;
        cfg.run.validate()?;
        Ok(cfg)
    }

    /// SHA-256 over the configuration, excluding file locations.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.paths = Paths::default();
        let text = serde_json::to_string(&hashed).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.paths
            .manifest
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no manifest given (--manifest or paths.manifest)".into()))
    }

    pub fn out(&self) -> Result<&Path> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no output location given (--out or paths.out)".into()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Flags shared by every command that reads a configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Camera rig; defaults to the one named in the manifest.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// none | unmasked | epipolar
    #[arg(long, value_parser = parse_name::<Fusion>)]
    pub fusion: Option<Fusion>,
    /// random-init | copy-proxy | single-center | multi-center | multi-center+reg
    #[arg(long, value_parser = parse_name::<Pretraining>)]
    pub pretraining: Option<Pretraining>,
    /// shared | per-view
    #[arg(long, value_parser = parse_name::<BankLayout>)]
    pub bank_layout: Option<BankLayout>,
    /// single-class | multi-class
    #[arg(long, value_parser = parse_name::<ClassMode>)]
    pub mode: Option<ClassMode>,
    /// Coreset ratio in (0, 1].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Band half-width in patches; `inf` for an unbounded band.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub refine: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub k_centers: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut cfg.paths.manifest, &self.manifest);
        set(&mut cfg.paths.rig, &self.rig);
        set(&mut cfg.paths.out, &self.out);
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        let run = &mut cfg.run;
        if let Some(f) = self.fusion {
            run.fusion = f;
            if f == Fusion::None && self.pretraining.is_none() {
                run.pretraining = Pretraining::None;
            }
        }
        if let Some(p) = self.pretraining {
            run.pretraining = p;
        }
        if let Some(b) = self.bank_layout {
            run.bank = b;
        }
        if let Some(m) = self.mode {
            run.mode = m;
        }
        if self.ratio.is_some() {
            run.coreset_ratio = self.ratio;
        }
        if let Some(d) = self.delta {
            run.train.delta_patches = d;
        }
        if self.refine {
            run.refine = true;
        }
        if let Some(a) = self.alpha {
            run.alpha = a;
        }
        if let Some(e) = self.epochs {
            run.train.epochs = e;
        }
        if let Some(l) = self.lambda {
            run.train.lambda = l;
        }
        if let Some(k) = self.k_centers {
            run.train.k_centers = k;
        }
        if let Some(lr) = self.learning_rate {
            run.train.learning_rate = lr;
        }
        Ok(())
    }
}

/// Parse a kebab-case enum name through its serde representation.
pub fn parse_name<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}
