use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::data::{AugmentConfig, ImageSource, ManifestDataset, SyntheticDataset};
use crate::error::{Error, Result};
use crate::geometry::{GramMode, JsRows};
use crate::interventions::InterventionSpec;
use crate::tasks::ProbeConfig;
use crate::vit::{ModelConfig, VisionTransformer, ViTWeights};

/// Named architecture or an explicit configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Architecture {
    Preset(String),
    Explicit(ModelConfig),
}

impl Architecture {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            Architecture::Explicit(c) => Ok(c.clone()),
            Architecture::Preset(name) => match name.as_str() {
                "toy" => Ok(ModelConfig::toy()),
                "vit_small_14" => Ok(ModelConfig::vit_small_14(0)),
                "vit_small_14_reg4" => Ok(ModelConfig::vit_small_14(4)),
                "vit_base_14" => Ok(ModelConfig::vit_base_14(0)),
                "vit_base_14_reg4" => Ok(ModelConfig::vit_base_14(4)),
                "vit_small_16_rotary" => Ok(ModelConfig::vit_small_16_rotary()),
                other => Err(Error::Config(format!("unknown model preset {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelRef {
    /// Weights read from a tensor archive.
    Archive { path: PathBuf, label: Option<String> },
    /// Randomly initialised weights, for tests and smoke runs.
    Random {
        architecture: Architecture,
        #[serde(default)]
        seed: u64,
        label: Option<String>,
    },
}

impl ModelRef {
    pub fn label(&self) -> String {
        match self {
            ModelRef::Archive { path, label } => label.clone().unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "model".into())
            }),
            ModelRef::Random { label, seed, .. } => label.clone().unwrap_or_else(|| format!("random{seed}")),
        }
    }

    pub fn load(&self) -> Result<VisionTransformer> {
        match self {
            ModelRef::Archive { path, .. } => {
                let archive = TensorArchive::read(path)?;
                let (config, weights) = ViTWeights::from_archive(&archive)?;
                VisionTransformer::new(config, weights)
            }
            ModelRef::Random { architecture, seed, .. } => {
                VisionTransformer::random(architecture.resolve()?, *seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        count: usize,
        image_size: usize,
        classes: usize,
        #[serde(default)]
        seed: u64,
    },
    Manifest { path: PathBuf },
}

impl DatasetConfig {
    pub fn open(&self) -> Result<Box<dyn ImageSource>> {
        Ok(match self {
            DatasetConfig::Synthetic {
                count,
                image_size,
                classes,
                seed,
            } => Box::new(SyntheticDataset::new(*count, *image_size, *classes, *seed)?),
            DatasetConfig::Manifest { path } => Box::new(ManifestDataset::load(path)?),
        })
    }

    /// Number of label classes, when known without reading the data.
    pub fn classes(&self) -> Option<usize> {
        match self {
            DatasetConfig::Synthetic { classes, .. } => Some(*classes),
            DatasetConfig::Manifest { .. } => None,
        }
    }
}

fn default_calibration_samples() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "default_calibration_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Share one set of moments across register slots.
    #[serde(default)]
    pub pooled: bool,
    /// Calibration images; defaults to the experiment dataset.
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_split_seed() -> u64 {
    42
}

fn default_tolerances() -> Vec<usize> {
    vec![0, 1, 2]
}

fn default_pair_count() -> usize {
    200
}

fn default_alpha() -> f64 {
    0.1
}

fn default_keypoints() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Linear probe on CLS features.
    Classification {
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default = "default_split_seed")]
        split_seed: u64,
        #[serde(default)]
        probe: Option<ProbeConfig>,
    },
    /// Cosine R@1 from one augmented view per image back to the originals.
    Knn {
        #[serde(default)]
        augmentation: AugmentConfig,
    },
    /// Patch matching between two augmented views of the same image.
    Correspondence {
        #[serde(default = "default_pair_count")]
        pairs: usize,
        #[serde(default)]
        augmentation: AugmentConfig,
        #[serde(default = "default_tolerances")]
        tolerances: Vec<usize>,
    },
    /// Keypoint transfer; synthetic keypoints on augmented view pairs unless
    /// a keypoint manifest is given.
    Pck {
        #[serde(default)]
        manifest: Option<PathBuf>,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_pair_count")]
        pairs: usize,
        #[serde(default = "default_keypoints")]
        keypoints_per_pair: usize,
        #[serde(default)]
        augmentation: AugmentConfig,
    },
    /// Per-patch linear probe against dataset masks.
    Segmentation {
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default = "default_split_seed")]
        split_seed: u64,
        #[serde(default)]
        probe: Option<ProbeConfig>,
        /// Mask classes including background; inferred for synthetic data.
        #[serde(default)]
        classes: Option<usize>,
    },
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Classification { .. } => "classification",
            TaskConfig::Knn { .. } => "knn",
            TaskConfig::Correspondence { .. } => "correspondence",
            TaskConfig::Pck { .. } => "pck",
            TaskConfig::Segmentation { .. } => "segmentation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    PatchCosine,
    EffectiveRank,
    SpectrumEntropy,
    AttentionJs,
    AttentionFlow,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::PatchCosine => "patch_cosine",
            MetricKind::EffectiveRank => "effective_rank",
            MetricKind::SpectrumEntropy => "spectrum_entropy",
            MetricKind::AttentionJs => "attention_js",
            MetricKind::AttentionFlow => "attention_flow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryOptions {
    #[serde(default)]
    pub gram: GramMode,
    #[serde(default)]
    pub js_rows: JsRows,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        Self {
            gram: GramMode::Uncentered,
            js_rows: JsRows::All,
        }
    }
}

fn default_level() -> f64 {
    0.95
}

fn default_resamples() -> usize {
    1000
}

fn default_permutations() -> usize {
    10_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default)]
    pub bca: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            level: default_level(),
            bootstrap_resamples: default_resamples(),
            permutations: default_permutations(),
            bca: false,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_batch_size() -> usize {
    16
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_samples() -> usize {
    4
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelRef,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub interventions: Vec<InterventionSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub metrics: Vec<MetricKind>,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub geometry: GeometryOptions,
    #[serde(default)]
    pub stats: StatsConfig,
    /// Images whose PCA-RGB projections are kept for plotting.
    #[serde(default = "default_samples")]
    pub plot_samples: usize,
}

impl ExperimentConfig {
    /// Reads TOML (`.toml`) or JSON (anything else). Relative paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        if let ModelRef::Archive { path, .. } = &mut self.model {
            fix(path);
        }
        let fix_ds = |d: &mut DatasetConfig| {
            if let DatasetConfig::Manifest { path } = d {
                if path.is_relative() {
                    *path = root.join(&*path);
                }
            }
        };
        fix_ds(&mut self.dataset);
        if let Some(CalibrationConfig { dataset: Some(d), .. }) = &mut self.calibration {
            fix_ds(d);
        }
        for t in &mut self.tasks {
            if let TaskConfig::Pck { manifest: Some(m), .. } = t {
                fix(m);
            }
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() && self.metrics.is_empty() {
            return Err(Error::Config("experiment needs at least one task or metric".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.stats.level > 0.0 && self.stats.level < 1.0) || self.stats.bootstrap_resamples == 0 {
            return Err(Error::Config("invalid statistics settings".into()));
        }
        let mut missing = Vec::new();
        if let ModelRef::Archive { path, .. } = &self.model {
            if !path.is_file() {
                missing.push(path.clone());
            }
        }
        let mut datasets = vec![&self.dataset];
        if let Some(CalibrationConfig { dataset: Some(d), .. }) = &self.calibration {
            datasets.push(d);
        }
        for d in datasets {
            if let DatasetConfig::Manifest { path } = d {
                if !path.is_file() {
                    missing.push(path.clone());
                }
            }
        }
        for t in &self.tasks {
            if let TaskConfig::Pck { manifest: Some(m), .. } = t {
                if !m.is_file() {
                    missing.push(m.clone());
                }
            }
        }
        if let Some(m) = missing.first() {
            return Err(Error::Config(format!("referenced file {} does not exist", m.display())));
        }
        let mut labels: Vec<String> = self.interventions.iter().map(|s| s.label()).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("intervention labels must be unique".into()));
        }
        Ok(())
    }

    /// SHA-256 (hex, 16 chars) of the canonical JSON form.
    /// Hash of everything that can change a reported number; the output
    /// directory is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let canonical = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOML: &str = r#"
seeds = [1, 2]
batch_size = 4
metrics = ["patch_cosine", "attention_js"]

[model]
source = "random"
architecture = "toy"
seed = 3

[dataset]
kind = "synthetic"
count = 8
image_size = 32
classes = 2

[[interventions]]
kind = "zero"

[[interventions]]
kind = "shuffle"
target = "registers"

[[tasks]]
kind = "classification"
"#;

    #[test]
    fn toml_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.toml");
        std::fs::write(&p, TOML).unwrap();
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.interventions.len(), 2);
        assert_eq!(c.stats.permutations, 10_000);
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert_eq!(c.model.label(), "random3");
        assert_eq!(c.hash(), ExperimentConfig::load(&p).unwrap().hash());
    }

    #[test]
    fn empty_work_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.json");
        std::fs::write(
            &p,
            r#"{"model":{"source":"random","architecture":"toy"},"dataset":{"kind":"synthetic","count":2,"image_size":8,"classes":2}}"#,
        )
        .unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn missing_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.json");
        std::fs::write(
            &p,
            r#"{"model":{"source":"archive","path":"w.tarc"},"dataset":{"kind":"synthetic","count":2,"image_size":8,"classes":2},"metrics":["patch_cosine"]}"#,
        )
        .unwrap();
        let err = ExperimentConfig::load(&p).unwrap_err().to_string();
        assert!(err.contains("w.tarc"), "{err}");
    }
}
