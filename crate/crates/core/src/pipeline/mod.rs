//! End-to-end experiments: dataset indexing and augmentation, training,
//! restoration with sample averaging and colour correction, and evaluation.
//!
//! A single master seed in [`ExperimentConfig`] determines every random
//! choice. Streams are split per purpose and per item with
//! [`derive_seed`](crate::rng::derive_seed), so results do not depend on the
//! number of worker threads.

mod data;
mod evaluate;
mod restore;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::TrainingMode;
use crate::jpeg::{ChromaSubsampling, DoubleJpegConfig};
use crate::net::NetSpec;
use crate::oracle::GaussianWorld;
use crate::samplers::{SamplerConfig, SamplerKind};
use crate::sde::SdeSettings;

pub use self::data::{crop_patch, load_patch, DatasetIndex, ImageRecord, Split};
pub use self::evaluate::{evaluate, evaluate_with, Condition, JPEG_METHOD};
pub use self::restore::{average, color_correct, finish, pad_to_multiple, restore_with_model, sample_draws, Restorer};
pub use self::train::{train, PairSource, TrainOutcome, TrainSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Image files in `dir`, corrupted on the fly by the JPEG simulator.
    Corpus,
    /// Pairs drawn from the Gaussian world in `world`.
    Gaussian,
}

/// A Gaussian world as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub shape: [usize; 3],
    pub prior_mean: Vec<f64>,
    pub prior_var: Vec<f64>,
    pub obs_std: f64,
    /// Pairs per nominal epoch.
    #[serde(default = "default_epoch_size")]
    pub epoch_size: usize,
}

fn default_epoch_size() -> usize {
    1024
}

impl WorldConfig {
    pub fn build(&self) -> Result<GaussianWorld> {
        let [c, h, w] = self.shape;
        GaussianWorld::new((c, h, w), self.prior_mean.clone(), self.prior_var.clone(), self.obs_std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: PathBuf,
    pub patch_size: usize,
    pub subsampling: ChromaSubsampling,
    /// Training corruptions use `qf ~ U{qf_min, …, qf_max}`.
    pub qf_min: u8,
    pub qf_max: u8,
    pub world: Option<WorldConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Corpus,
            dir: PathBuf::from("data/corpus"),
            patch_size: 32,
            subsampling: ChromaSubsampling::S420,
            qf_min: 0,
            qf_max: 100,
            world: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Log progress every this many steps.
    pub log_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Score,
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 1,
            ema_decay: 0.999,
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

/// Sampler settings without a seed: restoration derives one per draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub kind: SamplerKind,
    pub n_steps: usize,
    pub atol: f64,
    pub rtol: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            kind: d.kind,
            n_steps: d.n_steps,
            atol: d.atol,
            rtol: d.rtol,
        }
    }
}

impl SamplingConfig {
    pub fn with_seed(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            kind: self.kind,
            n_steps: self.n_steps,
            atol: self.atol,
            rtol: self.rtol,
            seed,
            ..SamplerConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorationConfig {
    pub n_average: usize,
    pub color_correct: bool,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            n_average: 1,
            color_correct: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub qfs: Vec<u8>,
    pub double: Vec<DoubleJpegConfig>,
    /// Centre crop applied to every test image (0: full image).
    pub crop: usize,
    /// Use only the first `max_images` test images (0: all).
    pub max_images: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            qfs: vec![5, 10, 20, 30],
            double: Vec::new(),
            crop: 32,
            max_images: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sde: SdeSettings,
    #[serde(default)]
    pub net: NetSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sampler: SamplingConfig,
    #[serde(default)]
    pub restoration: RestorationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults with the given seed.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            data: DataConfig::default(),
            sde: SdeSettings::default(),
            net: NetSpec::default(),
            training: TrainingConfig::default(),
            sampler: SamplingConfig::default(),
            restoration: RestorationConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }

    /// Read a TOML config. Relative data paths are resolved against the
    /// directory holding the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.data.dir.is_relative() {
            cfg.data.dir = base_dir.join(&cfg.data.dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.sde.build()?;
        self.sampler.with_seed(0).validate()?;
        let d = &self.data;
        match d.source {
            DataSource::Corpus => {
                if !d.dir.is_dir() {
                    return Err(Error::Config(format!("data directory {} does not exist", d.dir.display())));
                }
                if d.patch_size == 0 || !d.patch_size.is_multiple_of(self.net.size_multiple()) {
                    return Err(Error::Config(format!(
                        "patch_size {} must be a positive multiple of {}",
                        d.patch_size,
                        self.net.size_multiple()
                    )));
                }
            }
            DataSource::Gaussian => {
                let world = d
                    .world
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.source = \"gaussian\" needs a [data.world] table".into()))?;
                world.build()?;
                if world.epoch_size == 0 {
                    return Err(Error::Config("data.world.epoch_size must be positive".into()));
                }
            }
        }
        if d.qf_min > d.qf_max || d.qf_max > 100 {
            return Err(Error::Config(format!("invalid quality range {}..={}", d.qf_min, d.qf_max)));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.weight_decay.is_nan() || t.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings lr={} weight_decay={}", t.lr, t.weight_decay)));
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1), got {}", t.ema_decay)));
        }
        if self.restoration.n_average == 0 {
            return Err(Error::Config("n_average must be at least 1".into()));
        }
        if let Some(&qf) = self.evaluation.qfs.iter().find(|&&q| q > 100) {
            return Err(Error::Config(format!("evaluation quality {qf} exceeds 100")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut cfg = ExperimentConfig::new(3);
        cfg.data.dir = corpus_dir().join("corpus");
        cfg.evaluation.double.push(DoubleJpegConfig::new(30, 10, 4, 4));
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text, Path::new("/")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn shipped_configs_are_valid() {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["desk.toml", "gaussian.toml"] {
            let cfg = ExperimentConfig::load(&dir.join(name)).unwrap();
            assert_eq!(cfg.seed, 20240521, "{name}");
        }
        let world = ExperimentConfig::load(&dir.join("gaussian.toml")).unwrap().data.world.unwrap();
        assert_eq!(world.build().unwrap().dim(), 12);
    }

    #[test]
    fn relative_paths_and_partial_sections() {
        let text = "seed = 9\n[data]\ndir = \"corpus\"\n[training]\nbatch_size = 2\n";
        let cfg = ExperimentConfig::from_toml(text, &corpus_dir()).unwrap();
        assert_eq!(cfg.data.dir, corpus_dir().join("corpus"));
        assert_eq!(cfg.training.batch_size, 2);
        assert_eq!(cfg.training.lr, 1e-4);
        assert_eq!(cfg.training.ema_decay, 0.999);
    }

    #[test]
    fn unknown_keys_and_missing_files_are_rejected() {
        let base = corpus_dir();
        for text in [
            "seed = 1\ntypo = 2\n",
            "seed = 1\n[training]\nlearning_rate = 0.1\n",
            "seed = 1\n[net]\nwidth = 8\n",
            "seed = 1\n[data]\ndir = \"nowhere\"\n",
            "seed = 1\n[data]\ndir = \"corpus\"\nqf_min = 50\nqf_max = 10\n",
            "seed = 1\n[data]\ndir = \"corpus\"\n[restoration]\nn_average = 0\n",
            "seed = 1\n[data]\nsource = \"gaussian\"\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text, &base), Err(Error::Config(_))),
                "accepted:\n{text}"
            );
        }
    }

    #[test]
    fn gaussian_source_parses() {
        let text = "seed = 1\n[data]\nsource = \"gaussian\"\n[data.world]\nshape = [1, 1, 2]\n\
                    prior_mean = [0.2, 0.4]\nprior_var = [0.1, 0.2]\nobs_std = 0.1\n";
        let cfg = ExperimentConfig::from_toml(text, Path::new("/")).unwrap();
        let world = cfg.data.world.unwrap().build().unwrap();
        assert_eq!(world.dim(), 2);
    }
}
