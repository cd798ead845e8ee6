//! Run configuration, the output directory layout and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{canonical_hash, read_json, write_json_atomic};
use crate::losses::EncoderLossConfig;
use crate::networks::NetworkSpec;
use crate::optim::AdamConfig;
use crate::phantom::DatasetSpec;
use crate::preproc::PreprocSpec;
use crate::training::{StageOptimizers, StageSteps, TrainConfig};

pub const OUT_ENV: &str = "ANODET3D_OUT";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Raw HU volumes; defaults to `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
    /// Defaults to `$ANODET3D_OUT`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Feature weight for scoring; `None` uses the training value.
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Share of normal volumes kept out of training and scored instead.
    pub holdout_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { holdout_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds training and synthetic data. `train.seed` must be left unset or equal.
    pub seed: u64,
    pub paths: Paths,
    pub preproc: PreprocSpec,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub split: SplitConfig,
    pub synthetic: Option<DatasetSpec>,
}

impl RunConfig {
    /// Single-CPU scale: 32^3 volumes, latent 128, a few hundred steps per stage.
    pub fn desk() -> Self {
        let network_spec = NetworkSpec {
            latent_dim: 128,
            volume_side: 32,
            channel_schedule: vec![16, 8, 4],
            ..NetworkSpec::default()
        };
        let mut train = TrainConfig {
            network_spec,
            stage_steps: StageSteps {
                gan: 300,
                encoder: 200,
                refine: 50,
            },
            batch_size: 8,
            optimizer: StageOptimizers {
                gan: AdamConfig::new(1e-3, 0.5, 0.9),
                encoder: AdamConfig::new(1e-3, 0.9, 0.999),
                ..StageOptimizers::default()
            },
            ..TrainConfig::default()
        };
        train.gan.n_critic = 2;
        RunConfig {
            seed: 1,
            paths: Paths::default(),
            preproc: PreprocSpec {
                target_shape: [32; 3],
                ..PreprocSpec::default()
            },
            train,
            scoring: ScoringConfig::default(),
            split: SplitConfig::default(),
            synthetic: Some(DatasetSpec {
                n_healthy: 200,
                n_lesioned: 40,
                n_corrupted: 20,
                shape: [40; 3],
                ..DatasetSpec::default()
            }),
        }
    }

    /// Parses and validates a JSON config; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        self.preproc.validate().map_err(config)?;
        self.train.validate().map_err(config)?;
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(Error::Config(format!(
                "train.seed {} disagrees with seed {}; set only the top-level seed",
                self.train.seed, self.seed
            )));
        }
        let side = self.train.network_spec.volume_side;
        if self.preproc.target_shape != [side; 3] {
            return Err(Error::Config(format!(
                "preproc.target_shape {:?} must equal the network volume [{side}; 3]",
                self.preproc.target_shape
            )));
        }
        if let Some(k) = self.scoring.kappa {
            EncoderLossConfig { kappa: k }.validate().map_err(config)?;
        }
        let f = self.split.holdout_fraction;
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("split.holdout_fraction {f} must be in [0, 1)")));
        }
        if let Some(s) = &self.synthetic {
            let probe = crate::phantom::PhantomSpec {
                shape: s.shape,
                n_tissue_blobs: s.n_tissue_blobs,
                lesion: Some(s.lesion.clone()),
                ..Default::default()
            };
            probe.validate().map_err(config)?;
        }
        Ok(())
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn scoring_loss(&self) -> EncoderLossConfig {
        EncoderLossConfig {
            kappa: self.scoring.kappa.unwrap_or(self.train.enc.kappa),
        }
    }

    /// SHA-256 of the canonical JSON, ignoring `paths` so a run can move.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.paths = Paths::default();
        canonical_hash(&c)
    }

    /// `paths.out_dir`, else `$ANODET3D_OUT`.
    pub fn out_dir(&self) -> Result<PathBuf> {
        self.paths
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("no output directory: set paths.out_dir or {OUT_ENV}")))
    }

    pub fn data_dir(&self) -> Result<PathBuf> {
        match &self.paths.data_dir {
            Some(d) => Ok(d.clone()),
            None => Ok(self.out_dir()?.join("data")),
        }
    }
}

/// Fixed locations inside the output directory.
#[derive(Debug, Clone)]
pub struct OutLayout {
    root: PathBuf,
}

impl OutLayout {
    pub fn new(root: &Path) -> Self {
        OutLayout {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn preprocessed(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }

    pub fn residuals(&self) -> PathBuf {
        self.root.join("residuals")
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    /// Keyed by command name (`preprocess`, `train:gan`, `score`, ...).
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn load_or_new(path: &Path, config_hash: &str) -> Result<Self> {
        if path.exists() {
            let mut m: RunManifest = read_json(path)?;
            if m.config_hash != config_hash {
                log::warn!("{} was written under config {}", path.display(), m.config_hash);
                m.config_hash = config_hash.to_string();
            }
            Ok(m)
        } else {
            Ok(RunManifest {
                config_hash: config_hash.to_string(),
                tool_version: TOOL_VERSION.to_string(),
                stages: BTreeMap::new(),
            })
        }
    }

    /// Records one command's outputs and rewrites the manifest.
    pub fn record(path: &Path, config_hash: &str, name: &str, started: u64, outputs: Vec<String>) -> Result<Self> {
        let mut m = Self::load_or_new(path, config_hash)?;
        m.stages.insert(
            name.to_string(),
            StageRecord {
                outputs,
                started_unix: started,
                finished_unix: unix_now(),
            },
        );
        write_json_atomic(path, &m)?;
        Ok(m)
    }
}
