//! Run configuration: one TOML file drives ingestion, training and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::PpoConfig;
use crate::eval::EvalConfig;
use crate::handmodel::HandModel;
use crate::ingest::{load_object_asset_with, IngestOptions, ObjectAsset};
use crate::noise::NoiseConfig;
use crate::poseprior::ConsensusLibrary;
use crate::rewards::RewardConfig;
use crate::simenv::{EnvConfig, GraspEnv};
use crate::{Error, Result};

/// Prefix for built-in toy objects in the asset list, e.g. `toy:cube`.
pub const TOY_PREFIX: &str = "toy:";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Asset descriptor files, or `toy:<class>` entries.
    pub assets: Vec<String>,
    pub pose_records: Vec<PathBuf>,
    pub retargeted: Option<PathBuf>,
    pub consensus: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_dir: Option<PathBuf>,
    /// Plain-text hand model override.
    pub hand_model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// 0 selects k by silhouette.
    pub k: usize,
    pub seed: u64,
    pub min_confidence: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 3,
            seed: 0,
            min_confidence: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Updates between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Render images for the conv encoder.
    pub use_images: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2_000_000,
            checkpoint_every: 0,
            use_images: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub masses: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            masses: vec![0.5, 1.0, 1.5],
            scales: vec![0.8, 1.0, 1.2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub paths: PathsConfig,
    pub env: EnvConfig,
    pub reward: RewardConfig,
    pub noise: NoiseConfig,
    pub ppo: PpoConfig,
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for a in &mut p.assets {
            if !a.starts_with(TOY_PREFIX) && Path::new(a.as_str()).is_relative() {
                *a = base.join(a.as_str()).display().to_string();
            }
        }
        p.pose_records.iter_mut().for_each(fix);
        for o in [
            &mut p.retargeted,
            &mut p.consensus,
            &mut p.checkpoint_dir,
            &mut p.log_dir,
            &mut p.hand_model,
        ] {
            if let Some(x) = o.as_mut() {
                fix(x);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.reward
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.noise.validate().map_err(Error::Config)?;
        self.ppo
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.eval
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self
            .sweep
            .masses
            .iter()
            .chain(&self.sweep.scales)
            .any(|v| !(*v > 0.0))
        {
            return Err(Error::Config(
                "sweep masses and scales must be positive".into(),
            ));
        }
        if self.train.use_images && (self.env.render.is_none() || self.ppo.net.visual.is_none()) {
            return Err(Error::Config(
                "train.use_images needs both [env.render] and [ppo.net.visual]".into(),
            ));
        }
        if let (Some(r), Some(v)) = (&self.env.render, &self.ppo.net.visual) {
            if self.train.use_images && (r.size != v.size || v.channels_in != 3) {
                return Err(Error::Config(
                    "ppo.net.visual must take 3 channels at the render size".into(),
                ));
            }
        }
        Ok(())
    }

    /// Checks that every input path named in the config exists.
    pub fn check_inputs(&self) -> Result<()> {
        let p = &self.paths;
        let mut missing = Vec::new();
        for a in p.assets.iter().filter(|a| !a.starts_with(TOY_PREFIX)) {
            if !Path::new(a).exists() {
                missing.push(a.clone());
            }
        }
        for r in p.pose_records.iter().chain(&p.hand_model) {
            if !r.exists() {
                missing.push(r.display().to_string());
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "missing input paths: {}",
                missing.join(", ")
            )))
        }
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Training seeds; the config's list, or `[0]` when empty.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![0]
        } else {
            self.seeds.clone()
        }
    }

    pub fn hand_model(&self) -> Result<HandModel> {
        match &self.paths.hand_model {
            Some(p) => HandModel::load(p),
            None => Ok(HandModel::default().with_adroit_like_limits()),
        }
    }

    pub fn load_assets(&self) -> Result<Vec<ObjectAsset>> {
        let opts = IngestOptions {
            seed: self.seed_list()[0],
            ..Default::default()
        };
        self.paths
            .assets
            .iter()
            .map(|a| match a.strip_prefix(TOY_PREFIX) {
                Some(class) => crate::toy::toy_asset(class)
                    .ok_or_else(|| Error::Config(format!("unknown toy object {class:?}"))),
                None => Ok(load_object_asset_with(Path::new(a), &opts)?),
            })
            .collect()
    }

    /// One environment per asset, each targeting its class's consensus pose.
    pub fn build_envs(
        &self,
        assets: &[ObjectAsset],
        library: &ConsensusLibrary,
        model: &HandModel,
    ) -> Result<Vec<GraspEnv>> {
        assets
            .iter()
            .map(|a| {
                let target = library.target(&a.object_class).ok_or_else(|| {
                    crate::eval::EvalError::MissingConsensus(a.object_class.clone())
                })?;
                Ok(GraspEnv::new(
                    a,
                    model.clone(),
                    *target,
                    self.reward.clone(),
                    self.env.clone(),
                )?)
            })
            .collect()
    }
}
