//! Run configuration: one TOML file with `[env]`, `[model]`, `[train]`
//! and `[analysis]` sections drives a whole run. Every field has a
//! default, so a partial (or empty) file is valid. Run manifests embed
//! the fully resolved config plus a `[run]` metadata section; since
//! unknown sections are ignored on load, a manifest can be fed back as
//! the config of a replay run.

use crate::diffcore::Precision;
use crate::envgen::Topology;
use crate::error::{Error, Result};
use crate::model::{BetaBase, ModelConfig, WxMode};
use crate::posenc::Activation;
use crate::train::{EnvSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EnvSection {
    pub topology: String,
    pub width: usize,
    pub height: usize,
    pub n_stim: usize,
    /// Environments written by `generate`.
    pub n_envs: usize,
    /// Episode length for generated sample episodes; 0 means 2.5x the
    /// node count.
    pub episode_len: usize,
    pub seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            topology: "square4".into(),
            width: 10,
            height: 10,
            n_stim: 45,
            n_envs: 1,
            episode_len: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub n_g: usize,
    pub d_k: usize,
    /// 0 means the smallest width whose two-hot pair count covers n_stim.
    pub d_v: usize,
    /// 0 means twice d_v.
    pub decoder_hidden: usize,
    pub activation: String,
    /// "fixed_two_hot" or "learnable_dense".
    pub w_x: String,
    /// Softmax sharpness base; absent means sqrt(d_k).
    pub beta_base: Option<f64>,
    pub gate_threshold: f64,
    /// "f64" or "f32" (f32 storage with f64 accumulation).
    pub precision: String,
    pub loss_weights: [f64; 5],
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_g: 64,
            d_k: 32,
            d_v: 0,
            decoder_hidden: 0,
            activation: "relu".into(),
            w_x: "fixed_two_hot".into(),
            beta_base: None,
            gate_threshold: 0.9,
            precision: "f64".into(),
            loss_weights: [1.0, 1.0, 0.1, 1e-4, 1e-4],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub envs_per_batch: usize,
    pub episode_len: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub eval_interval: usize,
    pub eval_envs: usize,
    pub eval_episode_len: usize,
    pub seed: u64,
    pub early_stop_zero_shot: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 8,
            envs_per_batch: 4,
            episode_len: 250,
            steps: 20_000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 2.0,
            eval_interval: 250,
            eval_envs: 10,
            eval_episode_len: 250,
            seed: 0,
            early_stop_zero_shot: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AnalysisSection {
    /// 0 means 50x the node count.
    pub walk_steps: usize,
    pub smoothing_sigma: f64,
    pub place_threshold_frac: f64,
    pub active_threshold_frac: f64,
    /// Shuffles for the place-score permutation control.
    pub n_shuffles: usize,
    /// Permutations for the remapping null.
    pub n_permutations: usize,
    /// Environments compared by the remapping analysis.
    pub n_envs: usize,
    /// Pixels per raster cell in exported heatmaps.
    pub image_block: usize,
    pub seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            walk_steps: 0,
            smoothing_sigma: 1.0,
            place_threshold_frac: 0.2,
            active_threshold_frac: 0.01,
            n_shuffles: 100,
            n_permutations: 500,
            n_envs: 2,
            image_block: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Param(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Overrides every section's seed with one master seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.env.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.analysis.seed = seed;
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::from_name(&self.env.topology)
            .ok_or_else(|| Error::Param(format!("unknown topology {:?}", self.env.topology)))
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        Ok(EnvSpec {
            topology: self.topology()?,
            width: self.env.width,
            height: self.env.height,
            n_stim: self.env.n_stim,
        })
    }

    pub fn generate_episode_len(&self) -> usize {
        if self.env.episode_len > 0 {
            self.env.episode_len
        } else {
            self.env.width * self.env.height * 5 / 2
        }
    }

    pub fn analysis_walk_steps(&self) -> usize {
        if self.analysis.walk_steps > 0 {
            self.analysis.walk_steps
        } else {
            50 * self.env.width * self.env.height
        }
    }

    /// Smallest projection width whose distinct two-hot patterns cover
    /// the stimulus count.
    pub fn auto_d_v(n_stim: usize) -> usize {
        let mut d = 2;
        while d * (d - 1) / 2 < n_stim {
            d += 1;
        }
        d
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let topology = self.topology()?;
        let activation = Activation::from_name(&self.model.activation)
            .ok_or_else(|| Error::Param(format!("unknown activation {:?}", self.model.activation)))?;
        let wx_mode = match self.model.w_x.as_str() {
            "fixed_two_hot" => WxMode::FixedTwoHot,
            "learnable_dense" => WxMode::LearnableDense,
            other => return Err(Error::Param(format!("unknown w_x mode {other:?}"))),
        };
        let precision = match self.model.precision.as_str() {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(Error::Param(format!("unknown precision {other:?}"))),
        };
        let d_v = if self.model.d_v > 0 {
            self.model.d_v
        } else {
            Self::auto_d_v(self.env.n_stim)
        };
        let cfg = ModelConfig {
            n_g: self.model.n_g,
            d_k: self.model.d_k,
            d_v,
            n_stim: self.env.n_stim,
            n_actions: topology.n_actions(),
            decoder_hidden: if self.model.decoder_hidden > 0 {
                self.model.decoder_hidden
            } else {
                2 * d_v
            },
            activation,
            wx_mode,
            beta_base: match self.model.beta_base {
                Some(b) => BetaBase::Fixed(b),
                None => BetaBase::SqrtDk,
            },
            gate_threshold: self.model.gate_threshold,
            precision,
            loss_weights: self.model.loss_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            env: self.env_spec()?,
            batch_size: self.train.batch_size,
            envs_per_batch: self.train.envs_per_batch,
            episode_len: self.train.episode_len,
            steps: self.train.steps,
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
            clip_norm: self.train.clip_norm,
            eval_interval: self.train.eval_interval,
            eval_envs: self.train.eval_envs,
            eval_episode_len: self.train.eval_episode_len,
            seed: self.train.seed,
            early_stop_zero_shot: self.train.early_stop_zero_shot,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes `manifest.toml` into the run directory: a `[run]` section
/// (command, crate version, unix timestamp) followed by the fully
/// resolved config. The manifest parses as a `RunConfig`, so a run can be
/// replayed bit-exactly by passing the manifest as the config file.
pub fn write_manifest(dir: &Path, command: &str, config: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut text = String::new();
    text.push_str("[run]\n");
    text.push_str(&format!("command = {command:?}\n"));
    text.push_str(&format!("version = {:?}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("timestamp = {timestamp}\n\n"));
    text.push_str(&config.to_toml());
    let path = dir.join("manifest.toml");
    std::fs::write(&path, text)?;
    Ok(path)
}
