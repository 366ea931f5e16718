//! Experiment configuration: the single source every run is derived from.
//!
//! Configs are TOML files with dotted sections (`train.learning_rate = 0.035`
//! or a `[train]` table; both parse the same). Every field has a default, so
//! an empty file is a valid reference-scale configuration; unknown keys are
//! rejected to catch typos. The full schema with defaults is documented in
//! the README.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agg::AggregationParams;
use crate::data::SamplerConfig;
use crate::error::{Error, Result};
use crate::surrogate::{Dims, TrainHyper};

/// Which training method a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The dual-prompt protocol this crate implements.
    Dp2fl,
    /// Independent local training, no communication.
    Local,
    /// Federated averaging of both prompts, weighted by training-set size.
    FedavgPrompt,
    /// Federated averaging plus a proximal pull toward the broadcast prompts.
    FedproxPrompt,
}

impl Method {
    /// All methods, in canonical comparison order.
    pub const ALL: [Method; 4] = [
        Method::Dp2fl,
        Method::Local,
        Method::FedavgPrompt,
        Method::FedproxPrompt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Dp2fl => "dp2fl",
            Method::Local => "local",
            Method::FedavgPrompt => "fedavg_prompt",
            Method::FedproxPrompt => "fedprox_prompt",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(text: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|method| method.name() == text)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown method {text:?}; expected one of dp2fl, local, fedavg_prompt, \
                     fedprox_prompt"
                ))
            })
    }
}

/// Model dimensions as they appear in config files. The class count lives at
/// the top level (it is shared with the data generator), so this table holds
/// only the architectural widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimsConfig {
    pub input_dim: usize,
    pub class_embed_dim: usize,
    pub task_prompt_dim: usize,
    pub image_prompt_dim: usize,
    pub feature_dim: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        DimsConfig {
            input_dim: 16,
            class_embed_dim: 8,
            task_prompt_dim: 16,
            image_prompt_dim: 16,
            feature_dim: 16,
        }
    }
}

/// Parameters of the synthetic task's Gaussian mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Radius of the sphere the class means are placed on.
    pub mean_radius: f64,
    /// Standard deviation of the isotropic sample noise.
    pub noise_sigma: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            mean_radius: 10.0,
            noise_sigma: 0.25,
        }
    }
}

/// Knobs specific to the baseline methods.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    /// Proximal coefficient for `fedprox_prompt`.
    pub mu: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams { mu: 0.01 }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "baseline mu must be finite and >= 0, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

/// Everything a run needs; defaults reproduce the reference training setup
/// (10 clients, 10 rounds, 10 classes, learning rate 0.035, 5 epochs,
/// batches of 4, alpha 1.2, beta 0.2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed in the run derives from it.
    pub seed: u64,
    pub num_clients: usize,
    pub rounds: usize,
    pub classes: usize,
    pub method: Method,
    /// Multiplier applied to the cosine similarity before the softmax.
    pub logit_scale: f64,
    /// Standard deviation of the random prompt initialization. Deliberately
    /// large by default: untuned prompts start as a real perturbation of the
    /// frozen model, and the training rounds earn their gains by repairing it.
    pub prompt_init_scale: f64,
    /// Where artifacts go; CLI flags may override it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dims: DimsConfig,
    pub task: TaskConfig,
    pub sampler: SamplerConfig,
    pub train: TrainHyper,
    pub agg: AggregationParams,
    pub baseline: BaselineParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            num_clients: 10,
            rounds: 10,
            classes: 10,
            method: Method::Dp2fl,
            logit_scale: 10.0,
            prompt_init_scale: 2.0,
            output_dir: None,
            dims: DimsConfig::default(),
            task: TaskConfig::default(),
            // Larger evaluation splits than the bare sampler defaults keep
            // the reported metrics stable across the small desk federations.
            sampler: SamplerConfig {
                val_per_class: 12,
                test_per_class: 40,
                ..SamplerConfig::default()
            },
            train: TrainHyper::default(),
            agg: AggregationParams::default(),
            baseline: BaselineParams::default(),
        }
    }
}

impl ExperimentConfig {
    /// The small profile used for acceptance-speed experiments: 5 clients,
    /// 5 rounds, everything else at reference-scale defaults.
    pub fn desk_profile() -> ExperimentConfig {
        ExperimentConfig {
            num_clients: 5,
            rounds: 5,
            ..ExperimentConfig::default()
        }
    }

    /// The model dimension table implied by this config.
    pub fn model_dims(&self) -> Dims {
        Dims {
            classes: self.classes,
            input_dim: self.dims.input_dim,
            class_embed_dim: self.dims.class_embed_dim,
            task_prompt_dim: self.dims.task_prompt_dim,
            image_prompt_dim: self.dims.image_prompt_dim,
            feature_dim: self.dims.feature_dim,
        }
    }

    /// Checks every field and section; called by [`ExperimentConfig::load`]
    /// and again by anything that builds a federation.
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_clients must be at least 2, got {}",
                self.num_clients
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "classes must be at least 2, got {}",
                self.classes
            )));
        }
        if !self.logit_scale.is_finite() || self.logit_scale <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "logit_scale must be finite and > 0, got {}",
                self.logit_scale
            )));
        }
        if !self.prompt_init_scale.is_finite() || self.prompt_init_scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "prompt_init_scale must be finite and >= 0, got {}",
                self.prompt_init_scale
            )));
        }
        if !self.task.mean_radius.is_finite() || self.task.mean_radius < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "task.mean_radius must be finite and >= 0, got {}",
                self.task.mean_radius
            )));
        }
        if !self.task.noise_sigma.is_finite() || self.task.noise_sigma <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "task.noise_sigma must be finite and > 0, got {}",
                self.task.noise_sigma
            )));
        }
        self.model_dims().validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        self.agg.validate()?;
        self.baseline.validate()?;
        Ok(())
    }

    /// Parses a config from TOML text and validates it.
    pub fn from_text(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads and validates a config file.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::ConfigParse(format!("cannot read config {}: {e}", path.display()))
        })?;
        ExperimentConfig::from_text(&text)
    }
}
