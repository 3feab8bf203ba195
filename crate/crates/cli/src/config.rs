//! Experiment configuration files.

use std::path::{Path, PathBuf};

use dctrain::nn::{Activation, InitConfig, MlpConfig};
use dctrain::pde::{AdvectionParams, CfdParams, DiffReactParams, PesGenerator};
use dctrain::trainer::{TaskKind, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    /// Run label used to group summaries in reports; defaults to the task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSpec>,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Generator parameters for `gen` and dataset locations for training.
/// Only the entry matching the task may be present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file or the directory `gen` wrote it to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// PES evaluation set; the training set is evaluated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pes: Option<PesGenerator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advection: Option<AdvectionParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfd: Option<CfdParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffreact: Option<DiffReactParams>,
}

/// Network shape; input and output widths follow from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_activations: Option<Vec<Activation>>,
    #[serde(default)]
    pub use_batchnorm: bool,
    #[serde(default)]
    pub init: InitConfig,
}

impl ModelSpec {
    pub fn mlp(&self, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden: self.hidden.clone(),
            output_dim: 1,
            activation: self.activation,
            layer_activations: self.layer_activations.clone(),
            use_batchnorm: self.use_batchnorm,
            init: self.init.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<Variant>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        // Relative paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.path, &mut cfg.data.test_path, &mut cfg.out] {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        let present = [
            (TaskKind::Pes, d.pes.is_some()),
            (TaskKind::Advection, d.advection.is_some()),
            (TaskKind::Cfd, d.cfd.is_some()),
            (TaskKind::Diffreact, d.diffreact.is_some()),
        ];
        for (task, on) in present {
            if on && task != self.task {
                return Err(CliError::Config(format!(
                    "data.{} given for task {}",
                    task.label(),
                    self.task.label()
                )));
            }
        }
        if d.test_path.is_some() && self.task != TaskKind::Pes {
            return Err(CliError::Config("data.test_path applies to the pes task only".into()));
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.task.label().to_string())
    }

    pub fn model(&self) -> Result<&ModelSpec, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no `model` section".into()))
    }

    pub fn train(&self) -> Result<&TrainConfig, CliError> {
        self.train
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no `train` section".into()))
    }
}
