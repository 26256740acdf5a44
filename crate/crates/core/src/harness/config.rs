use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::DpoHyper;
use crate::diffusion::{DatasetKind, DatasetSpec, PretrainConfig, RING8_RADIUS};
use crate::error::{Error, Result};
use crate::nn::MlpArchitecture;
use crate::rng;
use crate::schedule::ScheduleSpec;

use super::reward::RewardFn;

/// One alignment objective: its reward, pair budget, DPO settings and the
/// denoising-variance factor of the aligned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub name: String,
    pub reward: RewardFn,
    pub eta: f64,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default)]
    pub dpo: DpoHyper,
}

fn default_pairs() -> usize {
    8192
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub weights: Vec<f64>,
    /// Samples per sweep point.
    pub n: usize,
    /// Inference-grid stride.
    pub stride: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            weights: (0..=10).map(|k| k as f64 / 10.0).collect(),
            n: 2048,
            stride: 1,
        }
    }
}

/// Everything a pipeline run needs. Every random draw in a run is seeded from
/// `seed` through [`ExperimentConfig::seeds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub arch: MlpArchitecture,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_objectives")]
    pub objectives: Vec<ObjectiveConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

pub(crate) const DEFAULT_DPO_STEPS: usize = 20_000;

fn default_objectives() -> Vec<ObjectiveConfig> {
    let dpo = DpoHyper {
        steps: DEFAULT_DPO_STEPS,
        ..DpoHyper::default()
    };
    vec![
        ObjectiveConfig {
            name: "r1".into(),
            reward: RewardFn::axis(0),
            eta: 0.8,
            pairs: default_pairs(),
            dpo: dpo.clone(),
        },
        ObjectiveConfig {
            name: "r2".into(),
            reward: RewardFn::axis(1),
            eta: 1.0,
            pairs: default_pairs(),
            dpo,
        },
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            schedule: ScheduleSpec::default(),
            arch: MlpArchitecture::default(),
            pretrain: PretrainConfig::default(),
            objectives: default_objectives(),
            sweep: SweepConfig::default(),
            out_dir: None,
        }
    }
}

/// The per-stage seeds of a run, all derived from the master seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub dataset: u64,
    pub pretrain: u64,
    /// Per objective, in config order.
    pub pairs: Vec<u64>,
    pub dpo: Vec<u64>,
    pub sweep: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn seeds(&self) -> StageSeeds {
        let s = self.seed;
        StageSeeds {
            dataset: rng::derive_seed(s, "dataset"),
            pretrain: rng::derive_seed(s, "pretrain"),
            pairs: self
                .objectives
                .iter()
                .map(|o| rng::derive_seed(s, &format!("pairs:{}", o.name)))
                .collect(),
            dpo: self
                .objectives
                .iter()
                .map(|o| rng::derive_seed(s, &format!("dpo:{}", o.name)))
                .collect(),
            sweep: rng::derive_seed(s, "sweep"),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seeds().dataset,
            ..self.dataset.clone()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seeds().pretrain,
            ..self.pretrain.clone()
        }
    }

    pub fn dpo_hyper(&self, objective: usize) -> DpoHyper {
        DpoHyper {
            seed: self.seeds().dpo[objective],
            ..self.objectives[objective].dpo.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let data_dim = match self.dataset.kind {
            DatasetKind::Ring8 => Some(2),
            DatasetKind::Gauss1 => Some(self.dataset.dim),
            DatasetKind::CustomFile => None,
        };
        if self.dataset.kind != DatasetKind::CustomFile && self.dataset.n == 0 {
            return Err(Error::param("dataset.n", "must be at least 1"));
        }
        if let Some(d) = data_dim {
            if d != self.arch.data_dim {
                return Err(Error::param(
                    "arch.data_dim",
                    format!(
                        "{} does not match the dataset dimension {d}",
                        self.arch.data_dim
                    ),
                ));
            }
        }
        self.arch.validate()?;
        self.schedule.build()?;
        if self.pretrain.steps == 0 || self.pretrain.batch == 0 {
            return Err(Error::param(
                "pretrain",
                "steps and batch must be at least 1",
            ));
        }
        if self.objectives.len() != 2 {
            return Err(Error::param(
                "objectives",
                format!(
                    "the pipeline runs exactly two objectives, got {}",
                    self.objectives.len()
                ),
            ));
        }
        let mut names = BTreeSet::new();
        for o in &self.objectives {
            if o.name.is_empty()
                || !o
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::param(
                    "objectives.name",
                    format!("{:?} is not a simple name", o.name),
                ));
            }
            if !names.insert(o.name.as_str()) {
                return Err(Error::param(
                    "objectives.name",
                    format!("{:?} appears twice", o.name),
                ));
            }
            if !(0.0..=1.0).contains(&o.eta) {
                return Err(Error::param(
                    "objectives.eta",
                    format!("{} not in [0, 1]", o.eta),
                ));
            }
            if o.pairs == 0 {
                return Err(Error::param("objectives.pairs", "must be at least 1"));
            }
            o.dpo.validate()?;
            o.reward.eval(&vec![0.0; self.arch.data_dim])?;
        }
        if self.sweep.weights.is_empty() {
            return Err(Error::param(
                "sweep.weights",
                "at least one weight is needed",
            ));
        }
        if let Some(w) = self
            .sweep
            .weights
            .iter()
            .find(|w| !(0.0..=1.0).contains(*w))
        {
            return Err(Error::param("sweep.weights", format!("{w} not in [0, 1]")));
        }
        if self.sweep.n == 0 || self.sweep.stride == 0 {
            return Err(Error::param("sweep", "n and stride must be at least 1"));
        }
        Ok(())
    }

    /// Distance from a point to the nearest ring mode; used by the pretraining
    /// quality check on ring data.
    pub fn ring_distance(&self, x: &[f64]) -> Option<f64> {
        if self.dataset.kind != DatasetKind::Ring8 {
            return None;
        }
        let r = RING8_RADIUS * self.dataset.scale;
        Some(
            crate::diffusion::ring8_centers(self.dataset.scale)
                .iter()
                .map(|c| ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt())
                .fold(r * 2.0, f64::min),
        )
    }
}
