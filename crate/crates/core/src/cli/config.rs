//! Experiment configuration: a JSON document refined by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Reducer;
use crate::io::Vendor;
use crate::net::{ModelKind, NetworkOptions};
use crate::plan::{pools_for_extent, MemoryBudget, PlanConfig, PlannerOptions};
use crate::train::{AugmentationConfig, TrainConfig};

/// Plan fields forced after automatic planning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOverrides {
    pub target_spacing: Option<[f64; 3]>,
    pub patch_size: Option<[usize; 3]>,
    pub batch_size: Option<usize>,
    pub pools_per_axis: Option<[usize; 3]>,
    pub base_features: Option<usize>,
    pub max_features: Option<usize>,
    pub dimensionality: Option<u8>,
}

impl PlanOverrides {
    /// Options for the automatic planner (widths and dimensionality).
    pub fn planner_options(&self) -> PlannerOptions {
        let d = PlannerOptions::default();
        PlannerOptions {
            base_features: self.base_features.unwrap_or(d.base_features),
            max_features: self.max_features.unwrap_or(d.max_features),
            dimensionality: self.dimensionality.unwrap_or(d.dimensionality),
        }
    }

    /// Applies the overrides; a forced patch without forced pools gets its
    /// pooling recomputed.
    pub fn apply(&self, mut plan: PlanConfig) -> Result<PlanConfig> {
        if let Some(s) = self.target_spacing {
            plan.target_spacing = s;
        }
        if let Some(p) = self.patch_size {
            plan.patch_size = p;
            plan.pools_per_axis = p.map(|e| {
                let mut n = pools_for_extent(e);
                while n > 0 && e % (1 << n) != 0 {
                    n -= 1;
                }
                n
            });
        }
        if let Some(p) = self.pools_per_axis {
            plan.pools_per_axis = p;
        }
        if let Some(b) = self.batch_size {
            plan.batch_size = b;
        }
        if let Some(b) = self.base_features {
            plan.base_features = b;
        }
        if let Some(m) = self.max_features {
            plan.max_features = m;
        }
        if let Some(d) = self.dimensionality {
            plan.dimensionality = d;
        }
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset index JSON.
    pub dataset_index: Option<PathBuf>,
    pub vendors_train: Vec<Vendor>,
    pub vendors_test: Vec<Vendor>,
    pub model: ModelKind,
    pub plan_overrides: PlanOverrides,
    pub network: NetworkOptions,
    pub budget: MemoryBudget,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub detection_reducer: Reducer,
    pub output_dir: PathBuf,
    /// Seeds network initialization.
    pub seed: u64,
    pub workers: usize,
    /// Forces a single worker so every output is reproducible byte for byte.
    pub deterministic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_index: None,
            vendors_train: Vec::new(),
            vendors_test: Vec::new(),
            model: ModelKind::Unet,
            plan_overrides: PlanOverrides::default(),
            network: NetworkOptions::default(),
            budget: MemoryBudget::default(),
            train: TrainConfig::default(),
            augmentation: AugmentationConfig::default(),
            detection_reducer: Reducer::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            workers: 1,
            deterministic: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// One seed drives initialization, sampling and augmentation.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.augmentation.seed = seed.wrapping_add(1);
    }

    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augmentation.validate()?;
        self.budget.validate()?;
        if let Some(v) = self.vendors_test.iter().find(|v| self.vendors_train.contains(v)) {
            return Err(Error::Config(format!("vendor {v} is in both training and test sets")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("experiment config", e))
    }
}
