//! Trained-model snapshots and their directory layout:
//!
//! ```text
//! plan.json  spec.json  weights.{json,bin}  adam_m.{json,bin}  adam_v.{json,bin}
//! checkpoint.json  train_log.csv  [postprocessing.json]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::PostprocessingPolicy;
use crate::io::{IntensityStats, Volume};
use crate::net::{Network, NetworkSpec, Parameters};
use crate::plan::PlanConfig;
use crate::train::augment::AugmentationConfig;
use crate::train::inference::{predict_with, ProbabilityMap};
use crate::train::optim::{Adam, AdamConfig};
use crate::train::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub plan: PlanConfig,
    pub network: Network,
    pub optimizer: Adam,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Intensity statistics the inputs were normalized with.
    pub normalization: IntensityStats,
    pub train_config: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub postprocessing: Option<PostprocessingPolicy>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epoch: usize,
    history: Vec<EpochRecord>,
    normalization: IntensityStats,
    train_config: TrainConfig,
    augmentation: AugmentationConfig,
    adam: AdamConfig,
    adam_step: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T, context: &str) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(context, e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.plan.save(dir.join("plan.json"))?;
        write_json(&dir.join("spec.json"), &self.network.spec, "network spec")?;
        self.network.params.save(dir, "weights")?;
        self.optimizer.m.save(dir, "adam_m")?;
        self.optimizer.v.save(dir, "adam_v")?;
        let meta = Meta {
            epoch: self.epoch,
            history: self.history.clone(),
            normalization: self.normalization.clone(),
            train_config: self.train_config.clone(),
            augmentation: self.augmentation.clone(),
            adam: self.optimizer.config,
            adam_step: self.optimizer.step,
        };
        write_json(&dir.join("checkpoint.json"), &meta, "checkpoint")?;

        let log = dir.join("train_log.csv");
        let mut w = csv::Writer::from_path(&log)?;
        w.write_record(["epoch", "lr", "loss"])?;
        for r in &self.history {
            w.write_record([r.epoch.to_string(), r.lr.to_string(), r.loss.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&log, e))?;

        let pp = dir.join("postprocessing.json");
        match &self.postprocessing {
            Some(p) => write_json(&pp, p, "postprocessing policy")?,
            None if pp.exists() => fs::remove_file(&pp).map_err(|e| Error::io(&pp, e))?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Missing(dir.to_path_buf()));
        }
        let plan = PlanConfig::load(dir.join("plan.json"))?;
        let spec: NetworkSpec = read_json(&dir.join("spec.json"))?;
        let params = Parameters::load(dir, "weights")?;
        let network = Network::new(spec, params)?;
        let meta: Meta = read_json(&dir.join("checkpoint.json"))?;
        let optimizer = Adam {
            config: meta.adam,
            step: meta.adam_step,
            m: Parameters::load(dir, "adam_m")?,
            v: Parameters::load(dir, "adam_v")?,
        };
        if meta.history.len() != meta.epoch {
            return Err(Error::format(
                "history",
                format!("{} records for epoch {}", meta.history.len(), meta.epoch),
            ));
        }
        let pp = dir.join("postprocessing.json");
        let postprocessing = if pp.exists() { Some(read_json(&pp)?) } else { None };
        Ok(Checkpoint {
            plan,
            network,
            optimizer,
            epoch: meta.epoch,
            history: meta.history,
            normalization: meta.normalization,
            train_config: meta.train_config,
            augmentation: meta.augmentation,
            postprocessing,
        })
    }
}

/// Class probabilities for `volume` on its native grid.
pub fn predict_volume(checkpoint: &Checkpoint, volume: &Volume) -> Result<ProbabilityMap> {
    predict_with(&checkpoint.network, &checkpoint.plan, &checkpoint.normalization, volume)
}
