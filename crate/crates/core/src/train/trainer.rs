//! Patch sampling and the optimization loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{normalize, resample_mask, resample_volume, Grid, IntensityStats, LabelMask, Volume};
use crate::net::{Network, Tensor};
use crate::plan::PlanConfig;
use crate::train::augment::{augment, AugmentationConfig};
use crate::train::checkpoint::{Checkpoint, EpochRecord};
use crate::train::loss::dice_ce_loss_logits;
use crate::train::optim::{poly_lr, Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batches_per_epoch: usize,
    pub adam: AdamConfig,
    /// Share of each batch centred on a foreground voxel (rounded up).
    pub foreground_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            max_epochs: 1000,
            batches_per_epoch: 250,
            adam: AdamConfig::default(),
            foreground_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(Error::Config("foreground fraction must lie in [0, 1]".into()));
        }
        if self.batches_per_epoch == 0 {
            return Err(Error::Config("batches per epoch must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of foreground-centred patches in a batch of `batch`.
    pub fn foreground_patches(&self, batch: usize) -> usize {
        ((batch as f64 * self.foreground_fraction).ceil() as usize).min(batch)
    }
}

/// A preprocessed training case on the plan grid.
#[derive(Debug, Clone)]
pub struct Case {
    pub image: Grid<f64>,
    pub mask: Grid<u8>,
    /// Linear indices of non-background voxels.
    pub foreground: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub cases: Vec<Case>,
    pub stats: IntensityStats,
}

impl TrainingData {
    /// Normalizes and resamples each pair to the plan spacing.
    pub fn prepare(pairs: &[(Volume, LabelMask)], stats: &IntensityStats, plan: &PlanConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Precondition("training needs at least one case".into()));
        }
        let mut cases = Vec::with_capacity(pairs.len());
        for (v, m) in pairs {
            m.check_pairs_with(v)?;
            let img = resample_volume(&normalize(v, stats), plan.target_spacing)?;
            let mask = resample_mask(m, plan.target_spacing)?;
            let foreground = mask
                .labels
                .as_slice()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != 0)
                .map(|(i, _)| i)
                .collect();
            cases.push(Case {
                image: img.voxels.map(|x| x as f64),
                mask: mask.labels,
                foreground,
            });
        }
        Ok(TrainingData {
            cases,
            stats: stats.clone(),
        })
    }
}

/// Copies a `patch`-sized window at `origin` (may hang off the edges; the
/// outside reads as zero / background).
fn extract(case: &Case, origin: [i64; 3], patch: [usize; 3]) -> (Grid<f64>, Grid<u8>) {
    let d = case.image.dims();
    let src = |x: usize, y: usize, z: usize| -> Option<(usize, usize, usize)> {
        let p = [x as i64 + origin[0], y as i64 + origin[1], z as i64 + origin[2]];
        let ok = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < d[a]);
        ok.then(|| (p[0] as usize, p[1] as usize, p[2] as usize))
    };
    let img = Grid::from_fn(patch, |x, y, z| src(x, y, z).map_or(0.0, |(a, b, c)| case.image.get(a, b, c)))
        .expect("patch dims are positive");
    let lab = Grid::from_fn(patch, |x, y, z| src(x, y, z).map_or(0, |(a, b, c)| case.mask.get(a, b, c)))
        .expect("patch dims are positive");
    (img, lab)
}

fn origin_bounds(dim: usize, patch: usize) -> (i64, i64) {
    let span = dim as i64 - patch as i64;
    (span.min(0), span.max(0))
}

fn sample_patch<R: Rng>(case: &Case, patch: [usize; 3], foreground: bool, rng: &mut R) -> (Grid<f64>, Grid<u8>) {
    let d = case.image.dims();
    let mut origin = [0i64; 3];
    if foreground && !case.foreground.is_empty() {
        let v = case.foreground[rng.gen_range(0..case.foreground.len())];
        let c = [v % d[0], (v / d[0]) % d[1], v / (d[0] * d[1])];
        for a in 0..3 {
            let (lo, hi) = origin_bounds(d[a], patch[a]);
            origin[a] = (c[a] as i64 - (patch[a] / 2) as i64).clamp(lo, hi);
        }
    } else {
        for a in 0..3 {
            let (lo, hi) = origin_bounds(d[a], patch[a]);
            origin[a] = rng.gen_range(lo..=hi);
        }
    }
    extract(case, origin, patch)
}

/// Trains with the supplied hooks; `on_epoch` sees each finished epoch.
pub fn train_with_progress(
    network: Network,
    data: &TrainingData,
    plan: &PlanConfig,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    aug.validate()?;
    plan.validate()?;
    if data.cases.is_empty() {
        return Err(Error::Precondition("training needs at least one case".into()));
    }
    if network.spec.pools_per_axis != plan.pools_per_axis {
        return Err(Error::Precondition("network pooling does not match the plan".into()));
    }
    let mut net = network;
    let mut opt = Adam::new(cfg.adam, &net.params);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(aug.seed);
    let batch = plan.batch_size;
    let patch = plan.patch_size;
    let n_fg = cfg.foreground_patches(batch);
    let voxels: usize = patch.iter().product();
    let mut history = Vec::with_capacity(cfg.max_epochs);

    for epoch in 0..cfg.max_epochs {
        let lr = poly_lr(cfg.learning_rate, epoch, cfg.max_epochs);
        let mut total = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let mut x = Vec::with_capacity(batch * voxels);
            let mut t = Vec::with_capacity(batch * voxels);
            for i in 0..batch {
                let case = &data.cases[sample_rng.gen_range(0..data.cases.len())];
                let fg = i >= batch - n_fg;
                let (img, lab) = sample_patch(case, patch, fg, &mut sample_rng);
                let (img, lab) = augment(&img, &lab, aug, &mut aug_rng)?;
                x.extend_from_slice(img.as_slice());
                t.extend_from_slice(lab.as_slice());
            }
            let x = Tensor::from_vec(batch, 1, patch, x);
            let (logits, cache) = net.forward_train(&x)?;
            let (value, grad) = dice_ce_loss_logits(&logits, &t)?;
            if !value.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lr });
            }
            let grads = net.backward(&cache, &grad);
            drop(cache);
            opt.step(&mut net.params, &grads, lr);
            total += value.loss;
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: total / cfg.batches_per_epoch as f64,
        };
        on_epoch(&record);
        history.push(record);
    }

    Ok(Checkpoint {
        plan: plan.clone(),
        network: net,
        optimizer: opt,
        epoch: cfg.max_epochs,
        history,
        normalization: data.stats.clone(),
        train_config: cfg.clone(),
        augmentation: aug.clone(),
        postprocessing: None,
    })
}

pub fn train(
    network: Network,
    data: &TrainingData,
    plan: &PlanConfig,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
) -> Result<Checkpoint> {
    train_with_progress(network, data, plan, cfg, aug, |_| {})
}
