//! Self-configuration: turn a dataset fingerprint and a memory budget into a
//! concrete pipeline configuration.
//!
//! The procedure:
//! 1. target spacing = per-axis median of the training spacings;
//! 2. median shape = per-axis median of the shapes rescaled to that spacing;
//! 3. start from a 16-voxel cube (16 x 16 x 1 in 2D) and grow one axis at a
//!    time by 16 voxels, always the axis with the largest remaining
//!    median-shape / patch ratio (ties to the lowest axis), stopping at the
//!    first step that would exceed the budget at batch size 2;
//! 4. pools per axis = halvings until the axis is <= 8 voxels, at most 5;
//! 5. round each axis down to a multiple of 2^pools;
//! 6. batch size = largest b >= 2 that still fits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fingerprint::Fingerprint;
use crate::io::resample::resampled_dims;
use crate::stats::median;

pub const MIN_PATCH: usize = 16;
pub const PATCH_STEP: usize = 16;
pub const MAX_POOLS: usize = 5;
pub const MIN_BOTTLENECK_EXTENT: usize = 8;
pub const MIN_BATCH: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub target_spacing: [f64; 3],
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub pools_per_axis: [usize; 3],
    pub base_features: usize,
    pub max_features: usize,
    pub dimensionality: u8,
}

impl PlanConfig {
    pub fn num_stages(&self) -> usize {
        self.pools_per_axis.iter().copied().max().unwrap_or(0) + 1
    }

    /// Per-axis stride of the downsampling step entering `level` (1-based).
    pub fn level_stride(&self, level: usize) -> [usize; 3] {
        level_stride(self.pools_per_axis, level)
    }

    /// Feature width at a resolution level.
    pub fn width_at(&self, level: usize) -> usize {
        (self.base_features << level.min(16)).min(self.max_features)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("target spacing must be positive".into()));
        }
        if self.batch_size < MIN_BATCH {
            return Err(Error::Config(format!("batch size must be >= {MIN_BATCH}")));
        }
        if self.base_features == 0 || self.max_features < self.base_features {
            return Err(Error::Config("feature widths must satisfy 0 < base <= max".into()));
        }
        if !matches!(self.dimensionality, 2 | 3) {
            return Err(Error::Config("dimensionality must be 2 or 3".into()));
        }
        for a in 0..3 {
            if self.pools_per_axis[a] > MAX_POOLS {
                return Err(Error::Config(format!("axis {a} pools exceed {MAX_POOLS}")));
            }
            let div = 1usize << self.pools_per_axis[a];
            if self.patch_size[a] == 0 || self.patch_size[a] % div != 0 {
                return Err(Error::Config(format!(
                    "patch axis {a} ({}) not divisible by 2^{}",
                    self.patch_size[a], self.pools_per_axis[a]
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::json("plan", e))?;
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: PlanConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Axes pool late: an axis with `p` pools downsamples at the last `p` levels,
/// so coarse axes keep full resolution in the shallow stages.
pub fn level_stride(pools: [usize; 3], level: usize) -> [usize; 3] {
    let depth = pools.iter().copied().max().unwrap_or(0);
    let mut s = [1; 3];
    if level == 0 || level > depth {
        return s;
    }
    for a in 0..3 {
        if level > depth - pools[a] {
            s[a] = 2;
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryBudget {
    pub bytes_available: u64,
    pub bytes_per_voxel_feature: f64,
}

impl Default for MemoryBudget {
    fn default() -> Self {
        MemoryBudget {
            bytes_available: 8 << 30,
            bytes_per_voxel_feature: 16.0,
        }
    }
}

impl MemoryBudget {
    pub fn validate(&self) -> Result<()> {
        if self.bytes_available == 0
            || !(self.bytes_per_voxel_feature.is_finite() && self.bytes_per_voxel_feature > 0.0)
        {
            return Err(Error::Config("memory budget fields must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerOptions {
    pub base_features: usize,
    pub max_features: usize,
    pub dimensionality: u8,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions {
            base_features: 32,
            max_features: 320,
            dimensionality: 3,
        }
    }
}

/// Activation-memory estimate in bytes: every resolution level contributes
/// `voxels x width` once for the encoder and once for the decoder.
/// Widths double per level without a cap, so this is an upper bound.
pub fn estimate_cost(
    patch: [usize; 3],
    base_features: usize,
    pools: [usize; 3],
    batch: usize,
    budget: &MemoryBudget,
) -> f64 {
    let depth = pools.iter().copied().max().unwrap_or(0);
    let mut dims = patch;
    let mut total = 0.0f64;
    for level in 0..=depth {
        let s = level_stride(pools, level);
        for a in 0..3 {
            dims[a] = dims[a].div_ceil(s[a]);
        }
        let voxels: f64 = dims.iter().map(|&d| d as f64).product();
        let width = base_features as f64 * 2f64.powi(level as i32);
        total += 2.0 * voxels * width;
    }
    batch as f64 * budget.bytes_per_voxel_feature * total
}

/// Halvings until the axis reaches <= 8 voxels, capped at 5.
pub fn pools_for_extent(extent: usize) -> usize {
    let mut pools = 0;
    let mut e = extent as f64;
    while e > MIN_BOTTLENECK_EXTENT as f64 && pools < MAX_POOLS {
        e /= 2.0;
        pools += 1;
    }
    pools
}

fn pools_for(patch: [usize; 3]) -> [usize; 3] {
    patch.map(pools_for_extent)
}

fn round_to_pools(patch: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    let pools = pools_for(patch);
    let mut rounded = patch;
    for a in 0..3 {
        let div = 1 << pools[a];
        rounded[a] = (patch[a] / div * div).max(div);
    }
    (rounded, pools_for(rounded))
}

pub fn make_plan(f: &Fingerprint, budget: &MemoryBudget) -> Result<PlanConfig> {
    make_plan_with(f, budget, &PlannerOptions::default())
}

pub fn make_plan_with(
    f: &Fingerprint,
    budget: &MemoryBudget,
    options: &PlannerOptions,
) -> Result<PlanConfig> {
    budget.validate()?;
    if f.shapes.is_empty() || f.spacings.len() != f.shapes.len() {
        return Err(Error::Precondition("fingerprint has no shapes".into()));
    }
    if !matches!(options.dimensionality, 2 | 3) {
        return Err(Error::Config("dimensionality must be 2 or 3".into()));
    }
    let two_d = options.dimensionality == 2;
    let base = options.base_features;

    let mut target = [0.0; 3];
    for (a, t) in target.iter_mut().enumerate() {
        let axis: Vec<f64> = f.spacings.iter().map(|s| s[a]).collect();
        *t = median(&axis);
    }
    let mut median_shape = [0usize; 3];
    for (a, m) in median_shape.iter_mut().enumerate() {
        let axis: Vec<f64> = f
            .shapes
            .iter()
            .zip(&f.spacings)
            .map(|(shape, sp)| resampled_dims(*shape, *sp, target)[a] as f64)
            .collect();
        *m = (median(&axis).round() as usize).max(1);
    }

    let growable = if two_d { [true, true, false] } else { [true; 3] };
    let mut patch = if two_d {
        [MIN_PATCH, MIN_PATCH, 1]
    } else {
        [MIN_PATCH; 3]
    };
    let fits = |p: [usize; 3]| {
        estimate_cost(p, base, pools_for(p), MIN_BATCH, budget) <= budget.bytes_available as f64
    };
    if !fits(patch) {
        return Err(Error::InfeasibleBudget {
            required: estimate_cost(patch, base, pools_for(patch), MIN_BATCH, budget),
            budget: budget.bytes_available,
        });
    }

    loop {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..3 {
            if !growable[a] || patch[a] >= median_shape[a] {
                continue;
            }
            let ratio = median_shape[a] as f64 / patch[a] as f64;
            if best.is_none_or(|(_, r)| ratio > r) {
                best = Some((a, ratio));
            }
        }
        let Some((axis, _)) = best else { break };
        let mut candidate = patch;
        candidate[axis] = (patch[axis] + PATCH_STEP).min(median_shape[axis]);
        if !fits(candidate) {
            break;
        }
        patch = candidate;
    }

    // Rounding can drop a halving on some axis, which keeps deep levels
    // larger and may push the estimate back over budget; shrink until it fits.
    let (patch, pools) = loop {
        let (rounded, pools) = round_to_pools(patch);
        if estimate_cost(rounded, base, pools, MIN_BATCH, budget) <= budget.bytes_available as f64 {
            break (rounded, pools);
        }
        let mut shrink: Option<(usize, f64)> = None;
        for a in 0..3 {
            if !growable[a] || patch[a] <= MIN_PATCH {
                continue;
            }
            let ratio = median_shape[a] as f64 / patch[a] as f64;
            if shrink.is_none_or(|(_, r)| ratio < r) {
                shrink = Some((a, ratio));
            }
        }
        let Some((axis, _)) = shrink else {
            return Err(Error::InfeasibleBudget {
                required: estimate_cost(rounded, base, pools, MIN_BATCH, budget),
                budget: budget.bytes_available,
            });
        };
        patch[axis] = (patch[axis] - PATCH_STEP).max(MIN_PATCH);
    };
    let per_sample = estimate_cost(patch, base, pools, 1, budget);
    let batch = ((budget.bytes_available as f64 / per_sample).floor() as usize).max(MIN_BATCH);

    let plan = PlanConfig {
        target_spacing: target,
        patch_size: patch,
        batch_size: batch,
        pools_per_axis: pools,
        base_features: base,
        max_features: options.max_features,
        dimensionality: options.dimensionality,
    };
    plan.validate()?;
    Ok(plan)
}
