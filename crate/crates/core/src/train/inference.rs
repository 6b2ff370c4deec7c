//! Whole-volume inference by Gaussian-weighted sliding windows.

use crate::error::{Error, Result};
use crate::io::resample::{resampled_dims, resize_linear_f64};
use crate::io::{normalize, resample_volume, Grid, IntensityStats, LabelMask, Volume};
use crate::net::{Network, Tensor};
use crate::plan::PlanConfig;

/// Fraction of the window extent by which neighbouring windows advance.
pub const WINDOW_STEP: f64 = 0.5;
/// Gaussian sigma as a fraction of the window extent.
pub const SIGMA_FRACTION: f64 = 1.0 / 8.0;

/// Anything that maps single-channel patches to class probabilities.
pub trait PatchPredictor: Sync {
    fn num_classes(&self) -> usize;

    /// `batch x 1 x patch` in, `batch x classes x patch` probabilities out.
    fn predict_patches(&self, patches: &Tensor) -> Result<Tensor>;
}

impl PatchPredictor for Network {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn predict_patches(&self, patches: &Tensor) -> Result<Tensor> {
        self.predict(patches)
    }
}

/// Per-voxel class probabilities on a volume grid, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub num_classes: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Most probable class per voxel; ties go to the lower class.
    pub fn argmax(&self) -> LabelMask {
        let n = self.voxels();
        let labels: Vec<u8> = (0..n)
            .map(|v| {
                let mut best = 0;
                for c in 1..self.num_classes {
                    if self.data[c * n + v] > self.data[best * n + v] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask {
            labels: Grid::from_vec(self.dims, labels).expect("dims match"),
            spacing: self.spacing,
            origin: self.origin,
            meta: Default::default(),
        }
    }

    /// Rescales each voxel's probabilities to sum to one.
    fn renormalize(&mut self) {
        let n = self.voxels();
        for v in 0..n {
            let s: f64 = (0..self.num_classes).map(|c| self.data[c * n + v]).sum();
            if s > 0.0 {
                for c in 0..self.num_classes {
                    self.data[c * n + v] /= s;
                }
            }
        }
    }
}

/// Separable Gaussian centred on the window, peak 1, with zeros lifted to
/// the smallest positive value so every voxel keeps some weight.
pub fn gaussian_importance(patch: [usize; 3]) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let sigma = n as f64 * SIGMA_FRACTION;
        (0..n)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect()
    };
    let (wx, wy, wz) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut w = Vec::with_capacity(patch.iter().product());
    for z in &wz {
        for y in &wy {
            for x in &wx {
                w.push(x * y * z);
            }
        }
    }
    let max = w.iter().copied().fold(0.0, f64::max);
    w.iter_mut().for_each(|v| *v /= max);
    let min_pos = w.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    w.iter_mut().filter(|v| **v <= 0.0).for_each(|v| *v = min_pos);
    w
}

/// Evenly spaced window origins covering `0..dim` with at least
/// `1 - WINDOW_STEP` overlap.
pub fn window_starts(dim: usize, patch: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let step = ((patch as f64 * WINDOW_STEP).floor() as usize).max(1);
    let span = dim - patch;
    let n = span.div_ceil(step) + 1;
    (0..n)
        .map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

fn window_grid(dims: [usize; 3], patch: [usize; 3]) -> Vec<[usize; 3]> {
    let sx = window_starts(dims[0], patch[0]);
    let sy = window_starts(dims[1], patch[1]);
    let sz = window_starts(dims[2], patch[2]);
    let mut out = Vec::new();
    for &z in &sz {
        for &y in &sy {
            for &x in &sx {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Per-voxel sum of the normalized blend weights `w_k / sum_k w_k` over all
/// windows of a `dims` volume tiled with `patch` (after padding).
pub fn blend_weight_sum(dims: [usize; 3], patch: [usize; 3]) -> Vec<f64> {
    let padded = [0, 1, 2].map(|a| dims[a].max(patch[a]));
    let windows = window_grid(padded, patch);
    let w = gaussian_importance(patch);
    let n: usize = padded.iter().product();
    let mut total = vec![0.0; n];
    for o in &windows {
        for_each_window_voxel(padded, patch, *o, |vi, wi| total[vi] += w[wi]);
    }
    let mut sum = vec![0.0; n];
    for o in &windows {
        for_each_window_voxel(padded, patch, *o, |vi, wi| sum[vi] += w[wi] / total[vi]);
    }
    crop(&sum, 1, padded, dims)
}

#[inline]
fn for_each_window_voxel(dims: [usize; 3], patch: [usize; 3], o: [usize; 3], mut f: impl FnMut(usize, usize)) {
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            let vrow = o[0] + dims[0] * ((o[1] + y) + dims[1] * (o[2] + z));
            let wrow = patch[0] * (y + patch[1] * z);
            for x in 0..patch[0] {
                f(vrow + x, wrow + x);
            }
        }
    }
}

fn pad_offset(dims: [usize; 3], padded: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| (padded[a] - dims[a]) / 2)
}

/// Centred crop of a channel-major buffer from `padded` back to `dims`.
fn crop(data: &[f64], channels: usize, padded: [usize; 3], dims: [usize; 3]) -> Vec<f64> {
    if padded == dims {
        return data.to_vec();
    }
    let off = pad_offset(dims, padded);
    let np: usize = padded.iter().product();
    let mut out = Vec::with_capacity(channels * dims.iter().product::<usize>());
    for c in 0..channels {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let row = c * np + off[0] + padded[0] * ((y + off[1]) + padded[1] * (z + off[2]));
                out.extend_from_slice(&data[row..row + dims[0]]);
            }
        }
    }
    out
}

/// Tiles `image` with `patch` windows and blends the predictions. Inputs
/// smaller than the window are zero-padded symmetrically and cropped back.
pub fn sliding_window<P: PatchPredictor + ?Sized>(
    predictor: &P,
    image: &Grid<f64>,
    patch: [usize; 3],
) -> Result<Vec<f64>> {
    let dims = image.dims();
    let padded = [0, 1, 2].map(|a| dims[a].max(patch[a]));
    let off = pad_offset(dims, padded);
    let np: usize = padded.iter().product();
    let mut src = vec![0.0; np];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let d = off[0] + padded[0] * ((y + off[1]) + padded[1] * (z + off[2]));
            let s = image.index(0, y, z);
            src[d..d + dims[0]].copy_from_slice(&image.as_slice()[s..s + dims[0]]);
        }
    }

    let classes = predictor.num_classes();
    let windows = window_grid(padded, patch);
    let pn: usize = patch.iter().product();
    let run = |o: [usize; 3]| -> Result<Tensor> {
        let mut x = Vec::with_capacity(pn);
        for_each_window_voxel(padded, patch, o, |vi, _| x.push(src[vi]));
        let probs = predictor.predict_patches(&Tensor::from_vec(1, 1, patch, x))?;
        if probs.channels != classes || probs.dims != patch || probs.batch != 1 {
            return Err(Error::Shape(format!(
                "predictor returned {}x{}x{:?} for a 1x1x{patch:?} window",
                probs.batch, probs.channels, probs.dims
            )));
        }
        Ok(probs)
    };

    if windows.len() == 1 {
        // a single window needs no blending
        let probs = run(windows[0])?;
        return Ok(crop(&probs.data, classes, padded, dims));
    }

    let w = gaussian_importance(patch);
    let mut acc = vec![0.0; classes * np];
    let mut total = vec![0.0; np];
    for &o in &windows {
        let probs = run(o)?;
        for_each_window_voxel(padded, patch, o, |vi, wi| {
            total[vi] += w[wi];
            for c in 0..classes {
                acc[c * np + vi] += w[wi] * probs.data[c * pn + wi];
            }
        });
    }
    for c in 0..classes {
        for (a, t) in acc[c * np..(c + 1) * np].iter_mut().zip(&total) {
            *a /= t;
        }
    }
    Ok(crop(&acc, classes, padded, dims))
}

/// Full inference path: normalize with the stored statistics, resample to
/// the plan spacing, tile, then resize back to the native grid.
pub fn predict_with<P: PatchPredictor + ?Sized>(
    predictor: &P,
    plan: &PlanConfig,
    stats: &IntensityStats,
    volume: &Volume,
) -> Result<ProbabilityMap> {
    let native = volume.dims();
    let normalized = normalize(volume, stats);
    let resampled = resample_volume(&normalized, plan.target_spacing)?;
    let work_dims = resampled.dims();
    debug_assert_eq!(work_dims, resampled_dims(native, volume.spacing, plan.target_spacing));
    let image = resampled.voxels.map(|v| v as f64);
    let classes = predictor.num_classes();
    let probs = sliding_window(predictor, &image, plan.patch_size)?;

    let mut map = ProbabilityMap {
        num_classes: classes,
        dims: native,
        spacing: volume.spacing,
        origin: volume.origin,
        data: Vec::new(),
    };
    if work_dims == native {
        map.data = probs;
    } else {
        let n: usize = work_dims.iter().product();
        for c in 0..classes {
            map.data
                .extend(resize_linear_f64(&probs[c * n..(c + 1) * n], work_dims, native));
        }
        map.renormalize();
    }
    Ok(map)
}
