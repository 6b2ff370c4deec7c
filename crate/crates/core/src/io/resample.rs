//! Resampling to a target voxel spacing: trilinear for intensities,
//! nearest-neighbour for label masks.

use crate::error::{Error, Result};
use crate::io::volume::{check_spacing, ElementType, Grid, LabelMask, Volume};

/// Output dims for a spacing change: `round(dim * spacing / target)`, at least 1.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [1usize; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1);
    }
    out
}

/// Per-axis sampling table: (lower index, upper index, fraction).
fn linear_taps(old: usize, new: usize) -> Vec<(usize, usize, f64)> {
    let scale = old as f64 / new as f64;
    (0..new)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (old - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(old - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn nearest_taps(old: usize, new: usize) -> Vec<usize> {
    let scale = old as f64 / new as f64;
    (0..new)
        .map(|i| (((i as f64 + 0.5) * scale).floor() as usize).min(old - 1))
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // exact for a == b, so constant fields stay constant
    a + (b - a) * t
}

/// Trilinear resize of an x-fastest scalar field.
pub fn resize_linear(data: &[f32], dims: [usize; 3], new_dims: [usize; 3]) -> Vec<f32> {
    resize_linear_with(data, dims, new_dims, |v| v as f64, |v| v as f32)
}

/// Double-precision variant of [`resize_linear`].
pub fn resize_linear_f64(data: &[f64], dims: [usize; 3], new_dims: [usize; 3]) -> Vec<f64> {
    resize_linear_with(data, dims, new_dims, |v| v, |v| v)
}

fn resize_linear_with<T: Copy>(
    data: &[T],
    dims: [usize; 3],
    new_dims: [usize; 3],
    widen: impl Fn(T) -> f64,
    narrow: impl Fn(f64) -> T,
) -> Vec<T> {
    if dims == new_dims {
        return data.to_vec();
    }
    let tx = linear_taps(dims[0], new_dims[0]);
    let ty = linear_taps(dims[1], new_dims[1]);
    let tz = linear_taps(dims[2], new_dims[2]);
    let at = |x: usize, y: usize, z: usize| widen(data[x + dims[0] * (y + dims[1] * z)]);
    let mut out = Vec::with_capacity(new_dims.iter().product());
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
                let c0 = lerp(c00, c10, fy);
                let c1 = lerp(c01, c11, fy);
                out.push(narrow(lerp(c0, c1, fz)));
            }
        }
    }
    out
}

/// Nearest-neighbour resize; never invents values absent from the input.
pub fn resize_nearest<T: Copy>(data: &[T], dims: [usize; 3], new_dims: [usize; 3]) -> Vec<T> {
    if dims == new_dims {
        return data.to_vec();
    }
    let nx = nearest_taps(dims[0], new_dims[0]);
    let ny = nearest_taps(dims[1], new_dims[1]);
    let nz = nearest_taps(dims[2], new_dims[2]);
    let mut out = Vec::with_capacity(new_dims.iter().product());
    for &z in &nz {
        for &y in &ny {
            let row = dims[0] * (y + dims[1] * z);
            out.extend(nx.iter().map(|&x| data[row + x]));
        }
    }
    out
}

fn check_target(target: [f64; 3]) -> Result<()> {
    check_spacing(target)
        .map_err(|_| Error::Domain(format!("target spacing must be positive, got {target:?}")))
}

pub fn resample_volume(volume: &Volume, target: [f64; 3]) -> Result<Volume> {
    check_target(target)?;
    if target == volume.spacing {
        return Ok(volume.clone());
    }
    let dims = volume.dims();
    let new_dims = resampled_dims(dims, volume.spacing, target);
    let data = resize_linear(volume.voxels.as_slice(), dims, new_dims);
    Ok(Volume {
        voxels: Grid::from_vec(new_dims, data)?,
        spacing: target,
        origin: volume.origin,
        meta: volume.meta.clone(),
        element_type: ElementType::Float,
    })
}

pub fn resample_mask(mask: &LabelMask, target: [f64; 3]) -> Result<LabelMask> {
    check_target(target)?;
    if target == mask.spacing {
        return Ok(mask.clone());
    }
    let dims = mask.dims();
    let new_dims = resampled_dims(dims, mask.spacing, target);
    let data = resize_nearest(mask.labels.as_slice(), dims, new_dims);
    Ok(LabelMask {
        labels: Grid::from_vec(new_dims, data)?,
        spacing: target,
        origin: mask.origin,
        meta: mask.meta.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resample_is_exact() {
        let g = Grid::from_fn([3, 4, 2], |x, y, z| (x * 7 + y * 3 + z) as f32 * 0.37).unwrap();
        let v = Volume::new(g, [0.5, 0.25, 2.0]).unwrap();
        assert_eq!(resample_volume(&v, [0.5, 0.25, 2.0]).unwrap(), v);
    }

    #[test]
    fn constant_upsample() {
        let v = Volume::new(Grid::filled([2, 2, 2], 7.0).unwrap(), [1.0; 3]).unwrap();
        let r = resample_volume(&v, [0.5; 3]).unwrap();
        assert_eq!(r.dims(), [4, 4, 4]);
        assert_eq!(r.spacing, [0.5; 3]);
        assert!(r.voxels.as_slice().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn dims_rounding() {
        assert_eq!(resampled_dims([10, 10, 3], [1.0, 1.0, 1.0], [3.0, 0.4, 10.0]), [3, 25, 1]);
    }

    #[test]
    fn non_positive_target_is_domain_error() {
        let v = Volume::new(Grid::filled([2, 2, 2], 1.0).unwrap(), [1.0; 3]).unwrap();
        assert!(matches!(resample_volume(&v, [1.0, -1.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn linear_resize_interpolates() {
        // 1D ramp 0,1 upsampled to 4: centres map to -0.25,0.25,0.75,1.25 in source
        let out = resize_linear(&[0.0, 1.0], [2, 1, 1], [4, 1, 1]);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn mask_labels_preserved() {
        let g = Grid::from_fn([5, 3, 2], |x, y, _| if (x + y) % 3 == 0 { 2 } else { 0 }).unwrap();
        let m = LabelMask::new(g, [1.0; 3]).unwrap();
        let r = resample_mask(&m, [0.7, 1.9, 0.3]).unwrap();
        assert!(r.labels.as_slice().iter().all(|&l| l == 0 || l == 2));
    }
}
