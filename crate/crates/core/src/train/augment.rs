//! On-the-fly spatial and intensity augmentation of (image, label) patches.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub flip: bool,
    /// Mirror probability per axis (x, y, z).
    pub flip_probability: [f64; 3],
    /// In-plane rotation about the z axis.
    pub rotation: bool,
    pub rotation_degrees: f64,
    pub rotation_probability: f64,
    pub scaling: bool,
    pub scale_range: [f64; 2],
    pub scaling_probability: f64,
    pub noise: bool,
    pub noise_sigma_max: f64,
    pub noise_probability: f64,
    pub gamma: bool,
    pub gamma_range: [f64; 2],
    pub gamma_probability: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip: true,
            flip_probability: [0.5; 3],
            rotation: true,
            rotation_degrees: 15.0,
            rotation_probability: 0.2,
            scaling: true,
            scale_range: [0.85, 1.25],
            scaling_probability: 0.2,
            noise: true,
            noise_sigma_max: 0.1,
            noise_probability: 0.15,
            gamma: true,
            gamma_range: [0.7, 1.5],
            gamma_probability: 0.3,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        AugmentationConfig {
            flip: false,
            rotation: false,
            scaling: false,
            noise: false,
            gamma: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.flip_probability[0],
            self.flip_probability[1],
            self.flip_probability[2],
            self.rotation_probability,
            self.scaling_probability,
            self.noise_probability,
            self.gamma_probability,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let ranges = [self.scale_range, self.gamma_range];
        if ranges.iter().any(|r| !(r[0] > 0.0 && r[0] <= r[1])) {
            return Err(Error::Config("augmentation ranges must be positive and ordered".into()));
        }
        if !(self.rotation_degrees >= 0.0 && self.noise_sigma_max >= 0.0) {
            return Err(Error::Config("rotation and noise bounds must be non-negative".into()));
        }
        Ok(())
    }
}

fn flip_axis<T: Copy>(g: &Grid<T>, axis: usize) -> Grid<T> {
    let d = g.dims();
    Grid::from_fn(d, |x, y, z| {
        let mut p = [x, y, z];
        p[axis] = d[axis] - 1 - p[axis];
        g.get(p[0], p[1], p[2])
    })
    .expect("dims unchanged")
}

/// Rotates by `angle` radians in the x-y plane and scales by `scale` about the
/// patch centre. Image samples trilinearly, labels by nearest neighbour;
/// outside samples are zero.
fn warp(image: &Grid<f64>, mask: &Grid<u8>, angle: f64, scale: f64) -> (Grid<f64>, Grid<u8>) {
    let d = image.dims();
    let c = [(d[0] as f64 - 1.0) / 2.0, (d[1] as f64 - 1.0) / 2.0];
    let (sin, cos) = angle.sin_cos();
    let mut img = Grid::filled(d, 0.0).expect("non-empty");
    let mut lab = Grid::filled(d, 0u8).expect("non-empty");
    let inside = |v: f64, n: usize| v >= 0.0 && v <= (n - 1) as f64;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                // inverse map: output -> source
                let (u, v) = ((x as f64 - c[0]) / scale, (y as f64 - c[1]) / scale);
                let sx = cos * u + sin * v + c[0];
                let sy = -sin * u + cos * v + c[1];
                if !(inside(sx, d[0]) && inside(sy, d[1])) {
                    continue;
                }
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(d[0] - 1), (y0 + 1).min(d[1] - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let a = image.get(x0, y0, z) + (image.get(x1, y0, z) - image.get(x0, y0, z)) * fx;
                let b = image.get(x0, y1, z) + (image.get(x1, y1, z) - image.get(x0, y1, z)) * fx;
                img.set(x, y, z, a + (b - a) * fy);
                let (nx, ny) = (sx.round() as usize, sy.round() as usize);
                lab.set(x, y, z, mask.get(nx.min(d[0] - 1), ny.min(d[1] - 1), z));
            }
        }
    }
    (img, lab)
}

/// Applies the same geometric transform to both patches and intensity
/// transforms to the image only. Consumes draws from `rng` in a fixed
/// order, so results are reproducible from the rng state.
pub fn augment<R: Rng>(
    image: &Grid<f64>,
    mask: &Grid<u8>,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(Grid<f64>, Grid<u8>)> {
    if image.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} patches differ",
            image.dims(),
            mask.dims()
        )));
    }
    let mut img = image.clone();
    let mut lab = mask.clone();

    let mut angle = 0.0;
    if cfg.rotation && rng.gen_bool(cfg.rotation_probability) {
        let r = cfg.rotation_degrees.to_radians();
        if r > 0.0 {
            angle = rng.gen_range(-r..=r);
        }
    }
    let mut scale = 1.0;
    if cfg.scaling && rng.gen_bool(cfg.scaling_probability) {
        scale = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    }
    if angle != 0.0 || scale != 1.0 {
        (img, lab) = warp(&img, &lab, angle, scale);
    }

    if cfg.flip {
        for axis in 0..3 {
            if rng.gen_bool(cfg.flip_probability[axis]) {
                img = flip_axis(&img, axis);
                lab = flip_axis(&lab, axis);
            }
        }
    }

    if cfg.noise && rng.gen_bool(cfg.noise_probability) && cfg.noise_sigma_max > 0.0 {
        let sigma = rng.gen_range(0.0..=cfg.noise_sigma_max);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            img.as_mut_slice().iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }

    if cfg.gamma && rng.gen_bool(cfg.gamma_probability) {
        let gamma = rng.gen_range(cfg.gamma_range[0]..=cfg.gamma_range[1]);
        let data = img.as_mut_slice();
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            data.iter_mut()
                .for_each(|v| *v = ((*v - lo) / range).powf(gamma) * range + lo);
        }
    }
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Grid<f64>, Grid<u8>) {
        let img = Grid::from_fn([6, 5, 4], |x, y, z| (x * 3 + y * 7 + z * 11) as f64 / 10.0).unwrap();
        let lab = Grid::from_fn([6, 5, 4], |x, y, z| ((x + 2 * y + z) % 4) as u8).unwrap();
        (img, lab)
    }

    #[test]
    fn identity_config_is_exact() {
        let (img, lab) = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = augment(&img, &lab, &AugmentationConfig::identity(), &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, lab);
    }

    #[test]
    fn forced_flip_is_involution() {
        let (img, lab) = sample();
        let cfg = AugmentationConfig {
            flip: true,
            flip_probability: [1.0, 0.0, 0.0],
            ..AugmentationConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = augment(&img, &lab, &cfg, &mut rng).unwrap();
        assert_ne!(a, img);
        let (c, d) = augment(&a, &b, &cfg, &mut rng).unwrap();
        assert_eq!((c, d), (img, lab));
    }

    #[test]
    fn deterministic_given_rng() {
        let (img, lab) = sample();
        let cfg = AugmentationConfig {
            rotation_probability: 1.0,
            scaling_probability: 1.0,
            noise_probability: 1.0,
            gamma_probability: 1.0,
            ..Default::default()
        };
        let run = |seed| augment(&img, &lab, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(5), run(5));
        assert_ne!(run(5).0, run(6).0);
        let (_, m) = run(5);
        assert!(m.as_slice().iter().all(|&v| v < 4));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = AugmentationConfig {
            rotation_probability: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentationConfig {
            scale_range: [1.2, 0.9],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AugmentationConfig::default().validate().is_ok());
    }
}
