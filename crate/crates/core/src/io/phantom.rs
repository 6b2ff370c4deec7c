//! Synthetic retina-like phantoms with labelled fluid blobs.
//!
//! Volumes are horizontal layered bands along the A-scan (y) axis with a
//! gently curved retinal surface. Fluid pockets are ellipsoids painted in
//! class-specific depth ranges: PED below the RPE band, SRF just above it,
//! IRF inside the inner layers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::volume::{ElementType, Grid, LabelMask, Vendor, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhantomProfile {
    Tiny,
    Cirrus,
    Spectralis,
    Topcon,
}

impl PhantomProfile {
    /// Grid dims in (width, A-scan depth, B-scans) order.
    pub fn dims(self) -> [usize; 3] {
        match self {
            PhantomProfile::Tiny => [32, 32, 16],
            PhantomProfile::Cirrus => [512, 1024, 128],
            PhantomProfile::Spectralis => [512, 496, 49],
            PhantomProfile::Topcon => [512, 885, 128],
        }
    }

    /// Voxel spacing in mm for a 6 mm x 6 mm scan field.
    pub fn spacing(self) -> [f64; 3] {
        match self {
            PhantomProfile::Tiny => [0.2, 0.1, 0.4],
            PhantomProfile::Cirrus => [6.0 / 512.0, 2.0 / 1024.0, 6.0 / 128.0],
            PhantomProfile::Spectralis => [6.0 / 512.0, 1.92 / 496.0, 6.0 / 49.0],
            PhantomProfile::Topcon => [6.0 / 512.0, 2.3 / 885.0, 6.0 / 128.0],
        }
    }

    pub fn vendor(self) -> Vendor {
        match self {
            PhantomProfile::Tiny => Vendor::Phantom,
            PhantomProfile::Cirrus => Vendor::Cirrus,
            PhantomProfile::Spectralis => Vendor::Spectralis,
            PhantomProfile::Topcon => Vendor::Topcon,
        }
    }

    /// Additive noise level, as a fraction of full scale.
    fn noise(self) -> f64 {
        match self {
            PhantomProfile::Tiny => 0.02,
            PhantomProfile::Cirrus => 0.03,
            PhantomProfile::Spectralis => 0.015,
            PhantomProfile::Topcon => 0.04,
        }
    }
}

impl fmt::Display for PhantomProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PhantomProfile::Tiny => "Tiny",
            PhantomProfile::Cirrus => "Cirrus",
            PhantomProfile::Spectralis => "Spectralis",
            PhantomProfile::Topcon => "Topcon",
        };
        f.write_str(s)
    }
}

impl FromStr for PhantomProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(PhantomProfile::Tiny),
            "cirrus" => Ok(PhantomProfile::Cirrus),
            "spectralis" => Ok(PhantomProfile::Spectralis),
            "topcon" => Ok(PhantomProfile::Topcon),
            _ => Err(Error::Domain(format!("unknown phantom profile `{s}`"))),
        }
    }
}

/// Blob count range per fluid class (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhantomOptions {
    pub min_blobs: usize,
    pub max_blobs: usize,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        PhantomOptions {
            min_blobs: 0,
            max_blobs: 3,
        }
    }
}

impl PhantomOptions {
    pub fn fluid_free() -> Self {
        PhantomOptions {
            min_blobs: 0,
            max_blobs: 0,
        }
    }

    pub fn every_class() -> Self {
        PhantomOptions {
            min_blobs: 1,
            max_blobs: 3,
        }
    }
}

// Band intensities as a fraction of the 8-bit range.
const VITREOUS: f64 = 0.15;
const INNER: f64 = 0.70;
const MIDDLE: f64 = 0.40;
const OUTER: f64 = 0.55;
const RPE: f64 = 0.85;
const CHOROID: f64 = 0.45;
// Fluid intensities, indexed by label.
const FLUID: [f64; 4] = [0.0, 0.05, 0.25, 0.95];

// Band boundaries as depth fractions below the retinal surface.
const INNER_END: f64 = 0.12;
const MIDDLE_END: f64 = 0.24;
const OUTER_END: f64 = 0.36;
const RPE_END: f64 = 0.42;

struct Blob {
    class: u8,
    centre: [f64; 3],
    radii: [f64; 3],
}

pub fn generate_phantom(seed: u64, profile: PhantomProfile) -> (Volume, LabelMask) {
    generate_phantom_with(seed, profile, PhantomOptions::default())
}

pub fn generate_phantom_with(
    seed: u64,
    profile: PhantomProfile,
    options: PhantomOptions,
) -> (Volume, LabelMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = profile.dims();
    let [nx, ny, nz] = dims.map(|d| d as f64);

    let surface_base = rng.gen_range(0.20..0.30);
    let (amp_x, freq_x, phase_x) = (
        rng.gen_range(0.01..0.04),
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let (amp_z, phase_z) = (rng.gen_range(0.0..0.03), rng.gen_range(0.0..std::f64::consts::TAU));
    let surface = |x: f64, z: f64| -> f64 {
        let u = x / nx;
        let w = z / nz;
        surface_base
            + amp_x * (std::f64::consts::TAU * freq_x * u + phase_x).sin()
            + amp_z * (std::f64::consts::TAU * w + phase_z).cos()
    };

    // PED first so IRF/SRF painted later win on overlap.
    let mut blobs = Vec::new();
    for class in [3u8, 2, 1] {
        let count = rng.gen_range(options.min_blobs..=options.max_blobs.max(options.min_blobs));
        for _ in 0..count {
            let radii = [
                rng.gen_range(0.09..0.16) * nx,
                rng.gen_range(0.08..0.14) * ny,
                rng.gen_range(0.15..0.25) * nz,
            ];
            let cx = rng.gen_range(radii[0]..(nx - radii[0]).max(radii[0] + 1.0));
            let cz = rng.gen_range(radii[2].min(nz / 2.0)..(nz - radii[2]).max(nz / 2.0 + 0.5));
            let s = surface(cx, cz);
            let depth = match class {
                1 => rng.gen_range(0.05..OUTER_END - 0.06),
                2 => OUTER_END - 0.02,
                _ => RPE_END + 0.06,
            };
            blobs.push(Blob {
                class,
                centre: [cx, (s + depth) * ny, cz],
                radii,
            });
        }
    }

    let mut intensity = Grid::from_fn(dims, |x, y, z| {
        let d = y as f64 / ny - surface(x as f64, z as f64);
        if d < 0.0 {
            VITREOUS
        } else if d < INNER_END {
            INNER
        } else if d < MIDDLE_END {
            MIDDLE
        } else if d < OUTER_END {
            OUTER
        } else if d < RPE_END {
            RPE
        } else {
            CHOROID
        }
    })
    .expect("profile dims are non-zero");
    let mut labels = Grid::filled(dims, 0u8).expect("profile dims are non-zero");

    for b in &blobs {
        let lo: Vec<usize> = (0..3)
            .map(|a| (b.centre[a] - b.radii[a]).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((b.centre[a] + b.radii[a]).ceil() as usize).min(dims[a] - 1))
            .collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = [x as f64, y as f64, z as f64];
                    let r2: f64 = (0..3)
                        .map(|a| ((p[a] - b.centre[a]) / b.radii[a]).powi(2))
                        .sum();
                    if r2 <= 1.0 {
                        intensity.set(x, y, z, FLUID[b.class as usize]);
                        labels.set(x, y, z, b.class);
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, profile.noise()).expect("positive sigma");
    let voxels = intensity.map(|v| {
        let n: f64 = noise.sample(&mut rng);
        ((v + n).clamp(0.0, 1.0) * 255.0).round() as f32
    });

    let spacing = profile.spacing();
    let vendor = profile.vendor().to_string();
    let mut volume = Volume::new(voxels, spacing)
        .expect("profile spacing is positive")
        .with_meta("vendor", vendor.clone())
        .with_meta("phantom_seed", seed.to_string());
    volume.element_type = ElementType::UChar;
    let mut mask = LabelMask::new(labels, spacing).expect("labels are class codes");
    mask.meta = volume.meta.clone();
    (volume, mask)
}
