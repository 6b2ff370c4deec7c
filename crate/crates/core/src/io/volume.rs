//! In-memory volume and label-mask types.
//!
//! Axis order is fixed as (x = width, y = A-scan depth, z = B-scan index),
//! stored with x varying fastest.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "IRF", "SRF", "PED"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Vendor {
    Cirrus,
    Spectralis,
    Topcon,
    Phantom,
}

impl Vendor {
    pub const ALL: [Vendor; 4] = [
        Vendor::Cirrus,
        Vendor::Spectralis,
        Vendor::Topcon,
        Vendor::Phantom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Vendor::Cirrus => "Cirrus",
            Vendor::Spectralis => "Spectralis",
            Vendor::Topcon => "Topcon",
            Vendor::Phantom => "Phantom",
        }
    }
}

impl fmt::Display for Vendor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Vendor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Vendor::ALL
            .iter()
            .copied()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Domain(format!("unknown vendor `{s}`")))
    }
}

/// Dense 3D grid, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Result<Self> {
        check_dims(dims)?;
        Ok(Grid {
            dims,
            data: vec![value; dims.iter().product()],
        })
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "grid of dims {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Grid { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Ok(Grid { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("all grid dims must be >= 1, got {dims:?}")));
    }
    Ok(())
}

pub(crate) fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Domain(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

/// On-disk scalar type of a MetaImage payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementType {
    UChar,
    Short,
    UShort,
    Float,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::UChar => 1,
            ElementType::Short | ElementType::UShort => 2,
            ElementType::Float => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ElementType::UChar => "MET_UCHAR",
            ElementType::Short => "MET_SHORT",
            ElementType::UShort => "MET_USHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "MET_UCHAR" => Some(ElementType::UChar),
            "MET_SHORT" => Some(ElementType::Short),
            "MET_USHORT" => Some(ElementType::UShort),
            "MET_FLOAT" => Some(ElementType::Float),
            _ => None,
        }
    }
}

pub type Meta = BTreeMap<String, String>;

/// Scalar intensity volume. Voxels are held as `f32`, which represents every
/// supported on-disk element type exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Grid<f32>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub meta: Meta,
    pub element_type: ElementType,
}

impl Volume {
    pub fn new(voxels: Grid<f32>, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        Ok(Volume {
            voxels,
            spacing,
            origin: [0.0; 3],
            meta: Meta::new(),
            element_type: ElementType::Float,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.voxels.dims()
    }

    pub fn vendor(&self) -> Option<Vendor> {
        self.meta.get("vendor").and_then(|v| v.parse().ok())
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_spacing(self.spacing)?;
        if let Some(v) = self.meta.get("vendor") {
            v.parse::<Vendor>()?;
        }
        let representable = |x: f32| -> bool {
            match self.element_type {
                ElementType::Float => true,
                ElementType::UChar => x.fract() == 0.0 && (0.0..=255.0).contains(&x),
                ElementType::Short => x.fract() == 0.0 && (-32768.0..=32767.0).contains(&x),
                ElementType::UShort => x.fract() == 0.0 && (0.0..=65535.0).contains(&x),
            }
        };
        if let Some(bad) = self.voxels.as_slice().iter().find(|&&x| !representable(x)) {
            return Err(Error::Domain(format!(
                "voxel value {bad} not representable as {}",
                self.element_type.tag()
            )));
        }
        Ok(())
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Per-voxel class labels in `0..NUM_CLASSES`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub labels: Grid<u8>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub meta: Meta,
}

impl LabelMask {
    pub fn new(labels: Grid<u8>, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        check_labels(labels.as_slice())?;
        Ok(LabelMask {
            labels,
            spacing,
            origin: [0.0; 3],
            meta: Meta::new(),
        })
    }

    /// Mask with the same geometry as `volume`, all background.
    pub fn empty_like(volume: &Volume) -> Self {
        LabelMask {
            labels: volume.voxels.map(|_| 0),
            spacing: volume.spacing,
            origin: volume.origin,
            meta: volume.meta.clone(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.as_slice().iter().filter(|&&l| l == class).count()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.labels.as_slice().contains(&class)
    }

    pub fn validate(&self) -> Result<()> {
        check_spacing(self.spacing)?;
        check_labels(self.labels.as_slice())
    }

    /// Fails unless the mask has the same grid dimensions as `volume`.
    pub fn check_pairs_with(&self, volume: &Volume) -> Result<()> {
        if self.dims() != volume.dims() {
            return Err(Error::Shape(format!(
                "mask dims {:?} differ from volume dims {:?}",
                self.dims(),
                volume.dims()
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Domain(format!(
            "label {bad} outside 0..{NUM_CLASSES}"
        )));
    }
    Ok(())
}
