//! Named parameter storage, initialization and the on-disk weight format.
//!
//! Weights are stored as a JSON manifest (name, shape, offset) next to a
//! little-endian f64 blob.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::spec::NetworkSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    pub tensors: BTreeMap<String, ParamTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    total: usize,
    entries: Vec<ManifestEntry>,
}

const FORMAT_TAG: &str = "f64-le";

impl Parameters {
    /// All-zero tensors matching the network layout.
    pub fn zeros_for(spec: &NetworkSpec) -> Self {
        let tensors = spec
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                (name, ParamTensor { shape, data: vec![0.0; len] })
            })
            .collect();
        Parameters { tensors }
    }

    /// Same names and shapes, zero values.
    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    ParamTensor {
                        shape: t.shape.clone(),
                        data: vec![0.0; t.data.len()],
                    },
                )
            })
            .collect();
        Parameters { tensors }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
            .data
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
            .data
    }

    /// Moves a tensor's data out; pair with [`Parameters::restore`].
    pub(crate) fn take(&mut self, name: &str) -> Vec<f64> {
        std::mem::take(&mut self.get_mut_tensor(name).data)
    }

    pub(crate) fn restore(&mut self, name: &str, data: Vec<f64>) {
        self.get_mut_tensor(name).data = data;
    }

    fn get_mut_tensor(&mut self, name: &str) -> &mut ParamTensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn len(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill(&mut self, value: f64) {
        self.tensors.values_mut().for_each(|t| t.data.fill(value));
    }

    /// Flat view in name order, matching [`Parameters::flat_index`].
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Maps a flat index back to `(name, offset)`.
    pub fn flat_index(&self, mut i: usize) -> Option<(&str, usize)> {
        for (k, t) in &self.tensors {
            if i < t.data.len() {
                return Some((k.as_str(), i));
            }
            i -= t.data.len();
        }
        None
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks names and shapes against a spec.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "network expects {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                None => return Err(Error::Shape(format!("parameter `{name}` missing"))),
                Some(t) if t.shape != shape => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Writes `<stem>.json` and `<stem>.bin` side by side.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let mut entries = Vec::new();
        let mut blob = Vec::with_capacity(self.len() * 8);
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
            });
            offset += t.data.len();
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT_TAG.into(),
            total: offset,
            entries,
        };
        let json_path = dir.join(format!("{stem}.json"));
        let bin_path = dir.join(format!("{stem}.bin"));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("weights manifest", e))?;
        std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        std::fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let json_path = dir.join(format!("{stem}.json"));
        let bin_path = dir.join(format!("{stem}.bin"));
        for p in [&json_path, &bin_path] {
            if !p.exists() {
                return Err(Error::Missing(p.clone()));
            }
        }
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(json_path.display().to_string(), e))?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::format("format", format!("unsupported weight format `{}`", manifest.format)));
        }
        let blob = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if blob.len() != manifest.total * 8 {
            return Err(Error::Truncated {
                expected: manifest.total * 8,
                actual: blob.len(),
            });
        }
        let mut tensors = BTreeMap::new();
        for e in manifest.entries {
            if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > manifest.total {
                return Err(Error::Shape(format!("manifest entry `{}` is inconsistent", e.name)));
            }
            let data = blob[e.offset * 8..(e.offset + e.len) * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(e.name, ParamTensor { shape: e.shape, data });
        }
        Ok(Parameters { tensors })
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, unit norm
/// scales. Draws follow the sorted parameter names so the result depends
/// only on the network layout and seed.
pub fn init_parameters(spec: &NetworkSpec, seed: u64) -> Parameters {
    let mut params = Parameters::zeros_for(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with(".norm.scale") {
            t.data.fill(1.0);
        } else if name.ends_with(".weight") {
            // conv: [out, in, k..]; transposed conv: [in, out, k..]
            let fan_in = if name.ends_with(".up.weight") {
                t.shape[0]
            } else {
                t.shape[1..].iter().product()
            };
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::spec::{build_unet, ConvSpec};
    use crate::plan::PlanConfig;

    fn small_plan() -> PlanConfig {
        PlanConfig {
            target_spacing: [1.0; 3],
            patch_size: [16, 16, 16],
            batch_size: 2,
            pools_per_axis: [1, 1, 1],
            base_features: 4,
            max_features: 8,
            dimensionality: 3,
        }
    }

    #[test]
    fn init_is_seeded() {
        let spec = build_unet(&small_plan());
        let a = init_parameters(&spec, 7);
        let b = init_parameters(&spec, 7);
        let c = init_parameters(&spec, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), crate::net::param_count(&spec));
        assert!(a.check_against(&spec).is_ok());
    }

    #[test]
    fn init_statistics() {
        let mut spec = NetworkSpec::empty();
        spec.head = Some(ConvSpec::new("c", 64, 64, [3; 3]));
        let p = init_parameters(&spec, 1);
        let w = p.get("c.weight");
        let (mean, std) = crate::stats::mean_std(w);
        let target = (2.0 / (64.0 * 27.0f64)).sqrt();
        assert!(mean.abs() < 0.01 * target * 10.0);
        assert!((std / target - 1.0).abs() < 0.02, "std {std} vs {target}");
        assert!(p.get("c.bias").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn save_load_roundtrip() {
        let spec = build_unet(&small_plan());
        let p = init_parameters(&spec, 3);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path(), "weights").unwrap();
        let q = Parameters::load(dir.path(), "weights").unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn load_detects_truncation() {
        let spec = build_unet(&small_plan());
        let p = init_parameters(&spec, 3);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path(), "w").unwrap();
        let bin = dir.path().join("w.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Parameters::load(dir.path(), "w"), Err(Error::Truncated { .. })));
        assert!(matches!(Parameters::load(dir.path(), "nope"), Err(Error::Missing(_))));
    }

    #[test]
    fn flat_index_maps_back() {
        let spec = build_unet(&small_plan());
        let p = init_parameters(&spec, 3);
        let flat = p.flatten();
        for i in [0, 17, flat.len() - 1] {
            let (name, off) = p.flat_index(i).unwrap();
            assert_eq!(p.get(name)[off], flat[i]);
        }
        assert!(p.flat_index(flat.len()).is_none());
    }
}
