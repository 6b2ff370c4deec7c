//! Dataset fingerprint and intensity normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::dataset::DatasetIndex;
use crate::io::volume::{ElementType, LabelMask, Volume, NUM_CLASSES};
use crate::stats::{mean_std, percentile_sorted};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
    pub percentile_00_5: f64,
    pub percentile_99_5: f64,
}

impl IntensityStats {
    /// Statistics of a pooled sample. The sample is sorted first so the result
    /// depends only on the multiset of values, not on their order.
    pub fn from_sample(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Precondition("no voxels to compute intensity statistics".into()));
        }
        values.sort_by(f64::total_cmp);
        let (mean, std) = mean_std(&values);
        Ok(IntensityStats {
            mean,
            std,
            percentile_00_5: percentile_sorted(&values, 0.5),
            percentile_99_5: percentile_sorted(&values, 99.5),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub shapes: Vec<[usize; 3]>,
    pub spacings: Vec<[f64; 3]>,
    pub intensity_stats: IntensityStats,
    pub num_volumes: usize,
    /// Fraction of volumes containing each class, indexed by label.
    pub class_presence: [f64; NUM_CLASSES],
}

impl Fingerprint {
    /// Fingerprint of in-memory (volume, mask) pairs, in the given order.
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a Volume, Option<&'a LabelMask>)>,
    ) -> Result<Self> {
        let mut shapes = Vec::new();
        let mut spacings = Vec::new();
        let mut foreground = Vec::new();
        let mut whole = Vec::new();
        let mut presence = [0usize; NUM_CLASSES];
        for (vol, mask) in pairs {
            shapes.push(vol.dims());
            spacings.push(vol.spacing);
            let voxels = vol.voxels.as_slice();
            match mask {
                Some(m) => {
                    m.check_pairs_with(vol)?;
                    let labels = m.labels.as_slice();
                    foreground.extend(
                        voxels
                            .iter()
                            .zip(labels)
                            .filter(|(_, &l)| l != 0)
                            .map(|(&v, _)| v as f64),
                    );
                    let mut seen = [false; NUM_CLASSES];
                    for &l in labels {
                        seen[l as usize] = true;
                    }
                    for (p, s) in presence.iter_mut().zip(seen) {
                        *p += s as usize;
                    }
                }
                None => foreground.extend(voxels.iter().map(|&v| v as f64)),
            }
            whole.extend(voxels.iter().map(|&v| v as f64));
        }
        let n = shapes.len();
        if n == 0 {
            return Err(Error::Precondition("fingerprint needs at least one training volume".into()));
        }
        // No foreground anywhere: fall back to whole-volume statistics.
        let sample = if foreground.is_empty() { whole } else { foreground };
        Ok(Fingerprint {
            intensity_stats: IntensityStats::from_sample(sample)?,
            num_volumes: n,
            shapes,
            spacings,
            class_presence: presence.map(|c| c as f64 / n as f64),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| Error::json("fingerprint", e))?;
        s.push('\n');
        Ok(s)
    }
}

/// Fingerprint over the train entries of `index`, in index order.
pub fn extract_fingerprint(index: &DatasetIndex) -> Result<Fingerprint> {
    let pairs = index.load_train_pairs()?;
    if pairs.is_empty() {
        return Err(Error::Precondition("index has no train entries".into()));
    }
    Fingerprint::from_pairs(pairs.iter().map(|(v, m)| (v, Some(m))))
}

/// Clips to the fingerprint's [0.5, 99.5] percentile window, then z-scores
/// with its mean and standard deviation.
pub fn normalize(volume: &Volume, stats: &IntensityStats) -> Volume {
    let lo = stats.percentile_00_5;
    let hi = stats.percentile_99_5;
    let voxels = volume.voxels.map(|v| {
        let centred = (v as f64).clamp(lo, hi) - stats.mean;
        if stats.std > 0.0 {
            (centred / stats.std) as f32
        } else {
            centred as f32
        }
    });
    Volume {
        voxels,
        spacing: volume.spacing,
        origin: volume.origin,
        meta: volume.meta.clone(),
        element_type: ElementType::Float,
    }
}
