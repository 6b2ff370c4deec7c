//! Per-volume presence scores and ROC analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::percentile_select;
use crate::train::ProbabilityMap;

/// How a class probability channel collapses to one presence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    /// Percentile (0-100) of the channel over all voxels.
    Percentile(f64),
    Max,
    /// Fraction of voxels with probability at least 0.5.
    VolumeFraction,
}

impl Default for Reducer {
    fn default() -> Self {
        Reducer::Percentile(99.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub volume: String,
    pub class: u8,
    pub score: f64,
    pub truth: bool,
}

pub fn detection_score(prob: &ProbabilityMap, c: usize, reducer: Reducer) -> f64 {
    let ch = prob.channel(c);
    match reducer {
        Reducer::Percentile(q) => percentile_select(&mut ch.to_vec(), q),
        Reducer::Max => ch.iter().copied().fold(0.0, f64::max),
        Reducer::VolumeFraction => ch.iter().filter(|&&p| p >= 0.5).count() as f64 / ch.len() as f64,
    }
}

fn check(records: &[DetectionRecord]) -> Result<(u64, u64)> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Domain(format!("non-finite score for {}", r.volume)));
    }
    let pos = records.iter().filter(|r| r.truth).count() as u64;
    let neg = records.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Records grouped by descending score; each group is (score, tp, fp).
fn tie_groups(records: &[DetectionRecord]) -> Vec<(f64, u64, u64)> {
    let mut sorted: Vec<&DetectionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for r in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == r.score => {
                if r.truth {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((r.score, r.truth as u64, (!r.truth) as u64)),
        }
    }
    groups
}

/// Trapezoidal area under the ROC curve over every distinct threshold.
/// The area is accumulated in integers and divided once, so it depends only
/// on the order of the scores.
pub fn roc_auc(records: &[DetectionRecord]) -> Result<f64> {
    let (pos, neg) = check(records)?;
    let mut tp = 0u128;
    let mut twice_area = 0u128;
    for (_, gtp, gfp) in tie_groups(records) {
        twice_area += gfp as u128 * (2 * tp + gtp as u128);
        tp += gtp as u128;
    }
    Ok(twice_area as f64 / (2 * pos as u128 * neg as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Curve vertices from (0, 0) at threshold +inf down to (1, 1).
pub fn roc_points(records: &[DetectionRecord]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check(records)?;
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (s, gtp, gfp) in tie_groups(records) {
        tp += gtp;
        fp += gfp;
        pts.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(pts)
}
