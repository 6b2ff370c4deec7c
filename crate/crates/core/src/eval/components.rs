//! Connected-component post-processing and the decision whether to use it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::dice_score;
use crate::io::{Grid, LabelMask, NUM_CLASSES};

/// Per class, whether to keep only the largest connected component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocessingPolicy {
    /// Indexed by label; entry 0 (background) is always false.
    pub suppress: Vec<bool>,
}

impl PostprocessingPolicy {
    pub fn none() -> Self {
        PostprocessingPolicy {
            suppress: vec![false; NUM_CLASSES],
        }
    }

    pub fn only(class: u8) -> Self {
        let mut p = Self::none();
        p.suppress[class as usize] = true;
        p
    }

    pub fn suppresses(&self, class: u8) -> bool {
        self.suppress.get(class as usize).copied().unwrap_or(false)
    }
}

/// 26-connected components of `class`, as lists of linear indices in the
/// order their first voxel appears in a raster scan.
pub fn components(labels: &Grid<u8>, class: u8) -> Vec<Vec<usize>> {
    let d = labels.dims();
    let data = labels.as_slice();
    let mut seen = vec![false; data.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] != class || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y, z) = (i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1]));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if nx < 0 || ny < 0 || nz < 0 {
                            continue;
                        }
                        let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                        if nx >= d[0] || ny >= d[1] || nz >= d[2] {
                            continue;
                        }
                        let j = labels.index(nx, ny, nz);
                        if !seen[j] && data[j] == class {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Relabels all but the largest component of each suppressed class to
/// background. Equal-sized components resolve to the one found first.
pub fn largest_components(mask: &LabelMask, policy: &PostprocessingPolicy) -> LabelMask {
    let mut out = mask.clone();
    for class in 1..NUM_CLASSES as u8 {
        if !policy.suppresses(class) {
            continue;
        }
        let comps = components(&mask.labels, class);
        let mut keep = 0;
        for (i, c) in comps.iter().enumerate() {
            if c.len() > comps[keep].len() {
                keep = i;
            }
        }
        let labels = out.labels.as_mut_slice();
        for (i, c) in comps.iter().enumerate() {
            if i != keep {
                c.iter().for_each(|&v| labels[v] = 0);
            }
        }
    }
    out
}

/// Suppression for a class is chosen iff it does not lower the mean Dice of
/// that class over the pairs `(prediction, ground truth)`.
pub fn decide_postprocessing(pairs: &[(LabelMask, LabelMask)]) -> Result<PostprocessingPolicy> {
    if pairs.is_empty() {
        return Err(Error::Precondition("post-processing decision needs at least one pair".into()));
    }
    let mut policy = PostprocessingPolicy::none();
    for class in 1..NUM_CLASSES as u8 {
        let single = PostprocessingPolicy::only(class);
        let (mut without, mut with) = (0.0, 0.0);
        for (pred, gt) in pairs {
            without += dice_score(pred, gt, class)?;
            with += dice_score(&largest_components(pred, &single), gt, class)?;
        }
        policy.suppress[class as usize] = with / pairs.len() as f64 >= without / pairs.len() as f64;
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs() -> LabelMask {
        let mut g = Grid::filled([10, 4, 1], 0u8).unwrap();
        for x in 0..5 {
            for y in 0..2 {
                g.set(x, y, 0, 1);
            }
        }
        for x in 8..10 {
            g.set(x, 3, 0, 1);
        }
        g.set(9, 2, 0, 1);
        LabelMask::new(g, [1.0; 3]).unwrap()
    }

    #[test]
    fn keeps_largest_blob() {
        let m = two_blobs();
        assert_eq!(components(&m.labels, 1).iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 3]);
        let out = largest_components(&m, &PostprocessingPolicy::only(1));
        assert_eq!(out.count(1), 10);
        assert_eq!(largest_components(&out, &PostprocessingPolicy::only(1)), out);
        assert_eq!(largest_components(&m, &PostprocessingPolicy::none()), m);
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let mut g = Grid::filled([3, 3, 3], 0u8).unwrap();
        g.set(0, 0, 0, 2);
        g.set(1, 1, 1, 2);
        g.set(2, 2, 2, 2);
        assert_eq!(components(&g, 2).len(), 1);
    }

    #[test]
    fn decision_follows_dominance() {
        let pred = two_blobs();
        // ground truth is only the big blob: suppression helps
        let gt = largest_components(&pred, &PostprocessingPolicy::only(1));
        let p = decide_postprocessing(&[(pred.clone(), gt)]).unwrap();
        assert!(p.suppresses(1));
        // ground truth has both blobs: suppression hurts
        let p = decide_postprocessing(&[(pred.clone(), pred)]).unwrap();
        assert!(!p.suppresses(1));
        assert!(decide_postprocessing(&[]).is_err());
    }
}
