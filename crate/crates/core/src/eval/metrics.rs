//! Overlap and volume metrics on label masks.

use crate::error::{Error, Result};
use crate::io::LabelMask;

fn check_dims(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction dims {:?} differ from ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `2|X∩Y| / (|X|+|Y|)` for class `c`; two empty sets agree perfectly (1.0).
pub fn dice_score(pred: &LabelMask, gt: &LabelMask, c: u8) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut x, mut y, mut both) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.labels.as_slice().iter().zip(gt.labels.as_slice()) {
        let (a, b) = (p == c, g == c);
        x += a as u64;
        y += b as u64;
        both += (a && b) as u64;
    }
    if x + y == 0 {
        return Ok(1.0);
    }
    Ok((2 * both) as f64 / (x + y) as f64)
}

/// Absolute volume difference of class `c` in mm³.
pub fn avd(pred: &LabelMask, gt: &LabelMask, c: u8, spacing: [f64; 3]) -> Result<f64> {
    check_dims(pred, gt)?;
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Domain(format!("spacing must be positive, got {spacing:?}")));
    }
    let a = pred.count(c) as i64;
    let b = gt.count(c) as i64;
    Ok((a - b).unsigned_abs() as f64 * spacing.iter().product::<f64>())
}

/// mm³ to millilitres.
pub fn mm3_to_ml(mm3: f64) -> f64 {
    mm3 / 1000.0
}
