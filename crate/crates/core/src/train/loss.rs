//! Cross-entropy plus soft-Dice loss.

use crate::error::{Error, Result};
use crate::net::ops::softmax_channels;
use crate::net::ops::softmax_backward;
use crate::net::Tensor;

/// Smoothing term of the soft-Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Probability floor inside the logarithm.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub cross_entropy: f64,
    /// Soft-Dice per foreground class (index 0 is class 1).
    pub soft_dice: Vec<f64>,
}

fn check(probs: &Tensor, target: &[u8]) -> Result<()> {
    if target.len() != probs.batch * probs.spatial() {
        return Err(Error::Shape(format!(
            "target has {} voxels, probabilities cover {}",
            target.len(),
            probs.batch * probs.spatial()
        )));
    }
    if probs.channels < 2 {
        return Err(Error::Shape("loss needs at least two classes".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= probs.channels) {
        return Err(Error::Shape(format!("target label {bad} out of range")));
    }
    Ok(())
}

/// Per-class sums over the whole batch: (sum p*t, sum p, sum t).
fn dice_sums(probs: &Tensor, target: &[u8]) -> Vec<(f64, f64, f64)> {
    let s = probs.spatial();
    let mut sums = vec![(0.0, 0.0, 0.0); probs.channels];
    for n in 0..probs.batch {
        let t = &target[n * s..(n + 1) * s];
        for (c, acc) in sums.iter_mut().enumerate() {
            let p = probs.channel(n, c);
            for (pv, &tv) in p.iter().zip(t) {
                acc.1 += pv;
                if tv as usize == c {
                    acc.0 += pv;
                    acc.2 += 1.0;
                }
            }
        }
    }
    sums
}

fn evaluate(probs: &Tensor, target: &[u8], sums: &[(f64, f64, f64)]) -> LossValue {
    let s = probs.spatial();
    let mut ce = 0.0;
    for n in 0..probs.batch {
        let sample = probs.sample(n);
        for (v, &t) in target[n * s..(n + 1) * s].iter().enumerate() {
            ce -= sample[t as usize * s + v].max(LOG_FLOOR).ln();
        }
    }
    ce /= target.len() as f64;
    let soft_dice: Vec<f64> = sums[1..]
        .iter()
        .map(|&(i, p, t)| (2.0 * i + DICE_EPS) / (p + t + DICE_EPS))
        .collect();
    let mean_dice = soft_dice.iter().sum::<f64>() / soft_dice.len() as f64;
    LossValue {
        loss: ce + (1.0 - mean_dice),
        cross_entropy: ce,
        soft_dice,
    }
}

/// Loss of per-voxel class probabilities against integer labels laid out
/// `batch x spatial`. Soft-Dice is pooled over the batch and averaged over
/// the foreground classes.
pub fn dice_ce_loss(probs: &Tensor, target: &[u8]) -> Result<LossValue> {
    check(probs, target)?;
    let sums = dice_sums(probs, target);
    Ok(evaluate(probs, target, &sums))
}

/// Loss from raw network scores together with its gradient w.r.t. them.
pub fn dice_ce_loss_logits(logits: &Tensor, target: &[u8]) -> Result<(LossValue, Tensor)> {
    let probs = softmax_channels(logits);
    check(&probs, target)?;
    let sums = dice_sums(&probs, target);
    let value = evaluate(&probs, target, &sums);

    let s = probs.spatial();
    let voxels = target.len() as f64;
    let fg = (probs.channels - 1) as f64;
    // Dice part: d(-mean dice)/dp, pushed through the softmax.
    let mut grad_p = Tensor::zeros(probs.batch, probs.channels, probs.dims);
    for n in 0..probs.batch {
        let t = &target[n * s..(n + 1) * s];
        for (c, &(i, p, tc)) in sums.iter().enumerate().skip(1) {
            let denom = p + tc + DICE_EPS;
            let num = 2.0 * i + DICE_EPS;
            let on = -(2.0 * denom - num) / (denom * denom * fg);
            let off = num / (denom * denom * fg);
            for (g, &tv) in grad_p.channel_mut(n, c).iter_mut().zip(t) {
                *g = if tv as usize == c { on } else { off };
            }
        }
    }
    let mut grad = softmax_backward(&probs, &grad_p);
    // Cross-entropy part has the closed form (p - onehot) / V in logit space.
    for n in 0..probs.batch {
        let t = &target[n * s..(n + 1) * s];
        let p = probs.sample(n);
        let g = grad.sample_mut(n);
        for c in 0..probs.channels {
            for (v, &tv) in t.iter().enumerate() {
                let onehot = if tv as usize == c { 1.0 } else { 0.0 };
                g[c * s + v] += (p[c * s + v] - onehot) / voxels;
            }
        }
    }
    Ok((value, grad))
}
