//! Finite-difference verification of the analytic loss gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{Network, Tensor};
use crate::train::loss::dice_ce_loss_logits;

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst offender: (parameter, offset, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn loss(net: &Network, x: &Tensor, target: &[u8]) -> Result<f64> {
    Ok(dice_ce_loss_logits(&net.forward(x)?, target)?.0.loss)
}

/// Compares backprop against central differences on `samples` randomly
/// chosen convolution weights (conv and transposed-conv kernels).
pub fn gradient_check(net: &Network, x: &Tensor, target: &[u8], samples: usize, seed: u64) -> Result<GradCheckReport> {
    let (logits, cache) = net.forward_train(x)?;
    let (_, grad_logits) = dice_ce_loss_logits(&logits, target)?;
    let grads = net.backward(&cache, &grad_logits);
    drop(cache);

    let mut pool: Vec<(String, usize)> = Vec::new();
    for (name, t) in &net.params.tensors {
        if name.ends_with(".weight") {
            pool.extend((0..t.data.len()).map(|i| (name.clone(), i)));
        }
    }
    if pool.is_empty() {
        return Err(Error::Precondition("network has no weights to check".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, pool.len(), samples.min(pool.len()));

    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for k in picks.iter() {
        let (name, i) = &pool[k];
        let orig = probe.params.get(name)[*i];
        probe.params.get_mut(name)[*i] = orig + STEP;
        let lp = loss(&probe, x, target)?;
        probe.params.get_mut(name)[*i] = orig - STEP;
        let lm = loss(&probe, x, target)?;
        probe.params.get_mut(name)[*i] = orig;
        let numeric = (lp - lm) / (2.0 * STEP);
        let analytic = grads.get(name)[*i];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.clone(), *i, analytic, numeric));
        }
        report.checked += 1;
    }
    Ok(report)
}
