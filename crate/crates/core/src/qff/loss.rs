//! Temperature-scaled contrastive loss over one positive and M negatives.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
}

/// `-log(exp(pos/tau) / (exp(pos/tau) + sum_m exp(neg_m/tau)))`.
pub fn contrastive_loss(pos: f64, negs: &[f64], tau: f64) -> Result<f64> {
    contrastive_loss_grad(pos, negs, tau).map(|v| v.loss)
}

/// Loss value and its derivatives with respect to every score.
pub fn contrastive_loss_grad(pos: f64, negs: &[f64], tau: f64) -> Result<LossValue> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("tau", "must be > 0"));
    }
    if negs.is_empty() {
        return Ok(LossValue {
            loss: 0.0,
            d_pos: 0.0,
            d_negs: Vec::new(),
        });
    }
    let z_pos = pos / tau;
    let z_negs: Vec<f64> = negs.iter().map(|n| n / tau).collect();
    let max_neg = z_negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (loss, shift) = if z_pos >= max_neg {
        // log(1 + sum exp(z_m - z_pos)), accurate when the positive dominates
        let rest: f64 = z_negs.iter().map(|z| (z - z_pos).exp()).sum();
        (rest.ln_1p(), z_pos)
    } else {
        let total = (z_pos - max_neg).exp() + z_negs.iter().map(|z| (z - max_neg).exp()).sum::<f64>();
        (max_neg - z_pos + total.ln(), max_neg)
    };
    let e_pos = (z_pos - shift).exp();
    let e_negs: Vec<f64> = z_negs.iter().map(|z| (z - shift).exp()).collect();
    let denom = e_pos + e_negs.iter().sum::<f64>();
    // d/dpos = (p_pos - 1)/tau written as -(sum of negative probs)/tau
    let neg_mass: f64 = e_negs.iter().sum::<f64>() / denom;
    Ok(LossValue {
        loss: loss.max(0.0),
        d_pos: -neg_mass / tau,
        d_negs: e_negs.iter().map(|e| e / denom / tau).collect(),
    })
}
