//! Class-weighted binary cross-entropy and batch gradients.

use ndarray::Axis;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use csvit_core::tokenizer::PaddedBatch;

use crate::config::ModelConfig;
use crate::error::{NnError, Result};
use crate::model::{backward_sample, forward_sample};
use crate::params::ModelParams;

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[w·y·log σ(z) + (1-y)·log(1-σ(z))]`.
pub fn weighted_bce(logit: f64, label: u8, pos_weight: f64) -> f64 {
    let y = f64::from(label);
    pos_weight * y * softplus(-logit) + (1.0 - y) * softplus(logit)
}

/// Derivative of [`weighted_bce`] with respect to the logit.
pub fn weighted_bce_grad(logit: f64, label: u8, pos_weight: f64) -> f64 {
    let y = f64::from(label);
    let p = sigmoid(logit);
    pos_weight * y * (p - 1.0) + (1.0 - y) * p
}

/// Negative-to-positive ratio of the given labels.
pub fn pos_weight(labels: &[u8]) -> Result<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(NnError::Config("no positive samples to weight".into()));
    }
    Ok(neg as f64 / pos as f64)
}

/// Mean weighted BCE over the batch and its exact gradient.
///
/// `dropout_seed` switches on training mode; each subject draws its
/// dropout masks from its own stream, so results do not depend on the
/// number of worker threads. Per-subject gradients are summed in subject
/// order.
pub fn loss_and_grad(
    batch: &PaddedBatch,
    labels: &[u8],
    pos_weight: f64,
    params: &ModelParams,
    cfg: &ModelConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelParams)> {
    let b = batch.batch_size();
    if labels.len() != b {
        return Err(NnError::Shape(format!("{} labels for {b} subjects", labels.len())));
    }
    let parts: Vec<(f64, ModelParams)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
            let x = batch.x.index_axis(Axis(0), i);
            let (z, trace) = forward_sample(
                x,
                batch.mask.view(),
                params,
                cfg,
                rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
            )?;
            let dz = weighted_bce_grad(z, labels[i], pos_weight) / b as f64;
            Ok((weighted_bce(z, labels[i], pos_weight), backward_sample(&trace, dz, params, cfg)))
        })
        .collect::<Result<_>>()?;
    let mut grad = ModelParams::zeros(cfg);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.axpy(1.0, g);
    }
    Ok((loss / b as f64, grad))
}

/// Mean weighted BCE in eval mode.
pub fn loss(
    batch: &PaddedBatch,
    labels: &[u8],
    pos_weight: f64,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64> {
    let logits = crate::model::forward(batch, params, cfg)?;
    if labels.len() != logits.len() {
        return Err(NnError::Shape(format!("{} labels for {} subjects", labels.len(), logits.len())));
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| weighted_bce(z, y, pos_weight))
        .sum();
    Ok(total / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn closed_form_values() {
        assert!((weighted_bce(0.0, 1, 3.0) - 3.0 * LN_2).abs() < 1e-12);
        for w in [0.1, 1.0, 7.5] {
            assert!((weighted_bce(0.0, 0, w) - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_at_extremes() {
        assert!(weighted_bce(1000.0, 1, 1.0) < 1e-12);
        assert!((weighted_bce(-1000.0, 1, 1.0) - 1000.0).abs() < 1e-9);
        assert!(weighted_bce(-1000.0, 0, 1.0).is_finite());
        assert!(weighted_bce(1e308, 0, 2.0).is_finite());
    }

    #[test]
    fn non_negative() {
        for &z in &[-30.0, -1.0, 0.0, 2.0, 40.0] {
            for y in [0, 1] {
                assert!(weighted_bce(z, y, 2.0) >= 0.0);
            }
        }
    }

    #[test]
    fn grad_matches_difference() {
        for &z in &[-4.0, -0.3, 0.0, 1.2] {
            for y in [0, 1] {
                let h = 1e-6;
                let fd = (weighted_bce(z + h, y, 3.0) - weighted_bce(z - h, y, 3.0)) / (2.0 * h);
                assert!((fd - weighted_bce_grad(z, y, 3.0)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pos_weight_is_ratio() {
        let mut labels = vec![0u8; 30];
        labels.extend([1u8; 10]);
        assert_eq!(pos_weight(&labels).unwrap(), 3.0);
        assert!(pos_weight(&[0, 0]).is_err());
    }
}
