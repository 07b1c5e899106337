//! Analytic gradients versus central finite differences.

use ndarray::{Array2, Array4};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use csvit_core::tokenizer::PaddedBatch;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::loss::{loss, loss_and_grad};
use crate::params::ModelParams;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const MIN_COORDINATES: usize = 200;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    /// Parameter with the largest error.
    pub worst: String,
    pub checked: usize,
    pub step: f64,
}

/// A random problem: perturbed parameters, a few subjects with ragged
/// masks, mixed labels.
pub fn random_problem(cfg: &ModelConfig, seed: u64) -> (ModelParams, PaddedBatch, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init_cfg = ModelConfig { rng_seed: seed, ..cfg.clone() };
    let mut params = ModelParams::init(&init_cfg);
    // Non-trivial gains, biases and positions so every path carries signal.
    let jitter = Normal::new(0.0, 0.3).unwrap();
    for mut t in params.tensors_mut() {
        t.mapv_inplace(|v| v + jitter.sample(&mut rng));
    }
    let (n, w) = (cfg.num_tokens, cfg.v_max);
    let mut mask = Array2::zeros((n, w));
    for i in 0..n {
        let len = rng.random_range(1..=w);
        for j in 0..len {
            mask[[i, j]] = 1.0;
        }
    }
    let b = 3;
    let unit = Normal::new(0.0, 1.0).unwrap();
    let x = Array4::from_shape_simple_fn((b, cfg.channels, n, w), || unit.sample(&mut rng));
    let batch = PaddedBatch::from_raw(x, mask).expect("matching shapes");
    (params, batch, vec![1, 0, 1])
}

/// Max relative error `|a − f| / max(1e-8, |a| + |f|)` over at least
/// [`MIN_COORDINATES`] random coordinates (all of them if fewer exist).
pub fn grad_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckResult> {
    grad_check_with_step(cfg, seed, DEFAULT_STEP)
}

pub fn grad_check_with_step(cfg: &ModelConfig, seed: u64, step: f64) -> Result<GradCheckResult> {
    cfg.validate()?;
    // Dropout is a training-time perturbation; the check runs in eval mode.
    let cfg = ModelConfig { dropout: 0.0, ..cfg.clone() };
    let (params, batch, labels) = random_problem(&cfg, seed);
    let pos_weight = 1.7;
    let (_, grad) = loss_and_grad(&batch, &labels, pos_weight, &params, &cfg, None)?;
    let total = params.num_values();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut coords = sample(&mut rng, total, MIN_COORDINATES.min(total)).into_vec();
    coords.sort_unstable();
    let mut worst = (0.0f64, String::new());
    let mut probe = params.clone();
    for &idx in &coords {
        let orig = params.get_flat(idx);
        probe.set_flat(idx, orig + step);
        let up = loss(&batch, &labels, pos_weight, &probe, &cfg)?;
        probe.set_flat(idx, orig - step);
        let down = loss(&batch, &labels, pos_weight, &probe, &cfg)?;
        probe.set_flat(idx, orig);
        let fd = (up - down) / (2.0 * step);
        let a = grad.get_flat(idx);
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, params.flat_name(idx));
        }
    }
    Ok(GradCheckResult {
        max_rel_error: worst.0,
        worst: worst.1,
        checked: coords.len(),
        step,
    })
}
