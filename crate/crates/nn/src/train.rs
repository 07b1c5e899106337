//! Cross-validated training: fixed stratified folds, a stratified
//! validation holdout inside each training split, SGD with momentum and
//! cosine decay, early stopping on validation AUROC.

use std::f64::consts::PI;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use csvit_core::metrics::{auroc, best_threshold, evaluate, FoldMetrics, Report};
use csvit_core::tokenizer::{fit_channel_stats, standardize, ChannelStats, PaddedBatch};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{NnError, Result};
use crate::loss::{loss_and_grad, pos_weight, weighted_bce};
use crate::model::forward;
use crate::params::ModelParams;

fn rng_for(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut s = seed;
    for &x in stream {
        s = s.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(x.wrapping_add(1));
    }
    ChaCha8Rng::seed_from_u64(s)
}

fn split_classes(indices: &[usize], labels: &[u8]) -> (Vec<usize>, Vec<usize>) {
    indices.iter().partition(|&&i| labels[i] == 1)
}

/// Fold of each subject: each class is shuffled and dealt round-robin,
/// so every fold has near-equal class counts.
pub fn stratified_folds(labels: &[u8], folds: usize, seed: u64) -> Vec<usize> {
    let all: Vec<usize> = (0..labels.len()).collect();
    let (mut pos, mut neg) = split_classes(&all, labels);
    let mut rng = rng_for(seed, &[0xF01D]);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out = vec![0; labels.len()];
    for (j, &i) in neg.iter().chain(&pos).enumerate() {
        out[i] = j % folds;
    }
    out
}

/// Splits `indices` into (train, validation) with `round(fraction · n_c)`
/// validation subjects per class, at least one per class when the class
/// has two or more subjects.
pub fn stratified_holdout(
    indices: &[usize],
    labels: &[u8],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let (mut pos, mut neg) = split_classes(indices, labels);
    let mut rng = rng_for(seed, &[0x7A1]);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [neg, pos] {
        let mut take = (fraction * class.len() as f64).round() as usize;
        if fraction > 0.0 && take == 0 && class.len() >= 2 {
            take = 1;
        }
        val.extend_from_slice(&class[..take]);
        train.extend_from_slice(&class[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, Serialize)]
pub struct FitLog {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub final_train_loss: f64,
}

fn labels_of(idx: &[usize], labels: &[u8]) -> Vec<u8> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Trains one model on `train`, early-stopping on `val` AUROC when the
/// validation set has both classes.
pub fn fit(
    batch: &PaddedBatch,
    labels: &[u8],
    train: &[usize],
    val: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<(ModelParams, FitLog)> {
    let train_labels = labels_of(train, labels);
    let pw = pos_weight(&train_labels)?;
    let mut params = ModelParams::init(&ModelConfig {
        rng_seed: model_cfg.rng_seed ^ cfg.seed.wrapping_add(stream),
        ..model_cfg.clone()
    });
    let mut velocity = ModelParams::zeros(model_cfg);
    let val_batch = batch.select(val);
    let val_labels = labels_of(val, labels);
    let val_usable = val_labels.contains(&0) && val_labels.contains(&1);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    let mut best: Option<(f64, f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut log = FitLog {
        epochs_run: 0,
        best_epoch: 0,
        best_val_auroc: None,
        final_train_loss: f64::NAN,
    };
    let mut order = train.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &[stream, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let sub = batch.select(chunk);
            let sub_labels = labels_of(chunk, labels);
            let dropout_seed = rng_seed_mix(cfg.seed, stream, epoch, b);
            let (loss, mut grad) =
                loss_and_grad(&sub, &sub_labels, pw, &params, model_cfg, Some(dropout_seed))?;
            epoch_loss += loss * chunk.len() as f64;
            grad.axpy(cfg.weight_decay, &params);
            let lr = cfg.lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos());
            velocity.scale(cfg.momentum);
            velocity.axpy(1.0, &grad);
            params.axpy(-lr, &velocity);
            step += 1;
        }
        if !params.is_finite() {
            return Err(NnError::NonFinite { stage: format!("update in epoch {epoch}") });
        }
        log.epochs_run = epoch + 1;
        log.final_train_loss = epoch_loss / train.len() as f64;
        if val_usable {
            let logits = forward(&val_batch, &params, model_cfg)?;
            let score = auroc(&logits, &val_labels)?;
            // Small validation sets saturate AUROC; ties go to lower loss.
            let val_loss = mean_bce(&logits, &val_labels, pw);
            if best.as_ref().is_none_or(|(s, l, _, _)| score > *s || (score == *s && val_loss < *l)) {
                best = Some((score, val_loss, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    match best {
        Some((score, _, epoch, p)) => {
            log.best_epoch = epoch;
            log.best_val_auroc = Some(score);
            Ok((p, log))
        }
        None => {
            log.best_epoch = log.epochs_run.saturating_sub(1);
            Ok((params, log))
        }
    }
}

fn mean_bce(logits: &[f64], labels: &[u8], pos_weight: f64) -> f64 {
    let total: f64 = logits.iter().zip(labels).map(|(&z, &y)| weighted_bce(z, y, pos_weight)).sum();
    total / logits.len() as f64
}

fn rng_seed_mix(seed: u64, stream: u64, epoch: usize, batch: usize) -> u64 {
    let mut r = rng_for(seed, &[stream, epoch as u64, batch as u64, 0xD50]);
    rand::Rng::random(&mut r)
}

/// Outcome of k-fold cross-validation.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub report: Report,
    pub fold_of: Vec<usize>,
    pub logs: Vec<FitLog>,
    /// Trained parameters and channel statistics of each completed fold.
    pub models: Vec<(usize, ModelParams, Option<ChannelStats>)>,
}

pub fn cross_validate(
    batch: &PaddedBatch,
    labels: &[u8],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<CrossValidation> {
    model_cfg.validate()?;
    cfg.validate()?;
    if labels.len() != batch.batch_size() {
        return Err(NnError::Shape(format!(
            "{} labels for {} subjects",
            labels.len(),
            batch.batch_size()
        )));
    }
    let (_, c, n, w) = batch.x.dim();
    if (c, n, w) != (model_cfg.channels, model_cfg.num_tokens, model_cfg.v_max) {
        return Err(NnError::Shape(format!(
            "batch ({c}, {n}, {w}) does not match model channels/tokens/v_max ({}, {}, {})",
            model_cfg.channels, model_cfg.num_tokens, model_cfg.v_max
        )));
    }
    let fold_of = stratified_folds(labels, cfg.folds, cfg.seed);
    let mut folds = Vec::new();
    let mut skipped = Vec::new();
    let mut logs = Vec::new();
    let mut models = Vec::new();
    for f in 0..cfg.folds {
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let rest: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
        let (train, val) = stratified_holdout(&rest, labels, cfg.val_fraction, cfg.seed ^ f as u64);
        let single = |idx: &[usize]| {
            let l = labels_of(idx, labels);
            !(l.contains(&0) && l.contains(&1))
        };
        if single(&test) || single(&train) {
            warn!("stage=train fold={f} skipped=single_class");
            skipped.push(f);
            continue;
        }
        let (fold_batch, stats) = if cfg.standardize {
            let stats = fit_channel_stats(batch, &train);
            let mut b = batch.clone();
            standardize(&mut b, &stats);
            (b, Some(stats))
        } else {
            (batch.clone(), None)
        };
        let (params, log) = fit(&fold_batch, labels, &train, &val, model_cfg, cfg, f as u64)?;
        let test_batch = fold_batch.select(&test);
        let test_labels = labels_of(&test, labels);
        let logits = forward(&test_batch, &params, model_cfg)?;
        let tuned = if single(&val) {
            0.0
        } else {
            let val_logits = forward(&fold_batch.select(&val), &params, model_cfg)?;
            best_threshold(&val_logits, &labels_of(&val, labels))?
        };
        let m = FoldMetrics {
            fold: f,
            test: evaluate(&logits, &test_labels, 0.0)?,
            test_tuned: evaluate(&logits, &test_labels, tuned)?,
            best_epoch: log.best_epoch,
            val_auroc: log.best_val_auroc.unwrap_or(f64::NAN),
        };
        info!(
            "stage=train fold={f} train={} val={} test={} epochs={} best_epoch={} test_auroc={:.4}",
            train.len(),
            val.len(),
            test.len(),
            log.epochs_run,
            log.best_epoch,
            m.test.auroc
        );
        folds.push(m);
        logs.push(log);
        models.push((f, params, stats));
    }
    Ok(CrossValidation {
        report: Report::from_folds(folds, skipped),
        fold_of,
        logs,
        models,
    })
}
