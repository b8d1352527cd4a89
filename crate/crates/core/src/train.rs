//! Deterministic training loop: AdamW with decoupled weight decay, a single
//! cosine learning-rate cycle, dihedral and satellite-dropout augmentation.
//!
//! Every random choice is seeded from (master seed, epoch, tile index), and
//! all reductions run in a fixed order, so a run is reproducible bit for bit
//! at any thread count.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, ConfusionCounts};
use crate::model::{sigmoid, Checkpoint, CheckpointMeta, Element, Param, Tape, UNet};
use crate::seed;
use crate::stacker::{compute_stats, dihedral, normalize_with, satellite_dropout, ChannelStats, Dihedral, TileSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dihedral: bool,
    /// Upper bound on the fraction of present date slots forgotten per sample; 0 disables.
    pub dropout_max_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            lr_max: 1e-3,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            seed: 0,
            dihedral: true,
            dropout_max_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrainConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("need 0 < lr_min <= lr_max");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.dropout_max_fraction) {
            return bad("dropout_max_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    let total = total_steps.max(1);
    let frac = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| vec![T::ZERO; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.data.len()]).collect(),
            t: 0,
        }
    }
}

/// One AdamW update: bias-corrected moments plus decoupled weight decay,
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
pub fn adamw_step<T: Element>(
    params: &mut [Param<T>],
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let shapes_ok = grads.len() == params.len()
        && state.m.len() == params.len()
        && state.v.len() == params.len()
        && params.iter().zip(grads).zip(&state.m).zip(&state.v).all(|(((p, g), m), v)| {
            p.data.len() == g.len() && g.len() == m.len() && m.len() == v.len()
        });
    if !shapes_ok {
        return Err(Error::ShapeMismatch("adamw: parameters, gradients and moments differ".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidTrainConfig(format!("learning rate must be > 0, got {lr}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((theta, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.to_f64();
            let m_new = b1 * mi.to_f64() + (1.0 - b1) * gi;
            let v_new = b2 * vi.to_f64() + (1.0 - b2) * gi * gi;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let th = theta.to_f64();
            *theta = T::from_f64(th - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * th));
            *mi = T::from_f64(m_new);
            *vi = T::from_f64(v_new);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Pixel-weighted mean BCE over the epoch's (augmented) training batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_iou: Option<f64>,
}

pub struct FitResult {
    pub last: Checkpoint,
    /// Highest validation IoU seen; earliest epoch wins ties.
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochLog>,
}

/// Stats with mean 0 and std 1: leaves real values unchanged, maps fill to 0.
fn identity_stats(channels: usize) -> Vec<ChannelStats> {
    vec![ChannelStats { mean: 0.0, std: 1.0 }; channels]
}

/// Normalizes raw tiles with a checkpoint's stats (identity when absent).
pub fn prepare(samples: &[TileSample], stats: Option<&[ChannelStats]>) -> Result<Vec<TileSample>> {
    samples
        .par_iter()
        .map(|s| match stats {
            Some(st) => normalize_with(s, st),
            None => normalize_with(s, &identity_stats(s.channels)),
        })
        .collect()
}

fn check_channels(model: &UNet<f32>, samples: &[TileSample]) -> Result<()> {
    let expected = model.config().in_channels;
    match samples.iter().find(|s| s.channels != expected) {
        Some(s) => Err(Error::ChannelMismatch {
            expected,
            found: s.channels,
        }),
        None => Ok(()),
    }
}

/// Logits of already-normalized samples, one tape per sample. Samples are
/// independent, so the output does not depend on batching or threads.
pub fn predict_logits(model: &UNet<f32>, samples: &[TileSample]) -> Result<Vec<Vec<f32>>> {
    check_channels(model, samples)?;
    samples
        .par_iter()
        .map(|s| model.logits(&s.input, [1, s.channels, s.height, s.width]))
        .collect()
}

/// Sigmoid probabilities for raw tiles, normalized with the checkpoint's stats.
pub fn predict(ck: &Checkpoint, samples: &[TileSample]) -> Result<Vec<Vec<f32>>> {
    let prepared = prepare(samples, ck.meta.stats.as_deref())?;
    Ok(predict_logits(&ck.model, &prepared)?
        .into_iter()
        .map(|l| l.into_iter().map(sigmoid).collect())
        .collect())
}

fn bce_terms(logits: &[f32], s: &TileSample) -> (f64, u64) {
    let mut total = 0.0;
    let mut count = 0;
    for (&z, &t) in logits.iter().zip(&s.target) {
        if t > 1 {
            continue;
        }
        let (z, y) = (f64::from(z), f64::from(t));
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        count += 1;
    }
    (total, count)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Score {
    pub loss: Option<f64>,
    pub counts: ConfusionCounts,
}

/// Mean BCE and confusion counts (sigmoid >= 0.5) on normalized samples,
/// with no augmentation.
pub fn score(model: &UNet<f32>, samples: &[TileSample]) -> Result<Score> {
    let logits = predict_logits(model, samples)?;
    let mut loss = 0.0;
    let mut pixels = 0;
    let mut counts = ConfusionCounts::default();
    for (l, s) in logits.iter().zip(samples) {
        let (t, n) = bce_terms(l, s);
        loss += t;
        pixels += n;
        let probs: Vec<f32> = l.iter().map(|&z| sigmoid(z)).collect();
        counts += eval::confusion(&eval::binarize(&probs, eval::DEFAULT_THRESHOLD), &s.target, &s.ignore_mask())?;
    }
    Ok(Score {
        loss: (pixels > 0).then(|| loss / pixels as f64),
        counts,
    })
}

const SHUFFLE_TAG: &str = "shuffle";
const AUGMENT_TAG: &str = "augment";

/// Dropout then a uniformly drawn dihedral element, seeded per (epoch, tile).
fn augment(s: &TileSample, cfg: &TrainConfig, epoch: usize, index: usize) -> Result<TileSample> {
    let sample_seed = seed::derive(cfg.seed, &[seed::hash_str(AUGMENT_TAG), epoch as u64, index as u64]);
    let mut out = if cfg.dropout_max_fraction > 0.0 {
        satellite_dropout(s, sample_seed, cfg.dropout_max_fraction)
    } else {
        s.clone()
    };
    if cfg.dihedral {
        let element = seed::rng(sample_seed, &[1]).random_range(0..8u8);
        out = dihedral(&out, Dihedral::new(element).unwrap())?;
    }
    Ok(out)
}

fn stack_batch(batch: &[TileSample]) -> (Vec<f32>, [usize; 4], Vec<f32>, Vec<bool>) {
    let s0 = &batch[0];
    let shape = [batch.len(), s0.channels, s0.height, s0.width];
    let mut x = Vec::with_capacity(shape.iter().product());
    let mut y = Vec::with_capacity(batch.len() * s0.pixel_count());
    let mut ignore = Vec::with_capacity(y.capacity());
    for s in batch {
        x.extend_from_slice(&s.input);
        for &t in &s.target {
            y.push(if t == 1 { 1.0 } else { 0.0 });
            ignore.push(t > 1);
        }
    }
    (x, shape, y, ignore)
}

fn check_inputs(model: &UNet<f32>, train: &[TileSample], val: &[TileSample]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::InvalidTrainConfig("no training tiles".into()));
    }
    check_channels(model, train)?;
    check_channels(model, val)?;
    let unit = 1usize << model.config().depth;
    let (h, w) = (train[0].height, train[0].width);
    if let Some(s) = train.iter().chain(val).find(|s| s.height != h || s.width != w) {
        return Err(Error::ShapeMismatch(format!(
            "tile {} is {}x{}, others are {h}x{w}",
            s.id, s.height, s.width
        )));
    }
    if h % unit != 0 || w % unit != 0 {
        return Err(Error::IndivisibleSpatialDims {
            height: h,
            width: w,
            depth: model.config().depth,
        });
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::InvalidTrainConfig(format!("tile {} is in both train and validation", s.id)));
    }
    Ok(())
}

/// Trains `model` on raw (unnormalized) tiles. Normalization stats are fitted
/// on `train` and stored in every checkpoint. `on_epoch` sees each epoch's
/// log line and checkpoint as soon as the epoch ends.
pub fn fit(
    mut model: UNet<f32>,
    train: &[TileSample],
    val: &[TileSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<FitResult> {
    cfg.validate()?;
    check_inputs(&model, train, val)?;
    let stats = compute_stats(train);
    let train = prepare(train, Some(&stats))?;
    let val = prepare(val, Some(&stats))?;
    let checkpoint = |model: &UNet<f32>, epoch| Checkpoint {
        model: model.clone(),
        meta: CheckpointMeta {
            epoch,
            stats: Some(stats.clone()),
        },
    };

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut state = OptimizerState::new(model.params());
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[seed::hash_str(SHUFFLE_TAG), epoch as u64]));
        let mut loss_sum = 0.0;
        let mut pixel_sum = 0usize;
        let mut lr = cfg.lr_max;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TileSample> = chunk
                .par_iter()
                .map(|&i| augment(&train[i], cfg, epoch, i))
                .collect::<Result<_>>()?;
            let (x, shape, y, ignore) = stack_batch(&batch);
            let counted = ignore.iter().filter(|i| !**i).count();
            if counted == 0 {
                // Nothing to learn from; the schedule still advances.
                step += 1;
                continue;
            }
            let mut tape = Tape::new();
            let xv = tape.leaf(&shape, x, false)?;
            let (logits, pv) = model.forward(&mut tape, xv, true)?;
            let loss = tape.bce_with_logits(logits, &y, &ignore)?;
            let lv = tape.value(loss)[0];
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = pv
                .iter()
                .map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
                .collect();
            drop(tape);
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            adamw_step(model.params_mut(), &grads, &mut state, lr, cfg)?;
            step += 1;
            loss_sum += f64::from(lv) * counted as f64;
            pixel_sum += counted;
        }

        let val_score = score(&model, &val)?;
        let m = eval::metrics(&val_score.counts);
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: if pixel_sum > 0 { loss_sum / pixel_sum as f64 } else { f64::NAN },
            val_loss: val_score.loss,
            val_accuracy: m.pixel_accuracy,
            val_f1: m.f1,
            val_iou: m.iou,
        };
        let ck = checkpoint(&model, epoch);
        on_epoch(&entry, &ck)?;
        if let Some(iou) = entry.val_iou {
            if best.as_ref().is_none_or(|(b, _)| iou > *b) {
                best = Some((iou, ck));
            }
        }
        log.push(entry);
    }
    Ok(FitResult {
        last: checkpoint(&model, cfg.epochs),
        best: best.map(|(_, c)| c),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(theta: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "p".into(),
            shape: vec![1],
            data: vec![theta],
        }]
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-6), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-6) - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=37).map(|s| cosine_lr(s, 37, 0.1, 0.01)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_noop() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar(0.75);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &[vec![0.0]], &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p[0].data[0], 0.75);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adamw_single_step() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &[vec![1.0]], &mut st, 0.001, &cfg).unwrap();
        // m_hat = v_hat = 1 after bias correction
        assert!((p[0].data[0] - (1.0 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_only() {
        let cfg = TrainConfig {
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut p = scalar(2.0);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &[vec![0.0]], &mut st, 0.1, &cfg).unwrap();
        assert!((p[0].data[0] - 1.998).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_mismatched_shapes() {
        let cfg = TrainConfig::default();
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p);
        assert!(matches!(
            adamw_step(&mut p, &[vec![0.0, 1.0]], &mut st, 0.1, &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr_min: 1.0, lr_max: 0.1, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { eps: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.batch_size, 32);
    }
}
