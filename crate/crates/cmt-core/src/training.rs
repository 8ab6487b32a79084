//! Optimization: binary cross-entropy objective, Adam, the warmup + cosine
//! learning-rate schedule, and an augmented training loop over labelled
//! images.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffa::{build_masks, fuse, FfaConfig, RegionMode};
use crate::metrics::{binarize, confusion, report};
use crate::model::{CmtModel, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Augmented samples added per real sample each epoch (1 = doubled).
    pub ffa_per_sample: usize,
    pub ffa_patch: usize,
    pub ffa_alpha: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-5,
            lr_min: 0.0,
            warmup_steps: 0,
            total_steps: 0, // filled in from the dataset by the caller
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 20,
            ffa_per_sample: 1,
            ffa_patch: 2,
            ffa_alpha: 0.2,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default schedule for the synthetic descent check: the toy problem is
    /// tiny, so it takes a much larger peak rate than a full-scale run.
    pub fn toy(per_class: usize) -> Self {
        let mut cfg = TrainConfig {
            lr_max: 3e-3,
            warmup_steps: 5,
            ..TrainConfig::default()
        };
        cfg.total_steps = cfg.epochs * steps_per_epoch(4 * per_class, &cfg);
        cfg
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lr_max > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr_max {
            return Err(Error::config(format!(
                "learning rates: max {} min {}",
                self.lr_max, self.lr_min
            )));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "schedule: {} warmup of {} total steps",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!(
                "adam betas: {} {}",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }

    pub fn ffa_config(&self) -> FfaConfig {
        FfaConfig {
            patch: self.ffa_patch,
            alpha: self.ffa_alpha,
            position: None,
            region: RegionMode::Strict,
        }
    }
}

/// Learning rate for a zero-based global step: linear ramp to `lr_max`
/// across the warmup, then half-cosine decay to `lr_min` at the final step.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> Result<f64> {
    cfg.check()?;
    if step >= cfg.total_steps {
        return Err(Error::Schedule(format!(
            "step {} past schedule end {}",
            step, cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_max * (step + 1) as f64 / cfg.warmup_steps as f64);
    }
    let t_cur = (step - cfg.warmup_steps) as f64;
    let t_max = (cfg.total_steps - 1 - cfg.warmup_steps) as f64;
    if t_max == 0.0 {
        return Ok(cfg.lr_max);
    }
    Ok(cfg.lr_min
        + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t_cur / t_max).cos()))
}

// ---- Adam ------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

/// One bias-corrected Adam update over the named gradients.
pub fn adam_step(
    model: &mut CmtModel,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let shape = g.shape().to_vec();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let p = model.params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "adam: parameter '{}' {:?} vs gradient {:?}",
                name,
                p.shape(),
                g.shape()
            )));
        }
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ---- training loop ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub of1: f64,
    pub cf1: f64,
    /// Excluded from serialized logs so artifacts stay byte-reproducible.
    #[serde(skip)]
    pub wall_ms: u64,
}

fn labels_tensor(labels: &[u8]) -> Tensor {
    Tensor::new(vec![labels.len()], labels.iter().map(|&v| v as f64).collect()).unwrap()
}

/// Loss and parameter gradients for one labelled image.
fn sample_grads(
    model: &CmtModel,
    sample: &Sample,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let bp = model.params.bind(&tape)?;
    let img = tape.leaf(sample.image.clone())?;
    let out = model.forward(&tape, &bp, img, mode, rng)?;
    let loss = tape.bce_loss(out.probs, &labels_tensor(&sample.labels))?;
    let grads = tape.backward(loss)?;
    let mut by_name = BTreeMap::new();
    for (name, var) in bp.iter() {
        let shape = tape.shape(*var);
        by_name.insert(name.clone(), grads.get(*var, &shape));
    }
    Ok((tape.value(loss).item()?, by_name))
}

/// Extend one epoch's samples with beta-weighted fusions of same-label
/// pairs. Labels carry over unchanged because both parents share them.
fn augment_epoch(
    samples: &[Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let mut out = samples.to_vec();
    if cfg.ffa_per_sample == 0 {
        return Ok(out);
    }
    let ffa = cfg.ffa_config();
    let mut by_label: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_label.entry(s.labels.clone()).or_default().push(i);
    }
    for s in samples {
        let peers = &by_label[&s.labels];
        if peers.len() < 2 {
            continue;
        }
        for _ in 0..cfg.ffa_per_sample {
            let other = loop {
                let j = peers[rng.gen_range(0..peers.len())];
                if !std::ptr::eq(&samples[j], s) {
                    break j;
                }
            };
            let shape = s.image.shape();
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let mask = build_masks(h, w, &ffa, rng)?;
            out.push(Sample {
                image: fuse(&s.image, &samples[other].image, &mask)?,
                labels: s.labels.clone(),
            });
        }
    }
    Ok(out)
}

/// Eval-mode metrics over a labelled set.
pub fn evaluate(model: &CmtModel, samples: &[Sample], threshold: f64) -> Result<crate::metrics::MetricsReport> {
    let classes = model.config.classes;
    let mut preds = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let probs = model.predict(&s.image)?;
        preds.push(binarize(&probs, threshold));
        targets.push(s.labels.clone());
    }
    Ok(report(&confusion(&preds, &targets, classes)?))
}

/// Train in place. Per epoch: augment, shuffle, minibatch Adam updates with
/// the scheduled learning rate, then eval-mode metrics on `eval`. One JSON
/// line of [`EpochStats`] is appended to `log` per epoch when provided.
pub fn train_loop(
    model: &mut CmtModel,
    train: &[Sample],
    eval: &[Sample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochStats>> {
    cfg.check()?;
    if train.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    for s in train.iter().chain(eval) {
        if s.labels.len() != model.config.classes {
            return Err(Error::Dataset(format!(
                "label vector of length {} vs {} classes",
                s.labels.len(),
                model.config.classes
            )));
        }
    }
    let mut adam = AdamState::default();
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let mut samples = augment_epoch(train, cfg, &mut rng)?;
        samples.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut last_lr = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            let lr = lr_at(cfg, step)?;
            last_lr = lr;
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            for sample in batch {
                let (loss, grads) = sample_grads(model, sample, Mode::Train, &mut rng)?;
                loss_sum += loss;
                loss_count += 1;
                for (name, g) in grads {
                    match acc.get_mut(&name) {
                        Some(t) => {
                            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in acc.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            adam_step(model, &acc, &mut adam, lr, cfg)?;
            step += 1;
        }
        let metrics = evaluate(model, eval, cfg.threshold)?;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            lr: last_lr,
            of1: metrics.of1,
            cf1: metrics.cf1,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &stats)?;
            writeln!(w)?;
        }
        history.push(stats);
    }
    Ok(history)
}

/// Number of optimizer steps one epoch takes, for sizing `total_steps`.
pub fn steps_per_epoch(n_samples: usize, cfg: &TrainConfig) -> usize {
    let augmented = n_samples * (1 + cfg.ffa_per_sample);
    augmented.div_ceil(cfg.batch_size)
}

// ---- toy data --------------------------------------------------------------

/// Small linearly separable set: each class is a distinct mean color with
/// uniform pixel noise, so the signal survives global average pooling.
pub fn toy_dataset(per_class: usize, seed: u64) -> Vec<Sample> {
    const COLORS: [[f64; 3]; 4] = [
        [0.9, 0.1, 0.1],
        [0.1, 0.9, 0.1],
        [0.1, 0.1, 0.9],
        [0.8, 0.8, 0.2],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4 * per_class);
    for (k, base) in COLORS.iter().enumerate() {
        for _ in 0..per_class {
            let noise: Vec<f64> = (0..3 * 32 * 32)
                .map(|_| rng.gen_range(-0.1..0.1))
                .collect();
            let image = Tensor::from_fn(&[3, 32, 32], |i| {
                (base[i / (32 * 32)] + noise[i]).clamp(0.0, 1.0)
            });
            let mut labels = vec![0u8; 4];
            labels[k] = 1;
            out.push(Sample { image, labels });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CmtConfig;

    fn sched(lr_max: f64, lr_min: f64, warmup: usize, total: usize) -> TrainConfig {
        TrainConfig {
            lr_max,
            lr_min,
            warmup_steps: warmup,
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_ramps_linearly_to_max() {
        let cfg = sched(1e-3, 0.0, 4, 12);
        assert!((lr_at(&cfg, 0).unwrap() - 0.25e-3).abs() < 1e-18);
        assert!((lr_at(&cfg, 1).unwrap() - 0.50e-3).abs() < 1e-18);
        assert!((lr_at(&cfg, 3).unwrap() - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn cosine_midpoint_and_endpoint() {
        let cfg = sched(1e-3, 1e-5, 0, 11);
        // T_cur = T/2 gives the arithmetic mean of the endpoints
        let mid = lr_at(&cfg, 5).unwrap();
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        let end = lr_at(&cfg, 10).unwrap();
        assert!((end - 1e-5).abs() < 1e-15);
        assert_eq!(lr_at(&cfg, 0).unwrap(), 1e-3);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let cfg = sched(1e-3, 0.0, 3, 40);
        let mut prev = f64::INFINITY;
        for step in 3..40 {
            let lr = lr_at(&cfg, step).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn step_past_end_is_error() {
        let cfg = sched(1e-3, 0.0, 2, 10);
        assert!(lr_at(&cfg, 10).is_err());
        assert!(lr_at(&cfg, 9).is_ok());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let mut model = CmtModel::new(CmtConfig::toy(), 1).unwrap();
        let cfg = sched(1e-2, 0.0, 1, 10);
        let name = "head.b".to_string();
        let before = model.params.get(&name).unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert(name.clone(), Tensor::full(&[4], 3.0));
        let mut state = AdamState::default();
        adam_step(&mut model, &grads, &mut state, 1e-2, &cfg).unwrap();
        let after = model.params.get(&name).unwrap();
        for (b, a) in before.data().iter().zip(after.data()) {
            assert!((b - a - 1e-2 * 3.0 / (3.0 + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_rejects_nonfinite_gradient() {
        let mut model = CmtModel::new(CmtConfig::toy(), 1).unwrap();
        let cfg = sched(1e-2, 0.0, 1, 10);
        let mut grads = BTreeMap::new();
        grads.insert("head.b".to_string(), Tensor::full(&[4], f64::NAN));
        let mut state = AdamState::default();
        assert!(adam_step(&mut model, &grads, &mut state, 1e-2, &cfg).is_err());
    }

    #[test]
    fn augmentation_extends_and_preserves_labels() {
        let data = toy_dataset(4, 7);
        let mut cfg = TrainConfig::default();
        cfg.ffa_per_sample = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ext = augment_epoch(&data, &cfg, &mut rng).unwrap();
        assert_eq!(ext.len(), 2 * data.len());
        for s in &ext {
            assert_eq!(s.labels.iter().map(|&v| v as usize).sum::<usize>(), 1);
            assert!(s.image.data().iter().all(|&v| (-0.01..=1.01).contains(&v)));
        }
    }

    #[test]
    fn toy_dataset_layout() {
        let data = toy_dataset(16, 0);
        assert_eq!(data.len(), 64);
        for s in &data {
            assert_eq!(s.image.shape(), &[3, 32, 32]);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // deterministic in the seed
        let again = toy_dataset(16, 0);
        assert_eq!(data[5].image, again[5].image);
    }

    #[test]
    fn single_step_reduces_loss_on_one_sample() {
        let mut model = CmtModel::new(CmtConfig::toy(), 11).unwrap();
        let data = toy_dataset(1, 3);
        let sample = &data[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss0, grads) = sample_grads(&model, sample, Mode::Eval, &mut rng).unwrap();
        let cfg = sched(1e-3, 0.0, 1, 10);
        let mut state = AdamState::default();
        adam_step(&mut model, &grads, &mut state, 1e-3, &cfg).unwrap();
        let (loss1, _) = sample_grads(&model, sample, Mode::Eval, &mut rng).unwrap();
        assert!(loss1 < loss0, "{} -> {}", loss0, loss1);
    }

    #[test]
    fn train_loop_is_seed_deterministic() {
        let data = toy_dataset(2, 5);
        let mut cfg = TrainConfig {
            lr_max: 1e-3,
            warmup_steps: 1,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        cfg.total_steps = cfg.epochs * steps_per_epoch(data.len(), &cfg);
        let run = |seed| {
            let mut model = CmtModel::new(CmtConfig::toy(), seed).unwrap();
            let hist = train_loop(&mut model, &data, &data, &cfg, None).unwrap();
            (hist.last().unwrap().mean_loss, model.params)
        };
        let (l1, p1) = run(9);
        let (l2, p2) = run(9);
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }
}
