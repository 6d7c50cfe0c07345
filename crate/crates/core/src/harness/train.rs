use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockVariant, ForwardCtx, UnitFamily};
use crate::error::{Error, Result};
use crate::gating::DICT_INIT_STD;
use crate::network::{InputShape, Model, ModelConfig, PatchVersion, Preset};
use crate::params::ParamStore;
use crate::rpe::Window;
use crate::tensor::init::seeded;
use crate::tensor::{Mode, Tensor};

use super::tasks::{Split, SyntheticTask};

/// Micro network for 8×32×32 clips.
pub fn toy_model_config(block_variant: BlockVariant) -> ModelConfig {
    ModelConfig {
        variant: Preset::Custom,
        depths: vec![1, 1, 1, 1],
        channels: vec![8, 16, 32, 64],
        expansion: 2,
        groups: vec![2, 4, 8, 8],
        windows: vec![Window::new(8, 8, 8), Window::new(8, 4, 4), Window::new(8, 2, 2), Window::new(8, 1, 1)],
        input: InputShape::new(8, 32, 32),
        patch_version: PatchVersion::PeV3,
        block_variant,
        unit_family: UnitFamily::Positional,
        num_classes: 2,
        drop_path_rate: 0.0,
        temporal_stride: 1,
        dict_init_std: DICT_INIT_STD,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub train_per_class: usize,
    pub val_per_class: usize,
}

impl TrainConfig {
    pub fn toy(model: ModelConfig, seed: u64) -> Self {
        Self {
            model,
            lr: 5e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 8,
            batch_size: 16,
            warmup_epochs: 1,
            seed,
            train_per_class: 256,
            val_per_class: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.train_per_class == 0 || self.val_per_class == 0 {
            return Err(Error::Config("batch size and split sizes must be positive".into()));
        }
        let rates_valid = self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0;
        if !rates_valid {
            return Err(Error::Config("lr, weight decay and eps must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize, warmup: usize) -> f64 {
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = (total - warmup).max(1) as f64;
        0.5 * self.lr * (1.0 + (PI * (step - warmup) as f64 / span).cos())
    }
}

/// Adam with decoupled weight decay on FC and conv weights only.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.specs().iter().map(|s| Tensor::zeros(s.shape.clone())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let decays: Vec<bool> = params.specs().iter().map(|s| s.role.decays()).collect();
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            let wd = if decays[i] { cfg.weight_decay } else { 0.0 };
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                *w -= lr * (update + wd * *w);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn final_val_top1(&self) -> f64 {
        self.history.iter().rev().find(|m| m.split == Split::Val).map_or(0.0, |m| m.top1)
    }
}

/// Fraction of rows whose arg-max matches the label.
pub fn top1(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let row = &logits.data()[r * k..(r + 1) * k];
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("non-empty row");
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

/// Trains on `task`, validating each epoch on its held-out split.
pub fn train(cfg: &TrainConfig, task: &SyntheticTask) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = task.split(Split::Train, cfg.train_per_class);
    let val_set = task.split(Split::Val, cfg.val_per_class);
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&model.params);
    let mut ctx = ForwardCtx::new(Mode::Train, cfg.seed.wrapping_add(1));
    let mut order_rng = seeded(cfg.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk)?;
            ctx.mode = Mode::Train;
            let (loss, logits, grads) = model.loss_and_grads(&x, &labels, &mut ctx).map_err(diverged(step))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let lr = cfg.lr_at(step, total, warmup);
            opt.update(&mut model.params, &grads, lr, cfg);
            loss_sum += loss * labels.len() as f64;
            hits += top1(&logits, &labels) * labels.len() as f64;
            seen += labels.len();
            step += 1;
        }
        history.push(EpochMetrics { epoch, split: Split::Train, loss: loss_sum / seen as f64, top1: hits / seen as f64 });
        let (loss, acc) = evaluate(&mut model, &val_set, cfg.batch_size)?;
        history.push(EpochMetrics { epoch, split: Split::Val, loss, top1: acc });
    }
    Ok(TrainOutcome { model, history })
}

/// Mean loss and top-1 accuracy over every sample of `task`, eval mode.
pub fn evaluate(model: &mut Model, task: &SyntheticTask, batch_size: usize) -> Result<(f64, f64)> {
    let mut ctx = ForwardCtx::new(Mode::Eval, 0);
    let indices: Vec<usize> = (0..task.len()).collect();
    let (mut loss_sum, mut hits) = (0.0, 0.0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = task.batch(chunk)?;
        let logits = model.predict(&x, &mut ctx)?;
        loss_sum += cross_entropy(&logits, &labels) * labels.len() as f64;
        hits += top1(&logits, &labels) * labels.len() as f64;
    }
    let n = task.len() as f64;
    Ok((loss_sum / n, hits / n))
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            let row = &logits.data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .sum();
    total / labels.len() as f64
}

pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,loss,top1\n");
    for m in history {
        let split = match m.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        writeln!(out, "{},{split},{:.6},{:.4}", m.epoch, m.loss, m.top1).expect("writing to a string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::trunc_normal;

    #[test]
    fn top1_examples() {
        let logits = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]).unwrap();
        assert_eq!(top1(&logits, &[0, 1, 0]), 1.0);
        assert_eq!(top1(&logits, &[1, 0, 1]), 0.0);
        assert_eq!(top1(&logits, &[0, 1, 1]), 2.0 / 3.0);
    }

    #[test]
    fn random_logits_are_near_chance() {
        let logits = trunc_normal([400, 2], 1.0, &mut seeded(11));
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        assert!((top1(&logits, &labels) - 0.5).abs() <= 0.05);
    }

    #[test]
    fn accuracy_ignores_sample_order() {
        let logits = trunc_normal([50, 3], 1.0, &mut seeded(12));
        let labels: Vec<usize> = (0..50).map(|i| (i * 7) % 3).collect();
        let perm: Vec<usize> = (0..50).rev().collect();
        let shuffled = Tensor::from_fn([50, 3], |i| logits.data()[perm[i / 3] * 3 + i % 3]);
        let relabeled: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
        assert_eq!(top1(&logits, &labels), top1(&shuffled, &relabeled));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig::toy(toy_model_config(BlockVariant::ParallelV1), 0);
        assert!((cfg.lr_at(0, 100, 10) - cfg.lr / 10.0).abs() < 1e-15);
        assert!((cfg.lr_at(9, 100, 10) - cfg.lr).abs() < 1e-15);
        assert!((cfg.lr_at(10, 100, 10) - cfg.lr).abs() < 1e-15);
        assert!(cfg.lr_at(99, 100, 10) < cfg.lr * 1e-3);
    }

    #[test]
    fn toy_config_is_valid() {
        for v in BlockVariant::ALL {
            toy_model_config(v).validate().unwrap();
        }
    }
}
