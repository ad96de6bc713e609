//! Optimizer, training loop, metric records and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use detr_tensor::Parameter;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{epoch_order, Dataset};
use crate::error::{DetrError, Result};
use crate::eval::{evaluate, Metrics};
use crate::heads::proposals_at;
use crate::loss::{LossBreakdown, SetLossConfig};
use crate::matching::LossWeights;
use crate::model::Detector;

pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

/// Moment estimates for one parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One in-place Adam update with decoupled weight decay. `step` counts from 1.
pub fn adam_step(param: &mut [f64], grad: &[f64], slot: &mut AdamSlot, step: u64, cfg: &AdamConfig) -> Result<()> {
    let n = param.len();
    if grad.len() != n || slot.m.len() != n || slot.v.len() != n {
        return Err(DetrError::Size(format!(
            "adam: parameter has {n} values, gradient {} and state {}/{}",
            grad.len(),
            slot.m.len(),
            slot.v.len()
        )));
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..n {
        let g = grad[i];
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        let update = (slot.m[i] / c1) / ((slot.v[i] / c2).sqrt() + ADAM_EPS);
        param[i] -= cfg.lr * (update + cfg.weight_decay * param[i]);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Parameter]) -> Self {
        Self { config, step: 0, slots: params.iter().map(|p| AdamSlot::zeros(p.numel())).collect() }
    }

    /// Applies accumulated gradients times `grad_scale`; parameters without
    /// a gradient see a zero one.
    pub fn step(&mut self, params: &[Parameter], lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let cfg = AdamConfig { lr, ..self.config };
        for (p, slot) in params.iter().zip(&mut self.slots) {
            let mut grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            if grad_scale != 1.0 {
                grad.iter_mut().for_each(|g| *g *= grad_scale);
            }
            let mut data = p.data();
            adam_step(&mut data, &grad, slot, self.step, &cfg)?;
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm(params: &[Parameter]) -> f64 {
    params.iter().filter_map(Parameter::grad).flat_map(|g| g.into_iter().map(|x| x * x)).sum::<f64>().sqrt()
}

/// Factor that brings the gradient norm down to `max_norm`; 1 when clipping is off or not needed.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / (norm + 1e-12)
    } else {
        1.0
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Scheduled proposal count.
    pub k_proposals: usize,
    /// Proposals actually used after capping at the token count.
    pub k_effective: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub ap50_eval: Option<f64>,
}

pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch >= cfg.lr_drop_epoch {
        cfg.lr * cfg.lr_drop_factor
    } else {
        cfg.lr
    }
}

fn first_non_finite_param(params: &[Parameter]) -> Option<String> {
    params.iter().find(|p| p.data().iter().any(|v| !v.is_finite())).map(|p| format!("parameter {}", p.name()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Detector,
    pub records: Vec<EpochRecord>,
}

/// Trains from scratch. `on_record` sees each epoch record as soon as it exists.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    mut on_record: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(DetrError::Dataset("training set is empty".into()));
    }
    let model = Detector::from_train_config(cfg)?;
    let params = model.parameters();
    let mut opt = Adam::new(
        AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, weight_decay: cfg.weight_decay },
        &params,
    );
    let weights = LossWeights::from(&cfg.loss);
    let loss_cfg = SetLossConfig { assign_n: cfg.loss.assign_n, aux_loss: cfg.loss.aux_loss };
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let k = proposals_at(&cfg.schedule, epoch, cfg.epochs);
        let lr = learning_rate(cfg, epoch);
        let order = epoch_order(cfg.data.data_seed ^ cfg.seed, epoch, train_set.len());
        let mut sum = LossBreakdown::default();
        let mut k_effective = 0;
        for batch in order.chunks(cfg.batch_size) {
            params.iter().for_each(Parameter::zero_grad);
            for &i in batch {
                let sample = &train_set.samples[i];
                let out = model.forward(&sample.pixels, k)?;
                k_effective = out.containers.len();
                let loss = model.loss(&out, &sample.truth, &weights, loss_cfg)?;
                if !loss.total.item().is_finite() {
                    let culprit = first_non_finite_param(&params)
                        .or_else(|| out.named_tensors().into_iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n))
                        .unwrap_or_else(|| "loss".into());
                    return Err(DetrError::Numeric(format!(
                        "non-finite loss at epoch {epoch}, image {}: first non-finite tensor is {culprit}",
                        sample.id
                    )));
                }
                loss.total.scale(1.0 / batch.len() as f64).backward()?;
                sum.total += loss.breakdown.total;
                sum.cls += loss.breakdown.cls;
                sum.l1 += loss.breakdown.l1;
                sum.giou += loss.breakdown.giou;
            }
            let scale = if cfg.clip_max_norm > 0.0 { clip_scale(grad_norm(&params), cfg.clip_max_norm) } else { 1.0 };
            opt.step(&params, lr, scale)?;
        }
        let n = train_set.len() as f64;
        let last = epoch + 1 == cfg.epochs;
        let ap50_eval = match eval_set {
            Some(ev) if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) => {
                Some(evaluate(&model, ev, cfg.schedule.n_end)?.ap50)
            }
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            k_proposals: k,
            k_effective,
            loss_total: sum.total / n,
            loss_cls: sum.cls / n,
            loss_l1: sum.l1 / n,
            loss_giou: sum.giou / n,
            ap50_eval,
        };
        log::info!(
            "epoch {epoch}: k={k} ({k_effective}) loss={:.4} ap50={:?}",
            rec.loss_total,
            rec.ap50_eval
        );
        on_record(&rec)?;
        records.push(rec);
    }
    Ok(TrainOutcome { model, records })
}

/// Writes records as JSON Lines.
pub fn write_jsonl(mut w: impl Write, records: &[EpochRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| DetrError::Io(std::io::Error::other(e)))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredParam {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: TrainConfig,
    params: BTreeMap<String, StoredParam>,
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, model: &Detector) -> Result<()> {
    let params = model
        .parameters()
        .iter()
        .map(|p| (p.name().to_string(), StoredParam { shape: p.shape().to_vec(), data: p.data() }))
        .collect();
    let file = CheckpointFile { version: CHECKPOINT_VERSION, config: cfg.clone(), params };
    let text = serde_json::to_string(&file).map_err(|e| DetrError::Checkpoint(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Rebuilds the model from its stored config and overwrites every parameter.
pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, Detector)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| DetrError::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(DetrError::Checkpoint(format!("unsupported checkpoint version {}", file.version)));
    }
    let model = Detector::from_train_config(&file.config)?;
    let params = model.parameters();
    if params.len() != file.params.len() {
        return Err(DetrError::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            file.params.len(),
            params.len()
        )));
    }
    for p in &params {
        let stored = file
            .params
            .get(p.name())
            .ok_or_else(|| DetrError::Checkpoint(format!("missing parameter {}", p.name())))?;
        if stored.shape != p.shape() {
            return Err(DetrError::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name(),
                stored.shape,
                p.shape()
            )));
        }
        p.set_data(stored.data.clone())?;
    }
    Ok((file.config, model))
}

/// Held-out metrics at the evaluation proposal count.
pub fn evaluate_config(cfg: &TrainConfig, model: &Detector, data: &Dataset) -> Result<Metrics> {
    evaluate(model, data, cfg.schedule.n_end)
}
