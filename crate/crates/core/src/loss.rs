//! Set-prediction loss over decoder layers and the dense part.

use detr_tensor::{sigmoid_focal_loss, sum_all, Tensor};

use crate::data::GroundTruth;
use crate::error::Result;
use crate::heads::DetectionSet;
use crate::matching::{assign, hungarian, match_cost, LossWeights};

/// Weighted loss terms summed over every supervised prediction set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.cls += other.cls;
        self.l1 += other.l1;
        self.giou += other.giou;
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Loss of one prediction set for fixed positives. Unmatched predictions
/// only see the negative focal term. Every term is divided by `max(G, 1)`.
pub fn criterion(set: &DetectionSet, truth: &GroundTruth, pairs: &[(usize, usize)], w: &LossWeights) -> Result<LossOutput> {
    let (n, c) = (set.len(), set.num_classes());
    let norm = truth.len().max(1) as f64;
    let mut targets = vec![0.0; n * c];
    for &(p, t) in pairs {
        targets[p * c + truth.labels[t]] = 1.0;
    }
    let cls = sigmoid_focal_loss(&set.logits, &targets, w.focal_alpha, w.focal_gamma)?.scale(w.lambda_cls / norm);
    let mut terms = vec![cls.clone()];
    let mut bd = LossBreakdown { cls: cls.item(), ..Default::default() };
    if !pairs.is_empty() {
        let idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred = set.boxes.gather_rows(&idx)?;
        let tgt = Tensor::new(
            &[pairs.len(), 4],
            pairs.iter().flat_map(|&(_, t)| truth.boxes[t].to_array()).collect(),
        )?;
        let l1 = pred.sub(&tgt)?.abs().sum().scale(w.lambda_l1 / norm);
        let giou = pred.giou_pairs(&tgt)?.sum().neg().add_scalar(pairs.len() as f64).scale(w.lambda_giou / norm);
        bd.l1 = l1.item();
        bd.giou = giou.item();
        terms.push(l1);
        terms.push(giou);
    }
    let total = sum_all(&terms)?;
    bd.total = total.item();
    Ok(LossOutput { total, breakdown: bd })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetLossConfig {
    /// Positives per truth in the dense part.
    pub assign_n: usize,
    /// Supervise every decoder layer instead of only the last.
    pub aux_loss: bool,
}

impl Default for SetLossConfig {
    fn default() -> Self {
        Self { assign_n: 1, aux_loss: true }
    }
}

/// Everything the loss needs from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub layers: &'a [DetectionSet],
    pub dense: Option<&'a DetectionSet>,
    /// `[S, 1]` class-agnostic foreground logits, trained on dense positives.
    pub foreground: Option<&'a Tensor>,
}

/// Sum of per-layer matched losses plus the dense part under its own
/// assignment rule. Each decoder layer is matched independently.
pub fn set_loss(inputs: LossInputs<'_>, truth: &GroundTruth, w: &LossWeights, cfg: SetLossConfig) -> Result<LossOutput> {
    let mut terms = Vec::new();
    let mut bd = LossBreakdown::default();
    let supervised = if cfg.aux_loss { inputs.layers } else { &inputs.layers[inputs.layers.len().saturating_sub(1)..] };
    for set in supervised {
        let pairs = hungarian(&match_cost(set, truth, w))?.pairs;
        let out = criterion(set, truth, &pairs, w)?;
        bd.add(&out.breakdown);
        terms.push(out.total);
    }
    if let Some(dense) = inputs.dense {
        let pairs = assign(dense, truth, w, cfg.assign_n)?;
        let out = criterion(dense, truth, &pairs, w)?;
        bd.add(&out.breakdown);
        terms.push(out.total);
        if let Some(fg) = inputs.foreground {
            let mut targets = vec![0.0; fg.numel()];
            for &(p, _) in &pairs {
                targets[p] = 1.0;
            }
            let norm = truth.len().max(1) as f64;
            let l = sigmoid_focal_loss(fg, &targets, w.focal_alpha, w.focal_gamma)?.scale(w.lambda_cls / norm);
            bd.cls += l.item();
            bd.total += l.item();
            terms.push(l);
        }
    }
    let total = sum_all(&terms)?;
    Ok(LossOutput { total, breakdown: bd })
}
