//! Average precision over a dataset.

use std::cmp::Ordering;

use detr_tensor::no_grad;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxCXCYWH;
use crate::data::{Dataset, GroundTruth};
use crate::error::Result;
use crate::heads::DetectionSet;
use crate::model::Detector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub label: usize,
    pub score: f64,
    pub bbox: BoxCXCYWH,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub recall: f64,
}

/// One detection per query: its highest-probability class.
pub fn detections_from_set(set: &DetectionSet) -> Vec<Detection> {
    let c = set.num_classes();
    let logits = set.logits.data();
    set.box_list()
        .into_iter()
        .enumerate()
        .map(|(i, bbox)| {
            let row = &logits[i * c..(i + 1) * c];
            let (label, &best) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
            Detection { label, score: 1.0 / (1.0 + (-best).exp()), bbox }
        })
        .collect()
}

/// AP at one IoU threshold from a single score-descending sweep over all
/// images and classes. Each detection takes the highest-IoU unmatched truth
/// of its class. With no truths at all both values are 0.
pub fn average_precision(dets: &[Vec<Detection>], truths: &[GroundTruth], iou_threshold: f64) -> ApResult {
    let total: usize = truths.iter().map(GroundTruth::len).sum();
    if total == 0 {
        return ApResult { ap: 0.0, recall: 0.0 };
    }
    let mut order: Vec<(usize, usize)> =
        dets.iter().enumerate().flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j))).collect();
    order.sort_by(|a, b| {
        dets[b.0][b.1]
            .score
            .partial_cmp(&dets[a.0][a.1].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (rank, &(img, j)) in order.iter().enumerate() {
        let det = &dets[img][j];
        let truth = &truths[img];
        let mut best: Option<(usize, f64)> = None;
        for (t, b) in truth.boxes.iter().enumerate() {
            if used[img][t] || truth.labels[t] != det.label {
                continue;
            }
            let iou = det.bbox.iou(b);
            if iou >= iou_threshold && best.is_none_or(|(_, v)| iou > v) {
                best = Some((t, iou));
            }
        }
        if let Some((t, _)) = best {
            used[img][t] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total as f64, tp as f64 / (rank + 1) as f64));
    }
    // All-points interpolation over the precision envelope.
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = 0.0;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(curve.len());
    for &(r, p) in curve.iter().rev() {
        envelope = envelope.max(p);
        points.push((r, envelope));
    }
    for &(r, p) in points.iter().rev() {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ApResult { ap, recall: tp as f64 / total as f64 }
}

pub fn metrics(dets: &[Vec<Detection>], truths: &[GroundTruth]) -> Metrics {
    let at = |t: f64| average_precision(dets, truths, t);
    let a50 = at(0.5);
    let map = (0..10).map(|i| at(0.5 + 0.05 * i as f64).ap).sum::<f64>() / 10.0;
    Metrics { ap50: a50.ap, ap75: at(0.75).ap, map, recall: a50.recall }
}

/// Runs the model on every image with `k` proposals.
pub fn predict(model: &Detector, data: &Dataset, k: usize) -> Result<Vec<Vec<Detection>>> {
    no_grad(|| {
        data.samples
            .iter()
            .map(|s| Ok(detections_from_set(model.forward(&s.pixels, k)?.final_set())))
            .collect()
    })
}

pub fn evaluate(model: &Detector, data: &Dataset, k: usize) -> Result<Metrics> {
    let dets = predict(model, data, k)?;
    let truths: Vec<GroundTruth> = data.samples.iter().map(|s| s.truth.clone()).collect();
    Ok(metrics(&dets, &truths))
}
