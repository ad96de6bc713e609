//! One-axis-at-a-time ablation runs and their CSV table.

use std::io::Write;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{config_err, DetrError, Result};
use crate::eval::evaluate;
use crate::train::train;

/// (axis, config key, values).
pub const AXES: &[(&str, &str, &[&str])] = &[
    ("init", "init", &["dense", "learnable", "grid", "center", "border"]),
    ("decoder_layers", "decoder_layers", &["1", "2", "3", "6"]),
    ("proposals", "proposals_start", &["100", "300", "500", "1000"]),
    ("assign", "assign_n", &["1", "5", "10"]),
    ("ref", "ref", &["2d", "4d"]),
    ("share_head", "share_head", &["true", "false"]),
    ("objectness", "objectness", &["specific", "agnostic"]),
];

pub fn axis_names() -> Vec<&'static str> {
    AXES.iter().map(|a| a.0).collect()
}

/// Variants of `base` along one axis, or along every axis for `"all"`.
pub fn ablation_configs(base: &TrainConfig, axis: &str) -> Result<Vec<(String, String, TrainConfig)>> {
    let selected: Vec<_> = AXES.iter().filter(|a| axis == "all" || a.0 == axis).collect();
    if selected.is_empty() {
        return Err(config_err(format!("unknown axis '{axis}' (expected one of {}, all)", axis_names().join(", "))));
    }
    let mut out = Vec::new();
    for (name, key, values) in selected {
        for v in *values {
            let mut cfg = base.clone();
            cfg.set(key, v)?;
            if *key == "proposals_start" && cfg.schedule.n_end > cfg.schedule.n_start {
                cfg.schedule.n_end = cfg.schedule.n_start;
            }
            cfg.validate()?;
            out.push((name.to_string(), v.to_string(), cfg));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub epochs: usize,
    pub k_effective: usize,
    pub loss_total: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub recall: f64,
}

/// Trains and evaluates every variant in order.
pub fn run_ablation(base: &TrainConfig, axis: &str, train_set: &Dataset, eval_set: &Dataset) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (axis, value, mut cfg) in ablation_configs(base, axis)? {
        log::info!("ablation {axis}={value}");
        cfg.eval_every = cfg.epochs.max(1);
        let out = train(&cfg, train_set, None, |_| Ok(()))?;
        let m = evaluate(&out.model, eval_set, cfg.schedule.n_end)?;
        let last = out.records.last();
        rows.push(AblationRow {
            axis,
            value,
            epochs: cfg.epochs,
            k_effective: last.map_or(0, |r| r.k_effective),
            loss_total: last.map_or(f64::NAN, |r| r.loss_total),
            ap50: m.ap50,
            ap75: m.ap75,
            map: m.map,
            recall: m.recall,
        });
    }
    Ok(rows)
}

pub fn write_csv(w: impl Write, rows: &[AblationRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| DetrError::Io(std::io::Error::other(e)))?;
    }
    wr.flush()?;
    Ok(())
}
