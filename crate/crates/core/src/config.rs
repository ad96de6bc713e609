//! Run configuration and its INI-style file format.
//!
//! Keys are flat and globally unique; a section header only groups them.
//! A key may appear under its own section or before any section header.
//! An empty file yields the defaults below.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, DetrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    Dense,
    Learnable,
    Grid,
    Center,
    Border,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 5] = [
        InitStrategy::Dense,
        InitStrategy::Learnable,
        InitStrategy::Grid,
        InitStrategy::Center,
        InitStrategy::Border,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Dense => "dense",
            InitStrategy::Learnable => "learnable",
            InitStrategy::Grid => "grid",
            InitStrategy::Center => "center",
            InitStrategy::Border => "border",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RefDim {
    #[serde(rename = "2d")]
    Point,
    #[serde(rename = "4d")]
    Box,
}

impl RefDim {
    pub fn name(self) -> &'static str {
        match self {
            RefDim::Point => "2d",
            RefDim::Box => "4d",
        }
    }

    pub fn width(self) -> usize {
        match self {
            RefDim::Point => 2,
            RefDim::Box => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectnessMode {
    Specific,
    Agnostic,
}

impl ObjectnessMode {
    pub fn name(self) -> &'static str {
        match self {
            ObjectnessMode::Specific => "specific",
            ObjectnessMode::Agnostic => "agnostic",
        }
    }
}

macro_rules! named_enum_traits {
    ($ty:ty, $what:literal, [$($v:expr),+]) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = DetrError;

            fn from_str(s: &str) -> Result<Self> {
                [$($v),+]
                    .into_iter()
                    .find(|v| v.name() == s.trim())
                    .ok_or_else(|| config_err(format!("unknown {} '{}'", $what, s)))
            }
        }
    };
}

named_enum_traits!(InitStrategy, "init strategy", [
    InitStrategy::Dense, InitStrategy::Learnable, InitStrategy::Grid, InitStrategy::Center, InitStrategy::Border
]);
named_enum_traits!(RefDim, "reference dimension", [RefDim::Point, RefDim::Box]);
named_enum_traits!(ObjectnessMode, "objectness mode", [ObjectnessMode::Specific, ObjectnessMode::Agnostic]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// COCO-style annotation file; synthetic shapes when absent.
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub image_size: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub max_objects: usize,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            eval_dataset: None,
            image_size: 64,
            train_images: 500,
            eval_images: 100,
            max_objects: 3,
            data_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_classes: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub anchor_scale: f64,
    pub head_hidden: usize,
    pub backbone_channels: [usize; 4],
    pub init: InitStrategy,
    #[serde(rename = "ref")]
    pub ref_dim: RefDim,
    pub objectness: ObjectnessMode,
    pub share_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            num_classes: 3,
            encoder_layers: 3,
            decoder_layers: 1,
            heads: 8,
            points: 4,
            anchor_scale: 0.05,
            head_hidden: 64,
            backbone_channels: [16, 32, 64, 64],
            init: InitStrategy::Dense,
            ref_dim: RefDim::Box,
            objectness: ObjectnessMode::Specific,
            share_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Positives per truth in the dense part; 1 means one-to-one matching.
    pub assign_n: usize,
    /// Attach the set loss to every decoder layer, not only the last.
    pub aux_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            assign_n: 1,
            aux_loss: true,
        }
    }
}

/// Linear decay of the proposal count over training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSchedule {
    pub n_start: usize,
    pub n_end: usize,
    /// Epochs over which to decay; the full run when `None`.
    pub decay_epochs: Option<usize>,
}

impl Default for ProposalSchedule {
    fn default() -> Self {
        Self {
            n_start: 300,
            n_end: 100,
            decay_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_max_norm: f64,
    /// Evaluate AP50 every this many epochs (and always after the last).
    pub eval_every: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: ProposalSchedule,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 36,
            lr: 1e-4,
            lr_drop_epoch: 24,
            lr_drop_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            seed: 0,
            batch_size: 1,
            clip_max_norm: 0.0,
            eval_every: 1,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            schedule: ProposalSchedule::default(),
            data: DataConfig::default(),
        }
    }
}

/// (section, key) for every recognised key.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "dataset"),
    ("data", "eval_dataset"),
    ("data", "image_size"),
    ("data", "train_images"),
    ("data", "eval_images"),
    ("data", "max_objects"),
    ("data", "data_seed"),
    ("model", "d_model"),
    ("model", "num_classes"),
    ("model", "encoder_layers"),
    ("model", "decoder_layers"),
    ("model", "heads"),
    ("model", "points"),
    ("model", "anchor_scale"),
    ("model", "head_hidden"),
    ("model", "backbone_channels"),
    ("model", "init"),
    ("model", "ref"),
    ("model", "objectness"),
    ("model", "share_head"),
    ("loss", "lambda_cls"),
    ("loss", "lambda_l1"),
    ("loss", "lambda_giou"),
    ("loss", "focal_alpha"),
    ("loss", "focal_gamma"),
    ("loss", "assign_n"),
    ("loss", "aux_loss"),
    ("schedule", "proposals_start"),
    ("schedule", "proposals_end"),
    ("schedule", "proposals_decay_epochs"),
    ("train", "epochs"),
    ("train", "lr"),
    ("train", "lr_drop_epoch"),
    ("train", "lr_drop_factor"),
    ("train", "beta1"),
    ("train", "beta2"),
    ("train", "weight_decay"),
    ("train", "seed"),
    ("train", "batch_size"),
    ("train", "clip_max_norm"),
    ("train", "eval_every"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(config_err(format!("invalid boolean '{value}' for key '{key}'"))),
    }
}

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "dataset" => self.data.dataset = (!v.trim().is_empty()).then(|| PathBuf::from(v.trim())),
            "eval_dataset" => {
                self.data.eval_dataset = (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()))
            }
            "image_size" => self.data.image_size = parse(key, v)?,
            "train_images" => self.data.train_images = parse(key, v)?,
            "eval_images" => self.data.eval_images = parse(key, v)?,
            "max_objects" => self.data.max_objects = parse(key, v)?,
            "data_seed" => self.data.data_seed = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "num_classes" => self.model.num_classes = parse(key, v)?,
            "encoder_layers" => self.model.encoder_layers = parse(key, v)?,
            "decoder_layers" => self.model.decoder_layers = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "points" => self.model.points = parse(key, v)?,
            "anchor_scale" => self.model.anchor_scale = parse(key, v)?,
            "head_hidden" => self.model.head_hidden = parse(key, v)?,
            "backbone_channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse(key, p))
                    .collect::<Result<_>>()?;
                self.model.backbone_channels = parts
                    .try_into()
                    .map_err(|_| config_err("backbone_channels needs exactly 4 comma-separated values"))?;
            }
            "init" => self.model.init = v.parse()?,
            "ref" => self.model.ref_dim = v.parse()?,
            "objectness" => self.model.objectness = v.parse()?,
            "share_head" => self.model.share_head = parse_bool(key, v)?,
            "lambda_cls" => self.loss.lambda_cls = parse(key, v)?,
            "lambda_l1" => self.loss.lambda_l1 = parse(key, v)?,
            "lambda_giou" => self.loss.lambda_giou = parse(key, v)?,
            "focal_alpha" => self.loss.focal_alpha = parse(key, v)?,
            "focal_gamma" => self.loss.focal_gamma = parse(key, v)?,
            "assign_n" => self.loss.assign_n = parse(key, v)?,
            "aux_loss" => self.loss.aux_loss = parse_bool(key, v)?,
            "proposals_start" => self.schedule.n_start = parse(key, v)?,
            "proposals_end" => self.schedule.n_end = parse(key, v)?,
            "proposals_decay_epochs" => {
                self.schedule.decay_epochs = match v.trim() {
                    "" | "auto" => None,
                    s => Some(parse(key, s)?),
                }
            }
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_drop_epoch" => self.lr_drop_epoch = parse(key, v)?,
            "lr_drop_factor" => self.lr_drop_factor = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "clip_max_norm" => self.clip_max_norm = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            _ => return Err(config_err(format!("unknown keys: {key}"))),
        }
        Ok(())
    }

    /// Parses INI text on top of the defaults. Every unknown key (or key
    /// placed in a foreign section) is reported in one error.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| config_err(format!("malformed config: {e}")))?;
        let mut cfg = TrainConfig::default();
        let mut unknown = Vec::new();
        let mut pending = Vec::new();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let known = KEYS
                    .iter()
                    .any(|(s, k)| *k == key && section.is_none_or(|sec| sec == *s));
                if known {
                    pending.push((key.to_string(), value.to_string()));
                } else {
                    unknown.push(match section {
                        Some(s) => format!("{s}.{key}"),
                        None => key.to_string(),
                    });
                }
            }
        }
        if !unknown.is_empty() {
            return Err(config_err(format!("unknown keys: {}", unknown.join(", "))));
        }
        for (k, v) in pending {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_ini_str(&text)?;
        // Relative dataset paths resolve against the config's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dataset, &mut cfg.data.eval_dataset].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(config_err(msg.to_string())) };
        check(self.lr_drop_epoch <= self.epochs, "lr_drop_epoch must not exceed epochs")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(self.eval_every >= 1, "eval_every must be at least 1")?;
        check(m.heads >= 1 && m.d_model % m.heads == 0, "d_model must be divisible by heads")?;
        check(m.d_model % 4 == 0 && m.d_model >= 4, "d_model must be a positive multiple of 4")?;
        check(m.points >= 1, "points must be at least 1")?;
        check(m.num_classes >= 1, "num_classes must be at least 1")?;
        check(m.decoder_layers >= 1, "decoder_layers must be at least 1")?;
        check(m.head_hidden >= 1, "head_hidden must be at least 1")?;
        check(m.anchor_scale > 0.0 && m.anchor_scale <= 1.0, "anchor_scale must be in (0,1]")?;
        check(m.backbone_channels.iter().all(|&c| c >= 1), "backbone_channels must be positive")?;
        check(self.schedule.n_end >= 1, "proposals_end must be at least 1")?;
        check(self.schedule.n_start >= self.schedule.n_end, "proposals_start must be >= proposals_end")?;
        check(self.loss.assign_n >= 1, "assign_n must be at least 1")?;
        let l = &self.loss;
        check(
            [l.lambda_cls, l.lambda_l1, l.lambda_giou, l.focal_alpha, l.focal_gamma]
                .iter()
                .all(|v| *v >= 0.0),
            "loss weights must be non-negative",
        )?;
        check(self.data.image_size >= 64, "image_size must be at least 64")?;
        check(self.data.max_objects >= 1, "max_objects must be at least 1")?;
        Ok(())
    }
}
