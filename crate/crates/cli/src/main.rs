use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use detr_core::ablation::{run_ablation, write_csv};
use detr_core::config::TrainConfig;
use detr_core::data::{datasets_for, load_coco_dataset, synthetic_dataset, write_coco, Dataset};
use detr_core::eval::evaluate;
use detr_core::train::{load_checkpoint, save_checkpoint, train, write_jsonl, EpochRecord};
use detr_core::viz::{emit_reference_points, Stage};
use detr_core::DetrError;

#[derive(Parser)]
#[command(name = "detr", version, about = "Dense-initialized detection transformer at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// INI config file; defaults apply to every key it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| DetrError::Config(format!("override '{kv}' is not key=value")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl and checkpoint.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print metrics as one JSON line.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// COCO annotation file or directory; defaults to the checkpoint's eval set.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Proposal count; defaults to `proposals_end`.
        #[arg(long)]
        proposals: Option<usize>,
    },
    /// Train one variant per value of an axis and write a CSV table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// init, decoder_layers, proposals, assign, ref, share_head, objectness or all.
        #[arg(long, default_value = "init")]
        axis: String,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Render reference points of one image as SVG.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Image index within the dataset.
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Comma-separated stages: init, per-layer, final.
        #[arg(long, default_value = "init,final")]
        stage: String,
        #[arg(long)]
        proposals: Option<usize>,
        #[arg(long, default_value = "refs.svg")]
        out: PathBuf,
    },
    /// Write a synthetic shapes dataset in COCO format.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
        #[arg(long, default_value_t = 3)]
        num_classes: usize,
    },
}

fn eval_data(cfg: &TrainConfig, data: Option<&Path>) -> Result<Dataset> {
    Ok(match data {
        Some(p) => load_coco_dataset(p, cfg.data.image_size)?,
        None => datasets_for(cfg)?.1,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let (train_set, eval_set) = datasets_for(&cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            let metrics = out.join("metrics.jsonl");
            let mut sink = BufWriter::new(File::create(&metrics)?);
            let outcome = train(&cfg, &train_set, Some(&eval_set), |r: &EpochRecord| {
                write_jsonl(&mut sink, std::slice::from_ref(r))?;
                Ok(())
            })?;
            drop(sink);
            save_checkpoint(&out.join("checkpoint.json"), &cfg, &outcome.model)?;
            log::info!("wrote {} and checkpoint.json", metrics.display());
        }
        Command::Eval { checkpoint, data, proposals } => {
            let (cfg, model) = load_checkpoint(&checkpoint)?;
            let set = eval_data(&cfg, data.as_deref())?;
            let m = evaluate(&model, &set, proposals.unwrap_or(cfg.schedule.n_end))?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Ablate { cfg, axis, out } => {
            let cfg = cfg.load()?;
            let (train_set, eval_set) = datasets_for(&cfg)?;
            let rows = run_ablation(&cfg, &axis, &train_set, &eval_set)?;
            write_csv(File::create(&out).with_context(|| format!("cannot create {}", out.display()))?, &rows)?;
        }
        Command::Viz { checkpoint, data, image, stage, proposals, out } => {
            let stages = stage.split(',').map(str::parse).collect::<detr_core::Result<Vec<Stage>>>()?;
            let (cfg, model) = load_checkpoint(&checkpoint)?;
            let set = eval_data(&cfg, data.as_deref())?;
            let sample = set
                .samples
                .get(image)
                .ok_or_else(|| DetrError::Dataset(format!("image index {image} out of range ({} images)", set.len())))?;
            let k = proposals.unwrap_or(cfg.schedule.n_end);
            let svg = emit_reference_points(&model, &sample.pixels, k, &stages, Some(&sample.truth))?;
            std::fs::write(&out, svg).with_context(|| format!("cannot write {}", out.display()))?;
        }
        Command::GenData { out, count, seed, image_size, max_objects, num_classes } => {
            let data = synthetic_dataset(seed, count, image_size, max_objects, num_classes)?;
            let ann = write_coco(&out, &data)?;
            println!("{}", ann.display());
        }
    }
    Ok(())
}

fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<DetrError>())
        .map_or_else(|| if e.downcast_ref::<std::io::Error>().is_some() { "io" } else { "error" }, DetrError::kind);
    let msg = format!("{e:#}").replace('\n', " ");
    format!("error: {kind}: {msg}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
