//! Command-line front end. Every command reads its inputs from the run
//! directory (`--out`), and writes its outputs into one folder that appears
//! atomically, together with a snapshot of the configuration that made it.
//!
//! Configuration precedence: built-in defaults, then `--config`, then flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, render_mask_heatmaps, HeldOut};
use crate::experiment::annotate_manifest;
use crate::grounding::{annotate, label_matrices, read_label_file, write_label_file, FileProvider, LabelMatrix};
use crate::image_encoder::{MaskMode, MaskSource};
use crate::io_util::{write_atomic, write_dir_atomic};
use crate::synth_data::{fill_dataset, generate_dataset, load_dataset, Image, Manifest, Sample};
use crate::text_encoder::GranularitySet;
use crate::trainer::{
    load_checkpoint, load_image_encoder, loss_csv, save_checkpoint, train_stage1_until, train_stage2_until, LossRow,
    Model, Progress, TrainData,
};

#[derive(Debug, Parser)]
#[command(name = "mgreid", version, about = "Part-aware person re-identification on synthetic data")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML file overriding the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for data, model and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Disable simulated grounding failures.
    #[arg(long, global = true)]
    pub no_corruption: bool,
    #[arg(long, global = true, value_name = "predicted|external|stripe|none")]
    pub mask_source: Option<MaskMode>,
    /// Active granularities, e.g. `GHUL`, `G` or `G,H`.
    #[arg(long, global = true)]
    pub granularities: Option<GranularitySet>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Produce pseudo-label part masks for every sample.
    Annotate {
        /// JSONL file of raw boxes to use instead of the built-in oracle.
        #[arg(long)]
        boxes: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Continue from this stage's own checkpoint if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Retrieval and mask metrics on the held-out domain.
    Eval,
    /// Heatmaps of predicted part masks for held-out images.
    RenderMasks {
        /// Number of held-out images to render.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Every step in order.
    Run,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Annotate { .. } => "annotate",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::RenderMasks { .. } => "render-masks",
            Command::Run => "run",
        }
    }
}

/// Resolves the effective configuration from defaults, file and flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if common.no_corruption {
        cfg.data.oversize_rate = 0.0;
        cfg.data.oversplit_rate = 0.0;
    }
    if let Some(m) = common.mask_source {
        cfg.train.mask_source = m;
    }
    if let Some(g) = common.granularities {
        cfg.granularities = g;
    }
    cfg.finalize()
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Pipeline(format!("{what} not found at {}; run `{producer}` first", path.display())))
    }
}

fn snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())
}

fn load_data(cfg: &RunConfig, command: &str) -> Result<Manifest> {
    let dir = cfg.data_dir();
    require(&dir.join("manifest.json"), &format!("{command} needs the dataset; it was"), "gen-data")?;
    load_dataset(&dir)
}

fn load_labels(cfg: &RunConfig, command: &str) -> Result<std::collections::HashMap<String, LabelMatrix>> {
    let path = cfg.labels_path();
    require(&path, &format!("{command} needs pseudo labels; they were"), "annotate")?;
    label_matrices(&read_label_file(&path)?)
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let manifest = generate_dataset(&cfg.data)?;
    let dir = cfg.data_dir();
    write_dir_atomic(&dir, |tmp| {
        fill_dataset(tmp, &manifest)?;
        snapshot(tmp, cfg)
    })?;
    info!("wrote {} samples to {}", manifest.samples.len(), dir.display());
    Ok(dir)
}

pub fn annotate_cmd(cfg: &RunConfig, boxes: Option<&Path>) -> Result<PathBuf> {
    let manifest = load_data(cfg, "annotate")?;
    let rows = match boxes {
        None => annotate_manifest(&manifest, cfg)?,
        Some(p) => annotate(&manifest.samples, &FileProvider::open(p)?, &cfg.calibration, cfg.data.patch_size)?,
    };
    let dir = cfg.labels_dir();
    write_dir_atomic(&dir, |tmp| {
        write_label_file(&tmp.join("labels.jsonl"), &rows)?;
        snapshot(tmp, cfg)
    })?;
    info!("wrote {} label rows to {}", rows.len(), cfg.labels_path().display());
    Ok(dir)
}

/// Directory and loss log to continue from: an interrupted run first, then
/// the finished stage.
fn resume_point(cfg: &RunConfig, stage: u8) -> Option<(PathBuf, String)> {
    [cfg.partial_dir(stage), cfg.stage_dir(stage)].into_iter().find_map(|dir| {
        if !dir.join("checkpoint.bin").exists() {
            return None;
        }
        let csv = std::fs::read_to_string(dir.join("losses.csv")).unwrap_or_default();
        Some((dir, csv))
    })
}

fn write_stage(dir: &Path, stage: u8, model: &Model, progress: &Progress, csv: &str, cfg: &RunConfig) -> Result<()> {
    write_dir_atomic(dir, |tmp| {
        save_checkpoint(&tmp.join("checkpoint.bin"), stage, model, progress, &cfg.train)?;
        write_atomic(&tmp.join("losses.csv"), csv.as_bytes())?;
        snapshot(tmp, cfg)
    })
}

/// Appends rows to a loss log, writing the header only for an empty log.
fn extend_csv(csv: &mut String, rows: &[LossRow]) {
    let fresh = loss_csv(rows);
    if csv.is_empty() {
        csv.push_str(&fresh);
    } else {
        csv.extend(fresh.lines().skip(1).map(|l| format!("{l}\n")));
    }
}

pub fn train_cmd(cfg: &RunConfig, stage: u8, resume: bool) -> Result<PathBuf> {
    let command = format!("train --stage {stage}");
    let manifest = load_data(cfg, &command)?;
    let labels = load_labels(cfg, &command)?;
    let data = TrainData::new(&manifest, &labels)?;
    let (mut model, mut progress, mut csv) = match resume.then(|| resume_point(cfg, stage)).flatten() {
        Some((dir, csv)) => {
            info!("resuming from {}", dir.display());
            let ck = load_checkpoint(&dir.join("checkpoint.bin"))?;
            (ck.model, ck.progress, csv)
        }
        None if stage == 1 => {
            let model =
                Model::new(cfg.image.clone(), cfg.text.clone(), data.num_ids, cfg.granularities, cfg.prompt_seed())?;
            (model, Progress::default(), String::new())
        }
        None => {
            let prev = cfg.checkpoint_path(1);
            if !prev.exists() {
                return Err(Error::Pipeline(format!(
                    "stage 2 needs the stage-1 checkpoint at {}; run `train --stage 1` first",
                    prev.display()
                )));
            }
            let ck = load_checkpoint(&prev)?;
            if ck.stage != 1 {
                return Err(Error::Pipeline(format!("{} is a stage-{} checkpoint, expected stage 1", prev.display(), ck.stage)));
            }
            (ck.model, ck.progress, String::new())
        }
    };
    if model.granularities != cfg.granularities {
        return Err(Error::Config(format!(
            "checkpoint was trained with granularities {} but the configuration asks for {}",
            model.granularities, cfg.granularities
        )));
    }
    let partial = cfg.partial_dir(stage);
    let (total, done) = match stage {
        1 => (cfg.train.stage1_epochs, progress.stage1_epochs),
        _ => (cfg.train.stage2_epochs, progress.stage2_epochs),
    };
    for epoch in done..total {
        let mut log = Vec::new();
        match stage {
            1 => train_stage1_until(&mut model, &data, &cfg.train, &mut progress, &mut log, epoch + 1)?,
            _ => train_stage2_until(&mut model, &data, &cfg.train, &mut progress, &mut log, epoch + 1)?,
        }
        extend_csv(&mut csv, &log);
        if epoch + 1 < total {
            write_stage(&partial, stage, &model, &progress, &csv, cfg)?;
        }
    }
    if csv.is_empty() {
        extend_csv(&mut csv, &[]);
    }
    let dir = cfg.stage_dir(stage);
    write_stage(&dir, stage, &model, &progress, &csv, cfg)?;
    if partial.exists() {
        std::fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    info!("stage {stage} written to {}", dir.display());
    Ok(dir)
}

fn stage2_checkpoint(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let path = cfg.checkpoint_path(2);
    require(&path, &format!("{command} needs the stage-2 checkpoint; it was"), "train --stage 2")?;
    Ok(path)
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<PathBuf> {
    let manifest = load_data(cfg, "eval")?;
    let (encoder, granularities) = load_image_encoder(&stage2_checkpoint(cfg, "eval")?)?;
    let labels = if cfg.train.mask_source == MaskMode::External {
        Some(load_labels(cfg, "eval with external masks")?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5eed);
    let report = evaluate(&encoder, granularities, &manifest, cfg.train.mask_source, labels.as_ref(), &mut rng)?;
    let dir = cfg.eval_dir();
    write_dir_atomic(&dir, |tmp| {
        write_atomic(&tmp.join("metrics.json"), &serde_json::to_vec_pretty(&report)?)?;
        snapshot(tmp, cfg)
    })?;
    info!(
        "rank1 {:.3} (random {:.3}), mAP {:.3}, mask IoU {:.3}",
        report.rank1, report.random_rank1, report.map, report.mean_iou
    );
    Ok(dir)
}

pub fn render_masks_cmd(cfg: &RunConfig, limit: usize) -> Result<PathBuf> {
    let manifest = load_data(cfg, "render-masks")?;
    let (encoder, granularities) = load_image_encoder(&stage2_checkpoint(cfg, "render-masks")?)?;
    let held = HeldOut::new(&manifest)?;
    let samples: Vec<&Sample> = held.query.iter().chain(&held.gallery).copied().take(limit).collect();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let probs = encoder.embed(&images, MaskSource::Predicted, granularities)?.mask_probs;
    let items: Vec<(String, _)> = samples.iter().map(|s| s.sample_id.clone()).zip(probs).collect();
    let dir = cfg.masks_dir();
    write_dir_atomic(&dir, |tmp| {
        render_mask_heatmaps(&items, encoder.grid, tmp)?;
        snapshot(tmp, cfg)
    })?;
    info!("rendered {} mask sets to {}", items.len(), dir.display());
    Ok(dir)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::GenData => gen_data(&cfg).map(drop),
        Command::Annotate { boxes } => annotate_cmd(&cfg, boxes.as_deref()).map(drop),
        Command::Train { stage, resume } => train_cmd(&cfg, stage, resume).map(drop),
        Command::Eval => eval_cmd(&cfg).map(drop),
        Command::RenderMasks { limit } => render_masks_cmd(&cfg, limit).map(drop),
        Command::Run => {
            gen_data(&cfg)?;
            annotate_cmd(&cfg, None)?;
            train_cmd(&cfg, 1, false)?;
            train_cmd(&cfg, 2, false)?;
            eval_cmd(&cfg)?;
            render_masks_cmd(&cfg, 8).map(drop)
        }
    }
}
