//! The whole pipeline in memory: generate, annotate, train both stages and
//! evaluate on the held-out domain.

use std::collections::HashMap;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::evaluation::{evaluate, MetricsReport};
use crate::grounding::{annotate, label_matrices, LabelMatrix, LabelRow, OracleProvider};
use crate::synth_data::{generate_dataset, Manifest};
use crate::trainer::{epoch_means, train_stage1, train_stage2, LossRow, Model, Progress, TrainData};

/// Pseudo labels for every sample from the oracle grounding provider.
pub fn annotate_manifest(manifest: &Manifest, config: &RunConfig) -> Result<Vec<LabelRow>> {
    let provider = OracleProvider::new(&manifest.samples, config.data.corruption(), config.data.seed);
    annotate(&manifest.samples, &provider, &config.calibration, config.data.patch_size)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub stage1_cmp: Vec<f64>,
    pub stage2_total: Vec<f64>,
    pub metrics: MetricsReport,
    pub seconds: f64,
}

pub struct Trained {
    pub model: Model,
    pub progress: Progress,
    pub log: Vec<LossRow>,
}

/// Trains both stages on the training split of `manifest`.
pub fn train_all(manifest: &Manifest, labels: &HashMap<String, LabelMatrix>, config: &RunConfig) -> Result<Trained> {
    let data = TrainData::new(manifest, labels)?;
    let mut model =
        Model::new(config.image.clone(), config.text.clone(), data.num_ids, config.granularities, config.prompt_seed())?;
    let mut progress = Progress::default();
    let mut log = Vec::new();
    train_stage1(&mut model, &data, &config.train, &mut progress, &mut log)?;
    train_stage2(&mut model, &data, &config.train, &mut progress, &mut log)?;
    Ok(Trained { model, progress, log })
}

pub fn run_experiment(config: &RunConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let config = config.clone().finalize()?;
    let manifest = generate_dataset(&config.data)?;
    let labels = label_matrices(&annotate_manifest(&manifest, &config)?)?;
    let trained = train_all(&manifest, &labels, &config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed ^ 0x5eed);
    let metrics = evaluate(
        &trained.model.image,
        trained.model.granularities,
        &manifest,
        config.train.mask_source,
        Some(&labels),
        &mut rng,
    )?;
    let report = ExperimentReport {
        stage1_cmp: epoch_means(&trained.log, 1, |r| r.cmp),
        stage2_total: epoch_means(&trained.log, 2, |r| r.stage_total),
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    };
    info!(
        "experiment: rank1 {:.3} (random {:.3}), mAP {:.3}, mask IoU {:.3}, {:.1}s",
        report.metrics.rank1, report.metrics.random_rank1, report.metrics.map, report.metrics.mean_iou, report.seconds
    );
    Ok(report)
}
