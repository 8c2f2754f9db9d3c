//! Two-stage training: prompt learning against fixed visual prototypes, then
//! joint training of the image encoder, BN neck, classifier and mask
//! predictors against visual and text prototypes.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::grounding::{stripe_label_matrix, LabelMatrix};
use crate::image_encoder::{BnStats, ImageConfig, ImageEncoder, MaskMode, MaskSource};
use crate::io_util::write_atomic;
use crate::nn::Ctx;
use crate::objectives::{
    loss_cmp, loss_i2tce, loss_id, loss_imp, loss_mask, LossReport, MemoryRole, PrototypeMemory, Stage,
};
use crate::params::{Adam, AdamConfig, AdamSlot, Group};
use crate::synth_data::{hflip_image, Image, Manifest, Sample, Split};
use crate::text_encoder::{GranularitySet, PromptSet, TextConfig, TextEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage1_lr_min: f64,
    /// Identities per prompt-learning step.
    pub stage1_batch: usize,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub warmup_fraction: f64,
    pub warmup_factor: f64,
    /// Epoch fractions after which the stage-2 rate is multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub rmp_lr_mult: f64,
    pub weight_decay: f64,
    pub ids_per_batch: usize,
    pub samples_per_id: usize,
    pub temperature: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
    pub hflip: bool,
    pub mask_source: MaskMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage1_lr: 0.01,
            stage1_lr_min: 1e-6,
            stage1_batch: 4,
            stage2_epochs: 20,
            stage2_lr: 2e-4,
            warmup_fraction: 0.1,
            warmup_factor: 0.1,
            milestones: vec![2.0 / 3.0, 5.0 / 6.0],
            decay: 0.1,
            rmp_lr_mult: 10.0,
            weight_decay: 1e-4,
            ids_per_batch: 4,
            samples_per_id: 4,
            temperature: 0.01,
            momentum: 0.2,
            label_smoothing: 0.1,
            hflip: true,
            mask_source: MaskMode::Predicted,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Long schedule for full-size encoders: 120 prompt epochs and 60
    /// fine-tuning epochs with 16 identities of 4 samples each. The default
    /// rates are raised to suit the tiny synthetic model and short runs.
    pub fn full_scale() -> Self {
        Self {
            stage1_epochs: 120,
            stage1_lr: 3.5e-4,
            stage2_epochs: 60,
            stage2_lr: 5e-6,
            ids_per_batch: 16,
            samples_per_id: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return fail("both stages need at least one epoch");
        }
        if self.samples_per_id < 2 || self.ids_per_batch == 0 || self.stage1_batch == 0 {
            return fail("batches need at least one identity and two samples per identity");
        }
        if self.stage1_lr <= 0.0 || self.stage2_lr <= 0.0 || self.stage1_lr_min < 0.0 || self.rmp_lr_mult <= 0.0 {
            return fail("learning rates must be positive");
        }
        if self.temperature <= 0.0 {
            return fail("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.warmup_factor) {
            return fail("warmup fraction must lie in [0, 1) and its factor in [0, 1]");
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return fail("milestones are epoch fractions in [0, 1]");
        }
        Ok(())
    }

    /// Stage-1 cosine rate at `epoch` (0-based) of `stage1_epochs`.
    pub fn stage1_rate(&self, epoch: usize) -> f64 {
        if self.stage1_epochs <= 1 {
            return self.stage1_lr;
        }
        let frac = epoch as f64 / (self.stage1_epochs - 1) as f64;
        self.stage1_lr_min + 0.5 * (self.stage1_lr - self.stage1_lr_min) * (1.0 + (PI * frac).cos())
    }

    /// Stage-2 rate: linear warmup over the first steps, then step decay at
    /// the epoch milestones.
    pub fn stage2_rate(&self, epoch: usize, step: usize, total_steps: usize) -> f64 {
        let warmup = (self.warmup_fraction * total_steps as f64).ceil() as usize;
        let warm = if step < warmup {
            self.warmup_factor + (1.0 - self.warmup_factor) * step as f64 / warmup as f64
        } else {
            1.0
        };
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.stage2_epochs as f64).round() as usize)
            .count();
        self.stage2_lr * warm * self.decay.powi(passed as i32)
    }

    fn adam(&self) -> Adam {
        Adam::new(AdamConfig { weight_decay: self.weight_decay, ..Default::default() })
    }
}

/// Mask source for the stage-2 training forward pass.
fn training_source<'a>(mode: MaskMode, masks: &'a [LabelMatrix], stripe: &'a LabelMatrix) -> MaskSource<'a> {
    match mode {
        MaskMode::Predicted => MaskSource::Predicted,
        MaskMode::External => MaskSource::External(masks),
        MaskMode::Stripe => MaskSource::Stripe(stripe),
        MaskMode::None => MaskSource::None,
    }
}

/// Mask source for building visual memories: grounded masks stand in for
/// predictions so the targets stay stable while the predictors learn.
fn memory_source<'a>(mode: MaskMode, masks: &'a [LabelMatrix], stripe: &'a LabelMatrix) -> MaskSource<'a> {
    match mode {
        MaskMode::Predicted | MaskMode::External => MaskSource::External(masks),
        MaskMode::Stripe => MaskSource::Stripe(stripe),
        MaskMode::None => MaskSource::None,
    }
}

/// Training samples paired with their pseudo-label matrices.
pub struct TrainData<'a> {
    pub samples: Vec<&'a Sample>,
    pub masks: Vec<LabelMatrix>,
    pub num_ids: usize,
}

impl<'a> TrainData<'a> {
    pub fn new(manifest: &'a Manifest, labels: &HashMap<String, LabelMatrix>) -> Result<Self> {
        let samples = manifest.split(Split::Train);
        if samples.is_empty() {
            return Err(Error::Pipeline("manifest has no training samples".into()));
        }
        let masks = samples
            .iter()
            .map(|s| {
                labels.get(&s.sample_id).cloned().ok_or_else(|| {
                    Error::Pipeline(format!("no pseudo labels for training sample {}; run annotate first", s.sample_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, masks, num_ids: manifest.num_ids() })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id_label).collect()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }
}

/// Everything that is learned or derived during training.
#[derive(Clone, Debug)]
pub struct Model {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub prompts: PromptSet,
    pub granularities: GranularitySet,
    pub vpm1: Option<PrototypeMemory>,
    pub vpm2: Option<PrototypeMemory>,
    pub tpm: Option<PrototypeMemory>,
}

impl Model {
    pub fn new(
        image: ImageConfig,
        text: TextConfig,
        num_ids: usize,
        granularities: GranularitySet,
        prompt_seed: u64,
    ) -> Result<Self> {
        if image.num_classes != num_ids {
            return Err(Error::Config(format!("classifier has {} classes for {num_ids} ids", image.num_classes)));
        }
        if image.embed_dim != text.embed_dim {
            return Err(Error::Config(format!(
                "image output dim {} differs from text output dim {}",
                image.embed_dim, text.embed_dim
            )));
        }
        let prompts = PromptSet::init(num_ids, text.num_prompts, text.width, prompt_seed)?;
        Ok(Self {
            image: ImageEncoder::new(image)?,
            text: TextEncoder::new(text)?,
            prompts,
            granularities,
            vpm1: None,
            vpm2: None,
            tpm: None,
        })
    }

    pub fn stripe(&self) -> LabelMatrix {
        stripe_label_matrix(self.image.grid)
    }

    /// Normalized-centroid visual memory of the current encoder.
    pub fn visual_memory(&self, data: &TrainData, mode: MaskMode, role: MemoryRole) -> Result<PrototypeMemory> {
        let stripe = self.stripe();
        let emb = self.image.embed(&data.images(), memory_source(mode, &data.masks, &stripe), self.granularities)?;
        PrototypeMemory::from_centroids(role, &emb.v_mg, &data.labels(), data.num_ids)
    }

    pub fn text_memory(&self) -> Result<PrototypeMemory> {
        PrototypeMemory::from_rows(MemoryRole::Tpm, self.text.encode_all(&self.prompts, self.granularities)?)
    }
}

/// Counters and optimizer state needed to resume.
#[derive(Clone, Debug, Default)]
pub struct Progress {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage2_steps: usize,
    pub adam1: Adam,
    pub adam2: Adam,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRow {
    pub stage: u8,
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub losses: LossReport,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("stage,epoch,iteration,lr");
    for n in LossReport::NAMES {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{:e}", r.stage, r.epoch, r.iteration, r.lr));
        for v in r.losses.values() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    write_atomic(path, loss_csv(rows).as_bytes())
}

/// Mean of a field over the rows of one stage and epoch.
pub fn epoch_means(rows: &[LossRow], stage: u8, field: impl Fn(&LossReport) -> f64) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.stage == stage) {
        if sums.len() <= r.epoch {
            sums.resize(r.epoch + 1, (0.0, 0));
        }
        sums[r.epoch].0 += field(&r.losses);
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
}

fn epoch_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha8Rng {
    let mut z = seed ^ (stage << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Groups updated in stage 1.
pub fn prompts_only(g: Group) -> bool {
    g == Group::Prompts
}

/// Groups updated in stage 2; the patch projection stays frozen.
pub fn stage2_trainable(g: Group) -> bool {
    matches!(g, Group::Encoder | Group::VisualTokens | Group::BnNeck | Group::Classifier | Group::Rmp)
}

/// Mean contrastive loss of the text tokens of `ids` against `memory`.
pub fn stage1_objective(
    g: &mut Graph,
    model: &Model,
    memory: &PrototypeMemory,
    ids: &[usize],
    prompt_ctx: &Ctx,
) -> Result<Var> {
    let tokens = ids
        .iter()
        .map(|&c| model.text.encode_id(g, c, &model.prompts, model.granularities, prompt_ctx))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_rows(&tokens);
    loss_cmp(g, stacked, memory, ids)
}

/// One PK batch, already augmented.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub masks: Vec<LabelMatrix>,
}

pub struct Stage2Terms {
    pub total: Var,
    pub report: LossReport,
    pub stats: BnStats,
    pub v_mg: Mat,
}

/// Unit-weight sum of the identity, visual-prototype, image-to-text and mask
/// losses for one batch. Mask supervision covers the active part rows of
/// every layer.
pub fn stage2_objective(
    g: &mut Graph,
    model: &Model,
    ctx: &Ctx,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<Stage2Terms> {
    let vpm2 = model.vpm2.as_ref().ok_or_else(|| Error::Pipeline("visual memory not built".into()))?;
    let tpm = model.tpm.as_ref().ok_or_else(|| Error::Pipeline("text memory not built; stage 1 missing".into()))?;
    let stripe = model.stripe();
    let images: Vec<&Image> = batch.images.iter().collect();
    let source = training_source(config.mask_source, &batch.masks, &stripe);
    let out = model.image.forward(g, ctx, &images, source, model.granularities)?;
    let (v_bn, stats) = model.image.bn_train(g, ctx, out.v_mg);
    let logits = model.image.classify(g, ctx, v_bn);
    let id = loss_id(g, logits, &batch.labels)?;
    let imp = loss_imp(g, out.v_mg, vpm2, &batch.labels, config.temperature)?;
    let i2t = loss_i2tce(g, out.v_mg, tpm, &batch.labels, config.label_smoothing)?;
    let mut terms = vec![id, imp, i2t];
    let parts = model.granularities.parts();
    let mut report = LossReport { id: g.scalar(id), imp: g.scalar(imp), i2tce: g.scalar(i2t), ..Default::default() };
    if !parts.is_empty() {
        let n = model.image.num_patches();
        let rows: Vec<usize> = (0..batch.images.len()).flat_map(|b| parts.iter().map(move |p| 3 * b + p)).collect();
        let mut layer_logits = Vec::with_capacity(out.mask_logits.len());
        let mut labels = Mat::zeros((rows.len() * out.mask_logits.len(), n));
        for (l, &m) in out.mask_logits.iter().enumerate() {
            layer_logits.push(g.select_rows(m, &rows));
            for (k, &r) in rows.iter().enumerate() {
                let bits = batch.masks[r / 3].to_mat();
                labels.row_mut(l * rows.len() + k).assign(&bits.row(r % 3));
            }
        }
        let stacked = g.concat_rows(&layer_logits);
        let (bce, dice) = loss_mask(g, stacked, &labels)?;
        report.bce = g.scalar(bce);
        report.dice = g.scalar(dice);
        terms.push(bce);
        terms.push(dice);
    }
    let report = report.finish(Stage::Two)?;
    let total = g.sum(&terms);
    let v_mg = g.value(out.v_mg).clone();
    Ok(Stage2Terms { total, report, stats, v_mg })
}

/// Prompt learning. Builds the fixed visual memory on first use, then
/// optimizes only the prompt embeddings with a cosine schedule.
pub fn train_stage1(
    model: &mut Model,
    data: &TrainData,
    config: &TrainConfig,
    progress: &mut Progress,
    log: &mut Vec<LossRow>,
) -> Result<()> {
    train_stage1_until(model, data, config, progress, log, config.stage1_epochs)
}

/// As [`train_stage1`], stopping once `until` epochs are complete. The
/// schedule still spans `config.stage1_epochs`, so a later call picks up
/// exactly where this one stopped.
pub fn train_stage1_until(
    model: &mut Model,
    data: &TrainData,
    config: &TrainConfig,
    progress: &mut Progress,
    log: &mut Vec<LossRow>,
    until: usize,
) -> Result<()> {
    config.validate()?;
    if model.vpm1.is_none() {
        model.vpm1 = Some(model.visual_memory(data, config.mask_source, MemoryRole::Vpm1)?);
    }
    let ids: Vec<usize> = {
        let mut v = data.labels();
        v.sort_unstable();
        v.dedup();
        v
    };
    if progress.stage1_epochs == 0 {
        progress.adam1 = config.adam();
    }
    while progress.stage1_epochs < until.min(config.stage1_epochs) {
        let epoch = progress.stage1_epochs;
        let lr = config.stage1_rate(epoch);
        let mut rng = epoch_rng(config.seed, 1, epoch);
        let mut order = ids.clone();
        order.shuffle(&mut rng);
        for (it, chunk) in order.chunks(config.stage1_batch).enumerate() {
            let memory = model.vpm1.as_ref().expect("built above");
            let mut g = Graph::new();
            let ctx = Ctx::new(&model.prompts.store, &prompts_only);
            let loss = stage1_objective(&mut g, model, memory, chunk, &ctx)?;
            let report = LossReport { cmp: g.scalar(loss), ..Default::default() }.finish(Stage::One)?;
            let grads = g.backward(loss).param_grads();
            progress.adam1.step(&mut model.prompts.store, &grads, |_| lr);
            log.push(LossRow { stage: 1, epoch, iteration: it, lr, losses: report });
        }
        debug!("stage 1 epoch {epoch}: cmp {:.4}", epoch_means(log, 1, |r| r.cmp).last().copied().unwrap_or(f64::NAN));
        progress.stage1_epochs += 1;
    }
    info!("stage 1 at epoch {} of {}", progress.stage1_epochs, config.stage1_epochs);
    Ok(())
}

/// Identity-balanced batches: every identity's samples are shuffled and cut
/// into groups of `k` (topped up by resampling when short), then groups of
/// `p` distinct identities form a batch until fewer than `p` identities have
/// groups left. Batch order is shuffled.
pub fn pk_batches(labels: &[usize], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_id: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_id.entry(y).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::Config(format!("{p} identities per batch but only {} in the data", by_id.len())));
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.sort_unstable();
    let mut queues: Vec<(usize, Vec<Vec<usize>>)> = Vec::with_capacity(ids.len());
    for id in ids {
        let mut idx = by_id[&id].clone();
        idx.shuffle(rng);
        let mut groups = Vec::new();
        for chunk in idx.chunks(k) {
            let mut group = chunk.to_vec();
            while group.len() < k {
                group.push(by_id[&id][rng.random_range(0..by_id[&id].len())]);
            }
            groups.push(group);
        }
        queues.push((id, groups));
    }
    let mut batches = Vec::new();
    loop {
        let mut available: Vec<usize> = (0..queues.len()).filter(|&q| !queues[q].1.is_empty()).collect();
        if available.len() < p {
            break;
        }
        // Random among the identities with the most groups left, so no
        // identity is stranded at the end of the epoch.
        available.shuffle(rng);
        available.sort_by_key(|&q| std::cmp::Reverse(queues[q].1.len()));
        let chosen = &available[..p];
        let mut batch = Vec::with_capacity(p * k);
        for &q in chosen {
            batch.extend(queues[q].1.pop().expect("available"));
        }
        batches.push(batch);
    }
    batches.shuffle(rng);
    Ok(batches)
}

fn make_batch(data: &TrainData, indices: &[usize], model: &Model, hflip: bool, rng: &mut impl Rng) -> Batch {
    let mut batch = Batch { images: Vec::new(), labels: Vec::new(), masks: Vec::new() };
    for &i in indices {
        let s = data.samples[i];
        let flip = hflip && rng.random_bool(0.5);
        batch.images.push(if flip { hflip_image(&s.image) } else { s.image.clone() });
        batch.masks.push(if flip { data.masks[i].hflip(model.image.grid) } else { data.masks[i].clone() });
        batch.labels.push(s.id_label);
    }
    batch
}

pub fn stage2_steps_per_epoch(data: &TrainData, config: &TrainConfig) -> Result<usize> {
    let mut rng = epoch_rng(config.seed, 2, 0);
    Ok(pk_batches(&data.labels(), config.ids_per_batch, config.samples_per_id, &mut rng)?.len())
}

/// Joint training of the image side. Prompts and the text encoder stay
/// fixed; the visual memory is rebuilt at every epoch start and updated
/// after every step.
pub fn train_stage2(
    model: &mut Model,
    data: &TrainData,
    config: &TrainConfig,
    progress: &mut Progress,
    log: &mut Vec<LossRow>,
) -> Result<()> {
    train_stage2_until(model, data, config, progress, log, config.stage2_epochs)
}

/// As [`train_stage2`], stopping once `until` epochs are complete.
pub fn train_stage2_until(
    model: &mut Model,
    data: &TrainData,
    config: &TrainConfig,
    progress: &mut Progress,
    log: &mut Vec<LossRow>,
    until: usize,
) -> Result<()> {
    config.validate()?;
    if progress.stage1_epochs == 0 {
        return Err(Error::Pipeline("stage 2 needs learned prompts; run stage 1 first".into()));
    }
    if model.tpm.is_none() {
        model.tpm = Some(model.text_memory()?);
    }
    if progress.stage2_epochs == 0 {
        progress.adam2 = config.adam();
    }
    let per_epoch = stage2_steps_per_epoch(data, config)?;
    let total_steps = per_epoch * config.stage2_epochs;
    while progress.stage2_epochs < until.min(config.stage2_epochs) {
        let epoch = progress.stage2_epochs;
        model.vpm2 = Some(
            model.visual_memory(data, config.mask_source, MemoryRole::Vpm2)?.with_momentum(config.momentum)?,
        );
        let mut rng = epoch_rng(config.seed, 2, epoch);
        let batches = pk_batches(&data.labels(), config.ids_per_batch, config.samples_per_id, &mut rng)?;
        for (it, indices) in batches.iter().enumerate() {
            let lr = config.stage2_rate(epoch, progress.stage2_steps, total_steps);
            let batch = make_batch(data, indices, model, config.hflip, &mut rng);
            let mut g = Graph::new();
            let ctx = Ctx::new(&model.image.store, &stage2_trainable);
            let terms = stage2_objective(&mut g, model, &ctx, &batch, config)?;
            let grads = g.backward(terms.total).param_grads();
            let mult = config.rmp_lr_mult;
            progress.adam2.step(&mut model.image.store, &grads, |grp| if grp == Group::Rmp { lr * mult } else { lr });
            model.image.update_running_stats(&terms.stats);
            model.vpm2.as_mut().expect("built above").update_hardest(&terms.v_mg, &batch.labels)?;
            progress.stage2_steps += 1;
            log.push(LossRow { stage: 2, epoch, iteration: it, lr, losses: terms.report });
        }
        debug!(
            "stage 2 epoch {epoch}: total {:.4}",
            epoch_means(log, 2, |r| r.stage_total).last().copied().unwrap_or(f64::NAN)
        );
        progress.stage2_epochs += 1;
    }
    info!("stage 2 at epoch {} of {}", progress.stage2_epochs, config.stage2_epochs);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    stage: u8,
    image: ImageConfig,
    text: TextConfig,
    num_ids: usize,
    num_prompts: usize,
    prompt_dim: usize,
    granularity_order: Vec<String>,
    granularities: GranularitySet,
    train: TrainConfig,
    stage1_epochs: usize,
    stage2_epochs: usize,
    stage2_steps: usize,
}

pub struct Checkpoint {
    pub stage: u8,
    pub model: Model,
    pub progress: Progress,
    pub train: TrainConfig,
}

fn push_adam(archive: &mut Archive, prefix: &str, adam: &Adam) {
    let mut ids: Vec<&usize> = adam.slots.keys().collect();
    ids.sort();
    for id in ids {
        let slot = &adam.slots[id];
        archive.push(format!("{prefix}{id}/m"), None, slot.m.clone());
        archive.push(format!("{prefix}{id}/v"), None, slot.v.clone());
        archive.push(format!("{prefix}{id}/steps"), None, Mat::from_elem((1, 1), slot.steps as f64));
    }
}

fn read_adam(archive: &Archive, prefix: &str, config: &TrainConfig) -> Result<Adam> {
    let mut adam = config.adam();
    for t in archive.tensors.iter().filter(|t| t.name.starts_with(prefix) && t.name.ends_with("/m")) {
        let id_str = &t.name[prefix.len()..t.name.len() - 2];
        let id: usize =
            id_str.parse().map_err(|_| Error::Checkpoint(format!("bad optimizer entry {:?}", t.name)))?;
        let v = archive.require(&format!("{prefix}{id}/v"))?.clone();
        let steps = archive.require(&format!("{prefix}{id}/steps"))?[[0, 0]] as u64;
        adam.slots.insert(id, AdamSlot { m: t.value.clone(), v, steps });
    }
    Ok(adam)
}

fn push_memory(archive: &mut Archive, name: &str, m: &Option<PrototypeMemory>) {
    if let Some(m) = m {
        archive.push(format!("memory/{name}"), None, m.rows.clone());
        archive.push(format!("memory/{name}/momentum"), None, Mat::from_elem((1, 1), m.momentum));
    }
}

fn read_memory(archive: &Archive, name: &str, role: MemoryRole) -> Result<Option<PrototypeMemory>> {
    match archive.get(&format!("memory/{name}")) {
        None => Ok(None),
        Some(t) => {
            let momentum = archive.require(&format!("memory/{name}/momentum"))?[[0, 0]];
            Ok(Some(PrototypeMemory { role, rows: t.value.clone(), momentum }))
        }
    }
}

fn push_image(archive: &mut Archive, image: &ImageEncoder) {
    archive.push_store("image/", &image.store);
    archive.push("image_state/bn_running_mean", None, Mat::from_shape_vec((1, image.bn_running_mean.len()), image.bn_running_mean.clone()).unwrap());
    archive.push("image_state/bn_running_var", None, Mat::from_shape_vec((1, image.bn_running_var.len()), image.bn_running_var.clone()).unwrap());
    archive.push("image_state/mask_prior", None, image.mask_prior.clone());
}

fn read_image(archive: &Archive, config: ImageConfig) -> Result<ImageEncoder> {
    let mut image = ImageEncoder::new(config)?;
    archive.load_store("image/", &mut image.store)?;
    let row = |name: &str, len: usize| -> Result<Vec<f64>> {
        let m = archive.require(name)?;
        if m.len() != len {
            return Err(Error::Checkpoint(format!("{name} has {} entries, expected {len}", m.len())));
        }
        Ok(m.iter().copied().collect())
    };
    image.bn_running_mean = row("image_state/bn_running_mean", image.bn_running_mean.len())?;
    image.bn_running_var = row("image_state/bn_running_var", image.bn_running_var.len())?;
    let prior = archive.require("image_state/mask_prior")?;
    if prior.dim() != image.mask_prior.dim() {
        return Err(Error::Checkpoint("mask prior shape differs from the encoder".into()));
    }
    image.mask_prior = prior.clone();
    Ok(image)
}

pub fn save_checkpoint(path: &Path, stage: u8, model: &Model, progress: &Progress, train: &TrainConfig) -> Result<()> {
    let meta = CheckpointMeta {
        stage,
        image: model.image.config.clone(),
        text: model.text.config.clone(),
        num_ids: model.prompts.num_ids,
        num_prompts: model.prompts.num_prompts,
        prompt_dim: model.prompts.dim,
        granularity_order: ["global", "head", "upper", "legs"].map(String::from).to_vec(),
        granularities: model.granularities,
        train: train.clone(),
        stage1_epochs: progress.stage1_epochs,
        stage2_epochs: progress.stage2_epochs,
        stage2_steps: progress.stage2_steps,
    };
    let mut archive = Archive::new(serde_json::to_string(&meta)?);
    push_image(&mut archive, &model.image);
    archive.push_store("text/", &model.text.store);
    archive.push_store("prompt/", &model.prompts.store);
    push_memory(&mut archive, "vpm1", &model.vpm1);
    push_memory(&mut archive, "vpm2", &model.vpm2);
    push_memory(&mut archive, "tpm", &model.tpm);
    push_adam(&mut archive, "adam1/", &progress.adam1);
    push_adam(&mut archive, "adam2/", &progress.adam2);
    archive.write(path)
}

fn read_meta(archive: &Archive) -> Result<CheckpointMeta> {
    serde_json::from_str(&archive.meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let archive = Archive::read(path)?;
    let meta = read_meta(&archive)?;
    let image = read_image(&archive, meta.image.clone())?;
    let mut text = TextEncoder::new(meta.text.clone())?;
    archive.load_store("text/", &mut text.store)?;
    let mut prompts = PromptSet::init(meta.num_ids, meta.num_prompts, meta.prompt_dim, 0)?;
    archive.load_store("prompt/", &mut prompts.store)?;
    let model = Model {
        image,
        text,
        prompts,
        granularities: meta.granularities,
        vpm1: read_memory(&archive, "vpm1", MemoryRole::Vpm1)?,
        vpm2: read_memory(&archive, "vpm2", MemoryRole::Vpm2)?,
        tpm: read_memory(&archive, "tpm", MemoryRole::Tpm)?,
    };
    let progress = Progress {
        stage1_epochs: meta.stage1_epochs,
        stage2_epochs: meta.stage2_epochs,
        stage2_steps: meta.stage2_steps,
        adam1: read_adam(&archive, "adam1/", &meta.train)?,
        adam2: read_adam(&archive, "adam2/", &meta.train)?,
    };
    Ok(Checkpoint { stage: meta.stage, model, progress, train: meta.train })
}

/// Loads only the image side of a checkpoint (what inference needs); text
/// tensors may be absent.
pub fn load_image_encoder(path: &Path) -> Result<(ImageEncoder, GranularitySet)> {
    let archive = Archive::read(path)?;
    let meta = read_meta(&archive)?;
    Ok((read_image(&archive, meta.image)?, meta.granularities))
}
