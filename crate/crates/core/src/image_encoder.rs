//! Vision transformer with one global and three local visual tokens, a mask
//! predictor bypass on every layer, a BN neck and an identity classifier.

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::am_msa::{gate_from_binary, mask_gate, pad_attention_mask, sigmoid, Rmp, SeqLayout};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::grounding::{ImageDims, LabelMatrix, PatchGrid};
use crate::nn::{frozen, Block, Ctx, LayerNorm, Linear};
use crate::params::{normal_mat, Group, ParamStore};
use crate::synth_data::Image;
use crate::text_encoder::GranularitySet;

/// Input standardization applied to every pixel before patch projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub rmp_heads: usize,
    pub num_classes: usize,
    pub mask_threshold: f64,
    /// Constant logit every part/patch pair starts from before the first layer.
    pub mask_init: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            patch: 8,
            dim: 64,
            layers: 4,
            heads: 4,
            embed_dim: 32,
            rmp_heads: 2,
            num_classes: 20,
            mask_threshold: 0.5,
            mask_init: 2.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 23,
        }
    }
}

impl ImageConfig {
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(ImageDims { height: self.height, width: self.width }, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.layers == 0 || self.num_classes == 0 || self.embed_dim == 0 {
            return Err(Error::Config("encoder needs at least one layer, class and output dim".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) || self.rmp_heads == 0 || !self.dim.is_multiple_of(self.rmp_heads) {
            return Err(Error::Config(format!(
                "width {} must be divisible by {} heads and {} predictor heads",
                self.dim, self.heads, self.rmp_heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_threshold) {
            return Err(Error::Config("mask threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Where each layer's part attention mask comes from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    /// Gated from the layer's own predicted probabilities.
    Predicted,
    /// One binary matrix per image, used at every layer.
    External(&'a [LabelMatrix]),
    /// One binary matrix shared by every image.
    Stripe(&'a LabelMatrix),
    /// All-open masks.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Predicted,
    External,
    Stripe,
    None,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(MaskMode::Predicted),
            "external" => Ok(MaskMode::External),
            "stripe" => Ok(MaskMode::Stripe),
            "none" => Ok(MaskMode::None),
            other => Err(Error::Config(format!(
                "unknown mask source {other:?}; use predicted, external, stripe or none"
            ))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskMode::Predicted => "predicted",
            MaskMode::External => "external",
            MaskMode::Stripe => "stripe",
            MaskMode::None => "none",
        };
        f.write_str(s)
    }
}

pub struct EncodeOutput {
    pub batch: usize,
    /// `B×d`, unnormalized.
    pub v_mg: Var,
    /// Per layer, `3B×N_patch` logits with the parts of each image adjacent.
    pub mask_logits: Vec<Var>,
    /// `3B×D` local tokens after the last layer.
    pub locals: Var,
}

/// Batch statistics of one BN-neck training pass.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Inference-mode results for a set of images.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub v_mg: Mat,
    pub v_bn: Mat,
    /// Final-layer probabilities, one `3×N_patch` matrix per image.
    pub mask_probs: Vec<Mat>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageConfig,
    pub store: ParamStore,
    pub layout: SeqLayout,
    pub grid: PatchGrid,
    pub patch_proj: Linear,
    /// Rows: global, head, upper, legs.
    pub tokens: usize,
    /// Rows: global position, then one per patch.
    pub positional: usize,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<Block>,
    pub rmps: Vec<Rmp>,
    pub ln_post: LayerNorm,
    pub proj: usize,
    pub bn_gamma: usize,
    pub classifier: usize,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    /// Logits fed to the first predictor, `3×N_patch`.
    pub mask_prior: Mat,
    /// Runs the layers as a plain transformer with no predictor attached.
    pub bypass: bool,
}

impl ImageEncoder {
    pub fn new(config: ImageConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let n = grid.num_patches();
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let pixels = 3 * config.patch * config.patch;
        let patch_proj =
            Linear::new(&mut store, "patch_proj", Group::PatchEmbed, pixels, d, (pixels as f64).powf(-0.5), true, &mut rng);
        let tokens = store.add("visual_tokens", Group::VisualTokens, normal_mat(&mut rng, 4, d, 0.02));
        let positional = store.add("positional", Group::Encoder, normal_mat(&mut rng, 1 + n, d, 0.01));
        let ln_pre = LayerNorm::new(&mut store, "ln_pre", Group::Encoder, d);
        let mut blocks = Vec::with_capacity(config.layers);
        let mut rmps = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(Block::new(&mut store, &format!("block{l}"), Group::Encoder, d, config.heads, config.layers, &mut rng));
            rmps.push(Rmp::new(&mut store, &format!("rmp{l}"), d, n, config.rmp_heads, &mut rng));
        }
        let ln_post = LayerNorm::new(&mut store, "ln_post", Group::Encoder, d);
        let proj = store.add("proj", Group::Encoder, normal_mat(&mut rng, d, config.embed_dim, (d as f64).powf(-0.5)));
        let bn_gamma = store.add("bn.gamma", Group::BnNeck, Mat::ones((1, config.embed_dim)));
        let classifier =
            store.add("classifier", Group::Classifier, normal_mat(&mut rng, config.embed_dim, config.num_classes, 0.01));
        Ok(Self {
            bn_running_mean: vec![0.0; config.embed_dim],
            bn_running_var: vec![1.0; config.embed_dim],
            mask_prior: Mat::from_elem((3, n), config.mask_init),
            layout: SeqLayout::new(n),
            grid,
            config,
            store,
            patch_proj,
            tokens,
            positional,
            ln_pre,
            blocks,
            rmps,
            ln_post,
            proj,
            bn_gamma,
            classifier,
            bypass: false,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.layout.num_patches
    }

    /// Flattened `P×P×3` patches in row-major patch order, `N_patch×3P²`,
    /// with pixel values standardized.
    pub fn patch_pixels(&self, image: &Image) -> Result<Mat> {
        let (h, w, c) = image.dim();
        if h != self.config.height || w != self.config.width || c != 3 {
            return Err(Error::Shape(format!(
                "image is {h}×{w}×{c}, encoder expects {}×{}×3",
                self.config.height, self.config.width
            )));
        }
        let p = self.config.patch;
        let mut out = Mat::zeros((self.num_patches(), 3 * p * p));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (r, col) = (i / self.grid.cols, i % self.grid.cols);
            let block = image.slice(s![r * p..(r + 1) * p, col * p..(col + 1) * p, ..]);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = (*src - PIXEL_MEAN) / PIXEL_STD;
            }
        }
        Ok(out)
    }

    /// Projected patch tokens, `N_patch×D`.
    pub fn patchify(&self, image: &Image) -> Result<Mat> {
        let mut g = Graph::new();
        let ctx = Ctx::new(&self.store, &frozen);
        let x = g.constant(self.patch_pixels(image)?);
        let y = self.patch_proj.forward(&mut g, &ctx, x);
        Ok(g.value(y).clone())
    }

    /// Token sequence (tokens plus positions, before the input norm) for a
    /// batch of projected patch tokens stacked as `B·N_patch×D`.
    pub fn assemble_sequence(&self, g: &mut Graph, ctx: &Ctx, patches: Var, batch: usize) -> Var {
        let n = self.num_patches();
        let tokens = ctx.bind(g, self.tokens);
        let table = g.concat_rows(&[tokens, patches]);
        let mut token_index = Vec::with_capacity(batch * self.layout.len());
        let mut pos_index = Vec::with_capacity(batch * self.layout.len());
        for b in 0..batch {
            token_index.push(Some(0));
            pos_index.push(Some(0));
            for i in 0..n {
                token_index.push(Some(4 + b * n + i));
                pos_index.push(Some(1 + i));
            }
            for p in 0..3 {
                token_index.push(Some(1 + p));
                pos_index.push(Some(0));
            }
        }
        let seq = g.gather_rows(table, token_index);
        let pos_table = ctx.bind(g, self.positional);
        let pos = g.gather_rows(pos_table, pos_index);
        g.add(seq, pos)
    }

    fn rows_of(&self, batch: usize, pick: impl Fn(usize) -> Vec<usize>) -> Vec<usize> {
        let s = self.layout.len();
        (0..batch).flat_map(|b| pick(b).into_iter().map(move |r| b * s + r)).collect()
    }

    fn check_matrix(&self, m: &LabelMatrix) -> Result<()> {
        if m.num_patches() != self.num_patches() {
            return Err(Error::Shape(format!(
                "mask matrix has {} patches, encoder has {}",
                m.num_patches(),
                self.num_patches()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &Ctx,
        images: &[&Image],
        source: MaskSource,
        granularities: GranularitySet,
    ) -> Result<EncodeOutput> {
        let batch = images.len();
        if batch == 0 {
            return Err(Error::Shape("empty image batch".into()));
        }
        let n = self.num_patches();
        let fixed_gates: Option<Vec<Mat>> = match source {
            MaskSource::External(ms) => {
                if ms.len() != batch {
                    return Err(Error::Shape(format!("{} mask matrices for {batch} images", ms.len())));
                }
                ms.iter()
                    .map(|m| {
                        self.check_matrix(m)?;
                        pad_attention_mask(&gate_from_binary(&m.to_mat()), self.layout)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some)?
            }
            MaskSource::Stripe(m) => {
                self.check_matrix(m)?;
                let full = pad_attention_mask(&gate_from_binary(&m.to_mat()), self.layout)?;
                Some(vec![full; batch])
            }
            MaskSource::None => Some(vec![Mat::zeros((self.layout.len(), self.layout.len())); batch]),
            MaskSource::Predicted => None,
        };

        let mut pixels = Mat::zeros((batch * n, 3 * self.config.patch * self.config.patch));
        for (b, img) in images.iter().enumerate() {
            pixels.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&self.patch_pixels(img)?);
        }
        let pixels = g.constant(pixels);
        let patches = self.patch_proj.forward(g, ctx, pixels);
        let seq = self.assemble_sequence(g, ctx, patches, batch);
        let mut x = self.ln_pre.forward(g, ctx, seq);

        let local_rows = self.rows_of(batch, |_| (0..3).map(|p| self.layout.local(p)).collect());
        let patch_rows = self.rows_of(batch, |_| (0..n).map(|i| self.layout.patch(i)).collect());
        let mut prior = Mat::zeros((3 * batch, n));
        for b in 0..batch {
            prior.slice_mut(s![3 * b..3 * b + 3, ..]).assign(&self.mask_prior);
        }
        let mut logits = g.constant(prior);
        let mut mask_logits = Vec::with_capacity(self.blocks.len());

        for (block, rmp) in self.blocks.iter().zip(&self.rmps) {
            if self.bypass {
                x = block.forward(g, ctx, x, batch, None);
                continue;
            }
            let locals = g.select_rows(x, &local_rows);
            let patch_tokens = g.select_rows(x, &patch_rows);
            let (_, next) = rmp.forward(g, ctx, locals, patch_tokens, logits, batch);
            logits = next;
            mask_logits.push(logits);
            let predicted;
            let gates = match &fixed_gates {
                Some(gates) => gates,
                None => {
                    let lv = g.value(logits);
                    predicted = (0..batch)
                        .map(|b| {
                            let probs = lv.slice(s![3 * b..3 * b + 3, ..]).mapv(sigmoid);
                            pad_attention_mask(&mask_gate(&probs, self.config.mask_threshold), self.layout)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    &predicted
                }
            };
            x = block.forward(g, ctx, x, batch, Some(gates));
        }

        let x = self.ln_post.forward(g, ctx, x);
        let out_rows =
            self.rows_of(batch, |_| vec![self.layout.global(), self.layout.local(0), self.layout.local(1), self.layout.local(2)]);
        let tokens = g.select_rows(x, &out_rows);
        let proj = ctx.bind(g, self.proj);
        let projected = g.matmul(tokens, proj);
        let fuse = g.constant(fuse_matrix(batch, granularities));
        let v_mg = g.matmul(fuse, projected);
        let locals = g.select_rows(x, &local_rows);
        Ok(EncodeOutput { batch, v_mg, mask_logits, locals })
    }

    /// Training-mode BN neck: normalizes with batch statistics and returns
    /// them for [`ImageEncoder::update_running_stats`].
    pub fn bn_train(&self, g: &mut Graph, ctx: &Ctx, v: Var) -> (Var, BnStats) {
        let gamma = ctx.bind(g, self.bn_gamma);
        let count = g.value(v).nrows();
        let (out, mean, var) = g.batch_norm(v, gamma, self.config.bn_eps);
        (out, BnStats { count, mean, var })
    }

    /// Exponential update of the running statistics; the variance uses the
    /// unbiased batch estimate.
    pub fn update_running_stats(&mut self, stats: &BnStats) {
        let m = self.config.bn_momentum;
        let correction = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for j in 0..self.bn_running_mean.len() {
            self.bn_running_mean[j] = (1.0 - m) * self.bn_running_mean[j] + m * stats.mean[j];
            self.bn_running_var[j] = (1.0 - m) * self.bn_running_var[j] + m * stats.var[j] * correction;
        }
    }

    /// Inference-mode BN neck with running statistics.
    pub fn bn_infer(&self, v: &Mat) -> Mat {
        let gamma = self.store.value(self.bn_gamma);
        let mut out = v.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let r = 1.0 / (self.bn_running_var[j] + self.config.bn_eps).sqrt();
            let (mu, k) = (self.bn_running_mean[j], gamma[[0, j]]);
            col.mapv_inplace(|a| (a - mu) * r * k);
        }
        out
    }

    /// Identity logits `v_bn · W`.
    pub fn classify(&self, g: &mut Graph, ctx: &Ctx, v_bn: Var) -> Var {
        let w = ctx.bind(g, self.classifier);
        g.matmul(v_bn, w)
    }

    /// Inference pass over `images` in chunks, nothing trainable.
    pub fn embed(&self, images: &[&Image], source: MaskSource, granularities: GranularitySet) -> Result<Embedding> {
        const CHUNK: usize = 32;
        let d = self.config.embed_dim;
        let mut v_mg = Mat::zeros((images.len(), d));
        let mut mask_probs = Vec::with_capacity(images.len());
        let ctx = Ctx::new(&self.store, &frozen);
        for start in (0..images.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(images.len());
            let chunk_source = match source {
                MaskSource::External(ms) => MaskSource::External(&ms[start..end]),
                other => other,
            };
            let mut g = Graph::new();
            let out = self.forward(&mut g, &ctx, &images[start..end], chunk_source, granularities)?;
            v_mg.slice_mut(s![start..end, ..]).assign(g.value(out.v_mg));
            match out.mask_logits.last() {
                Some(&last) => {
                    let probs = g.value(last).mapv(sigmoid);
                    for b in 0..end - start {
                        mask_probs.push(probs.slice(s![3 * b..3 * b + 3, ..]).to_owned());
                    }
                }
                None => mask_probs.extend((start..end).map(|_| self.mask_prior.mapv(sigmoid))),
            }
        }
        let v_bn = self.bn_infer(&v_mg);
        Ok(Embedding { v_mg, v_bn, mask_probs })
    }
}

/// `B×4B` averaging matrix over each image's active tokens (global, head,
/// upper, legs).
pub fn fuse_matrix(batch: usize, granularities: GranularitySet) -> Mat {
    let active: Vec<usize> = granularities.iter().map(|g| g.index()).collect();
    let w = 1.0 / active.len() as f64;
    let mut m = Mat::zeros((batch, 4 * batch));
    for b in 0..batch {
        for &k in &active {
            m[[b, 4 * b + k]] = w;
        }
    }
    m
}

/// Fuses one image's projected `[global, head, upper, legs]` tokens.
pub fn fuse_tokens(tokens: &Mat, granularities: GranularitySet) -> Vec<f64> {
    fuse_matrix(1, granularities).dot(tokens).row(0).to_vec()
}
