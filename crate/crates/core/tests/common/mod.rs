#![allow(dead_code)]

use std::collections::HashMap;

pub mod gradcheck;
pub mod oracle;

use mgreid::graph::{Graph, Mat, Var};
use mgreid::grounding::LabelMatrix;
use mgreid::image_encoder::ImageConfig;
use mgreid::nn::{frozen, Ctx};
use mgreid::objectives::{MemoryRole, PrototypeMemory};
use mgreid::params::{normal_mat, Group, ParamStore};
use mgreid::synth_data::Image;
use mgreid::text_encoder::{GranularitySet, TextConfig};
use mgreid::trainer::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    normal_mat(rng, rows, cols, 1.0)
}

/// Below this norm a gradient is compared on an absolute scale; key biases,
/// for one, have an exactly zero gradient that both sides only approximate.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖ + ‖n‖, GRAD_FLOOR)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / (norm(analytic) + norm(numeric)).max(GRAD_FLOOR)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Central differences of `f` with respect to an input matrix.
pub fn numeric_input_grad(x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
    let mut out = Mat::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + FD_STEP;
        let up = f(&probe);
        probe[[r, c]] = orig - FD_STEP;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

/// Analytic gradient of a scalar built from one input leaf.
pub fn analytic_input_grad(x: &Mat, build: &dyn Fn(&mut Graph, Var) -> Var) -> Mat {
    let mut g = Graph::new();
    let v = g.input(x.clone(), true);
    let loss = build(&mut g, v);
    g.backward(loss).wrt(v).cloned().unwrap_or_else(|| Mat::zeros(x.raw_dim()))
}

/// Compares the analytic gradient of a graph-built scalar with central
/// differences for one input matrix.
pub fn input_grad_error(x: &Mat, build: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let analytic = analytic_input_grad(x, build);
    let numeric = numeric_input_grad(x, &|m| {
        let mut g = Graph::new();
        let v = g.input(m.clone(), false);
        let loss = build(&mut g, v);
        g.scalar(loss)
    });
    rel_error(&flat(&analytic), &flat(&numeric))
}

pub struct ParamCheck {
    pub name: String,
    pub group: Group,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Finite-difference check of every parameter whose group is trainable.
/// Up to `per_param` entries are probed per parameter (all of them when the
/// parameter is smaller).
pub fn check_params(
    store: &mut ParamStore,
    trainable: &dyn Fn(Group) -> bool,
    per_param: usize,
    seed: u64,
    f: &dyn Fn(&mut Graph, &Ctx) -> Var,
) -> Vec<ParamCheck> {
    let analytic: HashMap<usize, Mat> = {
        let mut g = Graph::new();
        let ctx = Ctx::new(store, trainable);
        let loss = f(&mut g, &ctx);
        g.backward(loss).param_grads().into_iter().collect()
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let ctx = Ctx::new(store, &frozen);
        let loss = f(&mut g, &ctx);
        g.scalar(loss)
    };
    let mut rng = rng(seed);
    let ids: Vec<(usize, String, Group, usize, usize)> = store
        .iter()
        .filter(|(_, p)| trainable(p.group))
        .map(|(id, p)| (id, p.name.clone(), p.group, p.value.nrows(), p.value.ncols()))
        .collect();
    let mut out = Vec::new();
    for (id, name, group, rows, cols) in ids {
        let total = rows * cols;
        let entries: Vec<usize> = if total <= per_param {
            (0..total).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..total)).collect()
        };
        let zero = Mat::zeros((rows, cols));
        let grad = analytic.get(&id).unwrap_or(&zero);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for e in entries {
            let (r, c) = (e / cols, e % cols);
            let orig = store.value(id)[[r, c]];
            store.value_mut(id)[[r, c]] = orig + FD_STEP;
            let up = eval(store);
            store.value_mut(id)[[r, c]] = orig - FD_STEP;
            let down = eval(store);
            store.value_mut(id)[[r, c]] = orig;
            a.push(grad[[r, c]]);
            n.push((up - down) / (2.0 * FD_STEP));
        }
        let analytic_norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(ParamCheck { name, group, rel_error: rel_error(&a, &n), analytic_norm });
    }
    out
}

/// Four granularities, two layers, `D=16`, `N_patch=8`.
pub fn micro_image_config(num_classes: usize) -> ImageConfig {
    ImageConfig {
        height: 32,
        width: 16,
        patch: 8,
        dim: 16,
        layers: 2,
        heads: 2,
        embed_dim: 8,
        rmp_heads: 2,
        num_classes,
        ..Default::default()
    }
}

pub fn micro_text_config() -> TextConfig {
    TextConfig { width: 16, layers: 1, heads: 2, embed_dim: 8, num_prompts: 2, ..Default::default() }
}

pub fn micro_model(num_ids: usize, granularities: GranularitySet) -> Model {
    Model::new(micro_image_config(num_ids), micro_text_config(), num_ids, granularities, 5).unwrap()
}

pub fn random_memory(rng: &mut impl Rng, role: MemoryRole, rows: usize, dim: usize) -> PrototypeMemory {
    PrototypeMemory::from_rows(role, random_mat(rng, rows, dim)).unwrap()
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))
}

pub fn random_label_matrix(rng: &mut impl Rng, n: usize) -> LabelMatrix {
    let mut row = || (0..n).map(|_| rng.random_range(0..2u8)).collect::<Vec<u8>>();
    LabelMatrix::new(row(), row(), row()).unwrap()
}

/// Gives every mask predictor a non-zero output layer so gradients reach
/// the whole bypass.
pub fn activate_predictors(model: &mut Model, rng: &mut impl Rng, std: f64) {
    for rmp in model.image.rmps.clone() {
        let shape = model.image.store.value(rmp.fc2.w).raw_dim();
        *model.image.store.value_mut(rmp.fc2.w) = normal_mat(rng, shape[0], shape[1], std);
    }
}

pub fn stage2_groups(g: Group) -> bool {
    matches!(g, Group::Encoder | Group::VisualTokens | Group::BnNeck | Group::Classifier | Group::Rmp)
}

/// A run small enough to train both stages in seconds.
pub const TINY_TOML: &str = r#"
seed = 3

[data]
num_ids = 4
samples_per_id = 8
image_height = 32
image_width = 16

[image]
dim = 16
layers = 2
heads = 2
embed_dim = 8

[text]
width = 16
layers = 1
heads = 2
embed_dim = 8
num_prompts = 2

[train]
stage1_epochs = 3
stage2_epochs = 3
stage1_batch = 2
ids_per_batch = 2
samples_per_id = 2
"#;

pub fn tiny_config(out: &std::path::Path) -> mgreid::config::RunConfig {
    let mut cfg = mgreid::config::RunConfig::from_toml(TINY_TOML).unwrap();
    cfg.out = out.to_path_buf();
    cfg.finalize().unwrap()
}
