//! Adaptively masked self-attention: a residual mask predictor that runs as
//! a bypass next to each transformer layer, and the gate that turns its
//! probabilities into an additive attention mask for the local part tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{attention_kernel, is_blocked, Graph, Mat, Var, NEG_INF};
use crate::nn::{Attention, Ctx, LayerNorm, Linear};
use crate::params::{Group, ParamStore};

/// Index layout of a token sequence `[global, patch_1..patch_N, head, upper, legs]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub num_patches: usize,
}

impl SeqLayout {
    pub fn new(num_patches: usize) -> Self {
        Self { num_patches }
    }

    pub fn len(&self) -> usize {
        self.num_patches + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn global(&self) -> usize {
        0
    }

    pub fn patch(&self, i: usize) -> usize {
        1 + i
    }

    pub fn local(&self, part: usize) -> usize {
        1 + self.num_patches + part
    }
}

/// Per-layer mask state: logits, probabilities and the additive gate.
#[derive(Clone, Debug)]
pub struct MaskState {
    /// `3×N_patch`
    pub logits: Mat,
    pub probs: Mat,
    pub attn_mask: Mat,
}

impl MaskState {
    pub fn from_logits(logits: Mat, threshold: f64) -> Self {
        let probs = logits.mapv(sigmoid);
        let attn_mask = mask_gate(&probs, threshold);
        Self { logits, probs, attn_mask }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// 0 where the probability is strictly above `threshold`, blocked elsewhere.
pub fn mask_gate(probs: &Mat, threshold: f64) -> Mat {
    probs.mapv(|p| if p > threshold { 0.0 } else { NEG_INF })
}

/// Gate taken directly from a binary matrix: 1 opens, 0 blocks.
pub fn gate_from_binary(bits: &Mat) -> Mat {
    bits.mapv(|b| if b > 0.5 { 0.0 } else { NEG_INF })
}

/// Expands a `3×N_patch` gate to the full `S×S` additive mask: the row of
/// local token `p` over patch columns carries `a[p, :]`, every other entry
/// is 0.
pub fn pad_attention_mask(a: &Mat, layout: SeqLayout) -> Result<Mat> {
    if a.dim() != (3, layout.num_patches) {
        return Err(Error::Shape(format!(
            "part mask is {:?}, expected (3, {})",
            a.dim(),
            layout.num_patches
        )));
    }
    let s = layout.len();
    let mut full = Mat::zeros((s, s));
    for p in 0..3 {
        for i in 0..layout.num_patches {
            full[[layout.local(p), layout.patch(i)]] = a[[p, i]];
        }
    }
    Ok(full)
}

/// `softmax(Q Kᵀ/√d_head + A) V` per head, heads concatenated. Entries of
/// `a_full` at the blocked value receive exactly zero weight.
pub fn masked_msa(q: &Mat, k: &Mat, v: &Mat, a_full: Option<&Mat>, heads: usize) -> Result<Mat> {
    Ok(masked_msa_with_weights(q, k, v, a_full, heads)?.0)
}

/// As [`masked_msa`], also returning the per-head post-softmax weights.
pub fn masked_msa_with_weights(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    a_full: Option<&Mat>,
    heads: usize,
) -> Result<(Mat, Vec<Mat>)> {
    if q.ncols() != k.ncols() || k.dim() != v.dim() || heads == 0 || !q.ncols().is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?} with {heads} heads",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if let Some(a) = a_full {
        if a.dim() != (q.nrows(), k.nrows()) {
            return Err(Error::Shape(format!("mask is {:?}, scores are {:?}", a.dim(), (q.nrows(), k.nrows()))));
        }
    }
    Ok(attention_kernel(q.view(), k.view(), v.view(), heads, a_full.map(|a| a.view())))
}

/// Number of open entries of a gate.
pub fn open_count(a: &Mat) -> usize {
    a.iter().filter(|&&x| !is_blocked(x)).count()
}

/// Residual mask predictor of one layer.
#[derive(Clone, Debug)]
pub struct Rmp {
    pub ln_query: LayerNorm,
    pub ln_context: LayerNorm,
    pub cross: Attention,
    pub ln_mlp: LayerNorm,
    pub fc1: Linear,
    /// Zero-initialized, so a fresh predictor passes the previous logits
    /// through unchanged.
    pub fc2: Linear,
}

impl Rmp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_patches: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (dim as f64).powf(-0.5);
        Self {
            ln_query: LayerNorm::new(store, &format!("{name}.ln_q"), Group::Rmp, dim),
            ln_context: LayerNorm::new(store, &format!("{name}.ln_kv"), Group::Rmp, dim),
            cross: Attention::new(store, &format!("{name}.cross"), Group::Rmp, dim, heads, std, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_m"), Group::Rmp, dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), Group::Rmp, dim, dim, std, true, rng),
            fc2: Linear::zeros(store, &format!("{name}.fc2"), Group::Rmp, dim, num_patches),
        }
    }

    /// `locals` is `3B×D` (three part tokens per sample), `patches` is
    /// `B·N×D`, `prev_logits` is `3B×N`. Returns the refined local tokens
    /// and the new logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &Ctx,
        locals: Var,
        patches: Var,
        prev_logits: Var,
        batch: usize,
    ) -> (Var, Var) {
        let q = self.ln_query.forward(g, ctx, locals);
        let kv = self.ln_context.forward(g, ctx, patches);
        let attended = self.cross.forward(g, ctx, q, kv, batch, None);
        let refined = g.add(attended, locals);
        let h = self.ln_mlp.forward(g, ctx, refined);
        let h = self.fc1.forward(g, ctx, h);
        let h = g.quick_gelu(h);
        let delta = self.fc2.forward(g, ctx, h);
        let logits = g.add(delta, prev_logits);
        (refined, logits)
    }
}
