//! Prototype memories and the training losses of both stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryRole {
    /// Visual prototypes fixed for prompt learning.
    Vpm1,
    /// Visual prototypes updated with momentum during encoder training.
    Vpm2,
    /// Text prototypes from the learned prompts.
    Tpm,
}

/// `C×d` matrix of unit-norm identity prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMemory {
    pub role: MemoryRole,
    pub rows: Mat,
    pub momentum: f64,
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::Numerical(format!("cannot normalize a vector of norm {n:e}")));
    }
    v.iter_mut().for_each(|a| *a /= n);
    Ok(())
}

impl PrototypeMemory {
    /// Row `c` is the normalized mean of the features labelled `c`.
    pub fn from_centroids(role: MemoryRole, features: &Mat, labels: &[usize], num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} features for {} labels", features.nrows(), labels.len())));
        }
        let d = features.ncols();
        let mut rows = Mat::zeros((num_classes, d));
        let mut counts = vec![0usize; num_classes];
        for (f, &y) in features.rows().into_iter().zip(labels) {
            if y >= num_classes {
                return Err(Error::Shape(format!("label {y} out of range for {num_classes} classes")));
            }
            let mut r = rows.row_mut(y);
            r += &f;
            counts[y] += 1;
        }
        for (c, &k) in counts.iter().enumerate() {
            if k == 0 {
                return Err(Error::Pipeline(format!("identity {c} has no samples to build its prototype")));
            }
            let mut row = rows.row(c).to_vec();
            normalize(&mut row).map_err(|e| Error::Numerical(format!("prototype of identity {c}: {e}")))?;
            rows.row_mut(c).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok(Self { role, rows, momentum: 0.0 })
    }

    /// Memory whose rows are given unit vectors (e.g. encoded text tokens).
    pub fn from_rows(role: MemoryRole, rows: Mat) -> Result<Self> {
        let mut rows = rows;
        for mut r in rows.rows_mut() {
            let mut v = r.to_vec();
            normalize(&mut v)?;
            r.assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(Self { role, rows, momentum: 0.0 })
    }

    pub fn with_momentum(mut self, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("momentum {gamma} outside [0, 1]")));
        }
        self.momentum = gamma;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    /// Momentum update toward each present identity's hardest batch sample
    /// (lowest cosine similarity to its current prototype). Identities are
    /// processed in ascending order; rows stay unit-norm.
    pub fn update_hardest(&mut self, features: &Mat, labels: &[usize]) -> Result<()> {
        let mut ids: Vec<usize> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let gamma = self.momentum;
        for y in ids {
            if y >= self.num_classes() {
                return Err(Error::Shape(format!("label {y} out of range")));
            }
            let row = self.rows.row(y).to_owned();
            let mut hardest: Option<(f64, Vec<f64>)> = None;
            for (f, _) in features.rows().into_iter().zip(labels).filter(|(_, &l)| l == y) {
                let mut v = f.to_vec();
                normalize(&mut v)?;
                let sim: f64 = v.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                if hardest.as_ref().is_none_or(|(s, _)| sim < *s) {
                    hardest = Some((sim, v));
                }
            }
            let (_, v) = hardest.expect("identity is present in the batch");
            let mut mixed: Vec<f64> = row.iter().zip(&v).map(|(r, s)| gamma * r + (1.0 - gamma) * s).collect();
            normalize(&mut mixed)?;
            self.rows.row_mut(y).assign(&ndarray::ArrayView1::from(&mixed));
        }
        Ok(())
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Mat {
    let mut m = Mat::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        m[[i, y]] = 1.0;
    }
    m
}

/// `1−ε+ε/C` on the label, `ε/C` elsewhere.
pub fn smoothed_targets(labels: &[usize], num_classes: usize, eps: f64) -> Mat {
    let off = eps / num_classes as f64;
    let mut m = Mat::from_elem((labels.len(), num_classes), off);
    for (i, &y) in labels.iter().enumerate() {
        m[[i, y]] = 1.0 - eps + off;
    }
    m
}

/// Cosine similarities of each row of `x` to every memory row.
pub fn cosine_logits(g: &mut Graph, x: Var, memory: &PrototypeMemory) -> Var {
    let xn = g.row_normalize(x);
    let m = g.constant(memory.rows.clone());
    g.matmul_t(xn, m)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{rows} inputs for {} labels", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Shape(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Text-to-visual-prototype contrastive loss: cross entropy over plain
/// cosine similarities, averaged over the rows of `text`.
pub fn loss_cmp(g: &mut Graph, text: Var, memory: &PrototypeMemory, labels: &[usize]) -> Result<Var> {
    check_labels(labels, g.value(text).nrows(), memory.num_classes())?;
    let logits = cosine_logits(g, text, memory);
    Ok(g.soft_cross_entropy(logits, one_hot(labels, memory.num_classes())))
}

/// Identity cross entropy over raw classifier logits.
pub fn loss_id(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = g.value(logits).dim();
    check_labels(labels, n, c)?;
    Ok(g.soft_cross_entropy(logits, one_hot(labels, c)))
}

/// Visual-to-visual-prototype contrastive loss with temperature `tau`.
pub fn loss_imp(g: &mut Graph, v: Var, memory: &PrototypeMemory, labels: &[usize], tau: f64) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_labels(labels, g.value(v).nrows(), memory.num_classes())?;
    let sims = cosine_logits(g, v, memory);
    let logits = g.scale(sims, 1.0 / tau);
    Ok(g.soft_cross_entropy(logits, one_hot(labels, memory.num_classes())))
}

/// Image-to-text cross entropy against label-smoothed targets.
pub fn loss_i2tce(g: &mut Graph, v: Var, memory: &PrototypeMemory, labels: &[usize], eps: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing must lie in [0, 1), got {eps}")));
    }
    check_labels(labels, g.value(v).nrows(), memory.num_classes())?;
    let logits = cosine_logits(g, v, memory);
    Ok(g.soft_cross_entropy(logits, smoothed_targets(labels, memory.num_classes(), eps)))
}

/// Mask supervision on logits (any row stack of part/patch logits and the
/// matching binary labels). Returns `(bce, dice)`, each averaged over all
/// elements.
pub fn loss_mask(g: &mut Graph, logits: Var, labels: &Mat) -> Result<(Var, Var)> {
    if g.value(logits).dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "mask logits {:?} against labels {:?}",
            g.value(logits).dim(),
            labels.dim()
        )));
    }
    let bce = g.bce_with_logits(logits, labels.clone());
    let dice = g.dice_with_logits(logits, labels.clone(), DICE_EPS);
    Ok((bce, dice))
}

/// The same mask losses evaluated directly on per-layer probability
/// matrices, each compared with `labels`.
pub fn mask_loss_from_probs(probs: &[Mat], labels: &Mat) -> Result<(f64, f64, f64)> {
    let mut bce = 0.0;
    let mut dice = 0.0;
    let mut n = 0usize;
    for p in probs {
        if p.dim() != labels.dim() {
            return Err(Error::Shape(format!("mask {:?} against labels {:?}", p.dim(), labels.dim())));
        }
        for (&m, &y) in p.iter().zip(labels.iter()) {
            bce -= y * m.ln() + (1.0 - y) * (1.0 - m).ln();
            dice += 1.0 - 2.0 * m * y / (m + y + DICE_EPS);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Shape("no mask layers".into()));
    }
    let (bce, dice) = (bce / n as f64, dice / n as f64);
    Ok((bce, dice, bce + dice))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cmp: f64,
    pub id: f64,
    pub imp: f64,
    pub i2tce: f64,
    pub bce: f64,
    pub dice: f64,
    pub mask: f64,
    pub stage_total: f64,
}

impl LossReport {
    pub const NAMES: [&'static str; 8] = ["cmp", "id", "imp", "i2tce", "bce", "dice", "mask", "stage_total"];

    pub fn values(&self) -> [f64; 8] {
        [self.cmp, self.id, self.imp, self.i2tce, self.bce, self.dice, self.mask, self.stage_total]
    }

    /// Fills `stage_total` (and `mask`) and checks that every term is finite.
    pub fn finish(mut self, stage: Stage) -> Result<Self> {
        self.mask = self.bce + self.dice;
        self.stage_total = stage_total(&self, stage)?;
        Ok(self)
    }
}

/// Stage 1 optimizes the contrastive prompt loss alone; stage 2 the
/// unit-weight sum of identity, prototype, image-to-text and mask losses.
pub fn stage_total(report: &LossReport, stage: Stage) -> Result<f64> {
    let terms: Vec<(&str, f64)> = match stage {
        Stage::One => vec![("cmp", report.cmp)],
        Stage::Two => vec![("id", report.id), ("imp", report.imp), ("i2tce", report.i2tce), ("mask", report.mask)],
    };
    if let Some((name, v)) = terms.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numerical(format!("stage {} loss term {name} is {v}", stage.number())));
    }
    Ok(terms.iter().map(|(_, v)| v).sum())
}
