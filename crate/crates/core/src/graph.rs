//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and returns
//! gradients for every node that depends on a trainable leaf. All arithmetic is
//! `f64` so the same code path serves training and finite-difference checks.
//!
//! Layer norm, multi-head attention and the loss heads are single fused nodes,
//! each with its own backward rule.

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Mat = Array2<f64>;

/// Additive mask value for a blocked attention entry.
pub const NEG_INF: f64 = f64::MIN;

/// True when an additive attention-mask entry blocks its key.
#[inline]
pub fn is_blocked(a: f64) -> bool {
    a <= NEG_INF / 2.0
}

/// Largest elementwise absolute difference of two equally shaped matrices.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim(), "shape mismatch");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gather {
        src: Var,
        index: Vec<Option<usize>>,
    },
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    QuickGelu(Var),
    Sigmoid(Var),
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        probs: Vec<Mat>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Mat,
        probs: Mat,
    },
    BceWithLogits {
        logits: Var,
        labels: Mat,
    },
    Dice {
        logits: Var,
        labels: Mat,
        eps: f64,
    },
    MeanAll(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: Vec<(usize, usize)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every trainable parameter leaf, keyed by parameter id.
    /// A parameter used by several leaves has its contributions summed.
    pub fn param_grads(&self) -> Vec<(usize, Mat)> {
        let mut out: Vec<(usize, Mat)> = Vec::new();
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                if let Some(slot) = out.iter_mut().find(|(p, _)| *p == pid) {
                    slot.1 += g;
                } else {
                    out.push((pid, g.clone()));
                }
            }
        }
        out
    }
}

fn softmax_rows_masked(scores: &mut Mat, mask: Option<ArrayView2<f64>>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, x) in row.iter_mut().enumerate() {
            let a = mask.map_or(0.0, |m| m[[i, j]]);
            if is_blocked(a) {
                *x = f64::NEG_INFINITY;
            } else {
                *x += a;
                if *x > max {
                    max = *x;
                }
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            if *x == f64::NEG_INFINITY {
                *x = 0.0;
            } else {
                *x = (*x - max).exp();
                sum += *x;
            }
        }
        row.mapv_inplace(|x| x / sum);
    }
}

/// Multi-head scaled dot-product attention for one sequence.
///
/// `q` is `Sq×D`, `k` and `v` are `Sk×D`. Heads split `D` evenly. `mask` is
/// an optional `Sq×Sk` additive mask; blocked entries get exactly zero weight
/// and a row with every key blocked yields a zero output row.
/// Returns the concatenated head outputs and the per-head weight matrices.
pub fn attention_kernel(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
    mask: Option<ArrayView2<f64>>,
) -> (Mat, Vec<Mat>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut p = qh.dot(&kh.t()) * scale;
        softmax_rows_masked(&mut p, mask);
        out.slice_mut(cols).assign(&p.dot(&vh));
        probs.push(p);
    }
    (out, probs)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 1.702;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free input leaf; gradients flow to it when `requires_grad` is set.
    pub fn input(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Parameter leaf. Frozen parameters behave as constants.
    pub fn param(&mut self, id: usize, value: &Mat, trainable: bool) -> Var {
        let v = self.push(value.clone(), Op::Leaf, trainable);
        if trainable {
            self.nodes[v.0].param = Some(id);
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + row` with `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a ⊙ row` with `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Sum of several nodes of equal shape.
    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Row `r` of the result is `src[index[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, src: Var, index: Vec<Option<usize>>) -> Var {
        let s = self.value(src);
        let mut value = Mat::zeros((index.len(), s.ncols()));
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = ix {
                value.row_mut(r).assign(&s.row(*i));
            }
        }
        let rg = self.rg(src);
        self.push(value, Op::Gather { src, index }, rg)
    }

    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        self.gather_rows(src, rows.iter().map(|&r| Some(r)).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×D`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|a| a - mean);
            let var = row.iter().map(|a| a * a).sum::<f64>() / d;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|a| a * r);
            rstd.push(r);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Feature-wise batch normalization over the rows of `x` using batch
    /// statistics, scaled by `gamma` (`1×D`), with no shift. Also returns the
    /// batch mean and biased variance for running-statistics updates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.ncols());
        let mut means = Vec::with_capacity(xv.ncols());
        let mut vars = Vec::with_capacity(xv.ncols());
        for mut col in xhat.columns_mut() {
            let mean = col.sum() / n;
            col.mapv_inplace(|a| a - mean);
            let var = col.iter().map(|a| a * a).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            col.mapv_inplace(|a| a * r);
            rstd.push(r);
            means.push(mean);
            vars.push(var);
        }
        let value = &xhat * self.value(gamma);
        let rg = self.rg(x) || self.rg(gamma);
        let out = self.push(value, Op::BatchNorm { x, gamma, xhat, rstd }, rg);
        (out, means, vars)
    }

    /// `x · σ(1.702 x)`
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|a| a * sigmoid(GELU_K * a));
        let rg = self.rg(x);
        self.push(value, Op::QuickGelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Scales each row to unit L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|a| a / n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(value, Op::RowNormalize { x, norms }, rg)
    }

    /// Batched multi-head attention. `q` holds `batch` stacked query blocks of
    /// equal height, `k`/`v` hold `batch` stacked key blocks. `masks`, when
    /// given, has one additive mask per batch item.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        masks: Option<&[Mat]>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let sq = qv.nrows() / batch;
        let sk = kv.nrows() / batch;
        let mut value = Mat::zeros((qv.nrows(), qv.ncols()));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let (o, p) = attention_kernel(
                qv.slice(s![b * sq..(b + 1) * sq, ..]),
                kv.slice(s![b * sk..(b + 1) * sk, ..]),
                vv.slice(s![b * sk..(b + 1) * sk, ..]),
                heads,
                masks.map(|m| m[b].view()),
            );
            value.slice_mut(s![b * sq..(b + 1) * sq, ..]).assign(&o);
            probs.extend(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(value, Op::Attention { q, k, v, heads, batch, probs }, rg)
    }

    /// Mean over rows of the soft-target cross entropy of `logits` (`n×C`).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Mat) -> Var {
        let lv = self.value(logits);
        let n = lv.nrows() as f64;
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, t) in probs.rows_mut().into_iter().zip(targets.rows()) {
            let max = row.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            for (x, &tc) in row.iter_mut().zip(t.iter()) {
                let logp = *x - lse;
                loss -= tc * logp;
                *x = logp.exp();
            }
        }
        let value = Mat::from_elem((1, 1), loss / n);
        let rg = self.rg(logits);
        self.push(value, Op::SoftCrossEntropy { logits, targets, probs }, rg)
    }

    /// Mean binary cross entropy between `σ(logits)` and binary `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Mat) -> Var {
        let lv = self.value(logits);
        let n = lv.len() as f64;
        let total: f64 = lv
            .iter()
            .zip(labels.iter())
            .map(|(&m, &g)| m.max(0.0) - m * g + (-m.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        self.push(Mat::from_elem((1, 1), total / n), Op::BceWithLogits { logits, labels }, rg)
    }

    /// Mean elementwise dice loss `1 − 2pg/(p+g+eps)` with `p = σ(logits)`.
    pub fn dice_with_logits(&mut self, logits: Var, labels: Mat, eps: f64) -> Var {
        let lv = self.value(logits);
        let n = lv.len() as f64;
        let total: f64 = lv
            .iter()
            .zip(labels.iter())
            .map(|(&m, &g)| {
                let p = sigmoid(m);
                1.0 - 2.0 * p * g / (p + g + eps)
            })
            .sum();
        let rg = self.rg(logits);
        self.push(Mat::from_elem((1, 1), total / n), Op::Dice { logits, labels, eps }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Mat::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Gradients of the `1×1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.value(loss).raw_dim()));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            // Leaves keep their gradient; intermediate gradients are consumed.
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, gout.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&gout));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, gout.dot(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, gout.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, gout.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, gout.clone());
                    }
                }
                Op::AddRow(a, r) => {
                    if self.rg(*r) {
                        acc(&mut grads, *r, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, gout.clone());
                    }
                }
                Op::MulRow(a, r) => {
                    if self.rg(*r) {
                        let g = (&gout * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *r, g);
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, &gout * self.value(*r));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, gout * *k),
                Op::Gather { src, index } => {
                    let mut g = Mat::zeros(self.value(*src).raw_dim());
                    for (r, ix) in index.iter().enumerate() {
                        if let Some(j) = ix {
                            let mut row = g.row_mut(*j);
                            row += &gout.row(r);
                        }
                    }
                    acc(&mut grads, *src, g);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if self.rg(*p) {
                            acc(&mut grads, *p, gout.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    if self.rg(*gamma) {
                        let g = (&gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, g);
                    }
                    if self.rg(*beta) {
                        acc(&mut grads, *beta, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        let dxhat = &gout * self.value(*gamma);
                        let d = xhat.ncols() as f64;
                        let mut dx = Mat::zeros(xhat.raw_dim());
                        for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                            let gh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let m1 = gh.sum() / d;
                            let m2 = gh.dot(&xh) / d;
                            for ((o, &a), &b) in out.iter_mut().zip(gh).zip(xh) {
                                *o = rstd[r] * (a - m1 - b * m2);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::BatchNorm { x, gamma, xhat, rstd } => {
                    if self.rg(*gamma) {
                        let g = (&gout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, g);
                    }
                    if self.rg(*x) {
                        let dxhat = &gout * self.value(*gamma);
                        let n = xhat.nrows() as f64;
                        let mut dx = Mat::zeros(xhat.raw_dim());
                        for (c, mut out) in dx.columns_mut().into_iter().enumerate() {
                            let gh = dxhat.column(c);
                            let xh = xhat.column(c);
                            let m1 = gh.sum() / n;
                            let m2 = gh.dot(&xh) / n;
                            for ((o, &a), &b) in out.iter_mut().zip(gh).zip(xh) {
                                *o = rstd[c] * (a - m1 - b * m2);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::QuickGelu(x) => {
                    let mut g = gout;
                    g.zip_mut_with(self.value(*x), |g, &a| {
                        let sg = sigmoid(GELU_K * a);
                        *g *= sg + a * GELU_K * sg * (1.0 - sg);
                    });
                    acc(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => {
                    let mut g = gout;
                    g.zip_mut_with(&node.value, |g, &p| *g *= p * (1.0 - p));
                    acc(&mut grads, *x, g);
                }
                Op::RowNormalize { x, norms } => {
                    let y = &node.value;
                    let mut g = gout;
                    for (r, mut row) in g.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let proj = yr.dot(&row);
                        row.zip_mut_with(&yr, |gi, &yi| *gi = (*gi - yi * proj) / norms[r]);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Attention { q, k, v, heads, batch, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let sq = qv.nrows() / batch;
                    let sk = kv.nrows() / batch;
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qv.raw_dim());
                    let mut dk = Mat::zeros(kv.raw_dim());
                    let mut dv = Mat::zeros(vv.raw_dim());
                    for b in 0..*batch {
                        let qr = b * sq..(b + 1) * sq;
                        let kr = b * sk..(b + 1) * sk;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let dout = gout.slice(s![qr.clone(), cols.clone()]);
                            let vh = vv.slice(s![kr.clone(), cols.clone()]);
                            let qh = qv.slice(s![qr.clone(), cols.clone()]);
                            let kh = kv.slice(s![kr.clone(), cols.clone()]);
                            dv.slice_mut(s![kr.clone(), cols.clone()]).assign(&p.t().dot(&dout));
                            let mut ds = dout.dot(&vh.t());
                            for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = dsr.dot(&pr);
                                dsr.zip_mut_with(&pr, |x, &pi| *x = pi * (*x - dot));
                            }
                            dq.slice_mut(s![qr.clone(), cols.clone()])
                                .assign(&(ds.dot(&kh) * scale));
                            dk.slice_mut(s![kr.clone(), cols.clone()])
                                .assign(&(ds.t().dot(&qh) * scale));
                        }
                    }
                    if self.rg(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if self.rg(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if self.rg(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::SoftCrossEntropy { logits, targets, probs } => {
                    let n = probs.nrows() as f64;
                    let g = (probs - targets) * (gout[[0, 0]] / n);
                    acc(&mut grads, *logits, g);
                }
                Op::BceWithLogits { logits, labels } => {
                    let lv = self.value(*logits);
                    let k = gout[[0, 0]] / lv.len() as f64;
                    let mut g = lv.mapv(sigmoid);
                    g.zip_mut_with(labels, |p, &y| *p = (*p - y) * k);
                    acc(&mut grads, *logits, g);
                }
                Op::Dice { logits, labels, eps } => {
                    let lv = self.value(*logits);
                    let k = gout[[0, 0]] / lv.len() as f64;
                    let mut g = lv.mapv(sigmoid);
                    g.zip_mut_with(labels, |p, &y| {
                        let den = *p + y + eps;
                        let d_dp = -2.0 * y * (y + eps) / (den * den);
                        *p = d_dp * *p * (1.0 - *p) * k;
                    });
                    acc(&mut grads, *logits, g);
                }
                Op::MeanAll(x) => {
                    let shape = self.value(*x).raw_dim();
                    let n = self.value(*x).len() as f64;
                    acc(&mut grads, *x, Mat::from_elem(shape, gout[[0, 0]] / n));
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Grads { grads, params }
    }
}
