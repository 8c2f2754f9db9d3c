//! Independent straight-from-formula recomputations of losses, memories,
//! metrics, rasterization and masked attention. Each returns its worst
//! discrepancy so tests and the acceptance report can apply the tolerance.

#![allow(clippy::needless_range_loop)]

use mgreid::am_msa::{masked_msa, pad_attention_mask, SeqLayout};
use mgreid::evaluation::{average_precision, compute_map_cmc, ItemMeta};
use mgreid::graph::{Graph, Mat, NEG_INF};
use mgreid::grounding::{calibrate_box, rasterize, CalibPolicy, ImageDims, Part, PartBox, PatchGrid};
use mgreid::objectives::{
    loss_cmp, loss_i2tce, loss_id, loss_imp, loss_mask, MemoryRole, PrototypeMemory, DICE_EPS,
};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{random_mat, rng};

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// `−Σ_c q_c log softmax(z)_c`.
fn soft_ce(z: &[f64], q: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    -z.iter().zip(q).map(|(zc, qc)| qc * (zc - lse)).sum::<f64>()
}

fn onehot(y: usize, c: usize) -> Vec<f64> {
    (0..c).map(|k| if k == y { 1.0 } else { 0.0 }).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn graph_loss(x: &Mat, build: impl Fn(&mut Graph, mgreid::graph::Var) -> mgreid::graph::Var) -> f64 {
    let mut g = Graph::new();
    let v = g.input(x.clone(), false);
    let l = build(&mut g, v);
    g.scalar(l)
}

/// Worst relative error of every loss against its formula over `trials`
/// random instances.
pub fn loss_formula_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c = r.random_range(2..7);
        let d = r.random_range(2..9);
        let n = r.random_range(1..6);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let mem = PrototypeMemory::from_rows(MemoryRole::Vpm1, random_mat(&mut r, c, d)).unwrap();
        let x = random_mat(&mut r, n, d) * r.random_range(0.1..5.0);
        let logits = random_mat(&mut r, n, c) * 3.0;
        let tau = r.random_range(0.01..2.0);
        let eps = r.random_range(0.0..0.5);
        let mrows = rows(&mem.rows);
        let xrows = rows(&x);
        let sims = |i: usize| -> Vec<f64> { mrows.iter().map(|m| cosine(&xrows[i], m)).collect() };
        let mean = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>() / n as f64;

        let cmp = mean(&|i| soft_ce(&sims(i), &onehot(labels[i], c)));
        let imp = mean(&|i| soft_ce(&sims(i).iter().map(|s| s / tau).collect::<Vec<_>>(), &onehot(labels[i], c)));
        let i2t = mean(&|i| {
            let q: Vec<f64> = (0..c).map(|k| if k == labels[i] { 1.0 - eps + eps / c as f64 } else { eps / c as f64 }).collect();
            soft_ce(&sims(i), &q)
        });
        let lrows = rows(&logits);
        let id = mean(&|i| soft_ce(&lrows[i], &onehot(labels[i], c)));

        worst = worst.max(rel(cmp, graph_loss(&x, |g, v| loss_cmp(g, v, &mem, &labels).unwrap())));
        worst = worst.max(rel(imp, graph_loss(&x, |g, v| loss_imp(g, v, &mem, &labels, tau).unwrap())));
        worst = worst.max(rel(i2t, graph_loss(&x, |g, v| loss_i2tce(g, v, &mem, &labels, eps).unwrap())));
        worst = worst.max(rel(id, graph_loss(&logits, |g, v| loss_id(g, v, &labels).unwrap())));

        let np = r.random_range(1..10);
        let mlog = random_mat(&mut r, 3, np) * 2.0;
        let lab = Mat::from_shape_fn((3, np), |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
        let count = (3 * np) as f64;
        let (mut bce, mut dice) = (0.0, 0.0);
        for (&m, &y) in mlog.iter().zip(lab.iter()) {
            let p = 1.0 / (1.0 + (-m).exp());
            bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            dice += 1.0 - 2.0 * p * y / (p + y + DICE_EPS);
        }
        let mut g = Graph::new();
        let v = g.input(mlog.clone(), false);
        let (gb, gd) = loss_mask(&mut g, v, &lab).unwrap();
        worst = worst.max(rel(bce / count, g.scalar(gb)));
        worst = worst.max(rel(dice / count, g.scalar(gd)));
    }
    worst
}

/// Worst absolute error of centroid memories and the hardest-sample update.
pub fn memory_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let c = r.random_range(2..6);
        let d = r.random_range(2..7);
        let mut labels: Vec<usize> = (0..c).collect();
        labels.extend((0..r.random_range(0..10)).map(|_| r.random_range(0..c)));
        labels.shuffle(&mut r);
        let feats = random_mat(&mut r, labels.len(), d);
        let mem = PrototypeMemory::from_centroids(MemoryRole::Vpm1, &feats, &labels, c).unwrap();
        for k in 0..c {
            let mut sum = vec![0.0; d];
            for (i, &y) in labels.iter().enumerate() {
                if y == k {
                    for j in 0..d {
                        sum[j] += feats[[i, j]];
                    }
                }
            }
            let norm = dot(&sum, &sum).sqrt();
            for j in 0..d {
                worst = worst.max((mem.rows[[k, j]] - sum[j] / norm).abs());
            }
        }

        let mut vpm2 = mem.clone().with_momentum(0.2).unwrap();
        let before = vpm2.rows.clone();
        let batch_labels: Vec<usize> = (0..4).map(|_| r.random_range(0..c)).collect();
        let batch = random_mat(&mut r, 4, d);
        vpm2.update_hardest(&batch, &batch_labels).unwrap();
        for k in 0..c {
            let old = before.row(k).to_vec();
            let members: Vec<usize> = (0..4).filter(|&i| batch_labels[i] == k).collect();
            let expected = match members
                .iter()
                .min_by(|&&a, &&b| cosine(&batch.row(a).to_vec(), &old).total_cmp(&cosine(&batch.row(b).to_vec(), &old)))
            {
                None => old.clone(),
                Some(&h) => {
                    let hard = batch.row(h).to_vec();
                    let hn = dot(&hard, &hard).sqrt();
                    let v: Vec<f64> = old.iter().zip(&hard).map(|(o, b)| 0.2 * o + 0.8 * b / hn).collect();
                    let n = dot(&v, &v).sqrt();
                    v.iter().map(|x| x / n).collect()
                }
            };
            for j in 0..d {
                worst = worst.max((vpm2.rows[[k, j]] - expected[j]).abs());
            }
        }
    }
    worst
}

/// Brute-force evaluator: full sort by similarity (ties by gallery index),
/// same-identity same-camera items dropped, AP as the mean of precision at
/// every relevant rank.
pub fn brute_force_map_cmc(q: &Mat, qm: &[ItemMeta], g: &Mat, gm: &[ItemMeta]) -> (f64, f64, usize) {
    let mut aps = Vec::new();
    let mut hits = 0;
    for (i, qi) in qm.iter().enumerate() {
        let mut items: Vec<(f64, usize)> = (0..gm.len())
            .filter(|&j| !(gm[j].id == qi.id && gm[j].camera == qi.camera))
            .map(|j| (cosine(&q.row(i).to_vec(), &g.row(j).to_vec()), j))
            .collect();
        items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let total_rel = items.iter().filter(|(_, j)| gm[*j].id == qi.id).count();
        if total_rel == 0 {
            continue;
        }
        let mut found = 0;
        let mut ap = 0.0;
        for (rank, (_, j)) in items.iter().enumerate() {
            if gm[*j].id == qi.id {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / total_rel as f64);
        if gm[items[0].1].id == qi.id {
            hits += 1;
        }
    }
    let n = aps.len();
    (aps.iter().sum::<f64>() / n.max(1) as f64, hits as f64 / n.max(1) as f64, n)
}

/// Worst difference between the library metrics and the brute-force
/// evaluator; infinite when the query counts disagree.
pub fn metric_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let ids = r.random_range(2..5);
        let (nq, ng, d) = (r.random_range(1..6), r.random_range(2..21), r.random_range(2..6));
        let meta = |r: &mut rand_chacha::ChaCha8Rng| ItemMeta { id: r.random_range(0..ids), camera: r.random_range(0..2) };
        let qm: Vec<ItemMeta> = (0..nq).map(|_| meta(&mut r)).collect();
        let gm: Vec<ItemMeta> = (0..ng).map(|_| meta(&mut r)).collect();
        let q = random_mat(&mut r, nq, d);
        let g = random_mat(&mut r, ng, d);
        let res = compute_map_cmc(&q, &qm, &g, &gm).unwrap();
        let (map, rank1, n) = brute_force_map_cmc(&q, &qm, &g, &gm);
        if res.num_queries != n || res.excluded_queries != nq - n {
            return f64::INFINITY;
        }
        worst = worst.max((res.map - map).abs()).max((res.rank1 - rank1).abs());
    }
    worst
}

/// AP of relevant items at ranks 1 and 3 of five.
pub fn worked_ap() -> f64 {
    average_precision(&[true, false, true, false, false]).unwrap()
}

fn pixel_oracle(b: &PartBox, grid: PatchGrid) -> Vec<u8> {
    let dims = grid.dims();
    let mut out = vec![0u8; grid.num_patches()];
    for y in 0..dims.height as u32 {
        for x in 0..dims.width as u32 {
            if x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max {
                out[(y as usize / grid.patch) * grid.cols + x as usize / grid.patch] = 1;
            }
        }
    }
    out
}

fn random_box(r: &mut impl Rng, dims: ImageDims) -> PartBox {
    let part = Part::ALL[r.random_range(0..3)];
    let (x0, x1) = (r.random_range(0..=dims.width as u32), r.random_range(0..=dims.width as u32));
    let (y0, y1) = (r.random_range(0..=dims.height as u32), r.random_range(0..=dims.height as u32));
    PartBox::new(part, x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
}

/// Boxes whose patch mask differs from pixel rasterization, over `boxes`
/// random boxes on each of two grids, plus the worked head example.
pub fn rasterization_mismatches(boxes: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let small = PatchGrid::new(ImageDims { height: 32, width: 16 }, 8).unwrap();
    let mut bad = usize::from(rasterize(&PartBox::new(Part::Head, 0, 0, 16, 16), small) != vec![1, 1, 1, 1, 0, 0, 0, 0]);
    for dims in [ImageDims { height: 64, width: 32 }, ImageDims { height: 32, width: 16 }] {
        let grid = PatchGrid::new(dims, 8).unwrap();
        for _ in 0..boxes {
            let b = random_box(&mut r, dims);
            bad += usize::from(rasterize(&b, grid) != pixel_oracle(&b, grid));
        }
    }
    bad
}

/// Boxes whose calibration is not idempotent or leaves the bounds without
/// falling back to the stripe box.
pub fn calibration_violations(boxes: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    let policy = CalibPolicy::default();
    let dims = ImageDims { height: 64, width: 32 };
    for _ in 0..boxes {
        let b = random_box(&mut r, dims);
        let once = calibrate_box(&b, &policy, dims);
        let stable = calibrate_box(&once, &policy, dims) == once && once.calibrated;
        let p = policy.for_part(b.part);
        let hf = once.height() as f64 / 64.0;
        let af = (once.width() * once.height()) as f64 / (64.0 * 32.0);
        let in_bounds = hf >= p.height_lo && hf <= p.height_hi && af <= policy.max_area;
        bad += usize::from(!stable || !(in_bounds || once == policy.stripe_box(b.part, dims)));
    }
    bad
}

/// Attention over the open columns of each row only, per head.
fn restricted_attention(q: &Mat, k: &Mat, v: &Mat, a: &Mat, heads: usize) -> Mat {
    let d = q.ncols();
    let dh = d / heads;
    let mut out = Mat::zeros((q.nrows(), d));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.nrows() {
            let open: Vec<usize> = (0..k.nrows()).filter(|&j| a[[i, j]] == 0.0).collect();
            let scores: Vec<f64> = open
                .iter()
                .map(|&j| cols.clone().map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                out[[i, c]] = open.iter().zip(&w).map(|(&j, wj)| wj / z * v[[j, c]]).sum();
            }
        }
    }
    out
}

/// Worst absolute difference between masked attention and the restricted
/// oracle over random instances with up to 36 tokens and width 64.
pub fn attention_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = r.random_range(2..=32);
        let layout = SeqLayout::new(n);
        let s = layout.len();
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..=64 / heads);
        let gate = Mat::from_shape_fn((3, n), |_| if r.random_bool(0.5) { 0.0 } else { NEG_INF });
        let full = pad_attention_mask(&gate, layout).unwrap();
        let (q, k, v) = (random_mat(&mut r, s, d), random_mat(&mut r, s, d), random_mat(&mut r, s, d));
        let got = masked_msa(&q, &k, &v, Some(&full), heads).unwrap();
        let want = restricted_attention(&q, &k, &v, &full, heads);
        worst = worst.max(mgreid::graph::max_abs_diff(&got, &want));
    }
    worst
}
