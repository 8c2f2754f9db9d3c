//! Retrieval metrics under the cross-camera protocol, part-mask quality
//! against oracle boxes, and mask heatmap rendering.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use image::{GrayImage, Luma};
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::grounding::{rasterize, LabelMatrix, Part, PatchGrid};
use crate::image_encoder::{ImageEncoder, MaskMode, MaskSource};
use crate::io_util::write_atomic;
use crate::synth_data::{Image, Manifest, Sample, Split};
use crate::text_encoder::GranularitySet;

/// Identity and camera of one query or gallery item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub id: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub aps: Vec<f64>,
    pub num_queries: usize,
    pub excluded_queries: usize,
}

fn unit_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-12);
        r.mapv_inplace(|a| a / n);
    }
    out
}

/// Inference features: post-BN, unit rows. Only the image encoder is used.
pub fn extract_features(
    encoder: &ImageEncoder,
    images: &[&Image],
    source: MaskSource,
    granularities: GranularitySet,
) -> Result<Mat> {
    Ok(unit_rows(&encoder.embed(images, source, granularities)?.v_bn))
}

/// Gallery indices of one query, most similar first (ties by index), with
/// same-identity same-camera items removed.
pub fn ranked_gallery(sims: &[f64], query: ItemMeta, gallery: &[ItemMeta]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery[j].id == query.id && gallery[j].camera == query.camera))
        .collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Average precision of a ranked relevance list; `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// mAP and Rank-1 by cosine similarity. Queries without any valid match
/// are skipped and counted in `excluded_queries`.
pub fn compute_map_cmc(query: &Mat, query_meta: &[ItemMeta], gallery: &Mat, gallery_meta: &[ItemMeta]) -> Result<RetrievalResult> {
    if query.nrows() != query_meta.len() || gallery.nrows() != gallery_meta.len() || query.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!(
            "query {:?} with {} labels against gallery {:?} with {} labels",
            query.dim(),
            query_meta.len(),
            gallery.dim(),
            gallery_meta.len()
        )));
    }
    let sims = unit_rows(query).dot(&unit_rows(gallery).t());
    let mut aps = Vec::with_capacity(query_meta.len());
    let mut top1 = 0usize;
    let mut excluded = 0usize;
    for (qi, &q) in query_meta.iter().enumerate() {
        let row = sims.row(qi).to_vec();
        let order = ranked_gallery(&row, q, gallery_meta);
        let relevant: Vec<bool> = order.iter().map(|&j| gallery_meta[j].id == q.id).collect();
        match average_precision(&relevant) {
            Some(ap) => {
                aps.push(ap);
                if relevant[0] {
                    top1 += 1;
                }
            }
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        warn!("{excluded} queries have no valid gallery match and were excluded");
    }
    let n = aps.len();
    let map = if n == 0 { 0.0 } else { aps.iter().sum::<f64>() / n as f64 };
    let rank1 = if n == 0 { 0.0 } else { top1 as f64 / n as f64 };
    Ok(RetrievalResult { map, rank1, aps, num_queries: n, excluded_queries: excluded })
}

/// Mean Rank-1 when the gallery's (identity, camera) labels are randomly
/// permuted, over `shuffles` draws.
pub fn random_rank1_baseline(
    query: &Mat,
    query_meta: &[ItemMeta],
    gallery: &Mat,
    gallery_meta: &[ItemMeta],
    shuffles: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut shuffled = gallery_meta.to_vec();
    for _ in 0..shuffles {
        shuffled.shuffle(rng);
        total += compute_map_cmc(query, query_meta, gallery, &shuffled)?.rank1;
    }
    Ok(total / shuffles.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskQuality {
    /// Head, upper, legs.
    pub per_part_iou: [f64; 3],
    pub mean_iou: f64,
}

/// Set IoU of two binary vectors; two empty sets count as a perfect match.
pub fn iou(a: &[u8], b: &[u8]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x == 1 && y == 1).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x == 1 || y == 1).count();
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

/// Patch masks of a sample's oracle part boxes.
pub fn oracle_masks(sample: &Sample, grid: PatchGrid) -> LabelMatrix {
    let [h, u, l] = Part::ALL.map(|p| rasterize(sample.oracle_box(p), grid));
    LabelMatrix::new(h, u, l).expect("rasterized rows share the grid")
}

/// Per-part mean IoU between `{probs > threshold}` and the oracle masks.
pub fn mask_quality(probs: &[Mat], oracle: &[LabelMatrix], threshold: f64) -> Result<MaskQuality> {
    if probs.len() != oracle.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} oracle masks", probs.len(), oracle.len())));
    }
    let mut per_part = [0.0; 3];
    for (p, o) in probs.iter().zip(oracle) {
        if p.dim() != (3, o.num_patches()) {
            return Err(Error::Shape(format!("prediction {:?} against {} patches", p.dim(), o.num_patches())));
        }
        for part in Part::ALL {
            let pred: Vec<u8> = p.row(part.index()).iter().map(|&x| u8::from(x > threshold)).collect();
            per_part[part.index()] += iou(&pred, o.row(part));
        }
    }
    per_part.iter_mut().for_each(|v| *v /= probs.len() as f64);
    Ok(MaskQuality { per_part_iou: per_part, mean_iou: per_part.iter().sum::<f64>() / 3.0 })
}

/// Grayscale heatmap of one part's probabilities at image resolution.
pub fn heatmap(probs: &[f64], grid: PatchGrid) -> GrayImage {
    let dims = grid.dims();
    GrayImage::from_fn(dims.width as u32, dims.height as u32, |x, y| {
        let i = (y as usize / grid.patch) * grid.cols + x as usize / grid.patch;
        Luma([(probs[i].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Writes `<sample_id>_<part>.png` for every sample and part.
pub fn render_mask_heatmaps(items: &[(String, Mat)], grid: PatchGrid, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::with_capacity(items.len() * 3);
    for (id, probs) in items {
        for part in Part::ALL {
            let img = heatmap(&probs.row(part.index()).to_vec(), grid);
            let path = out_dir.join(format!("{id}_{}.png", part.name()));
            let mut bytes = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
            write_atomic(&path, &bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub num_queries: usize,
    pub excluded_queries: usize,
    pub per_part_iou: BTreeMap<String, f64>,
    pub mean_iou: f64,
    pub random_rank1: f64,
    pub mask_source: MaskMode,
}

pub struct HeldOut<'a> {
    pub query: Vec<&'a Sample>,
    pub gallery: Vec<&'a Sample>,
}

impl<'a> HeldOut<'a> {
    pub fn new(manifest: &'a Manifest) -> Result<Self> {
        let query = manifest.split(Split::Query);
        let gallery = manifest.split(Split::Gallery);
        if query.is_empty() || gallery.is_empty() {
            return Err(Error::Pipeline("manifest has no query or gallery samples".into()));
        }
        Ok(Self { query, gallery })
    }
}

fn metas(samples: &[&Sample]) -> Vec<ItemMeta> {
    samples.iter().map(|s| ItemMeta { id: s.id_label, camera: s.camera_id }).collect()
}

/// Full held-out evaluation: retrieval with the chosen mask source, the
/// shuffled-label baseline, and predicted-mask IoU on every held-out image.
pub fn evaluate(
    encoder: &ImageEncoder,
    granularities: GranularitySet,
    manifest: &Manifest,
    mode: MaskMode,
    labels: Option<&HashMap<String, LabelMatrix>>,
    rng: &mut impl Rng,
) -> Result<MetricsReport> {
    let held = HeldOut::new(manifest)?;
    let stripe = crate::grounding::stripe_label_matrix(encoder.grid);
    let features = |samples: &[&Sample]| -> Result<Mat> {
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let external;
        let source = match mode {
            MaskMode::Predicted => MaskSource::Predicted,
            MaskMode::Stripe => MaskSource::Stripe(&stripe),
            MaskMode::None => MaskSource::None,
            MaskMode::External => {
                let labels =
                    labels.ok_or_else(|| Error::Pipeline("external masks need a label file for eval images".into()))?;
                external = samples
                    .iter()
                    .map(|s| {
                        labels
                            .get(&s.sample_id)
                            .cloned()
                            .ok_or_else(|| Error::Pipeline(format!("no pseudo labels for {}", s.sample_id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                MaskSource::External(&external)
            }
        };
        extract_features(encoder, &images, source, granularities)
    };
    let qf = features(&held.query)?;
    let gf = features(&held.gallery)?;
    let (qm, gm) = (metas(&held.query), metas(&held.gallery));
    let retrieval = compute_map_cmc(&qf, &qm, &gf, &gm)?;
    let random_rank1 = random_rank1_baseline(&qf, &qm, &gf, &gm, 100, rng)?;

    let all: Vec<&Sample> = held.query.iter().chain(&held.gallery).copied().collect();
    let images: Vec<&Image> = all.iter().map(|s| &s.image).collect();
    let probs = encoder.embed(&images, MaskSource::Predicted, granularities)?.mask_probs;
    let oracle: Vec<LabelMatrix> = all.iter().map(|s| oracle_masks(s, encoder.grid)).collect();
    let quality = mask_quality(&probs, &oracle, encoder.config.mask_threshold)?;
    Ok(MetricsReport {
        map: retrieval.map,
        rank1: retrieval.rank1,
        num_queries: retrieval.num_queries,
        excluded_queries: retrieval.excluded_queries,
        per_part_iou: Part::ALL.iter().map(|p| (p.name().to_string(), quality.per_part_iou[p.index()])).collect(),
        mean_iou: quality.mean_iou,
        random_rank1,
        mask_source: mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::ImageDims;
    use ndarray::array;

    fn meta(id: usize, camera: usize) -> ItemMeta {
        ItemMeta { id, camera }
    }

    #[test]
    fn worked_average_precision() {
        let ap = average_precision(&[true, false, true, false, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn perfect_ranking_and_camera_exclusion() {
        let q = array![[1.0, 0.0]];
        let g = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]];
        let res = compute_map_cmc(&q, &[meta(0, 0)], &g, &[meta(0, 1), meta(0, 1), meta(1, 0)]).unwrap();
        assert_eq!((res.map, res.rank1), (1.0, 1.0));
        let res = compute_map_cmc(&q, &[meta(0, 0)], &g, &[meta(0, 0), meta(1, 1), meta(0, 1)]).unwrap();
        assert_eq!(res.rank1, 0.0);
        assert!((res.map - 0.5).abs() < 1e-15);
        let res = compute_map_cmc(&q, &[meta(0, 0)], &g, &[meta(0, 0), meta(1, 1), meta(2, 1)]).unwrap();
        assert_eq!((res.num_queries, res.excluded_queries), (0, 1));
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = array![[1.0, 0.0]];
        let g = array![[0.0, 1.0], [0.0, 1.0]];
        let res = compute_map_cmc(&q, &[meta(0, 0)], &g, &[meta(1, 1), meta(0, 1)]).unwrap();
        assert_eq!(res.rank1, 0.0);
        let res = compute_map_cmc(&q, &[meta(0, 0)], &g, &[meta(0, 1), meta(1, 1)]).unwrap();
        assert_eq!(res.rank1, 1.0);
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[1, 1, 0], &[1, 1, 0]), 1.0);
        assert_eq!(iou(&[1, 0, 0], &[0, 1, 0]), 0.0);
        assert!((iou(&[1, 1, 0], &[0, 1, 1]) - 1.0 / 3.0).abs() < 1e-15);
        let ones = LabelMatrix::ones(4);
        let q = mask_quality(&[Mat::ones((3, 4))], std::slice::from_ref(&ones), 0.5).unwrap();
        assert_eq!(q.mean_iou, 1.0);
    }

    #[test]
    fn heatmaps_black_and_white() {
        let grid = PatchGrid::new(ImageDims { height: 16, width: 8 }, 4).unwrap();
        assert!(heatmap(&[1.0; 8], grid).pixels().all(|p| p.0 == [255]));
        assert!(heatmap(&[0.0; 8], grid).pixels().all(|p| p.0 == [0]));
        let dir = tempfile::tempdir().unwrap();
        let items = vec![("a".to_string(), Mat::ones((3, 8))), ("b".to_string(), Mat::zeros((3, 8)))];
        let files = render_mask_heatmaps(&items, grid, dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        let back = image::open(dir.path().join("b_legs.png")).unwrap().to_luma8();
        assert_eq!(back.dimensions(), (8, 16));
        assert!(back.pixels().all(|p| p.0 == [0]));
    }
}
