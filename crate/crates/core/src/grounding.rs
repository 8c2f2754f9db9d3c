//! Part boxes, box calibration, and rasterization into patch-level
//! pseudo-label matrices.
//!
//! A [`GroundingProvider`] answers "where is part `p` in sample `s`". Two
//! providers exist: [`OracleProvider`] wraps the synthetic ground truth (with
//! optional simulated hallucinations) and [`FileProvider`] replays boxes that
//! an external grounding model produced offline. Remote grounding services can
//! be plugged in by implementing the trait.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::synth_data::{corrupt_box, CorruptionMode, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Head,
    Upper,
    Legs,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Head, Part::Upper, Part::Legs];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Head => "head",
            Part::Upper => "upper",
            Part::Legs => "legs",
        }
    }

    /// Phrase substituted into the grounding query.
    pub fn phrase(self) -> &'static str {
        match self {
            Part::Head => "the head of the person",
            Part::Upper => "the upper body of the person",
            Part::Legs => "the legs of the person",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Instruction sent to a grounding model for one part.
pub fn build_query(part: Part) -> String {
    format!(
        "Guide me to the location of {} within the image by providing its bounding boxes",
        part.phrase()
    )
}

/// Axis-aligned pixel box, inclusive min and exclusive max.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartBox {
    pub part: Part,
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    #[serde(default)]
    pub calibrated: bool,
}

impl PartBox {
    pub fn new(part: Part, x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self { part, x_min, y_min, x_max, y_max, calibrated: false }
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn center_y(&self) -> f64 {
        (self.y_min + self.y_max) as f64 / 2.0
    }

    pub fn within(&self, dims: ImageDims) -> bool {
        self.x_min <= self.x_max
            && self.y_min <= self.y_max
            && self.x_max as usize <= dims.width
            && self.y_max as usize <= dims.height
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Same geometry, ignoring the calibration flag.
    pub fn same_region(&self, other: &PartBox) -> bool {
        self.coords() == other.coords()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
}

/// Patch layout of an image: `rows × cols` squares of side `patch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(dims: ImageDims, patch: usize) -> Result<Self> {
        if patch == 0 || !dims.height.is_multiple_of(patch) || !dims.width.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size {patch}",
                dims.height, dims.width
            )));
        }
        Ok(Self { rows: dims.height / patch, cols: dims.width / patch, patch })
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims { height: self.rows * self.patch, width: self.cols * self.patch }
    }
}

/// Patch-level mask of a box: entry `i` is 1 iff patch `i` (row-major)
/// overlaps the box with strictly positive area.
pub fn rasterize(b: &PartBox, grid: PatchGrid) -> Vec<u8> {
    let p = grid.patch as i64;
    let mut out = Vec::with_capacity(grid.num_patches());
    for r in 0..grid.rows as i64 {
        for c in 0..grid.cols as i64 {
            let ox = (b.x_max as i64).min((c + 1) * p) - (b.x_min as i64).max(c * p);
            let oy = (b.y_max as i64).min((r + 1) * p) - (b.y_min as i64).max(r * p);
            out.push(u8::from(ox > 0 && oy > 0));
        }
    }
    out
}

/// Binary `3×N_patch` pseudo-label matrix, rows ordered head, upper, legs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: [Vec<u8>; 3],
}

impl LabelMatrix {
    pub fn new(head: Vec<u8>, upper: Vec<u8>, legs: Vec<u8>) -> Result<Self> {
        build_label_matrix(head, upper, legs)
    }

    pub fn zeros(n: usize) -> Self {
        Self { rows: [vec![0; n], vec![0; n], vec![0; n]] }
    }

    pub fn ones(n: usize) -> Self {
        Self { rows: [vec![1; n], vec![1; n], vec![1; n]] }
    }

    pub fn num_patches(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, part: Part) -> &[u8] {
        &self.rows[part.index()]
    }

    pub fn get(&self, part: Part, patch: usize) -> u8 {
        self.rows[part.index()][patch]
    }

    pub fn to_mat(&self) -> Mat {
        let n = self.num_patches();
        Mat::from_shape_fn((3, n), |(p, i)| self.rows[p][i] as f64)
    }

    /// Mirrors every row left-right on `grid`, matching a horizontally
    /// flipped image.
    pub fn hflip(&self, grid: PatchGrid) -> Self {
        let flip = |row: &Vec<u8>| {
            (0..grid.num_patches())
                .map(|i| {
                    let (r, c) = (i / grid.cols, i % grid.cols);
                    row[r * grid.cols + (grid.cols - 1 - c)]
                })
                .collect::<Vec<u8>>()
        };
        Self { rows: [flip(&self.rows[0]), flip(&self.rows[1]), flip(&self.rows[2])] }
    }

    pub fn bits(&self, part: Part) -> String {
        self.row(part).iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }
}

/// Stacks three per-part patch masks into a label matrix.
pub fn build_label_matrix(head: Vec<u8>, upper: Vec<u8>, legs: Vec<u8>) -> Result<LabelMatrix> {
    if head.len() != upper.len() || head.len() != legs.len() {
        return Err(Error::Shape(format!(
            "part masks have lengths {}, {}, {}",
            head.len(),
            upper.len(),
            legs.len()
        )));
    }
    if head.iter().chain(&upper).chain(&legs).any(|&b| b > 1) {
        return Err(Error::Shape("label entries must be 0 or 1".into()));
    }
    Ok(LabelMatrix { rows: [head, upper, legs] })
}

/// Label matrix of three equal horizontal stripes (top, middle, bottom).
pub fn stripe_label_matrix(grid: PatchGrid) -> LabelMatrix {
    let dims = grid.dims();
    let h = dims.height as f64;
    let stripe = |part: Part, lo: f64, hi: f64| {
        let b = PartBox::new(part, 0, (lo * h).round() as u32, dims.width as u32, (hi * h).round() as u32);
        rasterize(&b, grid)
    };
    LabelMatrix {
        rows: [
            stripe(Part::Head, 0.0, 1.0 / 3.0),
            stripe(Part::Upper, 1.0 / 3.0, 2.0 / 3.0),
            stripe(Part::Legs, 2.0 / 3.0, 1.0),
        ],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartPolicy {
    /// Accepted box height as a fraction of image height, `[lo, hi]`.
    pub height_lo: f64,
    pub height_hi: f64,
    /// Fallback window rows as fractions of image height, `[top, bottom)`.
    pub stripe_top: f64,
    pub stripe_bottom: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibPolicy {
    pub head: PartPolicy,
    pub upper: PartPolicy,
    pub legs: PartPolicy,
    pub max_area: f64,
}

impl Default for CalibPolicy {
    fn default() -> Self {
        Self {
            head: PartPolicy { height_lo: 0.05, height_hi: 0.45, stripe_top: 0.0, stripe_bottom: 0.30 },
            upper: PartPolicy { height_lo: 0.15, height_hi: 0.70, stripe_top: 0.25, stripe_bottom: 0.65 },
            legs: PartPolicy { height_lo: 0.15, height_hi: 0.70, stripe_top: 0.60, stripe_bottom: 1.00 },
            max_area: 0.9,
        }
    }
}

impl CalibPolicy {
    pub fn for_part(&self, part: Part) -> &PartPolicy {
        match part {
            Part::Head => &self.head,
            Part::Upper => &self.upper,
            Part::Legs => &self.legs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for part in Part::ALL {
            let p = self.for_part(part);
            if !(0.0 <= p.height_lo && p.height_lo < p.height_hi && p.height_hi <= 1.0) {
                return Err(Error::Config(format!("{part}: height interval must satisfy 0 <= lo < hi <= 1")));
            }
            if !(0.0 <= p.stripe_top && p.stripe_top < p.stripe_bottom && p.stripe_bottom <= 1.0) {
                return Err(Error::Config(format!("{part}: stripe must satisfy 0 <= top < bottom <= 1")));
            }
        }
        if !(self.max_area > 0.0 && self.max_area <= 1.0) {
            return Err(Error::Config("max_area must lie in (0, 1]".into()));
        }
        let mut spans: Vec<(f64, f64)> =
            Part::ALL.iter().map(|&p| (self.for_part(p).stripe_top, self.for_part(p).stripe_bottom)).collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut reach = 0.0;
        for (top, bottom) in spans {
            if top > reach {
                return Err(Error::Config(format!("fallback stripes leave [{reach}, {top}) uncovered")));
            }
            reach = f64::max(reach, bottom);
        }
        if reach < 1.0 {
            return Err(Error::Config(format!("fallback stripes leave [{reach}, 1) uncovered")));
        }
        Ok(())
    }

    /// Full-width fallback window for `part`.
    pub fn stripe_box(&self, part: Part, dims: ImageDims) -> PartBox {
        let p = self.for_part(part);
        let h = dims.height as f64;
        let y_min = (p.stripe_top * h).round() as u32;
        let y_max = ((p.stripe_bottom * h).round() as u32).max(y_min);
        PartBox { part, x_min: 0, y_min, x_max: dims.width as u32, y_max, calibrated: true }
    }
}

/// Keeps plausible boxes and replaces implausible ones (height outside the
/// part's interval, or area above the limit) by the part's stripe window.
pub fn calibrate_box(b: &PartBox, policy: &CalibPolicy, dims: ImageDims) -> PartBox {
    let stripe = policy.stripe_box(b.part, dims);
    if b.same_region(&stripe) {
        return stripe;
    }
    let p = policy.for_part(b.part);
    let hf = b.height() as f64 / dims.height as f64;
    let af = (b.width() as f64 * b.height() as f64) / (dims.width as f64 * dims.height as f64);
    if hf >= p.height_lo && hf <= p.height_hi && af <= policy.max_area {
        PartBox { calibrated: true, ..*b }
    } else {
        stripe
    }
}

pub trait GroundingProvider {
    /// Raw (uncalibrated) box for `part` in the sample named `sample_id`.
    fn locate(&self, sample_id: &str, part: Part) -> Result<PartBox>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRates {
    pub oversize_rate: f64,
    pub oversplit_rate: f64,
}

/// Ground-truth boxes with optional simulated grounding failures. Failures
/// are drawn independently per (sample, part) from a seed, so the provider
/// answers identically however often it is asked.
pub struct OracleProvider {
    boxes: HashMap<String, [PartBox; 3]>,
    dims: HashMap<String, ImageDims>,
    rates: CorruptionRates,
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl OracleProvider {
    pub fn new(samples: &[Sample], rates: CorruptionRates, seed: u64) -> Self {
        let boxes = samples.iter().map(|s| (s.sample_id.clone(), s.oracle_boxes)).collect();
        let dims = samples.iter().map(|s| (s.sample_id.clone(), s.dims())).collect();
        Self { boxes, dims, rates, seed }
    }
}

impl GroundingProvider for OracleProvider {
    fn locate(&self, sample_id: &str, part: Part) -> Result<PartBox> {
        let boxes = self
            .boxes
            .get(sample_id)
            .ok_or_else(|| Error::Lookup(format!("unknown sample {sample_id}")))?;
        let b = boxes[part.index()];
        let key = format!("{sample_id}/{}", part.name());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(key.as_bytes()));
        let u: f64 = rand::Rng::random(&mut rng);
        let dims = self.dims[sample_id];
        let mode = if u < self.rates.oversize_rate {
            Some(CorruptionMode::Oversize)
        } else if u < self.rates.oversize_rate + self.rates.oversplit_rate {
            Some(CorruptionMode::Oversplit)
        } else {
            None
        };
        Ok(match mode {
            Some(m) => corrupt_box(&b, m, dims, &mut rng),
            None => b,
        })
    }
}

/// One precomputed grounding answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub sample_id: String,
    pub part: Part,
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
}

/// Replays boxes from a JSONL file of [`BoxRecord`] rows.
pub struct FileProvider {
    boxes: HashMap<(String, Part), [u32; 4]>,
}

impl FileProvider {
    pub fn from_records(records: impl IntoIterator<Item = BoxRecord>) -> Self {
        Self { boxes: records.into_iter().map(|r| ((r.sample_id, r.part), r.bbox)).collect() }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<BoxRecord>(&line)?);
        }
        Ok(Self::from_records(records))
    }
}

impl GroundingProvider for FileProvider {
    fn locate(&self, sample_id: &str, part: Part) -> Result<PartBox> {
        let c = self
            .boxes
            .get(&(sample_id.to_string(), part))
            .ok_or_else(|| Error::Lookup(format!("no {part} box for sample {sample_id}")))?;
        Ok(PartBox::new(part, c[0], c[1], c[2], c[3]))
    }
}

/// One row of the label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub sample_id: String,
    pub part: Part,
    pub raw_box: [u32; 4],
    pub calibrated_box: [u32; 4],
    pub mask_bits: String,
}

/// Pseudo labels of every sample: locate, calibrate and rasterize each part.
pub fn annotate(
    samples: &[Sample],
    provider: &dyn GroundingProvider,
    policy: &CalibPolicy,
    patch: usize,
) -> Result<Vec<LabelRow>> {
    let mut rows = Vec::with_capacity(samples.len() * 3);
    for s in samples {
        let grid = PatchGrid::new(s.dims(), patch)?;
        for part in Part::ALL {
            let raw = provider.locate(&s.sample_id, part)?;
            let cal = calibrate_box(&raw, policy, s.dims());
            let bits = rasterize(&cal, grid).iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
            rows.push(LabelRow {
                sample_id: s.sample_id.clone(),
                part,
                raw_box: raw.coords(),
                calibrated_box: cal.coords(),
                mask_bits: bits,
            });
        }
    }
    Ok(rows)
}

pub fn write_label_file(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::io_util::write_atomic(path, &buf)
}

pub fn read_label_file(path: &Path) -> Result<Vec<LabelRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

fn parse_bits(bits: &str) -> Result<Vec<u8>> {
    bits.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(Error::Shape(format!("mask_bits contains {other:?}"))),
        })
        .collect()
}

/// Groups label rows into one matrix per sample. Every sample must have
/// all three parts.
pub fn label_matrices(rows: &[LabelRow]) -> Result<HashMap<String, LabelMatrix>> {
    let mut parts: HashMap<String, [Option<Vec<u8>>; 3]> = HashMap::new();
    for r in rows {
        parts.entry(r.sample_id.clone()).or_default()[r.part.index()] = Some(parse_bits(&r.mask_bits)?);
    }
    parts
        .into_iter()
        .map(|(id, [h, u, l])| match (h, u, l) {
            (Some(h), Some(u), Some(l)) => Ok((id, build_label_matrix(h, u, l)?)),
            _ => Err(Error::Lookup(format!("sample {id} is missing a part row"))),
        })
        .collect()
}

/// Writes a JSONL file of raw boxes readable by [`FileProvider`].
pub fn write_box_records(path: &Path, records: &[BoxRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        writeln!(buf).map_err(|e| Error::io(path, e))?;
    }
    crate::io_util::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ImageDims {
        ImageDims { height: 64, width: 32 }
    }

    #[test]
    fn queries_follow_template() {
        assert_eq!(
            build_query(Part::Head),
            "Guide me to the location of the head of the person within the image by providing its bounding boxes"
        );
        assert!(build_query(Part::Upper).contains("of the upper body of the person within"));
        assert!(build_query(Part::Legs).contains("of the legs of the person within"));
    }

    #[test]
    fn rasterize_small_grid() {
        let grid = PatchGrid::new(ImageDims { height: 32, width: 16 }, 8).unwrap();
        let b = PartBox::new(Part::Head, 0, 0, 16, 16);
        assert_eq!(rasterize(&b, grid), vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let full = PartBox::new(Part::Head, 0, 0, 16, 32);
        assert!(rasterize(&full, grid).iter().all(|&x| x == 1));
        let empty = PartBox::new(Part::Head, 5, 0, 5, 32);
        assert!(rasterize(&empty, grid).iter().all(|&x| x == 0));
    }

    #[test]
    fn touching_edge_is_not_coverage() {
        let grid = PatchGrid::new(ImageDims { height: 16, width: 16 }, 8).unwrap();
        let b = PartBox::new(Part::Legs, 0, 0, 8, 9);
        assert_eq!(rasterize(&b, grid), vec![1, 0, 1, 0]);
    }

    #[test]
    fn oversized_legs_fall_back_to_bottom_stripe() {
        let policy = CalibPolicy::default();
        let b = PartBox::new(Part::Legs, 2, 0, 30, 63);
        let c = calibrate_box(&b, &policy, dims());
        assert_eq!(c.coords(), [0, 38, 32, 64]);
        assert!(c.calibrated);
    }

    #[test]
    fn plausible_head_is_kept() {
        let policy = CalibPolicy::default();
        let b = PartBox::new(Part::Head, 10, 3, 20, 16);
        let c = calibrate_box(&b, &policy, dims());
        assert!(c.same_region(&b));
        assert!(c.calibrated);
    }

    #[test]
    fn default_policy_is_valid_and_gaps_are_rejected() {
        CalibPolicy::default().validate().unwrap();
        let mut p = CalibPolicy::default();
        p.upper.stripe_top = 0.35;
        assert!(p.validate().is_err());
        let mut p = CalibPolicy::default();
        p.legs.height_lo = 0.8;
        assert!(p.validate().is_err());
    }

    #[test]
    fn label_matrix_rejects_length_mismatch() {
        assert!(matches!(build_label_matrix(vec![0; 32], vec![0; 32], vec![0; 31]), Err(Error::Shape(_))));
        let m = build_label_matrix(vec![1; 32], vec![0; 32], vec![0; 32]).unwrap();
        assert_eq!(m.row(Part::Head), &[1; 32][..]);
        assert!(LabelMatrix::zeros(32).to_mat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hflip_mirrors_columns() {
        let grid = PatchGrid::new(ImageDims { height: 16, width: 24 }, 8).unwrap();
        let m = build_label_matrix(vec![1, 0, 0, 0, 1, 1], vec![0; 6], vec![0; 6]).unwrap();
        let f = m.hflip(grid);
        assert_eq!(f.row(Part::Head), &[0, 0, 1, 1, 1, 0]);
        assert_eq!(f.hflip(grid), m);
    }

    #[test]
    fn file_provider_reports_missing_rows() {
        let p = FileProvider::from_records([BoxRecord {
            sample_id: "s0".into(),
            part: Part::Head,
            bbox: [1, 2, 3, 4],
        }]);
        assert_eq!(p.locate("s0", Part::Head).unwrap().coords(), [1, 2, 3, 4]);
        assert!(matches!(p.locate("s0", Part::Legs), Err(Error::Lookup(_))));
        assert!(matches!(p.locate("s9", Part::Head), Err(Error::Lookup(_))));
    }

    #[test]
    fn stripes_split_height_in_thirds() {
        let grid = PatchGrid::new(dims(), 8).unwrap();
        let m = stripe_label_matrix(grid);
        // 8 patch rows of 4 columns; stripe edges at 21 and 43 pixels.
        let rows_of = |part| {
            (0..8).filter(|r| m.get(part, r * 4) == 1).collect::<Vec<_>>()
        };
        assert_eq!(rows_of(Part::Head), vec![0, 1, 2]);
        assert_eq!(rows_of(Part::Upper), vec![2, 3, 4, 5]);
        assert_eq!(rows_of(Part::Legs), vec![5, 6, 7]);
    }
}
