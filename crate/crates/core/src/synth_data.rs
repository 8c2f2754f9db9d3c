//! Procedural person-like images with known part boxes, identities, cameras
//! and domain styles.
//!
//! Each figure is three stacked blocks: a head (hair block with a face
//! ellipse), an upper body, and legs (two legs separated by a shadow seam).
//! Every part fills its box exactly, so the oracle boxes are the painted
//! regions. Identity fixes colours and proportions; the domain fixes the
//! background, illumination and sensor noise; the per-sample seed fixes the
//! figure's position.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{CorruptionRates, ImageDims, Part, PartBox, PatchGrid};
use crate::io_util::{write_atomic, write_dir_atomic};

pub type Image = Array3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub sample_id: String,
    /// `H×W×3`, values in `[0, 1]`, quantized to multiples of 1/255.
    pub image: Image,
    pub id_label: usize,
    pub camera_id: usize,
    pub domain_id: usize,
    pub split: Split,
    /// Indexed by [`Part::index`].
    pub oracle_boxes: [PartBox; 3],
}

impl Sample {
    pub fn dims(&self) -> ImageDims {
        ImageDims { height: self.image.shape()[0], width: self.image.shape()[1] }
    }

    pub fn oracle_box(&self, part: Part) -> &PartBox {
        &self.oracle_boxes[part.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_ids: usize,
    pub samples_per_id: usize,
    pub num_cameras: usize,
    pub num_domains: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub oversize_rate: f64,
    pub oversplit_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_ids: 20,
            samples_per_id: 10,
            num_cameras: 2,
            num_domains: 2,
            image_height: 64,
            image_width: 32,
            patch_size: 8,
            seed: 0,
            oversize_rate: 0.1,
            oversplit_rate: 0.05,
        }
    }
}

impl GenConfig {
    pub fn dims(&self) -> ImageDims {
        ImageDims { height: self.image_height, width: self.image_width }
    }

    pub fn corruption(&self) -> CorruptionRates {
        CorruptionRates { oversize_rate: self.oversize_rate, oversplit_rate: self.oversplit_rate }
    }

    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.dims(), self.patch_size)?;
        if self.num_ids < 2 {
            return Err(Error::Config(format!("num_ids must be >= 2, got {}", self.num_ids)));
        }
        if self.num_cameras < 1 || self.num_domains < 1 {
            return Err(Error::Config("num_cameras and num_domains must be >= 1".into()));
        }
        for (name, r) in [("oversize_rate", self.oversize_rate), ("oversplit_rate", self.oversplit_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if self.oversize_rate + self.oversplit_rate > 1.0 {
            return Err(Error::Config("corruption rates sum above 1".into()));
        }
        if self.image_height < 16 || self.image_width < 8 {
            return Err(Error::Config("images must be at least 16x8 pixels".into()));
        }
        Ok(())
    }
}

/// Appearance parameters of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdSpec {
    pub id_label: usize,
    pub dims: ImageDims,
    pub hair: [f64; 3],
    pub skin: [f64; 3],
    pub torso: [f64; 3],
    pub legs: [f64; 3],
    /// 0 plain, 1 horizontal bands, 2 two-tone vertical split.
    pub torso_pattern: u8,
    pub head_h: f64,
    pub torso_h: f64,
    pub legs_h: f64,
    pub head_w: f64,
    pub torso_w: f64,
    pub legs_w: f64,
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

impl IdSpec {
    pub fn sample(id_label: usize, dims: ImageDims, rng: &mut impl Rng) -> Self {
        let skin_tone = rng.random_range(0.45..0.9);
        Self {
            id_label,
            dims,
            hair: color(rng),
            skin: [skin_tone, skin_tone * 0.8, skin_tone * 0.65],
            torso: color(rng),
            legs: color(rng),
            torso_pattern: rng.random_range(0..3),
            head_h: rng.random_range(0.14..0.20),
            torso_h: rng.random_range(0.28..0.34),
            legs_h: rng.random_range(0.30..0.38),
            head_w: rng.random_range(0.28..0.38),
            torso_w: rng.random_range(0.50..0.72),
            legs_w: rng.random_range(0.42..0.60),
        }
    }
}

/// Background, illumination and sensor parameters of a (domain, camera).
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub domain_id: usize,
    pub camera_id: usize,
    pub bg_top: [f64; 3],
    pub bg_bottom: [f64; 3],
    pub brightness: f64,
    pub tint: [f64; 3],
    pub noise_std: f64,
}

impl DomainStyle {
    pub fn new(domain_id: usize, camera_id: usize, seed: u64) -> Self {
        let mut drng = ChaCha8Rng::seed_from_u64(mix(seed, 0xd0, domain_id as u64, 0));
        let bg_top = color(&mut drng);
        let bg_bottom = color(&mut drng);
        let brightness = drng.random_range(0.75..1.15);
        let noise_std = drng.random_range(0.01..0.05);
        let mut crng = ChaCha8Rng::seed_from_u64(mix(seed, 0xca, domain_id as u64, camera_id as u64));
        let tint = [
            crng.random_range(-0.05..0.05),
            crng.random_range(-0.05..0.05),
            crng.random_range(-0.05..0.05),
        ];
        Self { domain_id, camera_id, bg_top, bg_bottom, brightness, tint, noise_std }
    }
}

/// Deterministic 64-bit seed mixing (splitmix64 finalizer over the inputs).
fn mix(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(a.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(b.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Part boxes of `spec` placed with the sample-seeded jitter.
fn layout(spec: &IdSpec, rng: &mut impl Rng) -> [PartBox; 3] {
    let h = spec.dims.height as f64;
    let w = spec.dims.width as f64;
    let px = |f: f64, total: f64| ((f * total).round() as u32).max(1);
    let (hh, th, lh) = (px(spec.head_h, h), px(spec.torso_h, h), px(spec.legs_h, h));
    let total = hh + th + lh;
    let free = (spec.dims.height as u32).saturating_sub(total);
    let top = rng.random_range(0..=free);
    let shift = (0.1 * w).round() as i64;
    let cx = w / 2.0 + rng.random_range(-shift..=shift) as f64;
    let place = |part: Part, frac: f64, y0: u32, height: u32| {
        let bw = px(frac, w).min(spec.dims.width as u32);
        let x0 = (cx - bw as f64 / 2.0).round().clamp(0.0, (spec.dims.width as u32 - bw) as f64) as u32;
        PartBox::new(part, x0, y0, x0 + bw, y0 + height)
    };
    [
        place(Part::Head, spec.head_w, top, hh),
        place(Part::Upper, spec.torso_w, top + hh, th),
        place(Part::Legs, spec.legs_w, top + hh + th, lh),
    ]
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Renders one sample and the per-pixel part map the renderer painted.
pub fn render_with_part_map(
    spec: &IdSpec,
    style: &DomainStyle,
    seed: u64,
    patch: usize,
) -> Result<(Sample, Vec<Option<Part>>)> {
    let dims = spec.dims;
    PatchGrid::new(dims, patch)?;
    let (hgt, wid) = (dims.height, dims.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = layout(spec, &mut rng);
    let noise = Normal::new(0.0, style.noise_std).expect("noise std is finite");
    let mut img = Image::zeros((hgt, wid, 3));
    let mut part_map = vec![None; hgt * wid];

    for y in 0..hgt {
        let t = y as f64 / (hgt - 1) as f64;
        for x in 0..wid {
            for ch in 0..3 {
                img[[y, x, ch]] = style.bg_top[ch] * (1.0 - t) + style.bg_bottom[ch] * t;
            }
        }
    }

    let mut paint = |b: &PartBox, f: &dyn Fn(u32, u32) -> [f64; 3]| {
        for y in b.y_min..b.y_max {
            for x in b.x_min..b.x_max {
                let c = f(x - b.x_min, y - b.y_min);
                for ch in 0..3 {
                    img[[y as usize, x as usize, ch]] = c[ch];
                }
                part_map[y as usize * wid + x as usize] = Some(b.part);
            }
        }
    };

    let head = boxes[0];
    let (hw, hh) = (head.width() as f64, head.height() as f64);
    paint(&head, &|x, y| {
        let dx = (x as f64 + 0.5 - hw / 2.0) / (0.42 * hw);
        let dy = (y as f64 + 0.5 - 0.62 * hh) / (0.42 * hh);
        if dx * dx + dy * dy <= 1.0 {
            spec.skin
        } else {
            spec.hair
        }
    });
    let torso = boxes[1];
    let tw = torso.width();
    paint(&torso, &|x, y| match spec.torso_pattern {
        1 if (y / 3) % 2 == 1 => shade(spec.torso, 0.6),
        2 if x >= tw / 2 => shade(spec.torso, 0.55),
        _ => spec.torso,
    });
    let legs = boxes[2];
    let lw = legs.width();
    paint(&legs, &|x, _| {
        if lw >= 4 && (x == lw / 2 || x + 1 == lw / 2) {
            shade(spec.legs, 0.5)
        } else {
            spec.legs
        }
    });

    for y in 0..hgt {
        for x in 0..wid {
            for ch in 0..3 {
                let v = img[[y, x, ch]] * style.brightness * (1.0 + style.tint[ch]) + noise.sample(&mut rng);
                img[[y, x, ch]] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }

    let sample = Sample {
        sample_id: String::new(),
        image: img,
        id_label: spec.id_label,
        camera_id: style.camera_id,
        domain_id: style.domain_id,
        split: Split::Train,
        oracle_boxes: boxes,
    };
    Ok((sample, part_map))
}

/// Renders the figure of `spec` under `style`. Deterministic in `seed`; the
/// seed alone fixes the figure placement, so the same seed under another
/// style yields identical boxes.
pub fn render_identity(spec: &IdSpec, style: &DomainStyle, seed: u64, patch: usize) -> Result<Sample> {
    render_with_part_map(spec, style, seed, patch).map(|(s, _)| s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Oversize,
    Oversplit,
}

/// Simulated grounding failure. `Oversize` stretches the box over nearly the
/// whole image height (at least 90%); `Oversplit` shrinks it to a sliver at
/// most 5% of the image height.
pub fn corrupt_box(b: &PartBox, mode: CorruptionMode, dims: ImageDims, rng: &mut impl Rng) -> PartBox {
    let h = dims.height as u32;
    match mode {
        CorruptionMode::Oversize => {
            let slack = (0.05 * h as f64).floor() as u32;
            let y_min = rng.random_range(0..=slack);
            let y_max = h - rng.random_range(0..=slack);
            PartBox { y_min, y_max, calibrated: false, ..*b }
        }
        CorruptionMode::Oversplit => {
            let max_h = ((0.05 * h as f64).floor() as u32).max(1);
            let sliver = rng.random_range(1..=max_h);
            let hi = b.y_max.saturating_sub(sliver).max(b.y_min).min(h - sliver);
            let lo = b.y_min.min(hi);
            let y_min = rng.random_range(lo..=hi);
            PartBox { y_min, y_max: y_min + sliver, calibrated: false, ..*b }
        }
    }
}

/// Generated samples plus the configuration that produced them.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub config: GenConfig,
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn num_ids(&self) -> usize {
        self.config.num_ids
    }
}

/// Generates the whole dataset.
///
/// Sample `k` of an identity goes to domain `k mod num_domains`; within a
/// domain, the `j`-th sample is seen by camera `j mod num_cameras`. The last
/// domain is held out: its first sample per camera becomes a query and the
/// rest form the gallery, while every other domain is training data. With a
/// single domain the first half of each identity trains and the second half
/// is held out.
pub fn generate_dataset(config: &GenConfig) -> Result<Manifest> {
    config.validate()?;
    if config.samples_per_id < 2 || config.num_cameras < 2 {
        return Err(Error::Generation(format!(
            "{} samples per id over {} cameras cannot give a cross-camera query/gallery pair",
            config.samples_per_id, config.num_cameras
        )));
    }
    let dims = config.dims();
    let nd = config.num_domains;
    let mut samples = Vec::with_capacity(config.num_ids * config.samples_per_id);
    for id in 0..config.num_ids {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x1d, id as u64, 0));
        let spec = IdSpec::sample(id, dims, &mut rng);
        let per_domain_train = config.samples_per_id / 2;
        let mut seen_query_cams = Vec::new();
        for k in 0..config.samples_per_id {
            let (domain, j, held_out) = if nd >= 2 {
                (k % nd, k / nd, k % nd == nd - 1)
            } else {
                (0, k, k >= per_domain_train)
            };
            let camera = j % config.num_cameras;
            let style = DomainStyle::new(domain, camera, config.seed);
            let seed = mix(config.seed, 0x5a, id as u64, k as u64);
            let mut s = render_identity(&spec, &style, seed, config.patch_size)?;
            s.sample_id = format!("s{:05}", id * config.samples_per_id + k);
            s.split = if !held_out {
                Split::Train
            } else if !seen_query_cams.contains(&camera) {
                seen_query_cams.push(camera);
                Split::Query
            } else {
                Split::Gallery
            };
            samples.push(s);
        }
    }
    let manifest = Manifest { config: config.clone(), samples };
    check_splits(&manifest)?;
    Ok(manifest)
}

/// Every query needs a gallery sample of its identity from another camera.
pub fn check_splits(m: &Manifest) -> Result<()> {
    let queries = m.split(Split::Query);
    if queries.is_empty() {
        return Err(Error::Generation("no query samples".into()));
    }
    let gallery = m.split(Split::Gallery);
    for q in queries {
        let ok = gallery.iter().any(|g| g.id_label == q.id_label && g.camera_id != q.camera_id);
        if !ok {
            return Err(Error::Generation(format!(
                "query {} (id {}) has no cross-camera gallery match",
                q.sample_id, q.id_label
            )));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    sample_id: String,
    id_label: usize,
    camera_id: usize,
    domain_id: usize,
    split: Split,
    oracle_boxes: BTreeMap<Part, [u32; 4]>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    config: GenConfig,
    samples: Vec<SampleEntry>,
}

fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (img[[y as usize, x as usize, c]] * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    }))
}

/// Writes `images/<sample_id>.png` and `manifest.json` into `dir`
/// atomically.
pub fn write_dataset(dir: &Path, m: &Manifest) -> Result<()> {
    write_dir_atomic(dir, |tmp| fill_dataset(tmp, m))
}

/// Writes the dataset files into an existing directory.
pub fn fill_dataset(tmp: &Path, m: &Manifest) -> Result<()> {
    {
        let images = tmp.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &m.samples {
            save_png(&images.join(format!("{}.png", s.sample_id)), &s.image)?;
        }
        let file = ManifestFile {
            config: m.config.clone(),
            samples: m
                .samples
                .iter()
                .map(|s| SampleEntry {
                    sample_id: s.sample_id.clone(),
                    id_label: s.id_label,
                    camera_id: s.camera_id,
                    domain_id: s.domain_id,
                    split: s.split,
                    oracle_boxes: s.oracle_boxes.iter().map(|b| (b.part, b.coords())).collect(),
                })
                .collect(),
        };
        write_atomic(&tmp.join("manifest.json"), &serde_json::to_vec_pretty(&file)?)
    }
}

/// Loads a dataset directory.
///
/// Expected layout, which is also how real re-identification data can be
/// brought in: `manifest.json` holds `{"config": {...}, "samples": [...]}`
/// where each sample is `{sample_id, id_label, camera_id, domain_id, split,
/// oracle_boxes: {head|upper|legs: [x_min, y_min, x_max, y_max]}}` and
/// `split` is one of `train`, `query`, `gallery`; pixels live in
/// `images/<sample_id>.png`. Real data without part annotations can supply
/// any boxes here and rely on a [`crate::grounding::FileProvider`] for
/// pseudo labels.
pub fn load_dataset(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let file: ManifestFile = serde_json::from_slice(&bytes)?;
    let mut samples = Vec::with_capacity(file.samples.len());
    for e in file.samples {
        let image = load_png(&dir.join("images").join(format!("{}.png", e.sample_id)))?;
        let mut boxes = [PartBox::new(Part::Head, 0, 0, 0, 0); 3];
        for part in Part::ALL {
            let c = e
                .oracle_boxes
                .get(&part)
                .ok_or_else(|| Error::Lookup(format!("sample {} lacks a {part} box", e.sample_id)))?;
            boxes[part.index()] = PartBox::new(part, c[0], c[1], c[2], c[3]);
        }
        samples.push(Sample {
            sample_id: e.sample_id,
            image,
            id_label: e.id_label,
            camera_id: e.camera_id,
            domain_id: e.domain_id,
            split: e.split,
            oracle_boxes: boxes,
        });
    }
    Ok(Manifest { config: file.config, samples })
}

/// Mirrors an image left-right.
pub fn hflip_image(img: &Image) -> Image {
    let w = img.shape()[1];
    Image::from_shape_fn(img.raw_dim(), |(y, x, c)| img[[y, w - 1 - x, c]])
}
