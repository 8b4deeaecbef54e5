//! Synthetic intraoral-like scenes: a tooth-row background with elliptical
//! caries (dark) and MIH (chalky, pale yellow) blobs whose box-area ratios
//! follow a log-normal law fitted to a target small-lesion fraction.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};
use thiserror::Error;

use crate::dataset::{Annotation, DatasetManifest, ImageRecord, LesionClass, SplitTag, SMALL_AREA_RATIO};
use crate::geometry::{iou, BBox};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could only place {placed} of the minimum {required} lesions in a {width}x{height} image")]
    Placement { placed: usize, required: usize, width: u32, height: u32 },
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundStyle {
    Gradient,
    Textured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub image_width: u32,
    pub image_height: u32,
    pub lesions_min: u32,
    pub lesions_max: u32,
    /// Target fraction of lesions whose box covers less than
    /// `small_area_ratio` of the image.
    pub small_fraction_target: f64,
    pub small_area_ratio: f64,
    /// Shape (σ of the log) of the area-ratio distribution.
    pub area_log_sigma: f64,
    /// Fraction of lesions drawn as MIH; the rest are caries.
    pub mih_fraction: f64,
    pub background: BackgroundStyle,
    pub brightness_jitter: f64,
    pub max_pair_iou: f64,
    /// Fraction of rendered lesions left out of the annotation list.
    pub unannotated_fraction: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            image_width: 256,
            image_height: 256,
            lesions_min: 2,
            lesions_max: 6,
            small_fraction_target: 0.78,
            small_area_ratio: SMALL_AREA_RATIO,
            area_log_sigma: 0.9,
            // 4,443 MIH vs 3,583 caries lesions
            mih_fraction: 0.55,
            background: BackgroundStyle::Textured,
            brightness_jitter: 0.1,
            max_pair_iou: 0.3,
            unannotated_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidParams(m.to_string()));
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive");
        }
        if self.lesions_min > self.lesions_max {
            return bad("lesions_min exceeds lesions_max");
        }
        if !(self.small_area_ratio > 0.0 && self.small_area_ratio < 1.0) {
            return bad("small_area_ratio must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.small_fraction_target) {
            return bad("small_fraction_target must lie in [0, 1]");
        }
        if !(self.area_log_sigma > 0.0) {
            return bad("area_log_sigma must be positive");
        }
        for (name, v) in [
            ("mih_fraction", self.mih_fraction),
            ("max_pair_iou", self.max_pair_iou),
            ("unannotated_fraction", self.unannotated_fraction),
            ("brightness_jitter", self.brightness_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Log-normal over box-area ratios with
    /// `P(ratio < small_area_ratio) = small_fraction_target`.
    pub fn area_distribution(&self) -> AreaRatioDistribution {
        let p = self.small_fraction_target.clamp(1e-9, 1.0 - 1e-9);
        let z = StdNormal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p);
        let mu = self.small_area_ratio.ln() - self.area_log_sigma * z;
        AreaRatioDistribution { log_normal: Normal::new(mu, self.area_log_sigma).expect("positive sigma") }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AreaRatioDistribution {
    log_normal: Normal<f64>,
}

impl AreaRatioDistribution {
    pub fn mu(&self) -> f64 {
        self.log_normal.mean()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.log_normal.sample(rng).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub class: LesionClass,
    pub bbox: BBox,
    pub annotated: bool,
}

/// A rendered scene. `instance_mask[y * width + x]` is 0 for background
/// and `k + 1` for pixels of `lesions[k]`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub lesions: Vec<Lesion>,
    pub instance_mask: Vec<u16>,
}

impl Scene {
    /// Annotations for the labelled lesions, numbered from `first_id`.
    pub fn annotations(&self, image_id: u64, first_id: u64) -> Vec<Annotation> {
        self.lesions
            .iter()
            .filter(|l| l.annotated)
            .enumerate()
            .map(|(i, l)| Annotation { id: first_id + i as u64, image_id, class: l.class, bbox: l.bbox })
            .collect()
    }
}

const CARIES_RGB: [f32; 3] = [92.0, 58.0, 38.0];
const MIH_RGB: [f32; 3] = [238.0, 206.0, 132.0];
const TOOTH_RGB: [f32; 3] = [226.0, 222.0, 206.0];
const GUM_DARK: [f32; 3] = [112.0, 38.0, 44.0];
const GUM_LIGHT: [f32; 3] = [188.0, 98.0, 102.0];

const PLACEMENT_ATTEMPTS: usize = 200;

fn paint_background<R: Rng + ?Sized>(params: &SynthParams, rng: &mut R) -> Vec<[f32; 3]> {
    let (w, h) = (params.image_width as usize, params.image_height as usize);
    let mut px = vec![[0f32; 3]; w * h];
    for y in 0..h {
        // gum colour peaks in the middle band
        let t = 1.0 - ((y as f32 + 0.5) / h as f32 - 0.5).abs() * 2.0;
        let row: [f32; 3] = std::array::from_fn(|c| GUM_DARK[c] + (GUM_LIGHT[c] - GUM_DARK[c]) * t);
        px[y * w..(y + 1) * w].fill(row);
    }

    // Two rows of rounded teeth meeting near the vertical centre.
    let tooth_w = (w as f32 / rng.gen_range(5.0..8.0)).max(4.0);
    let gap = (tooth_w * 0.08).max(1.0);
    let mid = h as f32 * rng.gen_range(0.45..0.55);
    let tooth_h = h as f32 * rng.gen_range(0.22..0.3);
    for (top, bottom) in [(mid - tooth_h, mid - gap / 2.0), (mid + gap / 2.0, mid + tooth_h)] {
        let mut x0 = -rng.gen_range(0.0..tooth_w);
        while x0 < w as f32 {
            let x1 = x0 + tooth_w - gap;
            let shade: f32 = rng.gen_range(-14.0..10.0);
            let radius = tooth_w * 0.3;
            let (ys, ye) = (top.max(0.0) as usize, (bottom.ceil() as usize).min(h));
            let (xs, xe) = (x0.max(0.0) as usize, (x1.ceil().max(0.0) as usize).min(w));
            for y in ys..ye {
                for x in xs..xe {
                    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                    if fx < x0 || fx > x1 || fy < top || fy > bottom {
                        continue;
                    }
                    // round the corners
                    let cx = fx.clamp(x0 + radius, x1 - radius);
                    let cy = fy.clamp(top + radius, bottom - radius);
                    if (fx - cx).powi(2) + (fy - cy).powi(2) > radius * radius {
                        continue;
                    }
                    let edge = ((fx - x0).min(x1 - fx) / radius).min(1.0);
                    px[y * w + x] = std::array::from_fn(|c| TOOTH_RGB[c] + shade - (1.0 - edge) * 18.0);
                }
            }
            x0 += tooth_w;
        }
    }

    if params.background == BackgroundStyle::Textured {
        // bilinear value noise on an 8-pixel lattice
        let cell = 8usize;
        let (gw, gh) = (w / cell + 2, h / cell + 2);
        let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.gen_range(-10.0..10.0)).collect();
        for y in 0..h {
            for x in 0..w {
                let (gx, gy) = (x / cell, y / cell);
                let (tx, ty) = ((x % cell) as f32 / cell as f32, (y % cell) as f32 / cell as f32);
                let at = |i: usize, j: usize| lattice[j * gw + i];
                let n = at(gx, gy) * (1.0 - tx) * (1.0 - ty)
                    + at(gx + 1, gy) * tx * (1.0 - ty)
                    + at(gx, gy + 1) * (1.0 - tx) * ty
                    + at(gx + 1, gy + 1) * tx * ty;
                for c in &mut px[y * w + x] {
                    *c += n;
                }
            }
        }
    }
    px
}

/// Integer box size for a sampled area ratio and aspect ratio.
fn box_size(ratio: f64, aspect: f64, w: u32, h: u32) -> (u32, u32) {
    let area = ratio * w as f64 * h as f64;
    let bw = (area * aspect).sqrt().round().max(2.0) as u32;
    let bh = (area / aspect).sqrt().round().max(2.0) as u32;
    (bw, bh)
}

/// Pixels of the ellipse inscribed in the integer box `(x0, y0, bw, bh)`.
fn ellipse_pixels(x0: u32, y0: u32, bw: u32, bh: u32) -> Vec<(u32, u32)> {
    let (rx, ry) = (bw as f64 / 2.0, bh as f64 / 2.0);
    let mut out = Vec::new();
    for dy in 0..bh {
        for dx in 0..bw {
            let nx = (dx as f64 + 0.5 - rx) / rx;
            let ny = (dy as f64 + 0.5 - ry) / ry;
            if nx * nx + ny * ny <= 1.0 {
                out.push((x0 + dx, y0 + dy));
            }
        }
    }
    out
}

fn tight_box(pixels: &[(u32, u32)]) -> BBox {
    let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
    let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
    let x1 = pixels.iter().map(|p| p.0).max().unwrap_or(0) + 1;
    let y1 = pixels.iter().map(|p| p.1).max().unwrap_or(0) + 1;
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

pub fn generate_scene<R: Rng + ?Sized>(params: &SynthParams, rng: &mut R) -> Result<Scene, SynthError> {
    params.validate()?;
    let (w, h) = (params.image_width, params.image_height);
    let mut px = paint_background(params, rng);
    let mut instance_mask = vec![0u16; (w * h) as usize];
    let areas = params.area_distribution();

    let target = rng.gen_range(params.lesions_min..=params.lesions_max) as usize;
    let mut lesions: Vec<Lesion> = Vec::with_capacity(target);
    'lesion: for _ in 0..target {
        let class = if rng.gen_bool(params.mih_fraction) { LesionClass::Mih } else { LesionClass::Caries };
        let annotated = !rng.gen_bool(params.unannotated_fraction);
        let ratio = areas.sample(rng);
        let aspect = rng.gen_range(0.6..1.6);
        let (bw, bh) = box_size(ratio, aspect, w, h);
        let tint: f32 = rng.gen_range(-18.0..18.0);
        for _ in 0..PLACEMENT_ATTEMPTS {
            if bw > w || bh > h {
                break;
            }
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            let pixels = ellipse_pixels(x0, y0, bw, bh);
            if pixels.iter().any(|&(x, y)| instance_mask[(y * w + x) as usize] != 0) {
                continue;
            }
            let bbox = tight_box(&pixels);
            if lesions.iter().any(|l| iou(&l.bbox, &bbox) > params.max_pair_iou) {
                continue;
            }
            let base = match class {
                LesionClass::Caries => CARIES_RGB,
                LesionClass::Mih => MIH_RGB,
            };
            let (cx, cy) = bbox.center();
            let (rx, ry) = (bw as f32 / 2.0, bh as f32 / 2.0);
            let id = lesions.len() as u16 + 1;
            for &(x, y) in &pixels {
                let d = (((x as f32 + 0.5 - cx as f32) / rx).powi(2) + ((y as f32 + 0.5 - cy as f32) / ry).powi(2)).sqrt();
                // caries darken towards the core, MIH towards the rim
                let shade = match class {
                    LesionClass::Caries => -22.0 * (1.0 - d),
                    LesionClass::Mih => -16.0 * d,
                };
                px[(y * w + x) as usize] = std::array::from_fn(|c| base[c] + tint + shade);
                instance_mask[(y * w + x) as usize] = id;
            }
            lesions.push(Lesion { class, bbox, annotated });
            continue 'lesion;
        }
        if lesions.len() < params.lesions_min as usize {
            return Err(SynthError::Placement {
                placed: lesions.len(),
                required: params.lesions_min as usize,
                width: w,
                height: h,
            });
        }
    }

    let gain = 1.0 + rng.gen_range(-params.brightness_jitter..=params.brightness_jitter) as f32;
    let mut image = RgbImage::new(w, h);
    for (i, p) in image.pixels_mut().enumerate() {
        *p = Rgb(std::array::from_fn(|c| (px[i][c] * gain).round().clamp(0.0, 255.0) as u8));
    }
    Ok(Scene { image, lesions, instance_mask })
}

/// Per-image generator: the base seed with the image index as stream.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub const MANIFEST_FILE: &str = "annotations.json";

/// Renders `n_images` scenes into `out` as PNGs plus `annotations.json`.
pub fn generate_dataset(n_images: usize, params: &SynthParams, out: &Path) -> Result<DatasetManifest, SynthError> {
    if n_images == 0 {
        return Err(SynthError::InvalidParams("n_images must be positive".into()));
    }
    params.validate()?;
    let write_err = |p: &Path, e: &dyn std::fmt::Display| SynthError::Write { path: p.display().to_string(), reason: e.to_string() };
    fs::create_dir_all(out).map_err(|e| write_err(out, &e))?;

    let mut manifest = DatasetManifest { split: SplitTag::None, ..Default::default() };
    for i in 0..n_images {
        let image_id = i as u64 + 1;
        let scene = generate_scene(params, &mut image_rng(params.seed, i as u64))?;
        let file_name = format!("img_{image_id:05}.png");
        let path = out.join(&file_name);
        scene.image.save(&path).map_err(|e| write_err(&path, &e))?;
        let first = manifest.annotations.len() as u64 + 1;
        manifest.annotations.extend(scene.annotations(image_id, first));
        manifest.images.push(ImageRecord {
            id: image_id,
            width: params.image_width,
            height: params.image_height,
            file_name,
            source: None,
        });
    }
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path).map_err(|e| write_err(&path, &e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{crop_patches, lesion_area_stats, load_manifest};

    #[test]
    fn deterministic_for_fixed_seed() {
        let p = SynthParams::default();
        let a = generate_scene(&p, &mut image_rng(5, 0)).unwrap();
        let b = generate_scene(&p, &mut image_rng(5, 0)).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.lesions, b.lesions);
        let c = generate_scene(&p, &mut image_rng(5, 1)).unwrap();
        assert_ne!(a.image.as_raw(), c.image.as_raw());
    }

    #[test]
    fn zero_lesions_is_valid() {
        let p = SynthParams { lesions_min: 0, lesions_max: 0, ..Default::default() };
        let s = generate_scene(&p, &mut image_rng(0, 0)).unwrap();
        assert!(s.lesions.is_empty());
        assert!(s.instance_mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn boxes_are_tight_and_inside() {
        let p = SynthParams { lesions_min: 3, lesions_max: 8, ..Default::default() };
        for i in 0..20 {
            let s = generate_scene(&p, &mut image_rng(1, i)).unwrap();
            let w = p.image_width as usize;
            for (k, l) in s.lesions.iter().enumerate() {
                let pix: Vec<(u32, u32)> = s
                    .instance_mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m as usize == k + 1)
                    .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
                    .collect();
                assert!(!pix.is_empty());
                assert_eq!(tight_box(&pix), l.bbox);
                assert!(s.image.width() as f64 >= l.bbox.x_max && l.bbox.x_min >= 0.0);
                assert!(!l.bbox.is_degenerate());
            }
            for (a, b) in s.lesions.iter().zip(s.lesions.iter().skip(1)) {
                assert!(iou(&a.bbox, &b.bbox) <= p.max_pair_iou);
            }
        }
    }

    #[test]
    fn area_sampler_hits_target_fraction() {
        let p = SynthParams::default();
        let dist = p.area_distribution();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let below = (0..n).filter(|_| dist.sample(&mut rng) < p.small_area_ratio).count();
        let frac = below as f64 / n as f64;
        assert!((frac - 0.78).abs() <= 0.03, "fraction {frac}");
    }

    #[test]
    fn placement_failure_reported() {
        let p = SynthParams { image_width: 3, image_height: 3, lesions_min: 5, lesions_max: 5, ..Default::default() };
        assert!(matches!(generate_scene(&p, &mut image_rng(0, 0)), Err(SynthError::Placement { .. })));
    }

    #[test]
    fn unannotated_lesions_are_drawn_but_unlabelled() {
        let p = SynthParams { lesions_min: 6, lesions_max: 6, unannotated_fraction: 0.5, ..Default::default() };
        let s = generate_scene(&p, &mut image_rng(3, 0)).unwrap();
        let labelled = s.annotations(1, 1).len();
        assert_eq!(labelled, s.lesions.iter().filter(|l| l.annotated).count());
        assert!(s.instance_mask.iter().filter(|&&m| m != 0).count() > 0);
    }

    #[test]
    fn dataset_round_trip_and_crops() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams { seed: 9, ..Default::default() };
        let m = generate_dataset(5, &p, dir.path()).unwrap();
        assert_eq!(m.images.len(), 5);
        let loaded = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        for im in &m.images {
            assert!(dir.path().join(&im.file_name).exists());
        }
        let patches = crop_patches(&m, 128, 0.5).unwrap();
        let by = patches.annotations_by_image();
        assert!(patches.images.iter().all(|im| by.get(&im.id).is_some_and(|a| !a.is_empty())));
        assert!(lesion_area_stats(&m, &[p.small_area_ratio]).unwrap().total > 0);
    }

    #[test]
    fn rejects_bad_params() {
        let p = SynthParams { small_area_ratio: 1.5, ..Default::default() };
        assert!(p.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(0, &SynthParams::default(), dir.path()).is_err());
    }
}
