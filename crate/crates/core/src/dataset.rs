//! Annotated image manifests in a COCO-style JSON layout: loading with
//! validation, image-level splitting, patch cropping and lesion-size
//! statistics.
//!
//! On disk a manifest looks like
//!
//! ```json
//! {
//!   "images": [{"id": 1, "width": 1280, "height": 960, "file_name": "a.png"}],
//!   "annotations": [{"id": 7, "image_id": 1, "category_id": 2, "bbox": [10.0, 20.0, 5.0, 4.0]}],
//!   "categories": [{"id": 1, "name": "caries"}, {"id": 2, "name": "mih"}]
//! }
//! ```
//!
//! Patch manifests add `source_image_id`, `offset_x` and `offset_y` to each
//! image entry. An optional top-level `split` of `"train"`, `"val"` or
//! `"none"` records which side of a split the manifest came from.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::slicer::{assign_annotations, make_grid};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Malformed {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("image {image_id}: {reason}")]
    InvalidImage { image_id: u64, reason: String },
    #[error("duplicate image id {0}")]
    DuplicateImage(u64),
    #[error("annotation {annotation_id}: unknown category id {category_id}")]
    UnknownCategory { annotation_id: u64, category_id: u64 },
    #[error("annotation {annotation_id}: references absent image {image_id}")]
    MissingImage { annotation_id: u64, image_id: u64 },
    #[error("annotation {annotation_id}: degenerate box {bbox:?}")]
    DegenerateBox { annotation_id: u64, bbox: [f64; 4] },
    #[error("manifest has no images")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// The two lesion classes. Category ids are 1 (caries) and 2 (MIH).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionClass {
    Caries,
    Mih,
}

impl LesionClass {
    pub const ALL: [LesionClass; 2] = [LesionClass::Caries, LesionClass::Mih];

    pub fn category_id(self) -> u64 {
        match self {
            LesionClass::Caries => 1,
            LesionClass::Mih => 2,
        }
    }

    pub fn from_category_id(id: u64) -> Option<Self> {
        match id {
            1 => Some(LesionClass::Caries),
            2 => Some(LesionClass::Mih),
            _ => None,
        }
    }

    /// Zero-based index used for class logits.
    pub fn index(self) -> usize {
        self.category_id() as usize - 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::from_category_id(i as u64 + 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            LesionClass::Caries => "caries",
            LesionClass::Mih => "mih",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub source_image_id: u64,
    pub offset_x: u32,
    pub offset_y: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
    pub source: Option<PatchSource>,
}

impl ImageRecord {
    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub class: LesionClass,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    #[default]
    None,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub split: SplitTag,
}

// --- wire format ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    file_name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    source_image_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    offset_x: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    offset_y: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    area: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
    #[serde(default)]
    split: SplitTag,
}

fn categories() -> Vec<CocoCategory> {
    LesionClass::ALL
        .iter()
        .map(|c| CocoCategory { id: c.category_id(), name: c.name().to_string() })
        .collect()
}

impl DatasetManifest {
    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    /// Annotations grouped by image id, in manifest order.
    pub fn annotations_by_image(&self) -> HashMap<u64, Vec<Annotation>> {
        let mut map: HashMap<u64, Vec<Annotation>> = HashMap::new();
        for ann in &self.annotations {
            map.entry(ann.image_id).or_default().push(*ann);
        }
        map
    }

    pub fn annotations_for(&self, image_id: u64) -> Vec<Annotation> {
        self.annotations.iter().filter(|a| a.image_id == image_id).copied().collect()
    }

    /// Parses and validates a manifest document. Boxes sticking out of the
    /// image are clipped; boxes with no extent after clipping are rejected.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, DatasetError> {
        let doc: CocoDocument =
            serde_json::from_str(text).map_err(|source| DatasetError::Malformed { path: origin.to_string(), source })?;

        let mut images = Vec::with_capacity(doc.images.len());
        let mut seen = HashSet::new();
        for im in doc.images {
            if !seen.insert(im.id) {
                return Err(DatasetError::DuplicateImage(im.id));
            }
            if im.width == 0 || im.height == 0 {
                return Err(DatasetError::InvalidImage { image_id: im.id, reason: "non-positive size".into() });
            }
            let source = match (im.source_image_id, im.offset_x, im.offset_y) {
                (Some(source_image_id), Some(offset_x), Some(offset_y)) => {
                    Some(PatchSource { source_image_id, offset_x, offset_y })
                }
                (None, None, None) => None,
                _ => {
                    return Err(DatasetError::InvalidImage {
                        image_id: im.id,
                        reason: "incomplete patch provenance".into(),
                    })
                }
            };
            images.push(ImageRecord { id: im.id, width: im.width, height: im.height, file_name: im.file_name, source });
        }

        let bounds: HashMap<u64, BBox> = images.iter().map(|im| (im.id, im.bounds())).collect();
        let mut annotations = Vec::with_capacity(doc.annotations.len());
        for ann in doc.annotations {
            let class = LesionClass::from_category_id(ann.category_id).ok_or(DatasetError::UnknownCategory {
                annotation_id: ann.id,
                category_id: ann.category_id,
            })?;
            let image_box = bounds
                .get(&ann.image_id)
                .ok_or(DatasetError::MissingImage { annotation_id: ann.id, image_id: ann.image_id })?;
            let [x, y, w, h] = ann.bbox;
            let raw = BBox::from_xywh(x, y, w, h);
            if !raw.is_finite() || w <= 0.0 || h <= 0.0 {
                return Err(DatasetError::DegenerateBox { annotation_id: ann.id, bbox: ann.bbox });
            }
            let bbox = raw.clip_to(image_box);
            if bbox.is_degenerate() {
                return Err(DatasetError::DegenerateBox { annotation_id: ann.id, bbox: ann.bbox });
            }
            annotations.push(Annotation { id: ann.id, image_id: ann.image_id, class, bbox });
        }
        Ok(Self { images, annotations, split: doc.split })
    }

    pub fn to_json_string(&self) -> String {
        let doc = CocoDocument {
            images: self
                .images
                .iter()
                .map(|im| CocoImage {
                    id: im.id,
                    width: im.width,
                    height: im.height,
                    file_name: im.file_name.clone(),
                    source_image_id: im.source.map(|s| s.source_image_id),
                    offset_x: im.source.map(|s| s.offset_x),
                    offset_y: im.source.map(|s| s.offset_y),
                })
                .collect(),
            annotations: self
                .annotations
                .iter()
                .map(|a| CocoAnnotation {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.class.category_id(),
                    bbox: a.bbox.to_xywh(),
                    area: Some(a.bbox.area()),
                })
                .collect(),
            categories: categories(),
            split: self.split,
        };
        serde_json::to_string_pretty(&doc).expect("manifest serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json_string()).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text =
        fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    DatasetManifest::from_json_str(&text, &path.display().to_string())
}

/// Image-level random split. The first part receives
/// `floor(ratio · N)` images (822 images at 0.8 give 657 / 165).
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidArgument(format!("split ratio {ratio} not in (0, 1)")));
    }
    if manifest.images.is_empty() {
        return Err(DatasetError::Empty);
    }
    let n = manifest.images.len();
    let n_train = ((ratio * n as f64) + 1e-9).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }

    let part = |want: bool, split: SplitTag| {
        let images: Vec<ImageRecord> =
            manifest.images.iter().zip(&in_train).filter(|(_, &t)| t == want).map(|(im, _)| im.clone()).collect();
        let ids: HashSet<u64> = images.iter().map(|im| im.id).collect();
        let annotations = manifest.annotations.iter().filter(|a| ids.contains(&a.image_id)).copied().collect();
        DatasetManifest { images, annotations, split }
    };
    Ok((part(true, SplitTag::Train), part(false, SplitTag::Val)))
}

/// Tiles every image into zero-overlap `patch_size` windows (edge windows
/// shifted inward), keeps each box in the patches holding at least
/// `min_visibility` of its area, clips it there, and drops patches with no
/// boxes. Patch records carry their source image and offset.
pub fn crop_patches(
    manifest: &DatasetManifest,
    patch_size: u32,
    min_visibility: f64,
) -> Result<DatasetManifest, DatasetError> {
    if patch_size == 0 {
        return Err(DatasetError::InvalidArgument("patch size must be positive".into()));
    }
    if !(min_visibility > 0.0 && min_visibility <= 1.0) {
        return Err(DatasetError::InvalidArgument(format!("min_visibility {min_visibility} not in (0, 1]")));
    }
    let by_image = manifest.annotations_by_image();
    let mut out = DatasetManifest { split: manifest.split, ..Default::default() };
    let mut next_ann = 1u64;
    for im in &manifest.images {
        let anns = match by_image.get(&im.id) {
            Some(a) if !a.is_empty() => a,
            _ => continue,
        };
        let grid = make_grid(im.width, im.height, patch_size, 0.0);
        let per_tile = assign_annotations(&grid, anns, min_visibility);
        for (tile, tile_anns) in grid.tiles.iter().zip(per_tile) {
            if tile_anns.is_empty() {
                continue;
            }
            let patch_id = out.images.len() as u64 + 1;
            let stem = Path::new(&im.file_name).file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            out.images.push(ImageRecord {
                id: patch_id,
                width: tile.width,
                height: tile.height,
                file_name: format!("{stem}_x{}_y{}.png", tile.x, tile.y),
                source: Some(PatchSource { source_image_id: im.id, offset_x: tile.x, offset_y: tile.y }),
            });
            for a in tile_anns {
                out.annotations.push(Annotation { id: next_ann, image_id: patch_id, class: a.class, bbox: a.bbox });
                next_ann += 1;
            }
        }
    }
    if out.images.is_empty() {
        log::warn!("crop_patches produced no patches (patch size {patch_size}, min visibility {min_visibility})");
    }
    Ok(out)
}

/// Histogram of box-area / image-area ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaHistogram {
    pub thresholds: Vec<f64>,
    /// `counts[i]` holds ratios in `[thresholds[i-1], thresholds[i])`; the
    /// last bin holds everything `≥` the final threshold.
    pub counts: Vec<usize>,
    /// Fraction of annotations with ratio strictly below each threshold.
    pub cumulative_fraction: Vec<f64>,
    pub total: usize,
    pub empty: bool,
}

/// The lesion-size cut used throughout: 0.58% of the image area.
pub const SMALL_AREA_RATIO: f64 = 0.0058;

pub fn lesion_area_stats(manifest: &DatasetManifest, thresholds: &[f64]) -> Result<AreaHistogram, DatasetError> {
    if thresholds.is_empty()
        || thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0))
        || thresholds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(DatasetError::InvalidArgument(
            "thresholds must be strictly increasing and within (0, 1]".into(),
        ));
    }
    let areas: HashMap<u64, f64> =
        manifest.images.iter().map(|im| (im.id, im.width as f64 * im.height as f64)).collect();
    let mut counts = vec![0usize; thresholds.len() + 1];
    let mut total = 0;
    for ann in &manifest.annotations {
        let Some(&image_area) = areas.get(&ann.image_id) else { continue };
        let ratio = ann.bbox.area() / image_area;
        let bin = thresholds.partition_point(|&t| t <= ratio);
        counts[bin] += 1;
        total += 1;
    }
    let mut below = 0;
    let cumulative_fraction = counts[..thresholds.len()]
        .iter()
        .map(|&c| {
            below += c;
            if total == 0 {
                0.0
            } else {
                below as f64 / total as f64
            }
        })
        .collect();
    Ok(AreaHistogram { thresholds: thresholds.to_vec(), counts, cumulative_fraction, total, empty: total == 0 })
}
