//! Detection lists on disk: a JSON array of
//! `{image_id, category_id, bbox: [x, y, w, h], score}` records. Pseudo-label
//! files carry the same records plus `teacher_conf`, an alias of `score`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LesionClass;
use crate::geometry::{BBox, Detection};

#[derive(Debug, Error)]
pub enum DetectionFileError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed detection file {path}: {source}")]
    Malformed {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("record {index}: unknown category id {category_id}")]
    UnknownCategory { index: usize, category_id: u64 },
    #[error("record {index}: invalid box or score")]
    InvalidRecord { index: usize },
}

/// A detection attached to an image of a manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDetection {
    pub image_id: u64,
    pub detection: Detection,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    teacher_conf: Option<f64>,
}

pub fn to_json_string(dets: &[ImageDetection], with_teacher_conf: bool) -> String {
    let records: Vec<Record> = dets
        .iter()
        .map(|d| Record {
            image_id: d.image_id,
            category_id: d.detection.class.category_id(),
            bbox: d.detection.bbox.to_xywh(),
            score: d.detection.score,
            teacher_conf: with_teacher_conf.then_some(d.detection.score),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("detection serialization cannot fail")
}

pub fn from_json_str(text: &str, origin: &str) -> Result<Vec<ImageDetection>, DetectionFileError> {
    let records: Vec<Record> =
        serde_json::from_str(text).map_err(|source| DetectionFileError::Malformed { path: origin.into(), source })?;
    records
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            let class = LesionClass::from_category_id(r.category_id)
                .ok_or(DetectionFileError::UnknownCategory { index, category_id: r.category_id })?;
            let [x, y, w, h] = r.bbox;
            let bbox = BBox::from_xywh(x, y, w, h);
            let score = r.teacher_conf.unwrap_or(r.score);
            if !bbox.is_finite() || w < 0.0 || h < 0.0 || !(0.0..=1.0).contains(&score) {
                return Err(DetectionFileError::InvalidRecord { index });
            }
            Ok(ImageDetection { image_id: r.image_id, detection: Detection::new(bbox, class, score) })
        })
        .collect()
}

pub fn save(path: &Path, dets: &[ImageDetection], with_teacher_conf: bool) -> Result<(), DetectionFileError> {
    fs::write(path, to_json_string(dets, with_teacher_conf))
        .map_err(|source| DetectionFileError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<Vec<ImageDetection>, DetectionFileError> {
    let text = fs::read_to_string(path)
        .map_err(|source| DetectionFileError::Io { path: path.display().to_string(), source })?;
    from_json_str(&text, &path.display().to_string())
}
