//! Core data model and non-learned machinery for small-lesion detection:
//! box geometry, COCO-style manifests, synthetic scenes, sliced inference
//! and COCO-style evaluation.

pub mod dataset;
pub mod detections;
pub mod eval;
pub mod geometry;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod slicer;
pub mod synth;

pub use dataset::{Annotation, DatasetManifest, ImageRecord, LesionClass, PatchSource, SplitTag};
pub use geometry::{greedy_match, iou, nms, BBox, Detection};
pub use slicer::{make_grid, merge_detections, sliced_infer, Detector, SliceGrid, TileSpec};
