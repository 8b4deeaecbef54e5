//! Sliced inference: overlapping window grids, per-tile annotation
//! assignment, remapping of tile detections into image coordinates and
//! NMS fusion.

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Annotation;
use crate::geometry::{nms, BBox, Detection};

/// A window of the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileSpec {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl TileSpec {
    pub fn bounds(&self) -> BBox {
        BBox::new(self.x as f64, self.y as f64, (self.x + self.width) as f64, (self.y + self.height) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    pub image_width: u32,
    pub image_height: u32,
    pub tile: u32,
    pub overlap: f64,
    /// Row-major: y outer, x inner.
    pub tiles: Vec<TileSpec>,
}

/// Offsets along one axis: multiples of the stride, with the last window
/// shifted back so it ends on the image edge.
fn axis_offsets(dim: u32, tile: u32, stride: u32) -> Vec<u32> {
    if tile >= dim {
        return vec![0];
    }
    let mut offsets = Vec::new();
    let mut off = 0u32;
    loop {
        if off + tile >= dim {
            let last = dim - tile;
            if offsets.last() != Some(&last) {
                offsets.push(last);
            }
            break;
        }
        offsets.push(off);
        off += stride;
    }
    offsets
}

/// Builds the window grid for a `width × height` image.
///
/// `stride = floor(tile · (1 − overlap))`. When the tile is at least as
/// large as an axis, that axis gets one full-span window.
///
/// # Panics
///
/// If `tile` is zero or `overlap` is outside `[0, 1)`.
pub fn make_grid(width: u32, height: u32, tile: u32, overlap: f64) -> SliceGrid {
    assert!(tile > 0, "tile size must be positive");
    assert!((0.0..1.0).contains(&overlap), "overlap {overlap} outside [0, 1)");
    let stride = ((tile as f64 * (1.0 - overlap)).floor() as u32).max(1);
    let xs = axis_offsets(width, tile, stride);
    let ys = axis_offsets(height, tile, stride);
    let tiles = ys
        .iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| TileSpec { x, y, width: tile.min(width), height: tile.min(height) })
        })
        .collect();
    SliceGrid { image_width: width, image_height: height, tile, overlap, tiles }
}

/// For each tile, the annotations with at least `min_visibility` of their
/// area inside it, clipped to the tile and shifted to tile-local
/// coordinates.
pub fn assign_annotations(grid: &SliceGrid, anns: &[Annotation], min_visibility: f64) -> Vec<Vec<Annotation>> {
    grid.tiles
        .iter()
        .map(|tile| {
            let bounds = tile.bounds();
            anns.iter()
                .filter_map(|a| {
                    let area = a.bbox.area();
                    if area <= 0.0 || a.bbox.intersection_area(&bounds) / area < min_visibility {
                        return None;
                    }
                    let local = a.bbox.clip_to(&bounds).translate(-(tile.x as f64), -(tile.y as f64));
                    Some(Annotation { bbox: local, ..*a })
                })
                .collect()
        })
        .collect()
}

/// A model that can be run on an RGB image.
pub trait Detector {
    type Error: std::error::Error + Send + Sync + 'static;

    /// Detections in the coordinate frame of `image`, score ≥ `conf_thresh`.
    fn detect(&self, image: &RgbImage, conf_thresh: f64) -> Result<Vec<Detection>, Self::Error>;
}

#[derive(Debug, Error)]
pub enum SliceError<E: std::error::Error + 'static> {
    #[error("grid built for {grid_w}x{grid_h} but image is {image_w}x{image_h}")]
    GridMismatch { grid_w: u32, grid_h: u32, image_w: u32, image_h: u32 },
    #[error(transparent)]
    Model(E),
}

/// Shifts tile-local detections into image coordinates.
pub fn remap(dets: &[Detection], tile: &TileSpec) -> Vec<Detection> {
    dets.iter()
        .map(|d| Detection { bbox: d.bbox.translate(tile.x as f64, tile.y as f64), ..*d })
        .collect()
}

/// Class-aware NMS over detections already in image coordinates.
pub fn merge_detections(dets: &[Detection], tau_merge: f64) -> Vec<Detection> {
    nms(dets, tau_merge, true)
}

/// Runs `model` on `image` resized to `side × side` and scales detections
/// back to image coordinates.
pub fn full_frame_detections<D: Detector>(
    model: &D,
    image: &RgbImage,
    side: u32,
    conf_thresh: f64,
) -> Result<Vec<Detection>, D::Error> {
    let (w, h) = image.dimensions();
    if (w, h) == (side, side) {
        return model.detect(image, conf_thresh);
    }
    let resized = imageops::resize(image, side, side, imageops::FilterType::Triangle);
    let (sx, sy) = (w as f64 / side as f64, h as f64 / side as f64);
    Ok(model
        .detect(&resized, conf_thresh)?
        .into_iter()
        .map(|d| Detection { bbox: d.bbox.scale(sx, sy), ..d })
        .collect())
}

/// Plain (unsliced) inference at the model's input side, fused with the
/// same class-aware NMS as sliced inference.
pub fn full_frame_infer<D: Detector>(
    model: &D,
    image: &RgbImage,
    side: u32,
    conf_thresh: f64,
    tau_merge: f64,
) -> Result<Vec<Detection>, D::Error> {
    Ok(merge_detections(&full_frame_detections(model, image, side, conf_thresh)?, tau_merge))
}

pub fn sliced_infer<D: Detector>(
    model: &D,
    image: &RgbImage,
    grid: &SliceGrid,
    conf_thresh: f64,
    tau_merge: f64,
    include_full_frame: bool,
) -> Result<Vec<Detection>, SliceError<D::Error>> {
    let (w, h) = image.dimensions();
    if (w, h) != (grid.image_width, grid.image_height) {
        return Err(SliceError::GridMismatch {
            grid_w: grid.image_width,
            grid_h: grid.image_height,
            image_w: w,
            image_h: h,
        });
    }
    let mut all = Vec::new();
    for tile in &grid.tiles {
        let dets = if (tile.width, tile.height) == (w, h) {
            model.detect(image, conf_thresh)
        } else {
            let view = imageops::crop_imm(image, tile.x, tile.y, tile.width, tile.height).to_image();
            model.detect(&view, conf_thresh)
        }
        .map_err(SliceError::Model)?;
        all.extend(remap(&dets, tile));
    }
    if include_full_frame {
        all.extend(full_frame_detections(model, image, grid.tile, conf_thresh).map_err(SliceError::Model)?);
    }
    Ok(merge_detections(&all, tau_merge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LesionClass;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::convert::Infallible;

    fn xs(grid: &SliceGrid) -> Vec<u32> {
        let mut v: Vec<u32> = grid.tiles.iter().map(|t| t.x).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    #[test]
    fn grid_examples() {
        for ov in [0.0, 0.2, 0.5, 0.9] {
            let g = make_grid(640, 640, 640, ov);
            assert_eq!(g.tiles, vec![TileSpec { x: 0, y: 0, width: 640, height: 640 }]);
        }
        let g = make_grid(1280, 1280, 640, 0.2);
        assert_eq!(g.tiles.len(), 9);
        assert_eq!(xs(&g), vec![0, 512, 640]);

        let g = make_grid(1000, 640, 640, 0.0);
        assert_eq!(xs(&g), vec![0, 360]);
        assert_eq!(g.tiles.len(), 2);

        let g = make_grid(300, 200, 640, 0.2);
        assert_eq!(g.tiles, vec![TileSpec { x: 0, y: 0, width: 300, height: 200 }]);
    }

    fn ann(b: BBox) -> Annotation {
        Annotation { id: 1, image_id: 1, class: LesionClass::Caries, bbox: b }
    }

    #[test]
    fn assignment_threshold_and_containment() {
        let g = make_grid(1280, 640, 640, 0.2);
        // x-offsets 0, 512, 640; the box sits inside tiles starting at 512 and 640 too
        let inside = ann(BBox::new(650.0, 10.0, 700.0, 40.0));
        let per = assign_annotations(&g, &[inside], 0.5);
        let hits: Vec<u32> = g.tiles.iter().zip(&per).filter(|(_, a)| !a.is_empty()).map(|(t, _)| t.x).collect();
        assert_eq!(hits, vec![512, 640]);
        assert_eq!(per[1][0].bbox, BBox::new(138.0, 10.0, 188.0, 40.0));

        // 30% of the box lies in the first tile
        let g = make_grid(1280, 640, 640, 0.0);
        let straddle = ann(BBox::new(610.0, 0.0, 710.0, 10.0));
        let per = assign_annotations(&g, &[straddle], 0.5);
        assert!(per[0].is_empty());
        assert_eq!(per[1].len(), 1);
        let per = assign_annotations(&g, &[straddle], 0.3);
        assert_eq!(per[0].len(), 1);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let w = rng.gen_range(50..400);
            let h = rng.gen_range(50..400);
            let tile = rng.gen_range(16..200);
            let g = make_grid(w, h, tile, rng.gen_range(0.0..0.6));
            let anns: Vec<Annotation> = (0..10)
                .map(|_| {
                    let x = rng.gen_range(0.0..w as f64 - 1.0);
                    let y = rng.gen_range(0.0..h as f64 - 1.0);
                    let bw = rng.gen_range(0.5..(w as f64 - x));
                    let bh = rng.gen_range(0.5..(h as f64 - y));
                    ann(BBox::from_xywh(x, y, bw, bh))
                })
                .collect();
            let vis = rng.gen_range(0.05..1.0);
            let got = assign_annotations(&g, &anns, vis);
            for (t, tile_anns) in g.tiles.iter().zip(&got) {
                let mut expect = Vec::new();
                for a in &anns {
                    let ix0 = a.bbox.x_min.max(t.x as f64);
                    let iy0 = a.bbox.y_min.max(t.y as f64);
                    let ix1 = a.bbox.x_max.min((t.x + t.width) as f64);
                    let iy1 = a.bbox.y_max.min((t.y + t.height) as f64);
                    let inter = (ix1 - ix0).max(0.0) * (iy1 - iy0).max(0.0);
                    let area = (a.bbox.x_max - a.bbox.x_min) * (a.bbox.y_max - a.bbox.y_min);
                    if inter / area >= vis {
                        expect.push(BBox::new(ix0 - t.x as f64, iy0 - t.y as f64, ix1 - t.x as f64, iy1 - t.y as f64));
                    }
                }
                let got_boxes: Vec<BBox> = tile_anns.iter().map(|a| a.bbox).collect();
                assert_eq!(got_boxes, expect);
            }
        }
    }

    struct Fixed(Vec<Detection>);

    impl Detector for Fixed {
        type Error = Infallible;
        fn detect(&self, _image: &RgbImage, conf: f64) -> Result<Vec<Detection>, Infallible> {
            Ok(self.0.iter().filter(|d| d.score >= conf).copied().collect())
        }
    }

    fn det(b: BBox, s: f64) -> Detection {
        Detection::new(b, LesionClass::Mih, s)
    }

    #[test]
    fn single_tile_grid_equals_plain_inference() {
        let model = Fixed(vec![
            det(BBox::new(1.0, 1.0, 9.0, 9.0), 0.9),
            det(BBox::new(30.0, 30.0, 40.0, 44.0), 0.4),
            det(BBox::new(31.0, 30.0, 40.0, 44.0), 0.2),
        ]);
        let image = RgbImage::new(64, 64);
        let grid = make_grid(64, 64, 64, 0.2);
        let sliced = sliced_infer(&model, &image, &grid, 0.1, 0.5, false).unwrap();
        let plain = full_frame_infer(&model, &image, 64, 0.1, 0.5).unwrap();
        assert_eq!(sliced, plain);
        assert_eq!(sliced.len(), 2);
    }

    #[test]
    fn remap_adds_offset() {
        let tile = TileSpec { x: 512, y: 0, width: 640, height: 640 };
        let out = remap(&[det(BBox::new(10.0, 10.0, 50.0, 50.0), 0.5)], &tile);
        assert_eq!(out[0].bbox, BBox::new(522.0, 10.0, 562.0, 50.0));
    }

    /// Sees one object at image x ∈ [600, 620). Each tile's x offset / 4 is
    /// encoded in its pixels so the mock can answer in tile-local
    /// coordinates.
    struct SeesObject;

    impl Detector for SeesObject {
        type Error = Infallible;
        fn detect(&self, image: &RgbImage, _conf: f64) -> Result<Vec<Detection>, Infallible> {
            let offset = image.get_pixel(0, 0)[0] as f64 * 4.0;
            let local = BBox::new(600.0 - offset, 100.0, 620.0 - offset, 120.0);
            let inside = local.x_min >= 0.0 && local.x_max <= image.width() as f64;
            Ok(if inside { vec![det(local, 0.5 + offset / 10_000.0)] } else { vec![] })
        }
    }

    #[test]
    fn overlapping_tiles_fuse_to_one() {
        let mut image = RgbImage::new(1280, 640);
        for (x, _, px) in image.enumerate_pixels_mut() {
            *px = image::Rgb([(x / 4).min(255) as u8, 0, 0]);
        }
        let grid = make_grid(1280, 640, 640, 0.2);
        let mut raw = Vec::new();
        for t in &grid.tiles {
            let view = imageops::crop_imm(&image, t.x, t.y, t.width, t.height).to_image();
            raw.extend(remap(&SeesObject.detect(&view, 0.0).unwrap(), t));
        }
        // tiles at x = 0 and x = 512 both see it
        assert_eq!(raw.len(), 2);
        let fused = sliced_infer(&SeesObject, &image, &grid, 0.0, 0.5, false).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused, nms(&raw, 0.5, true));
        assert_eq!(fused[0].bbox, BBox::new(600.0, 100.0, 620.0, 120.0));
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let grid = make_grid(100, 100, 64, 0.2);
        let err = sliced_infer(&Fixed(vec![]), &RgbImage::new(90, 100), &grid, 0.1, 0.5, false);
        assert!(matches!(err, Err(SliceError::GridMismatch { .. })));
    }
}
