//! Detection overlays: caries in blue, MIH in yellow, 2-pixel strokes and
//! a score tag at each box's top-left corner.

use std::path::Path;

use image::{Rgb, RgbImage};
use lesion_core::{BBox, Detection, LesionClass};

use crate::error::{CliError, Result};

pub const CARIES_COLOR: Rgb<u8> = Rgb([0, 0, 255]);
pub const MIH_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
pub const STROKE: u32 = 2;
const TEXT_COLOR: Rgb<u8> = Rgb([255, 255, 255]);

pub fn class_color(class: LesionClass) -> Rgb<u8> {
    match class {
        LesionClass::Caries => CARIES_COLOR,
        LesionClass::Mih => MIH_COLOR,
    }
}

/// 3×5 glyphs, one row per byte, bit 2 = leftmost column.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b001, 0b001],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => return None,
    })
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..=y1.min(img.height() - 1) {
        for x in x0..=x1.min(img.width() - 1) {
            img.put_pixel(x, y, color);
        }
    }
}

/// Integer pixel extent of a box, clipped to the image. `None` if nothing
/// of it is visible.
fn pixel_rect(b: &BBox, w: u32, h: u32) -> Option<(u32, u32, u32, u32)> {
    let x0 = b.x_min.floor().max(0.0);
    let y0 = b.y_min.floor().max(0.0);
    let x1 = (b.x_max.ceil() - 1.0).min(w as f64 - 1.0);
    let y1 = (b.y_max.ceil() - 1.0).min(h as f64 - 1.0);
    (b.is_finite() && x1 >= x0 && y1 >= y0).then(|| (x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

fn draw_box(img: &mut RgbImage, d: &Detection) {
    let (w, h) = img.dimensions();
    let bounds = BBox::new(0.0, 0.0, w as f64, h as f64);
    if d.bbox.clip_to(&bounds) != d.bbox {
        log::warn!("box {:?} extends outside the {w}×{h} image; clipped", d.bbox);
    }
    let Some((x0, y0, x1, y1)) = pixel_rect(&d.bbox, w, h) else { return };
    let color = class_color(d.class);
    let s = STROKE - 1;
    fill(img, x0, y0, x1, y0 + s, color);
    fill(img, x0, y1.saturating_sub(s).max(y0), x1, y1, color);
    fill(img, x0, y0, x0 + s, y1, color);
    fill(img, x1.saturating_sub(s).max(x0), y0, x1, y1, color);

    // Score tag: a filled strip in the class colour touching the top edge,
    // above the box when there is room, with the score in white.
    let text = format!("{:.2}", d.score);
    let glyphs: Vec<[u8; 5]> = text.chars().filter_map(glyph).collect();
    let tag_w = glyphs.len() as u32 * 4 + 1;
    let tag_h = 7;
    let tag_y = if y0 >= tag_h { y0 - tag_h } else { y0 + STROKE };
    if tag_y + tag_h > h || x0 + tag_w > w {
        return;
    }
    fill(img, x0, tag_y, x0 + tag_w - 1, tag_y + tag_h - 1, color);
    for (i, g) in glyphs.iter().enumerate() {
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    img.put_pixel(x0 + 1 + i as u32 * 4 + col, tag_y + 1 + row as u32, TEXT_COLOR);
                }
            }
        }
    }
}

/// Draws `dets` (image coordinates) over a copy of `image`.
pub fn render_overlays(image: &RgbImage, dets: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    for d in dets {
        draw_box(&mut out, d);
    }
    out
}

pub fn render_to_file(image: &RgbImage, dets: &[Detection], out: &Path) -> Result<()> {
    render_overlays(image, dets)
        .save_with_format(out, image::ImageFormat::Png)
        .map_err(|source| CliError::Image { path: out.display().to_string(), source })
}
