use std::collections::{HashSet, VecDeque};

use image::{Rgb, RgbImage};
use lesion_cli::render::{render_overlays, CARIES_COLOR, MIH_COLOR};
use lesion_core::{BBox, Detection, LesionClass};

fn background() -> RgbImage {
    RgbImage::from_fn(120, 90, |x, y| Rgb([(x * 2) as u8, (y * 2) as u8, 40]))
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// 4-connected components of `color` pixels, with the white score digits
/// counted as part of the tag they sit on.
fn components(img: &RgbImage, color: Rgb<u8>) -> usize {
    let inside = |p: &Rgb<u8>| *p == color || *p == WHITE;
    let mut seen = HashSet::new();
    let mut count = 0;
    for (x, y, p) in img.enumerate_pixels() {
        if *p != color || !seen.insert((x, y)) {
            continue;
        }
        count += 1;
        let mut queue = VecDeque::from([(x, y)]);
        while let Some((cx, cy)) = queue.pop_front() {
            let n = [(cx.wrapping_sub(1), cy), (cx + 1, cy), (cx, cy.wrapping_sub(1)), (cx, cy + 1)];
            for (nx, ny) in n {
                if nx < img.width() && ny < img.height() && inside(img.get_pixel(nx, ny)) && seen.insert((nx, ny)) {
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    count
}

#[test]
fn no_detections_leave_the_image_unchanged() {
    let img = background();
    assert_eq!(render_overlays(&img, &[]), img);
}

#[test]
fn caries_box_is_a_blue_two_pixel_stroke() {
    let img = background();
    let d = Detection::new(BBox::new(20.0, 30.0, 60.0, 70.0), LesionClass::Caries, 0.87);
    let out = render_overlays(&img, &[d]);
    for (x, y) in [(20, 50), (21, 50), (59, 50), (58, 50), (40, 30), (40, 31), (40, 69), (40, 68)] {
        assert_eq!(*out.get_pixel(x, y), CARIES_COLOR, "stroke pixel ({x}, {y})");
    }
    for (x, y) in [(22, 50), (57, 50), (40, 32), (40, 67), (19, 50), (60, 50), (40, 70)] {
        assert_eq!(out.get_pixel(x, y), img.get_pixel(x, y), "pixel ({x}, {y}) should be untouched");
    }
    // The score tag sits just above the top-left corner.
    assert_eq!(*out.get_pixel(20, 29), CARIES_COLOR);
    assert_eq!(components(&out, CARIES_COLOR), 1);
    assert_eq!(components(&out, MIH_COLOR), 0);
}

#[test]
fn component_counts_follow_class_counts() {
    let img = background();
    let dets = vec![
        Detection::new(BBox::new(5.0, 10.0, 25.0, 30.0), LesionClass::Caries, 0.5),
        Detection::new(BBox::new(40.0, 10.0, 55.0, 28.0), LesionClass::Mih, 0.91),
        Detection::new(BBox::new(70.0, 12.0, 95.0, 40.0), LesionClass::Mih, 0.33),
        Detection::new(BBox::new(10.0, 55.0, 30.0, 80.0), LesionClass::Caries, 0.75),
        Detection::new(BBox::new(60.0, 55.0, 90.0, 85.0), LesionClass::Caries, 0.6),
    ];
    let out = render_overlays(&img, &dets);
    assert_eq!(components(&out, CARIES_COLOR), 3);
    assert_eq!(components(&out, MIH_COLOR), 2);
}

#[test]
fn boxes_outside_the_image_are_clipped() {
    let img = background();
    let d = Detection::new(BBox::new(100.0, -10.0, 150.0, 40.0), LesionClass::Mih, 0.4);
    let out = render_overlays(&img, &[d]);
    assert_eq!(*out.get_pixel(119, 20), MIH_COLOR);
    assert_eq!(*out.get_pixel(100, 20), MIH_COLOR);
    assert_eq!(*out.get_pixel(110, 0), MIH_COLOR);
    let gone = Detection::new(BBox::new(200.0, 200.0, 220.0, 220.0), LesionClass::Mih, 0.4);
    assert_eq!(render_overlays(&img, &[gone]), img);
}
