use lesion_core::slicer::remap;
use lesion_core::{make_grid, BBox, Detection, LesionClass};
use proptest::prelude::*;

fn grid_params() -> impl Strategy<Value = (u32, u32, u32, f64)> {
    (16u32..700, 16u32..700, 8u32..400, 0.0..0.9f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn tiles_cover_every_pixel((w, h, tile, overlap) in grid_params()) {
        let g = make_grid(w, h, tile, overlap);
        let mut covered_x = vec![false; w as usize];
        let mut covered_y = vec![false; h as usize];
        for t in &g.tiles {
            prop_assert!(t.x + t.width <= w && t.y + t.height <= h);
            for x in t.x..t.x + t.width { covered_x[x as usize] = true; }
            for y in t.y..t.y + t.height { covered_y[y as usize] = true; }
        }
        // Row-major product grid: full cover on both axes covers every pixel.
        prop_assert!(covered_x.iter().all(|c| *c) && covered_y.iter().all(|c| *c));
        let nx = g.tiles.iter().filter(|t| t.y == g.tiles[0].y).count();
        prop_assert_eq!(g.tiles.len() % nx, 0);
    }

    #[test]
    fn small_boxes_fit_inside_some_tile(
        (w, h, tile, overlap) in grid_params(),
        fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.0..1.0f64, fh in 0.0..1.0f64,
    ) {
        let g = make_grid(w, h, tile, overlap);
        let limit = (tile as f64 * overlap).floor().min(w as f64).min(h as f64);
        prop_assume!(limit >= 1.0);
        let bw = 1.0 + fw * (limit - 1.0);
        let bh = 1.0 + fh * (limit - 1.0);
        let b = BBox::from_xywh(fx * (w as f64 - bw), fy * (h as f64 - bh), bw, bh);
        let inside = g.tiles.iter().any(|t| {
            let tb = t.bounds();
            b.x_min >= tb.x_min && b.y_min >= tb.y_min && b.x_max <= tb.x_max && b.y_max <= tb.y_max
        });
        prop_assert!(inside, "box {:?} not inside any tile", b);
    }

    #[test]
    fn remap_is_an_exact_translation((w, h, tile, overlap) in grid_params(), x in 0.0..50.0f64, y in 0.0..50.0f64) {
        let g = make_grid(w, h, tile, overlap);
        let d = Detection::new(BBox::new(x, y, x + 3.5, y + 2.25), LesionClass::Caries, 0.7);
        for t in &g.tiles {
            let out = remap(&[d], t)[0];
            prop_assert_eq!(out.bbox, BBox::new(x + t.x as f64, y + t.y as f64, x + 3.5 + t.x as f64, y + 2.25 + t.y as f64));
            prop_assert_eq!(out.score, d.score);
            prop_assert_eq!(out.class, d.class);
        }
    }

    #[test]
    fn grid_is_deterministic((w, h, tile, overlap) in grid_params()) {
        prop_assert_eq!(make_grid(w, h, tile, overlap), make_grid(w, h, tile, overlap));
    }
}

#[test]
fn reference_grid_has_nine_tiles() {
    let g = make_grid(1280, 1280, 640, 0.2);
    assert_eq!(g.tiles.len(), 9);
    let mut xs: Vec<u32> = g.tiles.iter().map(|t| t.x).collect();
    xs.sort_unstable();
    xs.dedup();
    assert_eq!(xs, vec![0, 512, 640]);
}
