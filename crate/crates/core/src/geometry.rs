//! Axis-aligned box primitives: IoU, greedy NMS and greedy
//! prediction-to-ground-truth matching.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, LesionClass};

/// Corner-form box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    /// Converts a COCO `[x, y, w, h]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Zero-area boxes are legal clip results but carry no extent.
    pub fn is_degenerate(&self) -> bool {
        !(self.x_max > self.x_min && self.y_max > self.y_min)
    }

    pub fn is_finite(&self) -> bool {
        self.x_min.is_finite() && self.y_min.is_finite() && self.x_max.is_finite() && self.y_max.is_finite()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection with `other`; may be degenerate.
    pub fn clip_to(&self, other: &BBox) -> BBox {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        BBox {
            x_min,
            y_min,
            x_max: self.x_max.min(other.x_max).max(x_min),
            y_max: self.y_max.min(other.y_max).max(y_min),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min && other.y_min >= self.y_min && other.x_max <= self.x_max && other.y_max <= self.y_max
    }
}

/// A scored, class-labelled box produced by a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: LesionClass,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class: LesionClass, score: f64) -> Self {
        Self { bbox, class, score }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Processing order used by NMS: score descending, then smaller area,
/// then input order.
pub fn nms_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.bbox.area().partial_cmp(&b.bbox.area()).unwrap_or(Ordering::Equal))
            .then_with(|| i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression. A detection survives iff its IoU with
/// every previously kept detection (of the same class when `class_aware`)
/// is below `tau`. Output is in keep order.
pub fn nms(dets: &[Detection], tau: f64, class_aware: bool) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for idx in nms_order(dets) {
        let cand = &dets[idx];
        let suppressed = kept
            .iter()
            .filter(|k| !class_aware || k.class == cand.class)
            .any(|k| iou(&k.bbox, &cand.bbox) >= tau);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

/// Visits predictions by descending score (stable on ties) and lets each
/// claim the highest-IoU unmatched same-class ground truth with IoU ≥ `tau`.
///
/// Returns, per prediction index, the matched ground-truth index.
pub fn greedy_match(preds: &[Detection], gts: &[Annotation], tau: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].score.partial_cmp(&preds[i].score).unwrap_or(Ordering::Equal));

    let mut gt_taken = vec![false; gts.len()];
    let mut matches = vec![None; preds.len()];
    for p in order {
        let pred = &preds[p];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_taken[g] || gt.class != pred.class {
                continue;
            }
            let ov = iou(&pred.bbox, &gt.bbox);
            if ov >= tau && best.map_or(true, |(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        if let Some((g, _)) = best {
            gt_taken[g] = true;
            matches[p] = Some(g);
        }
    }
    matches
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection::new(BBox::new(x0, y0, x1, y1), LesionClass::Caries, score)
    }

    fn gt(x0: f64, y0: f64, x1: f64, y1: f64, class: LesionClass) -> Annotation {
        Annotation { id: 0, image_id: 0, class, bbox: BBox::new(x0, y0, x1, y1) }
    }

    /// Counts unit cells covered by integer-corner boxes.
    fn pixel_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
        let inside = |r: (i32, i32, i32, i32), x: i32, y: i32| x >= r.0 && x < r.2 && y >= r.1 && y < r.3;
        let (mut inter, mut union) = (0, 0);
        for y in -5..10 {
            for x in -5..10 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as i32;
                union += (ia || ib) as i32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_basic_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let expected = pixel_iou((0, 0, 2, 2), (1, 1, 3, 3));
        assert!((iou(&a, &b) - expected).abs() < 1e-15);
        assert!((iou(&a, &b) - 0.142857).abs() < 1e-6);
    }

    #[test]
    fn iou_degenerate_boxes() {
        let z = BBox::new(1.0, 1.0, 1.0, 3.0);
        assert!(z.is_degenerate());
        assert_eq!(iou(&z, &z), 0.0);
        assert_eq!(iou(&z, &BBox::new(0.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn nms_single_and_pair() {
        let d = det(0.0, 0.0, 10.0, 10.0, 0.7);
        assert_eq!(nms(&[d], 0.5, true), vec![d]);
        assert!(nms(&[], 0.5, true).is_empty());

        // IoU = 90 / 110 ≈ 0.82
        let hi = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let lo = det(1.0, 0.0, 11.0, 10.0, 0.6);
        assert!(iou(&hi.bbox, &lo.bbox) > 0.8);
        assert_eq!(nms(&[lo, hi], 0.5, true), vec![hi]);
    }

    #[test]
    fn nms_class_aware_keeps_other_class() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let mut b = det(0.0, 0.0, 10.0, 10.0, 0.8);
        b.class = LesionClass::Mih;
        assert_eq!(nms(&[a, b], 0.5, true).len(), 2);
        assert_eq!(nms(&[a, b], 0.5, false).len(), 1);
    }

    #[test]
    fn nms_tie_prefers_smaller_area_then_input_order() {
        let big = det(0.0, 0.0, 10.0, 10.0, 0.5);
        let small = det(0.0, 0.0, 9.0, 10.0, 0.5);
        assert_eq!(nms(&[big, small], 0.5, true), vec![small]);
        let twin = det(0.0, 0.0, 10.0, 10.0, 0.5);
        assert_eq!(nms_order(&[twin, twin, small]), vec![2, 0, 1]);
    }

    #[test]
    fn greedy_match_definitions() {
        // 60 / 100 overlap: IoU 0.6
        let p = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let g = gt(0.0, 0.0, 10.0, 6.0, LesionClass::Caries);
        assert!((iou(&p.bbox, &g.bbox) - 0.6).abs() < 1e-12);
        assert_eq!(greedy_match(&[p], &[g], 0.5), vec![Some(0)]);

        let low = det(0.0, 0.0, 10.0, 10.0, 0.3);
        assert_eq!(greedy_match(&[low, p], &[g], 0.5), vec![None, Some(0)]);

        let other = gt(0.0, 0.0, 10.0, 10.0, LesionClass::Mih);
        assert_eq!(greedy_match(&[p], &[other], 0.5), vec![None]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (arb_box(), any::<bool>(), 0.0f64..1.0).prop_map(|(b, c, s)| {
            Detection::new(b, if c { LesionClass::Caries } else { LesionClass::Mih }, s)
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_translation_invariant(a in arb_box(), b in arb_box(), dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            let shifted = iou(&a.translate(dx, dy), &b.translate(dx, dy));
            prop_assert!((v - shifted).abs() < 1e-9);
        }

        #[test]
        fn nms_idempotent_and_monotone(dets in prop::collection::vec(arb_det(), 0..30), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let once = nms(&dets, lo, true);
            prop_assert_eq!(nms(&once, lo, true), once.clone());
            prop_assert!(once.len() <= nms(&dets, hi, true).len());
        }

        #[test]
        fn greedy_match_respects_class_and_counts(preds in prop::collection::vec(arb_det(), 0..10), gts in prop::collection::vec(arb_det(), 0..6), tau in 0.05f64..1.0) {
            let gts: Vec<Annotation> = gts.iter().map(|d| Annotation { id: 0, image_id: 0, class: d.class, bbox: d.bbox }).collect();
            let m = greedy_match(&preds, &gts, tau);
            let matched: Vec<usize> = m.iter().flatten().copied().collect();
            prop_assert!(matched.len() <= preds.len().min(gts.len()));
            let mut uniq = matched.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), matched.len());
            for (p, g) in m.iter().enumerate() {
                if let Some(g) = g {
                    prop_assert_eq!(preds[p].class, gts[*g].class);
                    prop_assert!(iou(&preds[p].bbox, &gts[*g].bbox) >= tau);
                }
            }
        }
    }
}
