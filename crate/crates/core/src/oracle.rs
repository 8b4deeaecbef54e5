//! Slow reference implementations used only by tests: brute-force NMS,
//! exhaustive greedy matching and a brute-force COCO-style evaluator.
//! Everything here is written from the definitions and shares no code
//! with the production paths beyond the data types.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Annotation, DatasetManifest, ImageRecord, LesionClass, SplitTag};
use crate::detections::ImageDetection;
use crate::eval::{EvalResult, Metrics, SizeBounds};
use crate::geometry::{BBox, Detection};

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x_max - r.x_min).max(0.0) * (r.y_max - r.y_min).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `i` is processed before `j` by NMS.
fn precedes(dets: &[Detection], i: usize, j: usize) -> bool {
    let area = |d: &Detection| (d.bbox.x_max - d.bbox.x_min).max(0.0) * (d.bbox.y_max - d.bbox.y_min).max(0.0);
    let (a, b) = (&dets[i], &dets[j]);
    if a.score != b.score {
        return a.score > b.score;
    }
    if area(a) != area(b) {
        return area(a) < area(b);
    }
    i < j
}

/// O(n²) NMS: a detection is kept iff no kept detection that precedes it
/// overlaps it at `tau` or more. Resolved by counting predecessors.
pub fn brute_force_nms(dets: &[Detection], tau: f64, class_aware: bool) -> Vec<Detection> {
    let n = dets.len();
    let rank: Vec<usize> = (0..n).map(|j| (0..n).filter(|&i| i != j && precedes(dets, i, j)).count()).collect();
    let mut by_rank = vec![0; n];
    for (j, &r) in rank.iter().enumerate() {
        by_rank[r] = j;
    }
    let mut kept = vec![false; n];
    for r in 0..n {
        let j = by_rank[r];
        kept[j] = (0..n).all(|i| {
            !(kept[i]
                && rank[i] < r
                && (!class_aware || dets[i].class == dets[j].class)
                && overlap(&dets[i].bbox, &dets[j].bbox) >= tau)
        });
    }
    by_rank.into_iter().filter(|&j| kept[j]).map(|j| dets[j]).collect()
}

/// Greedy matching by exhaustive scan: repeatedly take the unvisited
/// prediction with the highest score (lowest index on ties) and give it the
/// free same-class ground truth of highest IoU (lowest index on ties).
pub fn exhaustive_greedy_match(preds: &[Detection], gts: &[Annotation], tau: f64) -> Vec<Option<usize>> {
    let mut visited = vec![false; preds.len()];
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for _ in 0..preds.len() {
        let mut p = usize::MAX;
        for i in 0..preds.len() {
            if !visited[i] && (p == usize::MAX || preds[i].score > preds[p].score) {
                p = i;
            }
        }
        visited[p] = true;
        let mut best = None;
        let mut best_iou = -1.0;
        for g in 0..gts.len() {
            let v = overlap(&preds[p].bbox, &gts[g].bbox);
            if !taken[g] && gts[g].class == preds[p].class && v >= tau && v > best_iou {
                best = Some(g);
                best_iou = v;
            }
        }
        if let Some(g) = best {
            taken[g] = true;
            out[p] = Some(g);
        }
    }
    out
}

fn in_bucket(bucket: usize, area: f64, b: &SizeBounds) -> bool {
    match bucket {
        0 => true,
        1 => area < b.small,
        2 => area >= b.small && area < b.large,
        _ => area >= b.large,
    }
}

/// AP for one class, bucket and threshold, or `None` without ground truth.
fn brute_ap(dets: &[ImageDetection], m: &DatasetManifest, class: LesionClass, bucket: usize, thr: f64, b: &SizeBounds) -> Option<f64> {
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let npos = m.annotations.iter().filter(|a| a.class == class && in_bucket(bucket, area(&a.bbox), b)).count();
    if npos == 0 {
        return None;
    }
    // global score order, stable on ties
    let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].detection.class == class).collect();
    for a in 0..idx.len() {
        for c in 0..idx.len() - 1 - a {
            if dets[idx[c]].detection.score < dets[idx[c + 1]].detection.score {
                idx.swap(c, c + 1);
            }
        }
    }
    // label each detection: Some(true) tp, Some(false) fp, None ignored
    let mut label: BTreeMap<usize, Option<bool>> = BTreeMap::new();
    for im in &m.images {
        let gts: Vec<&Annotation> = m.annotations.iter().filter(|a| a.image_id == im.id && a.class == class).collect();
        let ignored: Vec<bool> = gts.iter().map(|a| !in_bucket(bucket, area(&a.bbox), b)).collect();
        let mut used = vec![false; gts.len()];
        for &i in idx.iter().filter(|&&i| dets[i].image_id == im.id) {
            let d = &dets[i].detection;
            let pick = |want_ignored: bool, used: &[bool]| {
                let mut best: Option<(usize, f64)> = None;
                for g in 0..gts.len() {
                    if used[g] || ignored[g] != want_ignored {
                        continue;
                    }
                    let v = overlap(&d.bbox, &gts[g].bbox);
                    if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((g, v));
                    }
                }
                best
            };
            let choice = pick(false, &used).or_else(|| pick(true, &used));
            let l = match choice {
                Some((g, _)) => {
                    used[g] = true;
                    if ignored[g] {
                        None
                    } else {
                        Some(true)
                    }
                }
                None if in_bucket(bucket, area(&d.bbox), b) => Some(false),
                None => None,
            };
            label.insert(i, l);
        }
    }
    let seq: Vec<bool> = idx.iter().filter_map(|i| label.get(i).copied().flatten()).collect();
    let mut points = Vec::new();
    for k in 1..=seq.len() {
        let tp = seq[..k].iter().filter(|&&t| t).count() as f64;
        points.push((tp / npos as f64, tp / k as f64));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        sum += points.iter().filter(|(rc, _)| *rc >= r).map(|(_, p)| *p).fold(0.0, f64::max);
    }
    Some(sum / 101.0)
}

pub fn brute_force_evaluate(dets: &[ImageDetection], m: &DatasetManifest, b: SizeBounds) -> EvalResult {
    let thresholds: Vec<f64> = (0..10).map(|k| 0.5 + 0.05 * k as f64).collect();
    let mean_of = |v: Vec<Option<f64>>| {
        let xs: Vec<f64> = v.into_iter().flatten().collect();
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    let mut per_class = BTreeMap::new();
    for class in [LesionClass::Caries, LesionClass::Mih] {
        let avg = |bucket| mean_of(thresholds.iter().map(|&t| brute_ap(dets, m, class, bucket, t, &b)).collect());
        per_class.insert(
            class,
            Metrics {
                map: avg(0),
                map50: brute_ap(dets, m, class, 0, 0.5, &b),
                map75: brute_ap(dets, m, class, 0, 0.75, &b),
                ap_small: avg(1),
                ap_medium: avg(2),
                ap_large: avg(3),
            },
        );
    }
    let mut mean = [None; 6];
    for (k, slot) in mean.iter_mut().enumerate() {
        *slot = mean_of(per_class.values().map(|pc: &Metrics| pc.values()[k]).collect());
    }
    EvalResult { per_class, mean: Metrics::from_values(mean), counts: BTreeMap::new() }
}

pub fn assert_results_close(got: &EvalResult, want: &EvalResult, tol: f64) {
    let pairs = std::iter::once((&got.mean, &want.mean))
        .chain(got.per_class.iter().map(|(c, m)| (m, &want.per_class[c])));
    for (g, w) in pairs {
        for (k, (a, b)) in g.values().iter().zip(w.values()).enumerate() {
            match (a, b) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= tol, "metric {k}: {x} vs {y}"),
                (None, None) => {}
                _ => panic!("metric {k}: definedness differs ({a:?} vs {b:?})"),
            }
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0.0..150.0);
    let y = rng.gen_range(0.0..150.0);
    let w = rng.gen_range(4.0..90.0);
    let h = rng.gen_range(4.0..90.0);
    BBox::from_xywh(x, y, w, h)
}

/// Up to `max_images` images with up to `max_gts` ground truths and
/// `max_dets` detections per class each. Detections are mostly jittered
/// ground truths; scores come from a coarse grid so ties occur.
pub fn random_eval_instance(
    rng: &mut ChaCha8Rng,
    max_images: usize,
    max_gts: usize,
    max_dets: usize,
) -> (DatasetManifest, Vec<ImageDetection>) {
    let n_images = rng.gen_range(1..=max_images);
    let mut m = DatasetManifest { split: SplitTag::None, ..Default::default() };
    let mut dets = Vec::new();
    for im in 1..=n_images as u64 {
        m.images.push(ImageRecord { id: im, width: 256, height: 256, file_name: format!("{im}.png"), source: None });
        for class in [LesionClass::Caries, LesionClass::Mih] {
            let gts: Vec<BBox> = (0..rng.gen_range(0..=max_gts)).map(|_| random_box(rng)).collect();
            for g in &gts {
                let id = m.annotations.len() as u64 + 1;
                m.annotations.push(Annotation { id, image_id: im, class, bbox: *g });
            }
            for _ in 0..rng.gen_range(0..=max_dets) {
                let bbox = if !gts.is_empty() && rng.gen_bool(0.7) {
                    let g = gts[rng.gen_range(0..gts.len())];
                    let j = g.width().min(g.height()) * 0.25;
                    BBox::new(
                        g.x_min + rng.gen_range(-j..=j),
                        g.y_min + rng.gen_range(-j..=j),
                        g.x_max + rng.gen_range(-j..=j),
                        g.y_max + rng.gen_range(-j..=j),
                    )
                } else {
                    random_box(rng)
                };
                let score = if rng.gen_bool(0.3) { rng.gen_range(1..5) as f64 / 5.0 } else { rng.gen_range(0.0..1.0) };
                dets.push(ImageDetection { image_id: im, detection: Detection::new(bbox, class, score) });
            }
        }
    }
    (m, dets)
}

pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..extent);
            let y = rng.gen_range(0.0..extent);
            let w = rng.gen_range(2.0..extent / 3.0);
            let h = rng.gen_range(2.0..extent / 3.0);
            let class = if rng.gen_bool(0.5) { LesionClass::Caries } else { LesionClass::Mih };
            let score = if rng.gen_bool(0.2) { 0.5 } else { rng.gen_range(0.0..1.0) };
            Detection::new(BBox::from_xywh(x, y, w, h), class, score)
        })
        .collect()
}
