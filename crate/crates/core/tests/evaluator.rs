use std::time::Instant;

use lesion_core::detections::ImageDetection;
use lesion_core::eval::{average_precision, evaluate, SizeBounds};
use lesion_core::oracle::{assert_results_close, brute_force_evaluate, random_eval_instance};
use lesion_core::{Annotation, BBox, Detection, LesionClass};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn evaluate_matches_brute_force_on_500_instances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let bounds = SizeBounds { small: 32.0 * 32.0, large: 96.0 * 96.0 };
    for _ in 0..500 {
        let (m, dets) = random_eval_instance(&mut rng, 5, 4, 8);
        let got = evaluate(&dets, &m, bounds).unwrap();
        assert_results_close(&got, &brute_force_evaluate(&dets, &m, bounds), 1e-6);
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn one_false_positive_above_one_true_positive_gives_half() {
    let b = BBox::new(10.0, 10.0, 30.0, 30.0);
    let gt = Annotation { id: 1, image_id: 1, class: LesionClass::Mih, bbox: b };
    let fp = Detection::new(BBox::new(100.0, 100.0, 120.0, 120.0), LesionClass::Mih, 0.9);
    let tp = Detection::new(b, LesionClass::Mih, 0.8);
    assert_eq!(average_precision(&[fp, tp], &[gt], 0.5), Some(0.5));
}

#[test]
fn ground_truth_as_detections_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let (m, _) = random_eval_instance(&mut rng, 4, 4, 0);
    let dets: Vec<ImageDetection> = m
        .annotations
        .iter()
        .map(|a| ImageDetection { image_id: a.image_id, detection: Detection::new(a.bbox, a.class, 1.0) })
        .collect();
    let r = evaluate(&dets, &m, SizeBounds::default()).unwrap();
    for v in [r.mean.map, r.mean.map50, r.mean.map75].into_iter().flatten() {
        assert_eq!(v, 1.0);
    }
}
