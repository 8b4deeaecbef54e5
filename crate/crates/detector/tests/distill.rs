use std::collections::HashSet;

use candle_core::DType;
use lesion_core::synth::{generate_dataset, image_rng, generate_scene, SynthParams};
use lesion_core::{BBox, LesionClass};
use lesion_detector::distill::{class_entropy, generate_pseudo_labels, select_candidates, DistillMode};
use lesion_detector::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn candidate(image_id: u64, area_norm: f64, conf: f64, best_iou: f64, entropy: f64) -> DistillCandidate {
    DistillCandidate {
        pseudo: PseudoLabel {
            image_id,
            bbox: BBox::new(1.0, 1.0, 5.0, 5.0),
            class: LesionClass::Caries,
            teacher_conf: conf,
        },
        area_norm,
        best_student_iou: best_iou,
        student_entropy: entropy,
    }
}

fn candidate_strategy() -> impl Strategy<Value = DistillCandidate> {
    (0u64..5, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..std::f64::consts::LN_2)
        .prop_map(|(id, a, c, i, e)| candidate(id, a, c, i, e))
}

fn accepted_count(cands: &[DistillCandidate], phi: f64, below: bool) -> usize {
    let cfg = DistillConfig { mode: DistillMode::Static, phi, accept_below_phi: below, ..Default::default() };
    select_candidates(cands, &cfg, None, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().accepted.len()
}

proptest! {
    #[test]
    fn static_acceptance_is_monotone_in_phi(
        cands in prop::collection::vec(candidate_strategy(), 0..40),
        p1 in 0.0..1.0f64,
        p2 in 0.0..1.0f64,
    ) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        prop_assert!(accepted_count(&cands, lo, false) >= accepted_count(&cands, hi, false));
        prop_assert!(accepted_count(&cands, lo, true) <= accepted_count(&cands, hi, true));
    }

    #[test]
    fn class_entropy_is_bounded(raw in prop::collection::vec(0.0..1.0f64, 1..6)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-9);
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let h = class_entropy(&probs).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (probs.len() as f64).ln() + 1e-12);
    }
}

#[test]
fn entropy_extremes() {
    assert_eq!(class_entropy(&[1.0, 0.0]).unwrap(), 0.0);
    assert!((class_entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(class_entropy(&[0.7, 0.7]).is_err());
}

#[test]
fn ppo_mode_logs_every_candidate() {
    let cands: Vec<DistillCandidate> =
        (0..25).map(|i| candidate(i % 4, 0.01 * i as f64, 0.5, 0.04 * i as f64, 0.3)).collect();
    let cfg = DistillConfig { mode: DistillMode::Ppo, ..Default::default() };
    let policy = Policy::new(3).unwrap();
    let sel = select_candidates(&cands, &cfg, Some(&policy), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(sel.decisions.len(), cands.len());
    assert_eq!(sel.transitions.len(), cands.len());
    assert_eq!(sel.accepted.len(), sel.decisions.iter().filter(|d| d.accept).count());
    for (d, c) in sel.decisions.iter().zip(&cands) {
        assert_eq!(d.image_id, c.pseudo.image_id);
        let lp = d.log_prob.unwrap();
        assert!(lp.is_finite() && lp < 0.0);
    }
    assert!(select_candidates(&cands, &cfg, None, 2, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

fn tiny_model(side: u32, seed: u64) -> Model {
    let cfg = ModelConfig {
        input_size: side,
        stem_channels: 4,
        backbone_channels: [8, 8, 16, 16],
        neck_width: 8,
        ssm_state_dim: 4,
        ..Default::default()
    };
    Model::new(cfg, seed, DType::F32).unwrap()
}

#[test]
fn score_floor_one_yields_no_pseudo_labels() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams { image_width: 64, image_height: 64, ..Default::default() };
    let manifest = generate_dataset(2, &params, dir.path()).unwrap();
    let teacher = tiny_model(64, 0);
    let slicing = SliceSettings { tile: 32, overlap: 0.2, tau_merge: 0.5, include_full_frame: false };
    assert!(generate_pseudo_labels(&teacher, &manifest, dir.path(), None, 1.0).unwrap().is_empty());
    assert!(generate_pseudo_labels(&teacher, &manifest, dir.path(), Some(&slicing), 1.0).unwrap().is_empty());
    let loose = generate_pseudo_labels(&teacher, &manifest, dir.path(), None, 0.0).unwrap();
    let ids: HashSet<u64> = manifest.images.iter().map(|r| r.id).collect();
    for p in &loose {
        assert!(ids.contains(&p.image_id));
        assert!(p.bbox.x_min >= 0.0 && p.bbox.y_min >= 0.0 && p.bbox.x_max <= 64.0 && p.bbox.y_max <= 64.0);
        assert!(p.bbox.area() > 0.0);
    }
}

fn samples(n: u64) -> Vec<Sample> {
    let p = SynthParams { image_width: 64, image_height: 64, lesions_min: 1, lesions_max: 3, ..Default::default() };
    (0..n)
        .map(|i| {
            let scene = generate_scene(&p, &mut image_rng(7, i)).unwrap();
            Sample {
                image_id: i + 1,
                targets: scene.annotations(i + 1, 0).iter().map(|a| Target::new(a.bbox, a.class)).collect(),
                image: scene.image,
                scale: (1.0, 1.0),
            }
        })
        .collect()
}

#[test]
fn mode_none_matches_plain_training() {
    let data = samples(3);
    let train = TrainConfig { steps: 3, batch_size: 2, seed: 4, ..Default::default() };
    let mut plain = Trainer::new(tiny_model(64, 1), train.clone()).unwrap();
    plain.fit(&data, |_, _| {}).unwrap();
    let pseudo = vec![PseudoLabel { image_id: 1, bbox: BBox::new(3.0, 3.0, 9.0, 9.0), class: LesionClass::Mih, teacher_conf: 0.9 }];
    let config = StudentConfig { train, ..Default::default() };
    let mut student = StudentTrainer::new(tiny_model(64, 1), config, &pseudo).unwrap();
    student.fit(&data, |_| {}).unwrap();
    assert_eq!(student.trainer.model.params.to_saved().unwrap(), plain.model.params.to_saved().unwrap());
    assert!(student.decision_log.is_empty());
}

fn two_pseudo_labels_per_image() -> Vec<PseudoLabel> {
    (1..=4)
        .flat_map(|id| {
            [
                PseudoLabel { image_id: id, bbox: BBox::new(4.0, 4.0, 12.0, 10.0), class: LesionClass::Caries, teacher_conf: 0.8 },
                PseudoLabel { image_id: id, bbox: BBox::new(30.0, 40.0, 36.0, 47.0), class: LesionClass::Mih, teacher_conf: 0.4 },
            ]
        })
        .collect()
}

#[test]
fn ppo_student_logs_decisions_and_updates_policy() {
    let data = samples(4);
    let pseudo = two_pseudo_labels_per_image();
    let config = StudentConfig {
        train: TrainConfig { steps: 4, batch_size: 2, ..Default::default() },
        distill: DistillConfig { mode: DistillMode::Ppo, ..Default::default() },
        ppo: PpoConfig { update_interval: 2, ..Default::default() },
        policy_seed: 5,
    };
    let mut student = StudentTrainer::new(tiny_model(64, 2), config, &pseudo).unwrap();
    let mut steps = Vec::new();
    student.fit(&data, |s| steps.push(*s)).unwrap();
    assert_eq!(steps.len(), 4);
    assert_eq!(student.decision_log.len(), steps.iter().map(|s| s.candidates).sum::<usize>());
    assert_eq!(student.decision_log.len(), 4 * 2 * 2);
    assert_eq!(student.update_stats.len(), 2);
    let known: HashSet<u64> = data.iter().map(|s| s.image_id).collect();
    for d in &student.decision_log {
        assert!(known.contains(&d.image_id));
        assert!(d.log_prob.is_some() && d.reward.unwrap().is_finite());
        assert!(d.state.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn frozen_student_earns_only_the_accept_cost() {
    // With lr 0 the held-out loss cannot move, so each reward is 0 or -c.
    let data = samples(4);
    let config = StudentConfig {
        train: TrainConfig { steps: 3, batch_size: 2, lr: 0.0, ..Default::default() },
        distill: DistillConfig { mode: DistillMode::Ppo, ..Default::default() },
        ppo: PpoConfig { update_interval: 100, ..Default::default() },
        policy_seed: 6,
    };
    let cost = config.ppo.accept_cost;
    let mut student = StudentTrainer::new(tiny_model(64, 3), config, &two_pseudo_labels_per_image()).unwrap();
    student.fit(&data, |_| {}).unwrap();
    assert!(!student.decision_log.is_empty());
    for d in &student.decision_log {
        assert_eq!(d.reward.unwrap(), if d.accept { -cost } else { 0.0 });
    }
}
