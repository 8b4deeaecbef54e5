//! Teacher pseudo-labels, per-box decision candidates, static or learned
//! gating, and the distillation-augmented student loss.

use std::collections::HashMap;
use std::path::Path;

use lesion_core::detections::ImageDetection;
use lesion_core::slicer::{full_frame_infer, make_grid, sliced_infer};
use lesion_core::{iou, BBox, DatasetManifest, Detection, LesionClass};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::head::{HeadOutput, ScoredDetection};
use crate::loss::{detection_loss, LossComponents, Target};
use crate::model::Model;
use crate::ppo::{DecisionState, Policy, Transition};
use crate::train::load_image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub image_id: u64,
    pub bbox: BBox,
    pub class: LesionClass,
    pub teacher_conf: f64,
}

impl PseudoLabel {
    pub fn to_image_detection(&self) -> ImageDetection {
        ImageDetection { image_id: self.image_id, detection: Detection::new(self.bbox, self.class, self.teacher_conf) }
    }

    pub fn from_image_detection(d: &ImageDetection) -> Self {
        Self { image_id: d.image_id, bbox: d.detection.bbox, class: d.detection.class, teacher_conf: d.detection.score }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    None,
    Static,
    Ppo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// Minimum student IoU for a pseudo-label to be distilled in static
    /// mode.
    pub phi: f64,
    pub score_floor: f64,
    pub lambda_distill: f64,
    pub gt_dedup_iou: f64,
    /// Inverts the static rule to accept iff best IoU < φ.
    pub accept_below_phi: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::None,
            phi: 0.5,
            score_floor: 0.3,
            lambda_distill: 0.5,
            gt_dedup_iou: 0.7,
            accept_below_phi: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(ModelError::Distill(format!("phi {} outside [0, 1]", self.phi)));
        }
        if !(self.lambda_distill >= 0.0) {
            return Err(ModelError::Distill(format!("lambda_distill {} is negative", self.lambda_distill)));
        }
        if !(0.0..=1.0).contains(&self.score_floor) || !(0.0..=1.0).contains(&self.gt_dedup_iou) {
            return Err(ModelError::Distill("score_floor and gt_dedup_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// How the teacher is run over full images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceSettings {
    pub tile: u32,
    pub overlap: f64,
    pub tau_merge: f64,
    pub include_full_frame: bool,
}

impl Default for SliceSettings {
    fn default() -> Self {
        Self { tile: 640, overlap: 0.2, tau_merge: 0.5, include_full_frame: false }
    }
}

impl SliceSettings {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || !(0.0..1.0).contains(&self.overlap) || !(0.0..=1.0).contains(&self.tau_merge) {
            return Err(ModelError::InvalidConfig(format!(
                "slice settings need tile > 0, overlap in [0, 1) and tau_merge in [0, 1], got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Runs the teacher over every image of `manifest`, sliced when
/// `slicing` is given, and keeps detections scoring at least
/// `score_floor`.
pub fn generate_pseudo_labels(
    teacher: &Model,
    manifest: &DatasetManifest,
    image_dir: &Path,
    slicing: Option<&SliceSettings>,
    score_floor: f64,
) -> Result<Vec<PseudoLabel>> {
    let mut out = Vec::new();
    for rec in &manifest.images {
        let image = load_image(&image_dir.join(&rec.file_name))?;
        let dets = match slicing {
            Some(s) => {
                let grid = make_grid(image.width(), image.height(), s.tile, s.overlap);
                sliced_infer(teacher, &image, &grid, score_floor, s.tau_merge, s.include_full_frame).map_err(|e| match e {
                    lesion_core::slicer::SliceError::Model(m) => m,
                    other => ModelError::Shape(other.to_string()),
                })?
            }
            None => full_frame_infer(teacher, &image, teacher.config.input_size, score_floor, teacher.config.nms_iou)?,
        };
        let bounds = rec.bounds();
        out.extend(dets.into_iter().filter(|d| d.score >= score_floor).filter_map(|d| {
            let bbox = d.bbox.clip_to(&bounds);
            (!bbox.is_degenerate()).then_some(PseudoLabel {
                image_id: rec.id,
                bbox,
                class: d.class,
                teacher_conf: d.score,
            })
        }));
    }
    Ok(out)
}

/// Shannon entropy in nats with 0·ln 0 = 0.
pub fn class_entropy(probs: &[f64]) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(ModelError::Distill(format!("not a distribution: {probs:?}")));
    }
    Ok(probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum::<f64>().max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillCandidate {
    pub pseudo: PseudoLabel,
    pub area_norm: f64,
    pub best_student_iou: f64,
    pub student_entropy: f64,
}

impl DistillCandidate {
    pub fn state(&self) -> DecisionState {
        DecisionState {
            area_norm: self.area_norm,
            teacher_conf: self.pseudo.teacher_conf,
            student_entropy: self.student_entropy,
        }
    }
}

/// One candidate per pseudo-label, scored against the student's decoded
/// cells of the same image. `image_area` maps image ids to the area of the
/// frame the boxes are expressed in.
pub fn build_candidates(
    pseudo: &[PseudoLabel],
    student_dets: &HashMap<u64, Vec<ScoredDetection>>,
    image_area: &HashMap<u64, f64>,
    num_classes: usize,
) -> Result<Vec<DistillCandidate>> {
    let no_match = (num_classes as f64).ln();
    pseudo
        .iter()
        .map(|p| {
            let area = *image_area
                .get(&p.image_id)
                .ok_or_else(|| ModelError::Distill(format!("no image {} for pseudo-label", p.image_id)))?;
            let mut best: Option<(f64, &ScoredDetection)> = None;
            for d in student_dets.get(&p.image_id).map(|v| v.as_slice()).unwrap_or(&[]) {
                if d.detection.class != p.class {
                    continue;
                }
                let v = iou(&p.bbox, &d.detection.bbox);
                if v > 0.0 && best.map_or(true, |(b, _)| v > b) {
                    best = Some((v, d));
                }
            }
            let (best_student_iou, student_entropy) = match best {
                Some((v, d)) => (v, class_entropy(&d.class_probs[..num_classes])?),
                None => (0.0, no_match),
            };
            Ok(DistillCandidate {
                pseudo: *p,
                area_norm: (p.bbox.area() / area).clamp(0.0, 1.0),
                best_student_iou,
                student_entropy,
            })
        })
        .collect()
}

/// One gating decision, as written to the decision log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub image_id: u64,
    pub state: [f64; 3],
    pub accept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    pub accepted: Vec<PseudoLabel>,
    pub decisions: Vec<Decision>,
    /// PPO bookkeeping, one per decision; empty outside PPO mode.
    pub transitions: Vec<Transition>,
}

pub fn select_candidates(
    cands: &[DistillCandidate],
    config: &DistillConfig,
    policy: Option<&Policy>,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<Selection> {
    config.validate()?;
    let mut sel = Selection::default();
    match config.mode {
        DistillMode::None => {}
        DistillMode::Static => {
            for c in cands {
                let accept = if config.accept_below_phi {
                    c.best_student_iou < config.phi
                } else {
                    c.best_student_iou >= config.phi
                };
                let s = c.state();
                sel.decisions.push(Decision {
                    image_id: c.pseudo.image_id,
                    state: [s.area_norm, s.teacher_conf, s.student_entropy],
                    accept,
                    log_prob: None,
                    reward: None,
                });
                if accept {
                    sel.accepted.push(c.pseudo);
                }
            }
        }
        DistillMode::Ppo => {
            let policy = policy.ok_or_else(|| ModelError::Distill("ppo mode needs a policy".into()))?;
            let states = cands.iter().map(|c| c.state().normalized(num_classes)).collect::<Result<Vec<_>>>()?;
            let transitions = policy.act(&states, rng)?;
            for (c, t) in cands.iter().zip(&transitions) {
                sel.decisions.push(Decision {
                    image_id: c.pseudo.image_id,
                    state: t.state,
                    accept: t.accept,
                    log_prob: Some(t.log_prob),
                    reward: None,
                });
                if t.accept {
                    sel.accepted.push(c.pseudo);
                }
            }
            sel.transitions = transitions;
        }
    }
    Ok(sel)
}

/// Drops pseudo-targets overlapping a same-class ground truth at IoU ≥
/// `dedup_iou`.
pub fn dedup(pseudo: &[Target], gts: &[Target], dedup_iou: f64) -> Vec<Target> {
    pseudo
        .iter()
        .filter(|p| !gts.iter().any(|g| g.class == p.class && iou(&g.bbox, &p.bbox) >= dedup_iou))
        .copied()
        .collect()
}

/// Ground truths at their own weight plus surviving pseudo-targets at
/// `lambda_distill`.
pub fn distill_targets(gts: &[Target], accepted: &[Target], config: &DistillConfig) -> Vec<Target> {
    let mut out = gts.to_vec();
    out.extend(
        dedup(accepted, gts, config.gt_dedup_iou)
            .into_iter()
            .map(|t| Target { weight: config.lambda_distill, ..t }),
    );
    out
}

pub fn distill_loss(
    head: &HeadOutput,
    model: &ModelConfig,
    gts: &[Vec<Target>],
    accepted: &[Vec<Target>],
    config: &DistillConfig,
) -> Result<LossComponents> {
    if gts.len() != accepted.len() {
        return Err(ModelError::Shape(format!("{} ground-truth lists, {} pseudo lists", gts.len(), accepted.len())));
    }
    let targets: Vec<Vec<Target>> = gts.iter().zip(accepted).map(|(g, a)| distill_targets(g, a, config)).collect();
    detection_loss(head, model, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pl(x: f64, class: LesionClass, conf: f64) -> PseudoLabel {
        PseudoLabel { image_id: 1, bbox: BBox::new(x, 0.0, x + 10.0, 10.0), class, teacher_conf: conf }
    }

    fn scored(x: f64, class: LesionClass, probs: [f64; 2]) -> ScoredDetection {
        ScoredDetection { detection: Detection::new(BBox::new(x, 0.0, x + 10.0, 10.0), class, 0.5), class_probs: probs }
    }

    #[test]
    fn entropy_examples() {
        assert!((class_entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(class_entropy(&[1.0, 0.0]).unwrap(), 0.0);
        let direct = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((class_entropy(&[0.9, 0.1]).unwrap() - direct).abs() < 1e-15);
        assert!((class_entropy(&[0.9, 0.1]).unwrap() - 0.3251).abs() < 5e-5);
        assert!(class_entropy(&[0.7, 0.7]).is_err());
    }

    #[test]
    fn candidate_features() {
        let pseudo = vec![pl(0.0, LesionClass::Caries, 0.8), pl(100.0, LesionClass::Mih, 0.6)];
        let dets = HashMap::from([(1, vec![scored(5.0, LesionClass::Caries, [0.5, 0.5]), scored(100.0, LesionClass::Caries, [1.0, 0.0])])]);
        let areas = HashMap::from([(1, 1000.0)]);
        let c = build_candidates(&pseudo, &dets, &areas, 2).unwrap();
        assert!((c[0].best_student_iou - 50.0 / 150.0).abs() < 1e-12);
        assert!((c[0].student_entropy - 2f64.ln()).abs() < 1e-15);
        assert!((c[0].area_norm - 0.1).abs() < 1e-12);
        // Only a different-class detection overlaps the second label.
        assert_eq!(c[1].best_student_iou, 0.0);
        assert!((c[1].student_entropy - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn static_threshold_rule() {
        let cand = DistillCandidate { pseudo: pl(0.0, LesionClass::Caries, 0.9), area_norm: 0.01, best_student_iou: 0.3, student_entropy: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = |phi| DistillConfig { mode: DistillMode::Static, phi, ..Default::default() };
        assert_eq!(select_candidates(&[cand], &cfg(0.2), None, 2, &mut rng).unwrap().accepted.len(), 1);
        assert_eq!(select_candidates(&[cand], &cfg(0.5), None, 2, &mut rng).unwrap().accepted.len(), 0);
        let none = DistillConfig { mode: DistillMode::None, ..Default::default() };
        assert!(select_candidates(&[cand], &none, None, 2, &mut rng).unwrap().accepted.is_empty());
        let ppo = DistillConfig { mode: DistillMode::Ppo, ..Default::default() };
        assert!(select_candidates(&[cand], &ppo, None, 2, &mut rng).is_err());
    }

    #[test]
    fn saturated_policy_accepts_everything() {
        let policy = Policy::new(0).unwrap();
        policy.params.set_values("policy.bias", &[1000.0]).unwrap();
        let cands: Vec<DistillCandidate> = (0..5)
            .map(|i| DistillCandidate {
                pseudo: pl(i as f64 * 20.0, LesionClass::Mih, 0.5),
                area_norm: 0.02,
                best_student_iou: 0.1 * i as f64,
                student_entropy: 0.3,
            })
            .collect();
        let cfg = DistillConfig { mode: DistillMode::Ppo, ..Default::default() };
        let sel = select_candidates(&cands, &cfg, Some(&policy), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sel.accepted, cands.iter().map(|c| c.pseudo).collect::<Vec<_>>());
        assert_eq!(sel.decisions.len(), 5);
        assert!(sel.decisions.iter().all(|d| d.log_prob == Some(0.0)));
    }

    #[test]
    fn dedup_rule_and_idempotence() {
        let g = Target::new(BBox::new(0.0, 0.0, 10.0, 10.0), LesionClass::Caries);
        let same = Target::new(g.bbox, LesionClass::Caries);
        let other_class = Target::new(g.bbox, LesionClass::Mih);
        let far = Target::new(BBox::new(50.0, 50.0, 60.0, 60.0), LesionClass::Caries);
        let once = dedup(&[same, other_class, far], &[g], 0.7);
        assert_eq!(once, vec![other_class, far]);
        assert_eq!(dedup(&once, &[g], 0.7), once);
    }
}
