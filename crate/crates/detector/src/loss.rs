//! Anchor-free detection loss with fixed-radius centre assignment.
//!
//! Each target goes to the pyramid level whose √area range contains it.
//! Cells of that level whose centres lie within 1.5 strides (Euclidean) of
//! the target centre are positives; a cell claimed by several targets goes
//! to the one with the largest weight, ties to the smallest box. Terms are summed over cells and divided by the
//! batch size only, so per-target weights enter linearly.

use candle_core::{Device, Tensor};
use lesion_core::{BBox, LesionClass};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::head::{HeadOutput, MAX_LOG_SIZE};
use crate::layers::{bce_with_logits, sigmoid, sum_all_scalar};

pub const POSITIVE_RADIUS: f64 = 1.5;
pub const IOU_WEIGHT: f64 = 5.0;

/// A box to learn, in input-image pixels, with its loss weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub bbox: BBox,
    pub class: LesionClass,
    pub weight: f64,
}

impl Target {
    pub fn new(bbox: BBox, class: LesionClass) -> Self {
        Self { bbox, class, weight: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LossComponents {
    pub iou: Tensor,
    pub cls: Tensor,
    pub obj: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub iou: f64,
    pub cls: f64,
    pub obj: f64,
    pub total: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        self.iou.is_finite() && self.cls.is_finite() && self.obj.is_finite() && self.total.is_finite()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

impl LossComponents {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            iou: scalar(&self.iou)?,
            cls: scalar(&self.cls)?,
            obj: scalar(&self.obj)?,
            total: scalar(&self.total)?,
        })
    }
}

/// For one image and one level of size `h × w` and stride `s`, the owning
/// target index of every cell (row-major), or `None`.
pub fn assign_level(targets: &[(usize, &Target)], h: usize, w: usize, stride: f64) -> Vec<Option<usize>> {
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let radius = POSITIVE_RADIUS * stride;
    for &(ti, t) in targets {
        let (cx, cy) = t.bbox.center();
        let cx = cx.clamp(0.0, w as f64 * stride - 1e-9);
        let cy = cy.clamp(0.0, h as f64 * stride - 1e-9);
        let c_lo = ((cx - radius) / stride - 0.5).floor().max(0.0) as usize;
        let c_hi = (((cx + radius) / stride - 0.5).ceil().max(0.0) as usize).min(w - 1);
        let r_lo = ((cy - radius) / stride - 0.5).floor().max(0.0) as usize;
        let r_hi = (((cy + radius) / stride - 0.5).ceil().max(0.0) as usize).min(h - 1);
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let dx = (c as f64 + 0.5) * stride - cx;
                let dy = (r as f64 + 0.5) * stride - cy;
                if dx * dx + dy * dy > radius * radius {
                    continue;
                }
                let cell = &mut owner[r * w + c];
                match cell {
                    Some(prev) if !outranks(t, target(targets, *prev)) => {}
                    _ => *cell = Some(ti),
                }
            }
        }
    }
    owner
}

fn target<'a>(targets: &[(usize, &'a Target)], index: usize) -> &'a Target {
    targets.iter().find(|(i, _)| *i == index).map(|(_, t)| *t).expect("owner is one of the targets")
}

fn outranks(a: &Target, b: &Target) -> bool {
    a.weight > b.weight || (a.weight == b.weight && a.bbox.area() < b.bbox.area())
}

/// Per-level dense target arrays for the whole batch.
struct LevelTargets {
    pos_weight: Vec<f64>,
    obj_weight: Vec<f64>,
    obj_target: Vec<f64>,
    boxes: [Vec<f64>; 4],
    onehot: Vec<f64>,
}

fn build_level_targets(
    cfg: &ModelConfig,
    level: usize,
    dims: (usize, usize, usize, usize),
    stride: f64,
    targets: &[Vec<Target>],
) -> LevelTargets {
    let (b, k, h, w) = dims;
    let plane = h * w;
    let mut lt = LevelTargets {
        pos_weight: vec![0.0; b * plane],
        obj_weight: vec![1.0; b * plane],
        obj_target: vec![0.0; b * plane],
        boxes: std::array::from_fn(|_| vec![0.0; b * plane]),
        onehot: vec![0.0; b * k * plane],
    };
    for (bi, image_targets) in targets.iter().enumerate() {
        let here: Vec<(usize, &Target)> = image_targets
            .iter()
            .enumerate()
            .filter(|(_, t)| cfg.level_for(t.bbox.area().sqrt()) == level)
            .collect();
        if here.is_empty() {
            continue;
        }
        for (cell, owner) in assign_level(&here, h, w, stride).into_iter().enumerate() {
            let Some(ti) = owner else { continue };
            let t = &image_targets[ti];
            let idx = bi * plane + cell;
            lt.pos_weight[idx] = t.weight;
            lt.obj_weight[idx] = t.weight;
            lt.obj_target[idx] = 1.0;
            lt.boxes[0][idx] = t.bbox.x_min;
            lt.boxes[1][idx] = t.bbox.y_min;
            lt.boxes[2][idx] = t.bbox.x_max;
            lt.boxes[3][idx] = t.bbox.y_max;
            lt.onehot[(bi * k + t.class.index()) * plane + cell] = 1.0;
        }
    }
    lt
}

/// IoU between predicted boxes (decoded from `reg`) and dense target boxes,
/// both (B, 1, H, W).
fn dense_iou(reg: &Tensor, tboxes: &[Tensor; 4], stride: f64, device: &Device) -> Result<Tensor> {
    let (_, _, h, w) = reg.dims4()?;
    let dtype = reg.dtype();
    let cols = Tensor::arange(0u32, w as u32, device)?.to_dtype(dtype)?.reshape((1, 1, 1, w))?;
    let rows = Tensor::arange(0u32, h as u32, device)?.to_dtype(dtype)?.reshape((1, 1, h, 1))?;
    let part = |i: usize| reg.narrow(1, i, 1);
    let cx = (sigmoid(&part(0)?)?.broadcast_add(&cols)? * stride)?;
    let cy = (sigmoid(&part(1)?)?.broadcast_add(&rows)? * stride)?;
    let pw = (part(2)?.minimum(MAX_LOG_SIZE)?.exp()? * stride)?;
    let ph = (part(3)?.minimum(MAX_LOG_SIZE)?.exp()? * stride)?;
    let px1 = (&cx - (&pw * 0.5)?)?;
    let px2 = (&cx + (&pw * 0.5)?)?;
    let py1 = (&cy - (&ph * 0.5)?)?;
    let py2 = (&cy + (&ph * 0.5)?)?;
    let [tx1, ty1, tx2, ty2] = tboxes;
    let iw = (px2.minimum(tx2)? - px1.maximum(tx1)?)?.relu()?;
    let ih = (py2.minimum(ty2)? - py1.maximum(ty1)?)?.relu()?;
    let inter = (iw * ih)?;
    let t_area = ((tx2 - tx1)? * (ty2 - ty1)?)?;
    // Cells without a target have t_area = 0, so keep the union off zero.
    let union = ((((pw * ph)? + t_area)? - &inter)? + 1e-9)?;
    Ok((inter / union)?)
}

pub fn detection_loss(head: &HeadOutput, cfg: &ModelConfig, targets: &[Vec<Target>]) -> Result<LossComponents> {
    let batch = head.batch_size()?;
    if targets.len() != batch {
        return Err(ModelError::Shape(format!("{} target lists for a batch of {batch}", targets.len())));
    }
    for (image, ts) in targets.iter().enumerate() {
        if let Some(index) = ts.iter().position(|t| !(t.bbox.area() > 0.0) || !t.bbox.is_finite()) {
            return Err(ModelError::InvalidTarget { image, index });
        }
    }
    let device = head.levels[0].cls.device().clone();
    let dtype = head.levels[0].cls.dtype();
    let mut iou_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut obj_terms = Vec::new();
    for (li, level) in head.levels.iter().enumerate() {
        let (b, k, h, w) = level.cls.dims4()?;
        let stride = level.stride as f64;
        let lt = build_level_targets(cfg, li, (b, k, h, w), stride, targets);
        let dense = |v: Vec<f64>, c: usize| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (b, c, h, w), &device)?.to_dtype(dtype)?)
        };
        let pos_w = dense(lt.pos_weight, 1)?;
        let [x1, y1, x2, y2] = lt.boxes;
        let tboxes = [dense(x1, 1)?, dense(y1, 1)?, dense(x2, 1)?, dense(y2, 1)?];
        let iou = dense_iou(&level.reg, &tboxes, stride, &device)?;
        iou_terms.push(sum_all_scalar(&((1.0 - iou)? * &pos_w)?)?);
        let cls_bce = bce_with_logits(&level.cls, &dense(lt.onehot, k)?)?;
        cls_terms.push(sum_all_scalar(&cls_bce.broadcast_mul(&pos_w)?)?);
        let obj_bce = bce_with_logits(&level.obj, &dense(lt.obj_target, 1)?)?;
        obj_terms.push(sum_all_scalar(&(obj_bce * dense(lt.obj_weight, 1)?)?)?);
    }
    let norm = 1.0 / batch as f64;
    let sum = |ts: Vec<Tensor>| -> Result<Tensor> { Ok((Tensor::stack(&ts, 0)?.sum_all()? * norm)?) };
    let iou = sum(iou_terms)?;
    let cls = sum(cls_terms)?;
    let obj = sum(obj_terms)?;
    let total = (((&iou * IOU_WEIGHT)? + &cls)? + &obj)?;
    Ok(LossComponents { iou, cls, obj, total })
}
