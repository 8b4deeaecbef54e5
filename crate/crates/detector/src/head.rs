//! Raw per-level head outputs and their decoding into detections.

use candle_core::{DType, Tensor};
use lesion_core::{nms, BBox, Detection, LesionClass};

use crate::error::Result;

/// Log-width clamp applied in decoding and in the loss.
pub const MAX_LOG_SIZE: f64 = 6.0;

#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub stride: u32,
    /// (B, num_classes, H, W)
    pub cls: Tensor,
    /// (B, 1, H, W)
    pub obj: Tensor,
    /// (B, 4, H, W): dx, dy, dw, dh
    pub reg: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub levels: Vec<LevelOutput>,
}

/// A decoded cell with its class distribution (softmax over class logits).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDetection {
    pub detection: Detection,
    pub class_probs: [f64; 2],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn host(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

impl HeadOutput {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.levels[0].cls.dim(0)?)
    }

    /// Every cell with score ≥ `conf_thresh`, per batch image, before NMS.
    pub fn decode_raw(&self, conf_thresh: f64) -> Result<Vec<Vec<ScoredDetection>>> {
        let batch = self.batch_size()?;
        let mut out = vec![Vec::new(); batch];
        for level in &self.levels {
            let (_, k, h, w) = level.cls.dims4()?;
            let cls = host(&level.cls)?;
            let obj = host(&level.obj)?;
            let reg = host(&level.reg)?;
            let s = level.stride as f64;
            let plane = h * w;
            for (bi, dets) in out.iter_mut().enumerate() {
                for r in 0..h {
                    for c in 0..w {
                        let cell = r * w + c;
                        let logit = |ch: usize| cls[(bi * k + ch) * plane + cell];
                        let (l0, l1) = (logit(0), logit(1));
                        let best = if l1 > l0 { 1 } else { 0 };
                        let score = sigmoid(obj[bi * plane + cell]) * sigmoid(l0.max(l1));
                        if score < conf_thresh {
                            continue;
                        }
                        let rg = |ch: usize| reg[(bi * 4 + ch) * plane + cell];
                        let cx = (c as f64 + sigmoid(rg(0))) * s;
                        let cy = (r as f64 + sigmoid(rg(1))) * s;
                        let bw = rg(2).min(MAX_LOG_SIZE).exp() * s;
                        let bh = rg(3).min(MAX_LOG_SIZE).exp() * s;
                        let m = l0.max(l1);
                        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                        dets.push(ScoredDetection {
                            detection: Detection::new(
                                BBox::from_center(cx, cy, bw, bh),
                                LesionClass::from_index(best).expect("two classes"),
                                score,
                            ),
                            class_probs: [e0 / (e0 + e1), e1 / (e0 + e1)],
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Thresholded, class-aware NMS'd detections per batch image.
    pub fn decode(&self, conf_thresh: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        Ok(self
            .decode_raw(conf_thresh)?
            .into_iter()
            .map(|dets| {
                let plain: Vec<Detection> = dets.iter().map(|d| d.detection).collect();
                nms(&plain, nms_iou, true)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn level(stride: u32, h: usize, w: usize, cls: Vec<f64>, obj: Vec<f64>, reg: Vec<f64>) -> LevelOutput {
        let d = Device::Cpu;
        LevelOutput {
            stride,
            cls: Tensor::from_vec(cls, (1, 2, h, w), &d).unwrap(),
            obj: Tensor::from_vec(obj, (1, 1, h, w), &d).unwrap(),
            reg: Tensor::from_vec(reg, (1, 4, h, w), &d).unwrap(),
        }
    }

    #[test]
    fn zero_logits_decode_to_unit_cell_box() {
        let head = HeadOutput { levels: vec![level(8, 1, 1, vec![0.0; 2], vec![0.0], vec![0.0; 4])] };
        let dets = head.decode(0.0, 0.5).unwrap();
        assert_eq!(dets[0].len(), 1);
        let d = dets[0][0];
        assert_eq!(d.bbox, BBox::new(0.0, 0.0, 8.0, 8.0));
        assert!((d.score - 0.25).abs() < 1e-15);
        assert!(head.decode(1.0, 0.5).unwrap()[0].is_empty());
    }

    #[test]
    fn two_overlapping_cells_match_hand_decode() {
        // Cells (0,0) and (0,1) at stride 8; the second has the higher score
        // and a box overlapping the first enough to suppress it.
        let cls = vec![2.0, 3.0, -1.0, -1.0];
        let obj = vec![1.0, 2.0];
        // dx, dy planes then dw, dh planes; each plane is [cell0, cell1].
        let reg = vec![0.0, -2.0, 0.0, 0.0, (2.0f64).ln(), (2.0f64).ln(), (2.0f64).ln(), (2.0f64).ln()];
        let head = HeadOutput { levels: vec![level(8, 1, 2, cls, obj, reg)] };
        let dets = head.decode(0.0, 0.3).unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let c1x = (1.0 + s(-2.0)) * 8.0;
        let want = Detection::new(BBox::from_center(c1x, 4.0, 16.0, 16.0), LesionClass::Caries, s(2.0) * s(3.0));
        let b0 = BBox::from_center(4.0, 4.0, 16.0, 16.0);
        assert!(lesion_core::iou(&b0, &want.bbox) > 0.3);
        assert_eq!(dets[0].len(), 1);
        assert!((dets[0][0].bbox.x_min - want.bbox.x_min).abs() < 1e-12);
        assert!((dets[0][0].score - want.score).abs() < 1e-12);
        assert_eq!(dets[0][0].class, LesionClass::Caries);
    }
}
