//! Backbone, S-PAFPN neck and decoupled head.

use candle_core::{DType, Device, Tensor};
use image::{imageops, RgbImage};
use lesion_core::slicer::Detector;
use lesion_core::Detection;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant, BACKBONE_STRIDES};
use crate::error::{ModelError, Result};
use crate::head::{HeadOutput, LevelOutput};
use crate::layers::{conv, conv_silu, init_conv, upsample2};
use crate::params::ParamStore;
use crate::ssm::{init_ssm, ssm_attention, SsmParams};

/// Prior probability behind the objectness and class bias init.
const PRIOR: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn level_name(level: usize) -> String {
    format!("p{}", level + 2)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(dtype, Device::Cpu);
        let ch = config.backbone_channels;
        init_conv(&mut ps, "backbone.stem", 3, config.stem_channels, 3, 6.0, &mut rng)?;
        let mut prev = config.stem_channels;
        for (i, &c) in ch.iter().enumerate() {
            init_conv(&mut ps, &format!("backbone.stage{i}.down"), prev, c, 3, 6.0, &mut rng)?;
            init_conv(&mut ps, &format!("backbone.stage{i}.res"), c, c, 3, 3.0, &mut rng)?;
            prev = c;
        }
        init_spafpn(&mut ps, &config, &mut rng)?;
        let prior_bias = -((1.0 - PRIOR) / PRIOR).ln();
        let nw = config.neck_width;
        for l in config.levels() {
            let p = format!("head.{}", level_name(l));
            init_conv(&mut ps, &format!("{p}.cls_conv"), nw, nw, 3, 6.0, &mut rng)?;
            init_conv(&mut ps, &format!("{p}.reg_conv"), nw, nw, 3, 6.0, &mut rng)?;
            init_conv(&mut ps, &format!("{p}.cls_pred"), nw, config.num_classes, 1, 3.0, &mut rng)?;
            init_conv(&mut ps, &format!("{p}.reg_pred"), nw, 4, 1, 0.03, &mut rng)?;
            init_conv(&mut ps, &format!("{p}.obj_pred"), nw, 1, 1, 3.0, &mut rng)?;
            ps.constant(&format!("{p}.cls_pred.bias"), &[config.num_classes], prior_bias)?;
            ps.constant(&format!("{p}.obj_pred.bias"), &[1], prior_bias)?;
        }
        Ok(Self { config, params: ps })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// C2..C5 at strides 4, 8, 16 and 32.
    pub fn backbone(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let ps = &self.params;
        let mut h = conv_silu(ps, "backbone.stem", x, 2)?;
        let mut feats = Vec::with_capacity(4);
        for i in 0..4 {
            h = conv_silu(ps, &format!("backbone.stage{i}.down"), &h, 2)?;
            h = (&h + conv_silu(ps, &format!("backbone.stage{i}.res"), &h, 1)?)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    pub fn forward(&self, x: &Tensor) -> Result<HeadOutput> {
        let (_, c, h, w) = x.dims4()?;
        let side = self.config.input_size as usize;
        if c != 3 || h != side || w != side {
            return Err(ModelError::Shape(format!("expected (B, 3, {side}, {side}), got {:?}", x.dims())));
        }
        let feats = self.backbone(x)?;
        let pyramid = spafpn_forward(&self.params, &self.config, &feats)?;
        self.head(&pyramid)
    }

    pub fn head(&self, pyramid: &[Tensor]) -> Result<HeadOutput> {
        let ps = &self.params;
        let levels = self
            .config
            .levels()
            .zip(pyramid)
            .map(|(l, p)| {
                let n = format!("head.{}", level_name(l));
                let cls_feat = conv_silu(ps, &format!("{n}.cls_conv"), p, 1)?;
                let reg_feat = conv_silu(ps, &format!("{n}.reg_conv"), p, 1)?;
                Ok(LevelOutput {
                    stride: BACKBONE_STRIDES[l],
                    cls: conv(ps, &format!("{n}.cls_pred"), &cls_feat, 1)?,
                    obj: conv(ps, &format!("{n}.obj_pred"), &reg_feat, 1)?,
                    reg: conv(ps, &format!("{n}.reg_pred"), &reg_feat, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HeadOutput { levels })
    }

    /// Stacks images already at `input_size` into a (B, 3, H, W) tensor
    /// scaled to [0, 1].
    pub fn images_to_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let side = self.config.input_size;
        let plane = (side * side) as usize;
        let mut data = vec![0f32; images.len() * 3 * plane];
        for (b, img) in images.iter().enumerate() {
            if img.dimensions() != (side, side) {
                return Err(ModelError::Shape(format!("image is {:?}, expected {side}x{side}", img.dimensions())));
            }
            for (i, px) in img.pixels().enumerate() {
                for ch in 0..3 {
                    data[(b * 3 + ch) * plane + i] = px.0[ch] as f32 / 255.0;
                }
            }
        }
        let t = Tensor::from_vec(data, (images.len(), 3, side as usize, side as usize), self.params.device())?;
        Ok(t.to_dtype(self.dtype())?)
    }

    /// Detections for a batch of images of any size; each is resized to
    /// the input side and boxes are scaled back.
    pub fn detect_batch(&self, images: &[&RgbImage], conf_thresh: f64) -> Result<Vec<Vec<Detection>>> {
        let side = self.config.input_size;
        let resized: Vec<RgbImage> = images
            .iter()
            .map(|img| {
                if img.dimensions() == (side, side) {
                    (*img).clone()
                } else {
                    imageops::resize(*img, side, side, imageops::FilterType::Triangle)
                }
            })
            .collect();
        let refs: Vec<&RgbImage> = resized.iter().collect();
        let head = self.forward(&self.images_to_tensor(&refs)?)?;
        let dets = head.decode(conf_thresh, self.config.nms_iou)?;
        Ok(dets
            .into_iter()
            .zip(images)
            .map(|(ds, img)| {
                let (sx, sy) = (img.width() as f64 / side as f64, img.height() as f64 / side as f64);
                ds.into_iter()
                    .map(|d| Detection { bbox: d.bbox.scale(sx, sy).clip_to(&bounds(img)), ..d })
                    .filter(|d| !d.bbox.is_degenerate())
                    .collect()
            })
            .collect())
    }

    /// Decays of every SSM block, for stability checks.
    pub fn ssm_decays(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        if self.config.variant == Variant::SYolo {
            for l in self.config.levels() {
                out.extend(crate::ssm::decays(&self.params, &format!("neck.ssm.{}", level_name(l)))?);
            }
        }
        Ok(out)
    }
}

fn bounds(img: &RgbImage) -> lesion_core::BBox {
    lesion_core::BBox::new(0.0, 0.0, img.width() as f64, img.height() as f64)
}

impl Detector for Model {
    type Error = ModelError;

    fn detect(&self, image: &RgbImage, conf_thresh: f64) -> Result<Vec<Detection>> {
        Ok(self.detect_batch(&[image], conf_thresh)?.pop().unwrap_or_default())
    }
}

pub fn init_spafpn(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let nw = cfg.neck_width;
    let levels = cfg.levels();
    for l in levels.clone() {
        let n = level_name(l);
        init_conv(ps, &format!("neck.lateral.{n}"), cfg.backbone_channels[l], nw, 1, 3.0, rng)?;
        if l + 1 < levels.end {
            init_conv(ps, &format!("neck.top_down.{n}"), nw, nw, 3, 6.0, rng)?;
        }
        if l > levels.start {
            init_conv(ps, &format!("neck.down.{n}"), nw, nw, 3, 6.0, rng)?;
            init_conv(ps, &format!("neck.bottom_up.{n}"), nw, nw, 3, 6.0, rng)?;
        }
        if cfg.variant == Variant::SYolo {
            init_ssm(ps, &format!("neck.ssm.{n}"), nw, cfg.ssm_state_dim, rng)?;
        }
    }
    Ok(())
}

/// Top-down then bottom-up fusion over the configured levels of C2..C5,
/// followed by the SSM block on each output for the S-YOLO variant.
/// `stage_features` always holds all four backbone stages.
pub fn spafpn_forward(ps: &ParamStore, cfg: &ModelConfig, stage_features: &[Tensor]) -> Result<Vec<Tensor>> {
    if stage_features.len() != 4 {
        return Err(ModelError::Shape(format!("expected 4 stage features, got {}", stage_features.len())));
    }
    let (b, _, h2, w2) = stage_features[0].dims4()?;
    for (i, f) in stage_features.iter().enumerate() {
        let (fb, fc, fh, fw) = f.dims4()?;
        let (eh, ew) = (h2 >> i, w2 >> i);
        if fb != b || fc != cfg.backbone_channels[i] || fh != eh || fw != ew || eh == 0 || ew == 0 {
            return Err(ModelError::Shape(format!(
                "stage {i}: got {:?}, expected ({b}, {}, {eh}, {ew})",
                f.dims(),
                cfg.backbone_channels[i]
            )));
        }
    }
    let levels = cfg.levels();
    let laterals = levels
        .clone()
        .map(|l| conv(ps, &format!("neck.lateral.{}", level_name(l)), &stage_features[l], 1))
        .collect::<Result<Vec<_>>>()?;
    let n = laterals.len();
    let mut top_down = vec![laterals[n - 1].clone(); n];
    for i in (0..n - 1).rev() {
        let name = format!("neck.top_down.{}", level_name(levels.start + i));
        top_down[i] = conv_silu(ps, &name, &(&laterals[i] + upsample2(&top_down[i + 1])?)?, 1)?;
    }
    let mut out = vec![top_down[0].clone()];
    for i in 1..n {
        let name = level_name(levels.start + i);
        let down = conv_silu(ps, &format!("neck.down.{name}"), &out[i - 1], 2)?;
        out.push(conv_silu(ps, &format!("neck.bottom_up.{name}"), &(&top_down[i] + down)?, 1)?);
    }
    if cfg.variant == Variant::SYolo {
        out = out
            .iter()
            .zip(levels)
            .map(|(p, l)| ssm_attention(p, &SsmParams::from_store(ps, &format!("neck.ssm.{}", level_name(l)))?))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(out)
}
