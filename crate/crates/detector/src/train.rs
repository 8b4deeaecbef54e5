//! Supervised training: sample preparation, augmentation (flips and
//! brightness jitter) and the optimiser step.

use std::f64::consts::PI;
use std::path::Path;

use candle_core::Tensor;
use image::{imageops, RgbImage};
use lesion_core::{BBox, DatasetManifest};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::head::HeadOutput;
use crate::loss::{detection_loss, LossComponents, LossValues, Target};
use crate::model::Model;
use crate::params::{Adam, AdamConfig};

/// An image at the model's input side with its targets in the same frame.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: u64,
    pub image: RgbImage,
    pub targets: Vec<Target>,
    /// Input-side / original-size factors, to map boxes back.
    pub scale: (f64, f64),
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| ModelError::Image { path: path.display().to_string(), source })?
        .to_rgb8())
}

/// Loads every image of `manifest` from `image_dir`, resized to
/// `side × side`, with its annotations scaled to match.
pub fn load_samples(manifest: &DatasetManifest, image_dir: &Path, side: u32) -> Result<Vec<Sample>> {
    let by_image = manifest.annotations_by_image();
    manifest
        .images
        .iter()
        .map(|rec| {
            let img = load_image(&image_dir.join(&rec.file_name))?;
            let (sx, sy) = (side as f64 / img.width() as f64, side as f64 / img.height() as f64);
            let image =
                if img.dimensions() == (side, side) { img } else { imageops::resize(&img, side, side, imageops::FilterType::Triangle) };
            let targets = by_image
                .get(&rec.id)
                .map(|anns| anns.iter().map(|a| Target::new(a.bbox.scale(sx, sy), a.class)).collect())
                .unwrap_or_default();
            Ok(Sample { image_id: rec.id, image, targets, scale: (sx, sy) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay floor as a fraction of `lr`.
    pub min_lr_fraction: f64,
    pub hflip: bool,
    pub vflip: bool,
    /// Multiplicative brightness factor drawn from `1 ± jitter`.
    pub brightness_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            min_lr_fraction: 0.05,
            hflip: true,
            vflip: true,
            brightness_jitter: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) || !(0.0..1.0).contains(&self.brightness_jitter) {
            return bad("min_lr_fraction must lie in [0, 1] and brightness_jitter in [0, 1)".into());
        }
        Ok(())
    }
}

/// The random transform applied to one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub gain: f64,
}

impl Augment {
    pub const IDENTITY: Augment = Augment { hflip: false, vflip: false, gain: 1.0 };

    pub fn apply_image(&self, img: &RgbImage) -> RgbImage {
        let mut out = if self.hflip { imageops::flip_horizontal(img) } else { img.clone() };
        if self.vflip {
            imageops::flip_vertical_in_place(&mut out);
        }
        if self.gain != 1.0 {
            for px in out.pixels_mut() {
                for v in px.0.iter_mut() {
                    *v = (*v as f64 * self.gain).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        out
    }

    pub fn apply_box(&self, b: &BBox, width: f64, height: f64) -> BBox {
        let (x0, x1) = if self.hflip { (width - b.x_max, width - b.x_min) } else { (b.x_min, b.x_max) };
        let (y0, y1) = if self.vflip { (height - b.y_max, height - b.y_min) } else { (b.y_min, b.y_max) };
        BBox::new(x0, y0, x1, y1)
    }
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
    pub step: u64,
    order: Vec<usize>,
    cursor: usize,
}

/// A prepared batch: input tensor, augmented targets and the transforms.
pub struct Batch {
    pub indices: Vec<usize>,
    pub input: Tensor,
    pub targets: Vec<Vec<Target>>,
    pub augments: Vec<Augment>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&model.params, AdamConfig::default())?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { model, optimizer, rng, config, step: 0, order: Vec::new(), cursor: 0 })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.config.steps.max(1) as f64;
        let t = (step as f64 / total).min(1.0);
        let floor = self.config.lr * self.config.min_lr_fraction;
        floor + (self.config.lr - floor) * 0.5 * (1.0 + (PI * t).cos())
    }

    /// Next batch of sample indices, walking reshuffled epochs.
    pub fn next_indices(&mut self, n_samples: usize) -> Vec<usize> {
        let take = self.config.batch_size.min(n_samples);
        let mut out = Vec::with_capacity(take);
        while out.len() < take {
            if self.cursor >= self.order.len() {
                self.order = (0..n_samples).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn draw_augment(&mut self) -> Augment {
        let c = &self.config;
        let (hflip_on, vflip_on, jitter) = (c.hflip, c.vflip, c.brightness_jitter);
        Augment {
            hflip: hflip_on && self.rng.gen_bool(0.5),
            vflip: vflip_on && self.rng.gen_bool(0.5),
            gain: if jitter > 0.0 { 1.0 + self.rng.gen_range(-jitter..=jitter) } else { 1.0 },
        }
    }

    pub fn prepare_batch(&mut self, samples: &[Sample], indices: Vec<usize>) -> Result<Batch> {
        let side = self.model.config.input_size as f64;
        let augments: Vec<Augment> = indices.iter().map(|_| self.draw_augment()).collect();
        let images: Vec<RgbImage> =
            indices.iter().zip(&augments).map(|(&i, a)| a.apply_image(&samples[i].image)).collect();
        let targets = indices
            .iter()
            .zip(&augments)
            .map(|(&i, a)| {
                samples[i].targets.iter().map(|t| Target { bbox: a.apply_box(&t.bbox, side, side), ..*t }).collect()
            })
            .collect();
        let refs: Vec<&RgbImage> = images.iter().collect();
        Ok(Batch { input: self.model.images_to_tensor(&refs)?, indices, targets, augments })
    }

    pub fn forward(&self, batch: &Batch) -> Result<HeadOutput> {
        self.model.forward(&batch.input)
    }

    /// Backpropagates `loss.total` and applies one optimiser step at the
    /// scheduled learning rate.
    pub fn apply(&mut self, loss: &LossComponents) -> Result<LossValues> {
        let values = loss.values()?;
        if !values.is_finite() {
            return Err(ModelError::NonFiniteLoss { batch: self.step, iou: values.iou, cls: values.cls, obj: values.obj });
        }
        let grads = loss.total.backward()?;
        let lr = self.lr_at(self.step);
        self.optimizer.step(&self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(values)
    }

    /// One plain supervised step on the next batch.
    pub fn train_step(&mut self, samples: &[Sample]) -> Result<LossValues> {
        let indices = self.next_indices(samples.len());
        let batch = self.prepare_batch(samples, indices)?;
        let head = self.forward(&batch)?;
        let loss = detection_loss(&head, &self.model.config, &batch.targets)?;
        self.apply(&loss)
    }

    /// Runs the remaining configured steps, reporting each step's losses.
    pub fn fit(&mut self, samples: &[Sample], mut on_step: impl FnMut(u64, &LossValues)) -> Result<()> {
        if samples.is_empty() {
            return Err(ModelError::InvalidConfig("no training samples".into()));
        }
        while self.step < self.config.steps {
            let values = self.train_step(samples)?;
            on_step(self.step, &values);
        }
        Ok(())
    }
}
