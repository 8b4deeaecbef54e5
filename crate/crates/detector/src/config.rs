use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Which neck the detector is built with. `Yolox` is the three-level
/// PAFPN baseline (P3 to P5, no state-space block); `SYolo` adds the P2
/// level fed by C2 and the directional SSM block on every level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    SYolo,
    Yolox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: u32,
    pub stem_channels: usize,
    /// Widths of C2..C5.
    pub backbone_channels: [usize; 4],
    pub neck_width: usize,
    pub num_classes: usize,
    pub ssm_state_dim: usize,
    pub variant: Variant,
    /// Upper √area bounds in pixels for P2, P3 and P4; anything larger goes
    /// to P5.
    pub level_bounds: [f64; 3],
    pub nms_iou: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 640,
            stem_channels: 16,
            backbone_channels: [32, 64, 128, 256],
            neck_width: 64,
            num_classes: 2,
            ssm_state_dim: 8,
            variant: Variant::SYolo,
            level_bounds: [32.0, 64.0, 128.0],
            nms_iou: 0.65,
        }
    }
}

pub const BACKBONE_STRIDES: [u32; 4] = [4, 8, 16, 32];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad("input_size must be a positive multiple of 32");
        }
        if self.num_classes != 2 {
            return bad("num_classes must be 2");
        }
        if self.stem_channels == 0 || self.neck_width == 0 || self.backbone_channels.contains(&0) {
            return bad("channel widths must be positive");
        }
        if self.ssm_state_dim == 0 {
            return bad("ssm_state_dim must be positive");
        }
        if !self.level_bounds.windows(2).all(|w| w[0] < w[1]) || self.level_bounds[0] <= 0.0 {
            return bad("level_bounds must be positive and increasing");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("nms_iou must lie in [0, 1]");
        }
        Ok(())
    }

    /// Indices into C2..C5 of the pyramid levels the head sees.
    pub fn levels(&self) -> std::ops::Range<usize> {
        match self.variant {
            Variant::SYolo => 0..4,
            Variant::Yolox => 1..4,
        }
    }

    pub fn strides(&self) -> Vec<u32> {
        self.levels().map(|l| BACKBONE_STRIDES[l]).collect()
    }

    /// Position within `levels()` of the level a box of this √area goes to.
    pub fn level_for(&self, sqrt_area: f64) -> usize {
        let level = self.level_bounds.iter().position(|&b| sqrt_area < b).unwrap_or(3);
        level.max(self.levels().start) - self.levels().start
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_assignment() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.level_for(10.0), 0);
        assert_eq!(cfg.level_for(32.0), 1);
        assert_eq!(cfg.level_for(100.0), 2);
        assert_eq!(cfg.level_for(500.0), 3);
        let yolox = ModelConfig { variant: Variant::Yolox, ..cfg };
        assert_eq!(yolox.strides(), vec![8, 16, 32]);
        assert_eq!(yolox.level_for(10.0), 0);
        assert_eq!(yolox.level_for(500.0), 2);
    }

    #[test]
    fn rejects_bad_input_size() {
        assert!(ModelConfig { input_size: 100, ..Default::default() }.validate().is_err());
    }
}
