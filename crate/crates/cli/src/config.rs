//! The run configuration: one TOML document with a section per stage.
//! Unknown keys are rejected and every value is range-checked at load.

use std::path::Path;

use lesion_core::eval::{ReportFormat, SizeBounds};
use lesion_core::synth::SynthParams;
use lesion_detector::{DistillConfig, ModelConfig, PpoConfig, SliceSettings, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable naming the config file used when `--config` is
/// absent.
pub const CONFIG_ENV: &str = "LESION_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Images rendered by `synth`.
    pub images: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Fraction of training-split labels removed after the split. The
    /// lesions stay in the pixels; validation labels are untouched.
    pub train_label_dropout: f64,
    pub dropout_seed: u64,
    /// Teacher crop size; crops use a zero-overlap grid.
    pub patch_size: u32,
    pub min_visibility: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            images: 200,
            split_ratio: 0.8,
            split_seed: 0,
            train_label_dropout: 0.0,
            dropout_seed: 0,
            patch_size: 640,
            min_visibility: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub input_size: u32,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { input_size: 640, init_seed: 0, train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentStageConfig {
    pub input_size: u32,
    pub init_seed: u64,
    pub policy_seed: u64,
    pub train: TrainConfig,
}

impl Default for StudentStageConfig {
    fn default() -> Self {
        Self { input_size: 640, init_seed: 1, policy_seed: 0, train: TrainConfig { seed: 1, ..TrainConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Detections below this score are not written by `infer`.
    pub conf_threshold: f64,
    /// Small/large area bounds in pixels².
    pub small_area: f64,
    pub large_area: f64,
    pub format: ReportFormat,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let b = SizeBounds::default();
        Self { conf_threshold: 0.01, small_area: b.small, large_area: b.large, format: ReportFormat::Ablation }
    }
}

impl EvalConfig {
    pub fn bounds(&self) -> SizeBounds {
        SizeBounds { small: self.small_area, large: self.large_area }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthParams,
    pub dataset: DatasetConfig,
    /// Widths and head settings shared by teacher and student; each stage
    /// sets its own input size.
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub student: StudentStageConfig,
    pub distill: DistillConfig,
    pub ppo: PpoConfig,
    pub slice: SliceSettings,
    pub eval: EvalConfig,
}

fn invalid(key: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {why}"))
}

impl RunConfig {
    /// Parses TOML, applies `key.path=value` overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config error: "))))
    }

    /// `--config`, else `$LESION_CONFIG`, else built-in defaults.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => Self::load(p, overrides),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p), overrides),
                _ => Self::from_toml("", overrides),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn teacher_model(&self) -> ModelConfig {
        ModelConfig { input_size: self.teacher.input_size, ..self.model.clone() }
    }

    pub fn student_model(&self) -> ModelConfig {
        ModelConfig { input_size: self.student.input_size, ..self.model.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate().map_err(|e| invalid("synth", e))?;
        let d = &self.dataset;
        if d.images == 0 {
            return Err(invalid("dataset.images", "must be positive"));
        }
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(invalid("dataset.split_ratio", format!("{} not in (0, 1)", d.split_ratio)));
        }
        if !(0.0..1.0).contains(&d.train_label_dropout) {
            return Err(invalid("dataset.train_label_dropout", format!("{} not in [0, 1)", d.train_label_dropout)));
        }
        if d.patch_size == 0 {
            return Err(invalid("dataset.patch_size", "must be positive"));
        }
        if !(d.min_visibility > 0.0 && d.min_visibility <= 1.0) {
            return Err(invalid("dataset.min_visibility", format!("{} not in (0, 1]", d.min_visibility)));
        }
        self.teacher_model().validate().map_err(|e| invalid("teacher.input_size / model", e))?;
        self.student_model().validate().map_err(|e| invalid("student.input_size / model", e))?;
        self.teacher.train.validate().map_err(|e| invalid("teacher.train", e))?;
        self.student.train.validate().map_err(|e| invalid("student.train", e))?;
        self.distill.validate().map_err(|e| invalid("distill", e))?;
        self.ppo.validate().map_err(|e| invalid("ppo", e))?;
        self.slice.validate().map_err(|e| invalid("slice", e))?;
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.conf_threshold) {
            return Err(invalid("eval.conf_threshold", format!("{} not in [0, 1]", e.conf_threshold)));
        }
        if !(e.small_area > 0.0 && e.small_area < e.large_area && e.large_area.is_finite()) {
            return Err(invalid("eval.small_area / eval.large_area", "need 0 < small_area < large_area"));
        }
        Ok(())
    }
}

/// `section.key=value`, where value is any TOML value; bare words are
/// taken as strings.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut table = doc;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("{path}: {k} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[distill]\nphy = 0.3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("phy"), "{err}");
        assert_eq!(err.exit_code(), 1);
        let err = RunConfig::from_toml("[nonsense]\n", &[]).unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn ranges_are_checked() {
        for bad in ["distill.phi=1.5", "slice.overlap=1.0", "dataset.split_ratio=1", "student.input_size=100", "ppo.clip_epsilon=0"] {
            let err = RunConfig::from_toml("", &[bad.to_string()]).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}");
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = RunConfig::from_toml("[distill]\nphi = 0.2\n", &["distill.phi=0.15".into(), "distill.mode=static".into()]).unwrap();
        assert_eq!(cfg.distill.phi, 0.15);
        assert_eq!(cfg.distill.mode, lesion_detector::DistillMode::Static);
    }
}
