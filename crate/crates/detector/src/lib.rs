//! Small anchor-free detector with a four-level S-PAFPN neck and
//! directional state-space attention, plus teacher/student distillation
//! and a PPO distillation gate.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod distill;
pub mod error;
pub mod head;
pub mod layers;
pub mod loss;
pub mod model;
pub mod params;
pub mod ppo;
pub mod ssm;
pub mod student;
pub mod train;

pub use config::{ModelConfig, Variant};
pub use error::{ModelError, Result};
pub use head::{HeadOutput, LevelOutput, ScoredDetection};
pub use model::{spafpn_forward, Model};
pub use params::{Adam, AdamConfig, ParamStore};
pub use ssm::{ssm_attention, SsmParams};
pub use loss::{detection_loss, LossComponents, LossValues, Target};
pub use train::{Augment, Sample, TrainConfig, Trainer};
pub use checkpoint::Checkpoint;
pub use distill::{DistillCandidate, DistillConfig, DistillMode, PseudoLabel, SliceSettings};
pub use ppo::{Policy, PpoConfig};
pub use student::{StudentConfig, StudentStep, StudentTrainer};
