//! Student training with teacher pseudo-labels, gated statically or by
//! the PPO agent.

use std::collections::HashMap;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::distill::{build_candidates, distill_loss, select_candidates, Decision, DistillConfig, DistillMode, PseudoLabel};
use crate::error::{ModelError, Result};
use crate::loss::{detection_loss, LossValues, Target};
use crate::model::Model;
use crate::ppo::{compute_reward, update_policy, Policy, PpoConfig, Trajectory, UpdateStats};
use crate::train::{Sample, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub ppo: PpoConfig,
    pub policy_seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            ppo: PpoConfig::default(),
            policy_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentStep {
    pub step: u64,
    pub loss: LossValues,
    pub candidates: usize,
    pub accepted: usize,
}

pub struct StudentTrainer {
    pub trainer: Trainer,
    pub config: StudentConfig,
    pub policy: Option<Policy>,
    pub decision_log: Vec<Decision>,
    pub update_stats: Vec<UpdateStats>,
    pseudo: HashMap<u64, Vec<PseudoLabel>>,
    policy_rng: ChaCha8Rng,
    /// Picks the held-out batch the PPO reward is measured on.
    probe_rng: ChaCha8Rng,
    pending: Vec<Trajectory>,
    batches_since_update: usize,
}

impl StudentTrainer {
    /// `pseudo` boxes are in original image coordinates.
    pub fn new(model: Model, config: StudentConfig, pseudo: &[PseudoLabel]) -> Result<Self> {
        config.distill.validate()?;
        config.ppo.validate()?;
        let policy = match config.distill.mode {
            DistillMode::Ppo => Some(Policy::new(config.policy_seed)?),
            _ => None,
        };
        let mut by_image: HashMap<u64, Vec<PseudoLabel>> = HashMap::new();
        for p in pseudo {
            by_image.entry(p.image_id).or_default().push(*p);
        }
        let mut probe_rng = ChaCha8Rng::seed_from_u64(config.policy_seed);
        probe_rng.set_stream(1);
        Ok(Self {
            trainer: Trainer::new(model, config.train.clone())?,
            policy_rng: ChaCha8Rng::seed_from_u64(config.policy_seed),
            probe_rng,
            config,
            policy,
            decision_log: Vec::new(),
            update_stats: Vec::new(),
            pseudo: by_image,
            pending: Vec::new(),
            batches_since_update: 0,
        })
    }

    pub fn step(&mut self, samples: &[Sample]) -> Result<StudentStep> {
        let indices = self.trainer.next_indices(samples.len());
        let batch = self.trainer.prepare_batch(samples, indices)?;
        let model_cfg = self.trainer.model.config.clone();
        let head = self.trainer.forward(&batch)?;
        if self.config.distill.mode == DistillMode::None {
            let loss = detection_loss(&head, &model_cfg, &batch.targets)?;
            let values = self.trainer.apply(&loss)?;
            return Ok(StudentStep { step: self.trainer.step, loss: values, candidates: 0, accepted: 0 });
        }

        let side = model_cfg.input_size as f64;
        let raw = head.decode_raw(0.0)?;
        // Candidates are keyed by batch position; a sample can repeat
        // across an epoch boundary.
        let mut pseudo_in_frame = Vec::new();
        let mut student = HashMap::new();
        let mut areas = HashMap::new();
        for (pos, (&i, aug)) in batch.indices.iter().zip(&batch.augments).enumerate() {
            let s = &samples[i];
            for p in self.pseudo.get(&s.image_id).map(|v| v.as_slice()).unwrap_or(&[]) {
                let bbox = aug.apply_box(&p.bbox.scale(s.scale.0, s.scale.1), side, side);
                pseudo_in_frame.push(PseudoLabel { image_id: pos as u64, bbox, ..*p });
            }
            student.insert(pos as u64, raw[pos].clone());
            areas.insert(pos as u64, side * side);
        }
        let cands = build_candidates(&pseudo_in_frame, &student, &areas, model_cfg.num_classes)?;
        let sel = select_candidates(
            &cands,
            &self.config.distill,
            self.policy.as_ref(),
            model_cfg.num_classes,
            &mut self.policy_rng,
        )?;
        let mut accepted: Vec<Vec<Target>> = vec![Vec::new(); batch.indices.len()];
        for p in &sel.accepted {
            accepted[p.image_id as usize].push(Target::new(p.bbox, p.class));
        }
        let loss = distill_loss(&head, &model_cfg, &batch.targets, &accepted, &self.config.distill)?;
        let probe = match self.config.distill.mode {
            DistillMode::Ppo => Some(self.probe_batch(samples, &batch.indices)?),
            _ => None,
        };
        let before = probe.as_ref().map(|p| self.probe_loss(p)).transpose()?;
        let values = self.trainer.apply(&loss)?;

        let mut decisions = sel.decisions;
        for d in decisions.iter_mut() {
            d.image_id = samples[batch.indices[d.image_id as usize]].image_id;
        }
        if let (Some(before), Some(probe)) = (before, &probe) {
            let after = self.probe_loss(probe)?;
            let flags: Vec<bool> = sel.transitions.iter().map(|t| t.accept).collect();
            let rewards = compute_reward(&flags, before, after, &self.config.ppo)?;
            let mut steps = sel.transitions;
            for ((t, d), r) in steps.iter_mut().zip(decisions.iter_mut()).zip(&rewards) {
                t.reward = *r;
                d.reward = Some(*r);
            }
            if !steps.is_empty() {
                self.pending.push(Trajectory { steps, terminal_value: 0.0 });
            }
            self.batches_since_update += 1;
            if self.batches_since_update >= self.config.ppo.update_interval && !self.pending.is_empty() {
                let policy = self.policy.as_mut().ok_or_else(|| ModelError::Distill("ppo mode needs a policy".into()))?;
                let stats = update_policy(policy, &self.pending, &self.config.ppo, &mut self.policy_rng)?;
                log::debug!("policy update at step {}: {stats:?}", self.trainer.step);
                self.update_stats.push(stats);
                self.pending.clear();
                self.batches_since_update = 0;
            }
        }
        let n_accepted = decisions.iter().filter(|d| d.accept).count();
        let n_candidates = decisions.len();
        self.decision_log.extend(decisions);
        Ok(StudentStep { step: self.trainer.step, loss: values, candidates: n_candidates, accepted: n_accepted })
    }

    /// Un-augmented ground-truth batch of images outside `exclude`
    /// (all images if too few remain).
    fn probe_batch(&mut self, samples: &[Sample], exclude: &[usize]) -> Result<(Tensor, Vec<Vec<Target>>)> {
        let mut pool: Vec<usize> = (0..samples.len()).filter(|i| !exclude.contains(i)).collect();
        let n = self.trainer.config.batch_size.min(samples.len());
        if pool.len() < n {
            pool = (0..samples.len()).collect();
        }
        let picked: Vec<usize> = pool.choose_multiple(&mut self.probe_rng, n).copied().collect();
        let images: Vec<&image::RgbImage> = picked.iter().map(|&i| &samples[i].image).collect();
        let targets = picked.iter().map(|&i| samples[i].targets.clone()).collect();
        Ok((self.trainer.model.images_to_tensor(&images)?, targets))
    }

    fn probe_loss(&self, probe: &(Tensor, Vec<Vec<Target>>)) -> Result<f64> {
        let head = self.trainer.model.forward(&probe.0)?;
        Ok(detection_loss(&head, &self.trainer.model.config, &probe.1)?.values()?.total)
    }

    pub fn fit(&mut self, samples: &[Sample], mut on_step: impl FnMut(&StudentStep)) -> Result<()> {
        if samples.is_empty() {
            return Err(ModelError::InvalidConfig("no training samples".into()));
        }
        while self.trainer.step < self.trainer.config.steps {
            let s = self.step(samples)?;
            on_step(&s);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_trainer(&self.trainer)?;
        if let Some(p) = &self.policy {
            ck.policy = Some(p.state()?);
        }
        Ok(ck)
    }
}
