//! PPO over three-feature decision states: a small two-head MLP (sigmoid
//! accept probability and a value estimate), GAE, the clipped surrogate
//! and the policy update.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::layers::{sigmoid, softplus};
use crate::params::{Adam, AdamConfig, AdamState, ParamStore, SavedTensor};

pub const STATE_DIM: usize = 3;
pub const HIDDEN: usize = 32;

/// Features of one distillation decision. `student_entropy` is in nats;
/// it is divided by ln C before entering the policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionState {
    pub area_norm: f64,
    pub teacher_conf: f64,
    pub student_entropy: f64,
}

impl DecisionState {
    pub fn normalized(&self, num_classes: usize) -> Result<[f64; 3]> {
        let max_entropy = (num_classes as f64).ln();
        let v = [self.area_norm, self.teacher_conf, self.student_entropy / max_entropy];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::Policy(format!("non-finite state {self:?}")));
        }
        Ok(v.map(|x| x.clamp(0.0, 1.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Normalised state.
    pub state: [f64; 3],
    pub accept: bool,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub terminal_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub accept_cost: f64,
    pub update_interval: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch_size: 32,
            lr: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            accept_cost: 0.01,
            update_interval: 16,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clip_epsilon > 0.0
            && self.clip_epsilon < 1.0
            && (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.epochs > 0
            && self.minibatch_size > 0
            && self.lr >= 0.0
            && self.update_interval > 0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Policy(format!("invalid PPO config {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub params: ParamStore,
    pub optimizer: Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub params: std::collections::BTreeMap<String, SavedTensor>,
    pub optimizer: AdamState,
}

fn linear(ps: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = ps.get(&format!("{name}.weight"))?;
    let b = ps.get(&format!("{name}.bias"))?;
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

impl Policy {
    /// Trunk layers get a LeCun-uniform init; the policy head starts at
    /// zero so the initial accept probability is exactly 0.5.
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(DType::F64, Device::Cpu);
        for (name, fan_in, fan_out) in [("trunk0", STATE_DIM, HIDDEN), ("trunk1", HIDDEN, HIDDEN)] {
            ps.uniform(&format!("{name}.weight"), &[fan_out, fan_in], (3.0 / fan_in as f64).sqrt(), &mut rng)?;
            ps.constant(&format!("{name}.bias"), &[fan_out], 0.0)?;
        }
        ps.constant("policy.weight", &[1, HIDDEN], 0.0)?;
        ps.constant("policy.bias", &[1], 0.0)?;
        ps.uniform("value.weight", &[1, HIDDEN], (3.0 / HIDDEN as f64).sqrt() * 0.1, &mut rng)?;
        ps.constant("value.bias", &[1], 0.0)?;
        let optimizer = Adam::new(&ps, AdamConfig::default())?;
        Ok(Self { params: ps, optimizer })
    }

    /// Accept logits and values for an (n, 3) batch of normalised states.
    pub fn forward(&self, states: &Tensor) -> Result<(Tensor, Tensor)> {
        // Features arrive in [0, 1]; the trunk sees them centred on zero.
        let centred = ((states - 0.5)? * 2.0)?;
        let h = linear(&self.params, "trunk0", &centred)?.tanh()?;
        let h = linear(&self.params, "trunk1", &h)?.tanh()?;
        let logits = linear(&self.params, "policy", &h)?.squeeze(1)?;
        let values = linear(&self.params, "value", &h)?.squeeze(1)?;
        Ok((logits, values))
    }

    fn states_tensor(states: &[[f64; 3]]) -> Result<Tensor> {
        let flat: Vec<f64> = states.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (states.len(), STATE_DIM), &Device::Cpu)?)
    }

    /// Accept probabilities and values for a batch of normalised states.
    pub fn evaluate(&self, states: &[[f64; 3]]) -> Result<Vec<(f64, f64)>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        if states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ModelError::Policy("non-finite state".into()));
        }
        let (logits, values) = self.forward(&Self::states_tensor(states)?)?;
        let p = sigmoid(&logits)?.to_vec1::<f64>()?;
        let v = values.to_vec1::<f64>()?;
        Ok(p.into_iter().zip(v).collect())
    }

    /// Samples accept/reject for each state, returning the transitions
    /// with zero reward.
    pub fn act(&self, states: &[[f64; 3]], rng: &mut impl Rng) -> Result<Vec<Transition>> {
        Ok(self
            .evaluate(states)?
            .into_iter()
            .zip(states)
            .map(|((p, value), state)| {
                let accept = rng.gen::<f64>() < p;
                let log_prob = if accept { p.ln() } else { (1.0 - p).ln() };
                Transition { state: *state, accept, log_prob, reward: 0.0, value }
            })
            .collect())
    }

    pub fn state(&self) -> Result<PolicyState> {
        Ok(PolicyState { params: self.params.to_saved()?, optimizer: self.optimizer.state()? })
    }

    pub fn from_state(state: &PolicyState) -> Result<Self> {
        let mut policy = Self::new(0)?;
        policy.params.load_saved(&state.params)?;
        policy.optimizer = Adam::from_state(&state.optimizer, &policy.params)?;
        Ok(policy)
    }
}

/// Accept probability and value estimate for one decision state.
pub fn policy_forward(policy: &Policy, state: &DecisionState, num_classes: usize) -> Result<(f64, f64)> {
    let s = state.normalized(num_classes)?;
    Ok(policy.evaluate(&[s])?[0])
}

/// Generalised advantage estimates and returns for one trajectory.
pub fn compute_gae(rewards: &[f64], values: &[f64], terminal_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "rewards and values must have equal length");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { terminal_value };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// Shared clipped loss improvement for every decision of a batch, minus
/// the accept cost on accepted ones.
pub fn compute_reward(accepted: &[bool], loss_before: f64, loss_after: f64, config: &PpoConfig) -> Result<Vec<f64>> {
    if !loss_before.is_finite() || !loss_after.is_finite() {
        return Err(ModelError::Policy(format!("non-finite losses {loss_before} / {loss_after}")));
    }
    let base = (loss_before - loss_after).clamp(-1.0, 1.0);
    Ok(accepted.iter().map(|&a| if a { base - config.accept_cost } else { base }).collect())
}

/// Shifts to zero mean and scales to unit variance; all zeros when the
/// variance underflows.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean probability ratio over the first epoch.
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub fn update_policy(policy: &mut Policy, trajectories: &[Trajectory], config: &PpoConfig, rng: &mut impl Rng) -> Result<UpdateStats> {
    config.validate()?;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut old_logp = Vec::new();
    let mut advantages = Vec::new();
    let mut returns = Vec::new();
    for traj in trajectories {
        let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = traj.steps.iter().map(|s| s.value).collect();
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(ModelError::Policy("non-finite reward".into()));
        }
        let (adv, ret) = compute_gae(&rewards, &values, traj.terminal_value, config.gamma, config.gae_lambda);
        for (s, (a, r)) in traj.steps.iter().zip(adv.into_iter().zip(ret)) {
            states.push(s.state);
            actions.push(if s.accept { 1.0 } else { 0.0 });
            old_logp.push(s.log_prob);
            advantages.push(a);
            returns.push(r);
        }
    }
    if states.is_empty() {
        return Err(ModelError::Policy("no transitions to learn from".into()));
    }
    normalize_advantages(&mut advantages);
    let n = states.len();
    let eps = config.clip_epsilon;
    let mut order: Vec<usize> = (0..n).collect();
    let (mut ratio_sum, mut ratio_count) = (0.0, 0usize);
    let (mut clipped, mut seen) = (0usize, 0usize);
    let (mut pl_sum, mut vl_sum, mut ent_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch_size) {
            let pick = |v: &[f64]| -> Result<Tensor> {
                Ok(Tensor::from_vec(chunk.iter().map(|&i| v[i]).collect::<Vec<f64>>(), chunk.len(), &Device::Cpu)?)
            };
            let mb_states: Vec<[f64; 3]> = chunk.iter().map(|&i| states[i]).collect();
            let (logits, values) = policy.forward(&Policy::states_tensor(&mb_states)?)?;
            let act = pick(&actions)?;
            let log_accept = softplus(&logits.neg()?)?.neg()?;
            let log_reject = softplus(&logits)?.neg()?;
            let logp = ((&act * &log_accept)? + ((1.0 - &act)? * &log_reject)?)?;
            let ratio = (logp - pick(&old_logp)?)?.exp()?;
            let adv = pick(&advantages)?;
            let surr = (&ratio * &adv)?.minimum(&(ratio.clamp(1.0 - eps, 1.0 + eps)? * &adv)?)?;
            let p = sigmoid(&logits)?;
            let entropy = ((&p * softplus(&logits.neg()?)?)? + ((1.0 - &p)? * softplus(&logits)?)?)?;
            let value_err = (values - pick(&returns)?)?.sqr()?;
            let policy_loss = surr.mean_all()?.neg()?;
            let entropy_mean = entropy.mean_all()?;
            let value_loss = value_err.mean_all()?;
            let loss = ((&policy_loss - (&entropy_mean * config.entropy_coef)?)? + (&value_loss * config.value_coef)?)?;

            let ratios = ratio.to_vec1::<f64>()?;
            if epoch == 0 {
                ratio_sum += ratios.iter().sum::<f64>();
                ratio_count += ratios.len();
            }
            clipped += ratios.iter().filter(|r| (*r - 1.0).abs() > eps).count();
            seen += ratios.len();
            pl_sum += policy_loss.to_scalar::<f64>()?;
            vl_sum += value_loss.to_scalar::<f64>()?;
            ent_sum += entropy_mean.to_scalar::<f64>()?;
            batches += 1;

            let grads = loss.backward()?;
            policy.optimizer.step(&policy.params, &grads, config.lr)?;
        }
    }
    let b = batches as f64;
    Ok(UpdateStats {
        mean_ratio: ratio_sum / ratio_count as f64,
        clip_fraction: clipped as f64 / seen as f64,
        policy_loss: pl_sum / b,
        value_loss: vl_sum / b,
        entropy: ent_sum / b,
    })
}


/// The synthetic contextual bandit used to check that the gate can learn
/// a known accept rule: accepting pays 1 iff `teacher_conf > 0.5` and
/// `area_norm < 0.25`, rejecting pays 1 otherwise.
pub mod bandit {
    use super::*;

    pub fn should_accept(state: &[f64; 3]) -> bool {
        state[1] > 0.5 && state[0] < 0.25
    }

    pub fn reward(state: &[f64; 3], accept: bool) -> f64 {
        if accept == should_accept(state) {
            1.0
        } else {
            0.0
        }
    }

    pub fn sample_states(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    /// Average reward of the oracle policy over `states`, found by trying
    /// both actions on every state.
    pub fn oracle_reward(states: &[[f64; 3]]) -> f64 {
        states.iter().map(|s| reward(s, true).max(reward(s, false))).sum::<f64>() / states.len() as f64
    }

    /// Average reward of the greedy gate (accept iff p > 0.5).
    pub fn greedy_reward(policy: &Policy, states: &[[f64; 3]]) -> Result<f64> {
        let probs = policy.evaluate(states)?;
        Ok(states.iter().zip(probs).map(|(s, (p, _))| reward(s, p > 0.5)).sum::<f64>() / states.len() as f64)
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct BanditRun {
        /// Greedy reward over oracle reward after each update.
        pub curve: Vec<f64>,
        /// First update (1-based) reaching `target`, if any.
        pub reached_at: Option<usize>,
    }

    /// Trains a fresh policy for up to `updates` updates of
    /// `decisions_per_update` one-step episodes each.
    pub fn run(seed: u64, updates: usize, decisions_per_update: usize, target: f64, config: &PpoConfig) -> Result<BanditRun> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = Policy::new(seed)?;
        let eval_states = sample_states(2000, &mut rng);
        let oracle = oracle_reward(&eval_states);
        let mut curve = Vec::with_capacity(updates);
        let mut reached_at = None;
        for u in 1..=updates {
            let states = sample_states(decisions_per_update, &mut rng);
            let trajectories: Vec<Trajectory> = policy
                .act(&states, &mut rng)?
                .into_iter()
                .map(|mut t| {
                    t.reward = reward(&t.state, t.accept);
                    Trajectory { steps: vec![t], terminal_value: 0.0 }
                })
                .collect();
            update_policy(&mut policy, &trajectories, config, &mut rng)?;
            let frac = greedy_reward(&policy, &eval_states)? / oracle;
            curve.push(frac);
            if reached_at.is_none() && frac >= target {
                reached_at = Some(u);
            }
        }
        Ok(BanditRun { curve, reached_at })
    }
}
