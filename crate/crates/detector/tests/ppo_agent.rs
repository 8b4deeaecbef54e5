use lesion_detector::ppo::{
    bandit, clipped_surrogate, compute_gae, normalize_advantages, policy_forward, update_policy, DecisionState, Policy,
    PpoConfig, Trajectory, Transition,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Advantages straight from the definition: discounted sums of TD errors.
fn brute_gae(r: &[f64], v: &[f64], terminal: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let next = |t: usize| if t + 1 < n { v[t + 1] } else { terminal };
    (0..n)
        .map(|t| (t..n).map(|l| (gamma * lambda).powi((l - t) as i32) * (r[l] + gamma * next(l) - v[l])).sum())
        .collect()
}

#[test]
fn gae_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let r: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let terminal = rng.gen_range(-1.0..1.0);
        let (gamma, lambda) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
        let (adv, ret) = compute_gae(&r, &v, terminal, gamma, lambda);
        for (t, (a, b)) in adv.iter().zip(brute_gae(&r, &v, terminal, gamma, lambda)).enumerate() {
            assert!((a - b).abs() <= 1e-10);
            assert!((ret[t] - (a + v[t])).abs() <= 1e-12);
        }
    }
}

#[test]
fn gae_limits_in_lambda() {
    let r = [0.3, -0.2, 1.0, 0.0, 0.5];
    let v = [0.1, 0.4, -0.3, 0.2, 0.6];
    let (terminal, gamma) = (0.25, 0.9);
    let (td, _) = compute_gae(&r, &v, terminal, gamma, 0.0);
    for t in 0..5 {
        let next = if t < 4 { v[t + 1] } else { terminal };
        assert!((td[t] - (r[t] + gamma * next - v[t])).abs() <= 1e-12);
    }
    let (mc, _) = compute_gae(&r, &v, terminal, gamma, 1.0);
    for t in 0..5 {
        let ret: f64 = (t..5).map(|l| gamma.powi((l - t) as i32) * r[l]).sum::<f64>() + gamma.powi((5 - t) as i32) * terminal;
        assert!((mc[t] - (ret - v[t])).abs() <= 1e-12);
    }
}

#[test]
fn surrogate_never_exceeds_clip_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (ratio, adv, eps) = (rng.gen_range(0.01..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.05..0.5));
        let s: f64 = clipped_surrogate(ratio, adv, eps);
        assert!(s <= ratio * adv + 1e-12);
        assert!(s <= (ratio as f64).clamp(1.0 - eps, 1.0 + eps) * adv + 1e-12);
    }
}

#[test]
fn probabilities_stay_open_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = Policy::new(7).unwrap();
    // Give the policy head non-zero weights so the sweep is not trivial.
    let w: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
    policy.params.set_values("policy.weight", &w).unwrap();
    for _ in 0..1000 {
        let s = DecisionState {
            area_norm: rng.gen(),
            teacher_conf: rng.gen(),
            student_entropy: rng.gen_range(0.0..2f64.ln()),
        };
        let (p, v) = policy_forward(&policy, &s, 2).unwrap();
        assert!(p > 0.0 && p < 1.0 && v.is_finite());
    }
    let bad = DecisionState { area_norm: f64::NAN, teacher_conf: 0.5, student_entropy: 0.1 };
    assert!(policy_forward(&policy, &bad, 2).is_err());
}

fn random_trajectories(policy: &Policy, rng: &mut ChaCha8Rng) -> Vec<Trajectory> {
    (0..4)
        .map(|_| {
            let states = bandit::sample_states(20, rng);
            let steps: Vec<Transition> = policy
                .act(&states, rng)
                .unwrap()
                .into_iter()
                .map(|mut t| {
                    t.reward = rng.gen_range(-1.0..1.0);
                    t
                })
                .collect();
            Trajectory { steps, terminal_value: 0.0 }
        })
        .collect()
}

#[test]
fn zero_learning_rate_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut policy = Policy::new(1).unwrap();
    let trajs = random_trajectories(&policy, &mut rng);
    let before = policy.params.to_saved().unwrap();
    let cfg = PpoConfig { lr: 0.0, minibatch_size: 16, ..Default::default() };
    let stats = update_policy(&mut policy, &trajs, &cfg, &mut rng).unwrap();
    assert_eq!(policy.params.to_saved().unwrap(), before);
    assert!((stats.mean_ratio - 1.0).abs() < 1e-12, "{stats:?}");
    assert_eq!(stats.clip_fraction, 0.0);
}

#[test]
fn clip_fraction_is_a_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut policy = Policy::new(2).unwrap();
    let cfg = PpoConfig { lr: 0.05, minibatch_size: 8, ..Default::default() };
    for _ in 0..5 {
        let trajs = random_trajectories(&policy, &mut rng);
        let stats = update_policy(&mut policy, &trajs, &cfg, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&stats.clip_fraction));
        assert!(stats.entropy >= 0.0 && stats.entropy <= 2f64.ln() + 1e-12);
    }
    assert!(update_policy(&mut policy, &[], &cfg, &mut rng).is_err());
}

#[test]
fn advantage_normalization_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in [2usize, 5, 64] {
        let mut a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        normalize_advantages(&mut a);
        let mean = a.iter().sum::<f64>() / n as f64;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(mean.abs() <= 1e-6 && (std - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn bandit_gate_converges() {
    let cfg = PpoConfig::default();
    for seed in 0..3 {
        let run = bandit::run(seed, 200, 256, 0.95, &cfg).unwrap();
        println!("seed {seed}: reached {:?}, final {:.3}", run.reached_at, run.curve.last().unwrap());
        assert!(run.reached_at.is_some());
    }
}
