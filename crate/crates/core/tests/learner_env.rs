use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spgl_core::env::{synthetic_value, Environment, PointMass, PointMassParams, Synthetic, SyntheticParams};
use spgl_core::gaussian::{ContextSample, TargetSpec};
use spgl_core::harness::median;
use spgl_core::learner::{learner_registry, Learner, LearnerConfig, LearnerSetup, Optimizer, Reinforce};
use spgl_core::stats::RolloutBatch;

fn learner_for(env: &dyn Environment, config: LearnerConfig) -> Box<dyn Learner> {
    learner_registry()
        .create(
            "reinforce",
            &LearnerSetup {
                config,
                observation_dim: env.observation_dim(),
                context_dim: env.context_dim(),
                action_dim: env.action_dim(),
            },
        )
        .unwrap()
}

fn point_mass() -> PointMass {
    PointMass::new(PointMassParams::default()).unwrap()
}

const EASY: [f64; 3] = [0.0, 4.0, 2.0];

fn batch_at(learner: &dyn Learner, env: &dyn Environment, context: &[f64], k: usize, seed: u64) -> RolloutBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rollouts = (0..k).map(|_| learner.rollout(env, context, &mut rng, false).unwrap()).collect();
    let source = TargetSpec::new(context.to_vec(), vec![1.0; context.len()]).unwrap().as_distribution();
    RolloutBatch::new(rollouts, source).unwrap()
}

#[test]
fn zero_discount_keeps_first_reward() {
    let env = point_mass();
    let learner = learner_for(&env, LearnerConfig { gamma: 0.0, ..Default::default() });
    let r = learner.rollout(&env, &EASY, &mut ChaCha8Rng::seed_from_u64(3), false).unwrap();
    assert!(r.trajectory.len() > 1);
    assert_eq!(r.value_estimate, r.trajectory[0].reward);
}

#[test]
fn discounted_return_matches_trajectory() {
    let env = point_mass();
    let gamma = 0.97;
    let learner = learner_for(&env, LearnerConfig { gamma, ..Default::default() });
    let r = learner.rollout(&env, &[1.0, 1.0, 0.5], &mut ChaCha8Rng::seed_from_u64(4), false).unwrap();
    let g: f64 = r.trajectory.iter().rev().fold(0.0, |acc, t| t.reward + gamma * acc);
    assert!((r.value_estimate - g).abs() < 1e-9 * (1.0 + g.abs()));
    let (lo, hi) = env.reward_bounds();
    let h = env.horizon() as f64;
    assert!(r.value_estimate >= h * lo.min(0.0) && r.value_estimate <= h * hi.max(0.0));
}

#[test]
fn synthetic_return_is_the_value_surface() {
    let params = SyntheticParams { center: vec![0.5, -1.0], width: 0.8 };
    let env = Synthetic::new(params.clone()).unwrap();
    let learner = learner_for(&env, LearnerConfig::default());
    assert!(learner.parameters().to_flat().iter().all(|w| *w == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for c in [[0.5, -1.0], [0.0, 0.0], [2.0, 1.0]] {
        let r = learner.rollout(&env, &c, &mut rng, false).unwrap();
        assert_eq!(r.value_estimate, synthetic_value(&c, &params.center, params.width).unwrap());
    }
}

#[test]
fn rollouts_are_deterministic_per_seed() {
    let env = point_mass();
    let learner = learner_for(&env, LearnerConfig { init_log_std: 0.5, ..Default::default() });
    let a = learner.rollout(&env, &[1.5, 1.0, 0.3], &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
    let b = learner.rollout(&env, &[1.5, 1.0, 0.3], &mut ChaCha8Rng::seed_from_u64(9), false).unwrap();
    let c = learner.rollout(&env, &[1.5, 1.0, 0.3], &mut ChaCha8Rng::seed_from_u64(10), false).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn equal_returns_leave_parameters_unchanged() {
    let env = point_mass();
    for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
        let mut learner = learner_for(&env, LearnerConfig { optimizer, ..Default::default() });
        let mut batch_rollouts = batch_at(learner.as_ref(), &env, &EASY, 8, 1).rollouts().to_vec();
        for r in &mut batch_rollouts {
            r.value_estimate = 2.5;
        }
        let source = TargetSpec::new(EASY.to_vec(), vec![1.0; 3]).unwrap().as_distribution();
        let batch = RolloutBatch::new(batch_rollouts, source).unwrap();
        let before = learner.parameters().to_flat();
        learner.improve(&batch);
        let after = learner.parameters().to_flat();
        let moved = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved <= 1e-12, "{optimizer:?}: moved {moved:e}");
    }
}

#[test]
fn action_independent_reward_leaves_parameters_unchanged() {
    let env = Synthetic::new(SyntheticParams { center: vec![0.0, 0.0], width: 1.0 }).unwrap();
    let mut learner = learner_for(&env, LearnerConfig { context_visible: true, ..Default::default() });
    let target = TargetSpec::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap().as_distribution();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let contexts: Vec<ContextSample> = target.sample(&mut rng, 16);
    let rollouts = contexts.iter().map(|c| learner.rollout(&env, &c.0, &mut rng, false).unwrap()).collect();
    let batch = RolloutBatch::new(rollouts, target).unwrap();
    let before = learner.parameters().to_flat();
    learner.improve(&batch);
    assert_eq!(before, learner.parameters().to_flat());
}

#[test]
fn likelihood_ratio_gradient_matches_finite_differences() {
    let env = point_mass();
    let mut learner = learner_for(&env, LearnerConfig { init_log_std: -0.5, ..Default::default() });
    // move off the all-zero policy so every feature weight matters
    let mut params = learner.parameters().clone();
    let flat: Vec<f64> = params.to_flat().iter().enumerate().map(|(i, _)| 0.05 * ((i as f64) * 0.7).sin()).collect();
    params = params.from_flat(&flat);
    learner.set_parameters(params.clone()).unwrap();
    let batch = batch_at(learner.as_ref(), &env, &[1.0, 2.0, 0.5], 6, 8);
    let adv = Reinforce::advantages(&batch);
    let grad = Reinforce::gradient(&params, &batch, &adv);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] += h;
        let up = Reinforce::surrogate(&params.from_flat(&p), &batch, &adv);
        p[i] -= 2.0 * h;
        let down = Reinforce::surrogate(&params.from_flat(&p), &batch, &adv);
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / (1.0 + grad[i].abs()));
    }
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

/// Learning smoke test on the easy context with the setup-1 learner settings.
#[test]
fn fifty_improve_calls_raise_the_easy_context_return() {
    let env = point_mass();
    let config = LearnerConfig {
        gamma: 0.999,
        learning_rate: 0.005,
        init_log_std: 1.0,
        ..Default::default()
    };
    let mut gains = Vec::new();
    for seed in 0..5 {
        let mut learner = learner_for(&env, config.clone());
        let mut means = Vec::new();
        for i in 0..50 {
            let batch = batch_at(learner.as_ref(), &env, &EASY, 64, 1000 * seed + i);
            means.push(batch.mean_value());
            learner.improve(&batch);
        }
        let first = means[..5].iter().sum::<f64>() / 5.0;
        let last = means[45..].iter().sum::<f64>() / 5.0;
        gains.push((last - first) / first.abs());
    }
    let m = median(&gains);
    assert!(m >= 0.10, "median relative gain {m:.3} ({gains:?})");
}
