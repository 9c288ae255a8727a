use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spgl_core::env::{PointMass, PointMassParams};
use spgl_core::gaussian::{ContextDistribution, TargetSpec};
use spgl_core::learner::{learner_registry, LearnerConfig, LearnerSetup};
use spgl_core::oracle::{dispatch_mode, solve_exact_sampled, ExactSolverSettings, SolveMode};
use spgl_core::stats::RolloutBatch;
use spgl_core::update::{update, CurriculumConfig};
use spgl_core::vecops::norm;

fn cfg(eps: f64, v_lower: f64) -> CurriculumConfig {
    CurriculumConfig {
        epsilon: eps,
        v_lower,
        ..Default::default()
    }
}

fn params(d: &ContextDistribution) -> Vec<f64> {
    d.mu().iter().chain(d.theta()).copied().collect()
}

fn param_distance(a: &ContextDistribution, b: &ContextDistribution) -> f64 {
    let (pa, pb) = (params(a), params(b));
    norm(&pa.iter().zip(&pb).map(|(x, y)| x - y).collect::<Vec<_>>())
}

/// Random 3-d distribution with a smooth value bump; `offset` moves V-bar around `v_lower = 5`.
fn instance(rng: &mut ChaCha8Rng, offset: f64) -> (ContextDistribution, RolloutBatch) {
    let d = 3;
    let target = TargetSpec::new(
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..d).map(|_| rng.random_range(0.2..2.0)).collect(),
    )
    .unwrap();
    let dist = ContextDistribution::new(
        (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..d).map(|_| rng.random_range(0.5..3.0)).collect(),
        target,
    )
    .unwrap();
    let center: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let contexts = dist.sample(rng, 64);
    let values: Vec<f64> = contexts
        .iter()
        .map(|c| {
            let d2: f64 = c.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum();
            offset + 6.0 * (-0.25 * d2).exp()
        })
        .collect();
    let batch = RolloutBatch::from_values(contexts, &values, dist.clone()).unwrap();
    (dist, batch)
}

fn exact(batch: &RolloutBatch, dist: &ContextDistribution, c: &CurriculumConfig) -> (SolveMode, ContextDistribution) {
    let mode = dispatch_mode(batch, dist, c).unwrap();
    let sol = solve_exact_sampled(batch, dist, c, mode, &ExactSolverSettings::default()).unwrap();
    (mode, sol.dist)
}

#[test]
fn small_trust_region_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..20 {
        let offset = if i % 2 == 0 { 0.0 } else { 8.0 };
        let (dist, batch) = instance(&mut rng, offset);
        let c = cfg(1e-6, 5.0);
        let (closed, _) = update(&dist, &batch, &c).unwrap();
        let (_, ex) = exact(&batch, &dist, &c);
        let gap = param_distance(&closed, &ex);
        assert!(gap < 1e-3, "instance {i}: gap {gap:e}");
    }
}

#[test]
fn linearization_error_is_bounded_by_ten_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for eps in [1e-3, 3e-4, 1e-4] {
        for i in 0..20 {
            let offset = if i % 2 == 0 { 0.0 } else { 8.0 };
            let (dist, batch) = instance(&mut rng, offset);
            let c = cfg(eps, 5.0);
            let (closed, _) = update(&dist, &batch, &c).unwrap();
            let (_, ex) = exact(&batch, &dist, &c);
            let gap = param_distance(&closed, &ex);
            assert!(gap <= 10.0 * eps, "eps {eps:e} instance {i}: gap {gap:e}");
        }
    }
}

/// Batch from the point-mass task under a fresh policy.
fn point_mass_batch(seed: u64) -> (ContextDistribution, RolloutBatch) {
    let env = PointMass::new(PointMassParams::default()).unwrap();
    let learner = learner_registry()
        .create(
            "reinforce",
            &LearnerSetup {
                config: LearnerConfig::default(),
                observation_dim: 4,
                context_dim: 3,
                action_dim: 2,
            },
        )
        .unwrap();
    let target = TargetSpec::new(vec![2.6, 0.7, 0.1], vec![9e-4, 4e-4, 1e-4]).unwrap();
    let dist = ContextDistribution::new(vec![0.0, 4.0, 2.0], vec![4.0, 3.5, 1.0], target).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rollouts = dist
        .sample(&mut rng, 64)
        .iter()
        .map(|c| learner.rollout(&env, &c.0, &mut rng, false).unwrap())
        .collect();
    (dist.clone(), RolloutBatch::new(rollouts, dist).unwrap())
}

#[test]
fn exact_solver_dominates_closed_form_on_point_mass() {
    for seed in 0..3 {
        let (dist, batch) = point_mass_batch(seed);
        let eps = 0.01;
        // a threshold above the batch mean forces a performance step
        let c = cfg(eps, batch.mean_value() + 10.0);
        let (mode, ex) = exact(&batch, &dist, &c);
        assert_eq!(mode, SolveMode::Performance);
        let (closed, _) = update(&dist, &batch, &c).unwrap();
        let kl = ex.kl_between(&dist).unwrap();
        assert!(kl <= eps + 1e-8, "seed {seed}: kl {kl:e}");
        let v_exact = batch.weighted_value(&ex).unwrap();
        let v_closed = batch.weighted_value(&closed).unwrap();
        assert!(v_exact >= v_closed - 1e-4, "seed {seed}: exact {v_exact} closed {v_closed}");
    }
}
