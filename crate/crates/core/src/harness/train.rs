use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::curriculum::curriculum_registry;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::gaussian::{ContextDistribution, TargetSpec};
use crate::learner::{learner_registry, Learner, LearnerSetup};
use crate::stats::RolloutBatch;

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const CONTEXTS: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const EVAL_CONTEXTS: u64 = 3;
    pub const EVAL_ROLLOUT: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one random stream, mixed from the master seed and a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |h, p| splitmix64(h ^ splitmix64(*p)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// One row of the training log, written after every curriculum update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean Monte Carlo return of the training batch.
    pub mean_return: f64,
    /// Percentage of successful training episodes.
    pub success_rate: f64,
    pub kl_to_target: f64,
    pub kl_step: f64,
    pub step_kind: String,
    pub active_case: String,
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
    /// Not part of the CSV.
    #[serde(skip)]
    pub kl_step_mean: f64,
    #[serde(skip)]
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Turn degraded-update warnings into [`Error::StrictWarning`].
    pub strict: bool,
}

pub struct TrainingRun {
    pub seed: u64,
    pub records: Vec<IterationRecord>,
    pub learner: Box<dyn Learner>,
    pub environment: Box<dyn Environment>,
    pub distribution: ContextDistribution,
}

/// Learner built for `config`'s environment.
pub fn build_learner(config: &ExperimentConfig, env: &dyn Environment) -> Result<Box<dyn Learner>> {
    let setup = LearnerSetup {
        config: config.learner.clone(),
        observation_dim: env.observation_dim(),
        context_dim: env.context_dim(),
        action_dim: env.action_dim(),
    };
    learner_registry().create(&config.learner.kind, &setup)
}

/// Sample, roll out, improve the policy and (every `update_period` iterations)
/// update the curriculum.
pub fn run_training(config: &ExperimentConfig, seed: u64, options: &RunOptions) -> Result<TrainingRun> {
    config.validate()?;
    let env = config.build_environment()?;
    let mut learner = build_learner(config, env.as_ref())?;
    let mut curriculum = curriculum_registry().create(&config.curriculum_mode, &config.curriculum_setup()?)?;
    let k = config.curriculum.k_contexts;
    let period = config.curriculum.update_period;
    let mut records = Vec::with_capacity(config.total_iterations / period);

    for i in 1..=config.total_iterations {
        let dist = curriculum.distribution().clone();
        let contexts = dist.sample(&mut rng_for(seed, &[stream::CONTEXTS, i as u64]), k);
        let mut rollouts = Vec::with_capacity(k);
        for (j, c) in contexts.iter().enumerate() {
            let mut rng = rng_for(seed, &[stream::ROLLOUT, i as u64, j as u64]);
            rollouts.push(learner.rollout(env.as_ref(), c, &mut rng, false)?);
        }
        let batch = RolloutBatch::new(rollouts, dist)?;
        let improve = learner.improve(&batch);
        if improve.steps_skipped > 0 && options.strict {
            return Err(Error::StrictWarning(format!("iteration {i}: non-finite policy gradient")));
        }
        if i % period != 0 {
            continue;
        }
        let step = curriculum.update(&batch)?;
        if let (Some(w), true) = (&step.warning, options.strict) {
            return Err(Error::StrictWarning(format!("iteration {i}: {w}")));
        }
        let next = curriculum.distribution();
        log::debug!(
            "iter {i}: return {:.3} kl_to_target {:.4e} {} {}",
            batch.mean_value(),
            next.kl_to_target(),
            step.step_kind,
            step.active_case
        );
        records.push(IterationRecord {
            iteration: i,
            mean_return: batch.mean_value(),
            success_rate: batch.success_rate(),
            kl_to_target: next.kl_to_target(),
            kl_step: step.kl_step,
            step_kind: step.step_kind,
            active_case: step.active_case,
            mu: next.mu().to_vec(),
            theta: next.theta().to_vec(),
            kl_step_mean: step.kl_step_mean,
            degenerate: step.degenerate,
        });
    }
    Ok(TrainingRun {
        seed,
        records,
        distribution: curriculum.distribution().clone(),
        learner,
        environment: env,
    })
}

fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

/// Writes the training log. Floats carry 9 significant digits.
pub fn write_records_csv<W: Write>(out: W, records: &[IterationRecord]) -> Result<()> {
    let d = records.first().map_or(0, |r| r.mu.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "iteration",
        "mean_return",
        "success_rate",
        "kl_to_target",
        "kl_step",
        "step_kind",
        "active_case",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..d).map(|j| format!("mu_{j}")));
    header.extend((0..d).map(|j| format!("theta_{j}")));
    w.write_record(&header).map_err(std::io::Error::from)?;
    for r in records {
        let mut row = vec![
            r.iteration.to_string(),
            fmt_float(r.mean_return),
            fmt_float(r.success_rate),
            fmt_float(r.kl_to_target),
            fmt_float(r.kl_step),
            r.step_kind.clone(),
            r.active_case.clone(),
        ];
        row.extend(r.mu.iter().chain(&r.theta).map(|x| fmt_float(*x)));
        w.write_record(&row).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_records_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_records_csv(std::fs::File::create(path)?, records)
}

/// Episode statistics on contexts drawn from the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_return_se: f64,
    /// Percentage.
    pub success_rate: f64,
    pub success_rate_se: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn evaluate(
    learner: &dyn Learner,
    target: &TargetSpec,
    env: &dyn Environment,
    n_episodes: usize,
    seed: u64,
    deterministic: bool,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidParameter("evaluation needs at least one episode".into()));
    }
    if n_episodes == 1 {
        log::warn!("single evaluation episode; standard errors reported as 0");
    }
    let contexts = target
        .as_distribution()
        .sample(&mut rng_for(seed, &[stream::EVAL_CONTEXTS]), n_episodes);
    let mut returns = Vec::with_capacity(n_episodes);
    let mut successes = Vec::with_capacity(n_episodes);
    for (j, c) in contexts.iter().enumerate() {
        let mut rng = rng_for(seed, &[stream::EVAL_ROLLOUT, j as u64]);
        let r = learner.rollout(env, c, &mut rng, deterministic)?;
        returns.push(r.value_estimate);
        successes.push(if r.success { 100.0 } else { 0.0 });
    }
    let (mean_return, mean_return_se) = mean_se(&returns);
    let (success_rate, success_rate_se) = mean_se(&successes);
    Ok(EvalReport {
        episodes: n_episodes,
        mean_return,
        mean_return_se,
        success_rate,
        success_rate_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_path() {
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_ne!(derive_seed(0, &[1]), derive_seed(1, &[1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }

    #[test]
    fn csv_layout() {
        let rec = IterationRecord {
            iteration: 3,
            mean_return: 1.5,
            success_rate: 50.0,
            kl_to_target: 0.0,
            kl_step: 1e-3,
            step_kind: "convergence".into(),
            active_case: "both_active/proximity_active".into(),
            mu: vec![0.1, 0.2],
            theta: vec![1.0, 2.0],
            kl_step_mean: 0.0,
            degenerate: false,
        };
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,mean_return,success_rate,kl_to_target,kl_step,step_kind,active_case,mu_0,mu_1,theta_0,theta_1"
        );
        assert_eq!(
            lines.next().unwrap(),
            "3,1.50000000e0,5.00000000e1,0.00000000e0,1.00000000e-3,convergence,both_active/proximity_active,\
             1.00000000e-1,2.00000000e-1,1.00000000e0,2.00000000e0"
        );
    }

    #[test]
    fn standard_error_of_constant_sample_is_zero() {
        assert_eq!(mean_se(&[100.0; 5]), (100.0, 0.0));
        assert_eq!(mean_se(&[3.0]), (3.0, 0.0));
    }
}
