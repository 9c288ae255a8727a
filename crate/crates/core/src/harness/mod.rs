//! Experiment driver: configuration, training loop, evaluation, logging and
//! self-verification.

mod config;
mod summary;
mod train;
mod verify;

pub use config::{EvaluationConfig, ExperimentConfig, InitialConfig, TargetConfig};
pub use summary::{median, summarize, welch_p_value, write_summary_csv, SeedResult, SummaryRow};
pub use train::{
    build_learner, derive_seed, evaluate, rng_for, run_training, save_records_csv, stream, write_records_csv,
    EvalReport, IterationRecord, RunOptions, TrainingRun,
};
pub use verify::{
    timing_suite, verify, SuiteReport, TimingReport, VerifyOptions, VerifyReport, DIMS, FD_STEP, FD_TOL, KKT_TOL,
    MIN_SPEEDUP, STEP_TOL,
};

use crate::error::Result;

/// Training run followed by evaluation on the target.
pub fn train_and_evaluate(
    config: &ExperimentConfig,
    seed: u64,
    options: &RunOptions,
) -> Result<(TrainingRun, EvalReport)> {
    let run = run_training(config, seed, options)?;
    let eval = evaluate(
        run.learner.as_ref(),
        &config.target_spec()?,
        run.environment.as_ref(),
        config.evaluation.episodes,
        seed,
        config.evaluation.deterministic,
    )?;
    Ok((run, eval))
}

impl TrainingRun {
    pub fn seed_result(&self, curriculum: &str, eval: &EvalReport) -> SeedResult {
        SeedResult {
            curriculum: curriculum.to_string(),
            seed: self.seed,
            mean_return: eval.mean_return,
            success_rate: eval.success_rate,
            final_kl_to_target: self.distribution.kl_to_target(),
        }
    }
}
