//! `spgl`: train, evaluate and self-check self-paced Gaussian curricula.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{info, LevelFilter};
use spgl_core::harness::{
    build_learner, evaluate, save_records_csv, summarize, train_and_evaluate, verify, write_summary_csv,
    ExperimentConfig, RunOptions, VerifyOptions,
};
use spgl_core::learner::PolicyParameters;
use spgl_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_STRICT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "spgl", version, about = "Self-paced Gaussian curriculum experiments")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one or more seeds and write per-iteration CSV logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the preset's seed list with a single seed.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory (overrides the preset).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Curriculum override; a comma-separated list runs each in turn.
        #[arg(long, value_delimiter = ',')]
        curriculum: Option<Vec<String>>,
        /// Treat degraded-update warnings as errors (exit code 3).
        #[arg(long)]
        strict: bool,
    },
    /// Evaluate a saved policy on contexts drawn from the target.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the preset's episode count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Randomized closed-form, finite-difference and timing checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances per block and dimension.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Updates timed for the speed comparison; 0 skips it.
        #[arg(long, default_value_t = 50)]
        timing_updates: usize,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet { LevelFilter::Error } else { LevelFilter::Info })
        .parse_default_env()
        .init();

    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::StrictWarning(_)) => EXIT_STRICT,
                _ => EXIT_CONFIG,
            };
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Train {
            config,
            seed,
            seeds,
            out,
            curriculum,
            strict,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            } else if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(o) = out {
                cfg.output = o;
            }
            let modes = curriculum.unwrap_or_else(|| vec![cfg.curriculum_mode.clone()]);
            train(&cfg, &modes, &RunOptions { strict })
        }
        Command::Eval {
            config,
            policy,
            seed,
            episodes,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(n) = episodes {
                cfg.evaluation.episodes = n;
            }
            cfg.validate()?;
            let text = std::fs::read_to_string(&policy).with_context(|| format!("reading {}", policy.display()))?;
            let params: PolicyParameters =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", policy.display())))?;
            let env = cfg.build_environment()?;
            let mut learner = build_learner(&cfg, env.as_ref())?;
            learner.set_parameters(params)?;
            let report = evaluate(
                learner.as_ref(),
                &cfg.target_spec()?,
                env.as_ref(),
                cfg.evaluation.episodes,
                seed,
                cfg.evaluation.deterministic,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }
        Command::Verify {
            seed,
            instances,
            timing_updates,
            out,
            perturb,
        } => {
            if instances == 0 {
                bail!(Error::Config("--instances must be >= 1".into()));
            }
            let report = verify(&VerifyOptions {
                seed,
                instances,
                timing_updates,
                perturb,
                ..Default::default()
            })?;
            for s in &report.suites {
                println!(
                    "{:<20} {} n={:<4} max_err={:.3e} (tol {:.0e}) max_kkt={:.3e} (tol {:.0e})",
                    s.name,
                    if s.passed { "PASS" } else { "FAIL" },
                    s.instances,
                    s.max_error,
                    s.error_tolerance,
                    s.max_kkt,
                    s.kkt_tolerance
                );
            }
            if let Some(t) = &report.timing {
                println!(
                    "{:<20} {} n={:<4} closed={:.3e}s numerical={:.3e}s speedup={:.1}x",
                    "timing",
                    if t.passed { "PASS" } else { "FAIL" },
                    t.updates,
                    t.closed_form_seconds,
                    t.numerical_seconds,
                    t.speedup
                );
            }
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            Ok(if report.passed() { 0 } else { EXIT_VERIFY })
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn train(cfg: &ExperimentConfig, modes: &[String], options: &RunOptions) -> anyhow::Result<u8> {
    let mut results = Vec::new();
    for mode in modes {
        let mut run_cfg = cfg.clone();
        run_cfg.curriculum_mode = mode.clone();
        run_cfg.validate()?;
        for &seed in &cfg.seeds {
            let (run, eval) = train_and_evaluate(&run_cfg, seed, options)?;
            let stem = format!("{mode}_seed{seed}");
            save_records_csv(&cfg.output.join(format!("{stem}.csv")), &run.records)?;
            write_json(&cfg.output.join(format!("{stem}_eval.json")), &eval)?;
            write_json(&cfg.output.join(format!("{stem}_policy.json")), run.learner.parameters())?;
            let res = run.seed_result(mode, &eval);
            info!(
                "{mode} seed {seed}: return {:.3} success {:.1}% final kl_to_target {:.3e}",
                res.mean_return, res.success_rate, res.final_kl_to_target
            );
            results.push(res);
        }
    }
    if results.len() > 1 {
        let rows = summarize(&results);
        std::fs::create_dir_all(&cfg.output)?;
        write_summary_csv(std::fs::File::create(cfg.output.join("summary.csv"))?, &rows)?;
        for r in &rows {
            info!(
                "{}: success {:.1} ± {:.1} (median {:.1}), return {:.3} ± {:.3}, kl {:.3e}",
                r.curriculum,
                r.success_rate,
                r.success_rate_se,
                r.median_success_rate,
                r.mean_return,
                r.mean_return_se,
                r.final_kl_to_target
            );
        }
    }
    Ok(0)
}
