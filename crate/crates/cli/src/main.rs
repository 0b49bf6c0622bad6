//! Command-line driver.
//!
//! One TOML config file (sections `[env]`, `[model]`, `[train]`,
//! `[analysis]`; all fields optional) drives a run. Every subcommand
//! writes a `manifest.toml` holding the fully resolved config; replaying
//! a run is `temt <cmd> --config <run>/manifest.toml --out <new dir>`.
//!
//! Exit codes: 0 success, 2 config error, 3 numeric failure, 4
//! verification failure. Worker threads are controlled with the standard
//! `RAYON_NUM_THREADS` environment variable.

use clap::{Args, Parser, Subcommand};
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use temt_core::analysis::{
    collect_rate_maps, export_figures, median, place_score_permutation_test, remapping_stats,
    score_table, verify_scoring_pipeline, UnitSource,
};
use temt_core::config::{write_manifest, RunConfig};
use temt_core::envgen::{
    family_env_seed, sample_trajectory, serialize_environment, serialize_episode,
};
use temt_core::error::Error;
use temt_core::memstore::{verify_adaptive_beta, verify_equivalence, EquivSizes};
use temt_core::mix_seed;
use temt_core::model::{
    checkpoint_load, checkpoint_save, gradcheck_reference_instance, model_grad_check, ModelParams,
};
use temt_core::train::{evaluate, train, LearningCurve};

#[derive(Parser)]
#[command(
    name = "temt",
    version,
    about = "Sequence prediction on graphs with recurrent position encodings and episodic memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "temt-out")]
    out: PathBuf,
    /// Master seed override; sets the seed of every config section.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write serialized environments and sample episodes.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model; writes learning_curve.csv and model.ckpt.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the number of gradient steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on held-out environments.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rate maps, grid/place scores, and remapping statistics.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Numerical verification: attractor/attention equivalence, gradient
    /// check, adaptive-beta closed form, scoring pipeline.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Param(_) | Error::Parse { .. } => 2,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Generate { common } => cmd_generate(common),
        Command::Train { common, steps } => cmd_train(common, steps),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Analyze { common, checkpoint } => cmd_analyze(common, checkpoint),
        Command::Verify { common } => cmd_verify(common),
    }
}

fn cmd_generate(common: CommonArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(&common)?;
    let spec = cfg.env_spec()?;
    let episode_len = cfg.generate_episode_len();
    std::fs::create_dir_all(&common.out)?;
    for i in 0..cfg.env.n_envs {
        let env = spec.generate(family_env_seed(cfg.env.seed, i as u64))?;
        let env_path = common.out.join(format!("env_{i:03}.txt"));
        std::fs::write(&env_path, serialize_environment(&env))?;
        let episode = sample_trajectory(&env, episode_len, mix_seed(cfg.env.seed, 0x0f, i as u64, 0))?;
        let ep_path = common.out.join(format!("episode_{i:03}.txt"));
        std::fs::write(&ep_path, serialize_episode(&episode))?;
        let distinct = {
            let mut seen = std::collections::HashSet::new();
            (0..env.n_nodes()).for_each(|n| {
                seen.insert(env.stimulus_of(n));
            });
            seen.len()
        };
        let zero_shot = episode
            .first_visit
            .iter()
            .filter(|f| f.is_zero_shot())
            .count();
        println!(
            "env {i}: {} nodes, {} distinct stimuli of {}, episode of {} steps ({} zero-shot) -> {}",
            env.n_nodes(),
            distinct,
            env.n_stim,
            episode.len(),
            zero_shot,
            env_path.display()
        );
    }
    write_manifest(&common.out, "generate", &cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(common: CommonArgs, steps: Option<usize>) -> Result<ExitCode, Error> {
    let mut cfg = load_config(&common)?;
    if let Some(steps) = steps {
        cfg.train.steps = steps;
    }
    let train_cfg = cfg.train_config()?;
    let model_cfg = cfg.model_config()?;
    let params = ModelParams::init(model_cfg, cfg.model.seed)?;
    std::fs::create_dir_all(&common.out)?;
    write_manifest(&common.out, "train", &cfg)?;

    let curve_path = common.out.join("learning_curve.csv");
    let mut curve_file = std::fs::File::create(&curve_path)?;
    writeln!(curve_file, "{}", LearningCurve::CSV_HEADER)?;
    let (params, curve) = train(&train_cfg, params, |point| {
        let _ = writeln!(curve_file, "{}", point.csv_line());
        let _ = curve_file.flush();
        println!(
            "step {:>6}  loss {:.4}  overall {:.3}  zero-shot {:.3} (n={})  [{:.1}s]",
            point.step,
            point.loss.total,
            point.overall_acc,
            point.zero_shot_acc,
            point.zero_shot_n,
            point.wall_time_s
        );
    })?;

    let ckpt_path = common.out.join("model.ckpt");
    checkpoint_save(&params, &ckpt_path)?;
    let last = curve.points.last().expect("at least one eval point");
    println!(
        "done: zero-shot {:.3} after {} steps; checkpoint {}",
        last.zero_shot_acc,
        last.step,
        ckpt_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(common: CommonArgs, checkpoint: PathBuf) -> Result<ExitCode, Error> {
    let cfg = load_config(&common)?;
    let params = checkpoint_load(&checkpoint)?;
    if let Ok(expected) = cfg.model_config() {
        if expected.config_hash() != params.cfg.config_hash() {
            eprintln!(
                "warning: checkpoint model config differs from the supplied config; using the checkpoint's"
            );
        }
    }
    let spec = cfg.env_spec()?;
    let m = evaluate(
        &params,
        &spec,
        cfg.train.eval_envs,
        cfg.train.eval_episode_len,
        cfg.train.seed,
    )?;
    let chance = 1.0 / spec.n_stim as f64;
    let report = format!(
        "{{\n  \"overall_acc\": {},\n  \"overall_se\": {},\n  \"overall_n\": {},\n  \"zero_shot_acc\": {},\n  \"zero_shot_se\": {},\n  \"zero_shot_n\": {},\n  \"mean_ce\": {},\n  \"chance\": {}\n}}\n",
        m.overall_acc,
        m.overall_se,
        m.counts.overall_n,
        m.zero_shot_acc,
        m.zero_shot_se,
        m.counts.zero_shot_n,
        m.mean_ce,
        chance
    );
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("eval.json"), &report)?;
    write_manifest(&common.out, "eval", &cfg)?;
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(common: CommonArgs, checkpoint: PathBuf) -> Result<ExitCode, Error> {
    let cfg = load_config(&common)?;
    let params = checkpoint_load(&checkpoint)?;
    if let Ok(expected) = cfg.model_config() {
        if expected.config_hash() != params.cfg.config_hash() {
            eprintln!(
                "warning: checkpoint model config differs from the supplied config; using the checkpoint's"
            );
        }
    }
    let spec = cfg.env_spec()?;
    let walk = cfg.analysis_walk_steps();
    let sigma = cfg.analysis.smoothing_sigma;
    std::fs::create_dir_all(&common.out)?;
    write_manifest(&common.out, "analyze", &cfg)?;

    let envs: Vec<_> = (0..cfg.analysis.n_envs.max(2))
        .map(|i| spec.generate(mix_seed(cfg.analysis.seed, 0x0d, i as u64, 0)))
        .collect::<Result<_, _>>()?;

    let mut summary = String::new();
    for (source, tag) in [
        (UnitSource::PositionUnit, "position"),
        (UnitSource::MemoryNeuron, "memory"),
    ] {
        let set = collect_rate_maps(
            &params,
            &envs[0],
            walk,
            mix_seed(cfg.analysis.seed, 0x0a, 0, 0),
            source,
            sigma,
        )?;
        if set.unvisited_warning {
            eprintln!("warning: more than 10% of nodes unvisited in the {tag} walk");
        }
        let scores = score_table(
            &set,
            cfg.analysis.active_threshold_frac,
            cfg.analysis.place_threshold_frac,
        );
        export_figures(&set, &scores, &common.out.join("maps"), cfg.analysis.image_block)?;
        let active_grid: Vec<f64> = scores
            .iter()
            .filter(|r| r.active)
            .filter_map(|r| r.grid)
            .collect();
        let gridlike = active_grid.iter().filter(|&&g| g > 0.3).count();
        let place: Vec<f64> = scores.iter().filter_map(|r| r.place).collect();
        summary += &format!(
            "{tag}: {} units, {} active with grid score ({} above 0.3), median place score {:.3}\n",
            set.n_units(),
            active_grid.len(),
            gridlike,
            median(&place).unwrap_or(f64::NAN)
        );
        if source == UnitSource::MemoryNeuron {
            let perm = place_score_permutation_test(
                &set,
                cfg.analysis.place_threshold_frac,
                cfg.analysis.n_shuffles,
                mix_seed(cfg.analysis.seed, 0x0c, 0, 0),
            );
            summary += &format!(
                "memory place structure: observed median {:.3} vs {} shuffles, p = {:.4}\n",
                perm.observed_median,
                perm.null_medians.len(),
                perm.p_value
            );
        }
    }

    let remap = remapping_stats(
        &params,
        &envs,
        walk,
        cfg.analysis.seed,
        cfg.analysis.n_permutations,
    )?;
    summary += &format!(
        "remapping: position map corr {:.3}, memory distance corr {:.3} (null {:.3} +- {:.3}, p = {:.3}, {} common neurons)\n",
        remap.position_map_corr,
        remap.memory_distance_corr,
        remap.null_mean,
        remap.null_sd,
        remap.p_value,
        remap.n_common_neurons
    );
    std::fs::write(common.out.join("analysis_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(common: CommonArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(&common)?;
    std::fs::create_dir_all(&common.out)?;
    write_manifest(&common.out, "verify", &cfg)?;
    let mut lines = Vec::new();
    let mut all_pass = true;

    let equiv = verify_equivalence(cfg.analysis.seed.wrapping_add(2024), &EquivSizes::default());
    all_pass &= equiv.passed;
    lines.push(equiv.summary());

    let (params, episode) = gradcheck_reference_instance(cfg.model.seed.wrapping_add(7))?;
    let grad = model_grad_check(&params, &episode, 1e-5, 1e-4)?;
    all_pass &= grad.passed;
    lines.push(grad.summary());

    let beta_err = verify_adaptive_beta(&[2, 10, 100, 1000]);
    let beta_pass = beta_err < 1e-12;
    all_pass &= beta_pass;
    lines.push(format!(
        "adaptive beta closed form max err {:.3e} (tolerance 1e-12): {}",
        beta_err,
        if beta_pass { "PASS" } else { "FAIL" }
    ));

    let pipeline = verify_scoring_pipeline();
    all_pass &= pipeline.passed;
    lines.push(pipeline.summary());

    let text = lines.join("\n") + "\n";
    std::fs::write(common.out.join("verify.txt"), &text)?;
    print!("{text}");
    if all_pass {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(4))
    }
}
