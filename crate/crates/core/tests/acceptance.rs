//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). Criteria 3, 4
//! and 6 share a single trained model; training runs once, stops early
//! when evaluation zero-shot accuracy clears its margin threshold, and
//! is capped at 20,000 gradient steps.

use std::sync::OnceLock;
use std::time::Instant;
use temt_core::analysis::{
    collect_rate_maps, median, place_score_permutation_test, remapping_stats, score_table,
    smooth_rate_map, synthetic_hex_grating, synthetic_square_grating, verify_scoring_pipeline,
    UnitSource,
};
use temt_core::config::RunConfig;
use temt_core::envgen::{first_visit_flags, Episode};
use temt_core::memstore::{verify_adaptive_beta, verify_equivalence, EquivSizes};
use temt_core::mix_seed;
use temt_core::model::{
    argmax, gradcheck_reference_instance, model_grad_check, run_episode, ModelParams, RunOptions,
};
use temt_core::train::{binomial_se, evaluate, train, EvalMetrics, LearningCurve};

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}): {detail}");
}

/// The pinned acceptance configuration, shared with the CLI via
/// `configs/acceptance.toml`.
fn acceptance_config() -> RunConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/acceptance.toml");
    RunConfig::load(std::path::Path::new(path)).expect("configs/acceptance.toml parses")
}

struct Trained {
    params: ModelParams,
    untrained: ModelParams,
    curve: LearningCurve,
    config: RunConfig,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let config = acceptance_config();
        let train_cfg = config.train_config().expect("valid train config");
        assert!(
            train_cfg.steps <= 20_000,
            "acceptance training must stay within 20,000 gradient steps"
        );
        let params =
            ModelParams::init(config.model_config().expect("valid model config"), config.model.seed)
                .expect("params initialise");
        let untrained = params.clone();
        let started = Instant::now();
        let (params, curve) = train(&train_cfg, params, |p| {
            println!(
                "  [train] step {:>5}  loss {:.3}  zero-shot {:.3}  ({:.0}s)",
                p.step,
                p.loss.total,
                p.zero_shot_acc,
                p.wall_time_s
            );
        })
        .expect("training runs");
        println!(
            "  [train] finished at step {} in {:.0}s",
            curve.points.last().unwrap().step,
            started.elapsed().as_secs_f64()
        );
        Trained {
            params,
            untrained,
            curve,
            config,
        }
    })
}

const HELD_OUT_SEED_OFFSET: u64 = 0x5eed_0ff5;

/// Held-out evaluation on 20 fresh environments, seed-disjoint from both
/// the training stream and the in-training evaluation stream.
fn held_out_eval(params: &ModelParams, config: &RunConfig) -> EvalMetrics {
    let spec = config.env_spec().unwrap();
    evaluate(
        params,
        &spec,
        20,
        config.train.eval_episode_len,
        config.train.seed.wrapping_add(HELD_OUT_SEED_OFFSET),
    )
    .expect("evaluation runs")
}

#[test]
fn criterion_1_equivalence_oracle() {
    let started = Instant::now();
    let result = verify_equivalence(2024, &EquivSizes::default());
    let elapsed = started.elapsed().as_secs_f64();
    let max = result.max_dev.iter().cloned().fold(0.0f64, f64::max);
    report(
        1,
        "attractor/attention equivalence",
        result.passed && elapsed < 5.0,
        &format!(
            "{} random instances, max abs deviation {max:.3e} (< 1e-9), {elapsed:.2}s (< 5s)",
            result.instances
        ),
    );
}

#[test]
fn criterion_2_gradient_correctness() {
    let started = Instant::now();
    let (params, episode) = gradcheck_reference_instance(7).unwrap();
    let result = model_grad_check(&params, &episode, 1e-5, 1e-4).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    report(
        2,
        "full-model gradient check",
        result.passed && elapsed < 60.0,
        &format!(
            "max rel err {:.3e} over {} coordinates ({} skipped) in {elapsed:.1}s (< 60s)",
            result.max_rel_err, result.checked, result.skipped
        ),
    );
}

#[test]
fn criterion_3_zero_shot_generalization() {
    let trained = trained();
    let chance = 1.0 / trained.config.env.n_stim as f64;
    let final_eval = held_out_eval(&trained.params, &trained.config);
    let untrained_eval = held_out_eval(&trained.untrained, &trained.config);
    let steps = trained.curve.points.last().unwrap().step;

    let untrained_dev = (untrained_eval.zero_shot_acc - chance).abs();
    let untrained_3s = 3.0 * binomial_se(chance, untrained_eval.counts.zero_shot_n);
    let pass = final_eval.zero_shot_acc >= 10.0 * chance
        && steps <= 20_000
        && untrained_dev <= untrained_3s;
    // Stretch target, logged but not gating.
    println!(
        "  stretch: zero-shot {:.3} {} 0.8",
        final_eval.zero_shot_acc,
        if final_eval.zero_shot_acc >= 0.8 { ">=" } else { "<" }
    );
    report(
        3,
        "zero-shot generalization",
        pass,
        &format!(
            "zero-shot {:.3} on 20 held-out envs (n={}) vs threshold {:.3} after {steps} steps; untrained {:.4} within 3 sigma ({:.4}) of chance {:.4}",
            final_eval.zero_shot_acc,
            final_eval.counts.zero_shot_n,
            10.0 * chance,
            untrained_eval.zero_shot_acc,
            untrained_3s,
            chance
        ),
    );
}

#[test]
fn criterion_4_memory_neuron_place_structure() {
    let trained = trained();
    let config = &trained.config;
    let spec = config.env_spec().unwrap();
    let env = spec
        .generate(mix_seed(config.analysis.seed, 0x0d, 0, 0))
        .unwrap();
    let walk = config.analysis_walk_steps();

    // Per-step activities are a softmax: they must sum to 1 exactly.
    let episode = temt_core::envgen::sample_trajectory(
        &env,
        walk,
        mix_seed(config.analysis.seed, 0x0a, 0, 0),
    )
    .unwrap();
    let run = run_episode(
        &trained.params,
        &episode,
        &RunOptions {
            reset_interval: Some(512),
            ..RunOptions::default()
        },
        false,
    )
    .unwrap();
    let mut max_sum_err = 0.0f64;
    for step in &run.trace {
        if step.store_len_before > 0 {
            let sum: f64 = step.attn_weights.iter().sum();
            max_sum_err = max_sum_err.max((sum - 1.0).abs());
        }
    }

    let set = collect_rate_maps(
        &trained.params,
        &env,
        walk,
        mix_seed(config.analysis.seed, 0x0a, 0, 0),
        UnitSource::MemoryNeuron,
        config.analysis.smoothing_sigma,
    )
    .unwrap();
    let perm = place_score_permutation_test(
        &set,
        config.analysis.place_threshold_frac,
        100,
        mix_seed(config.analysis.seed, 0x0c, 0, 0),
    );
    let null_median = median(&perm.null_medians).unwrap_or(f64::NAN);
    report(
        4,
        "memory-neuron place structure",
        max_sum_err < 1e-6 && perm.p_value < 0.01,
        &format!(
            "weights sum to 1 within {max_sum_err:.2e} (< 1e-6); median place score {:.3} vs shuffled median {null_median:.3} over 100 controls, p = {:.4} (< 0.01, {} units)",
            perm.observed_median, perm.p_value, perm.n_units
        ),
    );
}

#[test]
fn criterion_5_grid_pipeline_validation() {
    let pipeline = verify_scoring_pipeline();

    // Reported, not gated: grid-score distribution of trained position
    // units (emergence is seed-dependent).
    let trained = trained();
    let config = &trained.config;
    let spec = config.env_spec().unwrap();
    let env = spec
        .generate(mix_seed(config.analysis.seed, 0x0d, 0, 0))
        .unwrap();
    let set = collect_rate_maps(
        &trained.params,
        &env,
        config.analysis_walk_steps(),
        mix_seed(config.analysis.seed, 0x0a, 0, 0),
        UnitSource::PositionUnit,
        config.analysis.smoothing_sigma,
    )
    .unwrap();
    let scores = score_table(
        &set,
        config.analysis.active_threshold_frac,
        config.analysis.place_threshold_frac,
    );
    let active: Vec<f64> = scores
        .iter()
        .filter(|r| r.active)
        .filter_map(|r| r.grid)
        .collect();
    let gridlike = active.iter().filter(|&&g| g > 0.3).count();
    println!(
        "  reported (not gated): {}/{} active position units with grid score > 0.3; best {:.3}",
        gridlike,
        active.len(),
        active.iter().cloned().fold(f64::NAN, f64::max)
    );

    report(
        5,
        "grid pipeline validation",
        pipeline.passed,
        &pipeline.summary(),
    );
}

#[test]
fn criterion_6_remapping() {
    let trained = trained();
    let config = &trained.config;
    let spec = config.env_spec().unwrap();
    let envs: Vec<_> = (0..2)
        .map(|i| spec.generate(mix_seed(config.analysis.seed, 0x0d, i, 0)).unwrap())
        .collect();
    let result = remapping_stats(
        &trained.params,
        &envs,
        config.analysis_walk_steps(),
        config.analysis.seed,
        config.analysis.n_permutations,
    )
    .unwrap();
    report(
        6,
        "remapping",
        result.position_map_corr > result.memory_distance_corr && result.p_value > 0.05,
        &format!(
            "position map corr {:.3} > memory peak-distance corr {:.3}; memory corr within permutation null (p = {:.3} > 0.05, null {:.3} +- {:.3}, {} common neurons)",
            result.position_map_corr,
            result.memory_distance_corr,
            result.p_value,
            result.null_mean,
            result.null_sd,
            result.n_common_neurons
        ),
    );
}

#[test]
fn criterion_7_determinism() {
    // A short full-scale run, replayed from its own manifest round-trip,
    // reproduces the learning curve bit-exactly (wall time excluded).
    let mut config = acceptance_config();
    config.train.steps = 12;
    config.train.eval_interval = 4;
    config.train.eval_envs = 2;
    config.train.early_stop_zero_shot = None;
    let manifest_text = {
        let dir = std::env::temp_dir().join("temt_acceptance_manifest");
        let path = temt_core::config::write_manifest(&dir, "train", &config).unwrap();
        std::fs::read_to_string(path).unwrap()
    };
    let replayed_config = RunConfig::parse(&manifest_text).unwrap();
    assert_eq!(replayed_config, config);

    let run = |cfg: &RunConfig| {
        let params = ModelParams::init(cfg.model_config().unwrap(), cfg.model.seed).unwrap();
        let (p, curve) = train(&cfg.train_config().unwrap(), params, |_| {}).unwrap();
        (p.data_hash(), curve.deterministic_csv())
    };
    let (h1, c1) = run(&config);
    let (h2, c2) = run(&replayed_config);
    report(
        7,
        "determinism",
        h1 == h2 && c1 == c2,
        &format!(
            "replay from manifest: curve bit-identical over {} eval points; final params hash-identical",
            c1.lines().count() - 1
        ),
    );
}

#[test]
fn criterion_8_softmax_beta_invariant() {
    let err = verify_adaptive_beta(&[2, 10, 100, 1000]);
    report(
        8,
        "adaptive beta closed form",
        err < 1e-12,
        &format!("max abs deviation {err:.3e} over N in {{2, 10, 100, 1000}} (< 1e-12)"),
    );
}

#[test]
fn invariant_revisit_cosine_exceeds_distinct_node_pairs() {
    // Post-training position-encoding invariant: when a node is reached
    // again via a different path, its encoding matches the first visit's
    // encoding more closely (on average) than encodings of distinct nodes
    // match each other.
    let trained = trained();
    let config = &trained.config;
    let spec = config.env_spec().unwrap();
    let env = spec
        .generate(mix_seed(config.analysis.seed, 0x1e, 0, 0))
        .unwrap();
    let episode =
        temt_core::envgen::sample_trajectory(&env, 500, mix_seed(config.analysis.seed, 0x1e, 1, 0))
            .unwrap();
    let run = run_episode(&trained.params, &episode, &RunOptions::default(), false).unwrap();

    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut first_visit_step = std::collections::HashMap::new();
    let mut revisit_cos = Vec::new();
    for (t, &node) in episode.node_trace.iter().enumerate() {
        if episode.first_visit[t].is_zero_shot() {
            if let Some(&t0) = first_visit_step.get(&node) {
                revisit_cos.push(cosine(&run.trace[t].position.g, &run.trace[t0 as usize].position.g));
            }
        }
        first_visit_step.entry(node).or_insert(t as u32);
    }
    let mut distinct_cos = Vec::new();
    for t in (0..episode.len()).step_by(7) {
        for t2 in (t + 1..episode.len()).step_by(11) {
            if episode.node_trace[t] != episode.node_trace[t2] {
                distinct_cos.push(cosine(&run.trace[t].position.g, &run.trace[t2].position.g));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let same = mean(&revisit_cos);
    let distinct = mean(&distinct_cos);
    println!(
        "  revisit cosine {same:.4} (n={}) vs distinct-node cosine {distinct:.4} (n={})",
        revisit_cos.len(),
        distinct_cos.len()
    );
    assert!(revisit_cos.len() > 20, "too few revisit events to compare");
    assert!(
        same > distinct,
        "revisited-node encodings ({same:.4}) no closer than distinct-node pairs ({distinct:.4})"
    );
}

#[test]
fn reported_loop_closure_prediction() {
    // Post-training reproduction of the four-step loop scenario: after a
    // short burn-in walk (the position code anchors itself against the
    // boundaries; bare five-step episodes never occur in training), step
    // North, East, South, West from an interior node and predict the
    // stimulus over the never-traversed closing edge. Reported, not gated
    // (no criterion pins a rate).
    let trained = trained();
    let config = &trained.config;
    let spec = config.env_spec().unwrap();
    let width = config.env.width;
    let mut successes = 0;
    let mut total = 0;
    for trial in 0..50u64 {
        let env = spec.generate(mix_seed(config.analysis.seed, 0x1c, trial, 0)).unwrap();
        let walk = temt_core::envgen::sample_trajectory(
            &env,
            20,
            mix_seed(config.analysis.seed, 0x1c, trial, 1),
        )
        .unwrap();
        // Truncate at the last position from which the loop stays in-bounds.
        let cut = (0..walk.len()).rev().find(|&t| {
            let n = walk.node_trace[t] as usize;
            n % width <= width - 2 && n / width <= config.env.height - 2
        });
        let Some(cut) = cut else { continue };
        let mut trace: Vec<u32> = walk.node_trace[..=cut].to_vec();
        let mut actions: Vec<u8> = walk.actions[..cut].to_vec();
        let mut node = trace[cut] as usize;
        let loop_start = node;
        for a in [0u8, 1, 2, 3] {
            actions.push(a);
            node = env.step(node, a as usize);
            trace.push(node as u32);
        }
        actions.push(0);
        assert_eq!(node, loop_start, "loop must close on the lattice");
        let first_visit = first_visit_flags(&trace, &actions);
        let t_close = trace.len() - 1;
        if !first_visit[t_close].is_zero_shot() {
            continue; // the closing edge happened to be traversed in the burn-in
        }
        let observations: Vec<u16> = trace
            .iter()
            .map(|&n| env.stimulus_of(n as usize) as u16)
            .collect();
        let episode = Episode {
            env_id: env.id,
            first_visit,
            observations: observations.clone(),
            actions,
            node_trace: trace,
        };
        let run = run_episode(&trained.params, &episode, &RunOptions::default(), false).unwrap();
        if argmax(&run.trace[t_close].logits) == observations[t_close] as usize {
            successes += 1;
        }
        total += 1;
    }
    println!(
        "  reported (not gated): loop-closure prediction {successes}/{total} after N,E,S,W with a 20-step burn-in"
    );
    assert!(total >= 20, "too few valid loop trials");
}
