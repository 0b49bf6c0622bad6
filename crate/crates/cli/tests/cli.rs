//! End-to-end subcommand tests against the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn temt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_temt"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = temt().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "temt {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("temt_cli_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    let base = "[env]\nwidth = 3\nheight = 2\nn_stim = 3\nn_envs = 3\n\n\
                [model]\nn_g = 16\nd_k = 8\n\n\
                [train]\nbatch_size = 4\nenvs_per_batch = 2\nepisode_len = 15\n\
                steps = 200\neval_interval = 50\neval_envs = 3\neval_episode_len = 15\n";
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

#[test]
fn generate_writes_parseable_environments_with_shared_structure() {
    let dir = tmp_dir("generate");
    let config = write_config(&dir, "");
    run_ok(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
        "--seed",
        "11",
    ]);

    let mut envs = Vec::new();
    for i in 0..3 {
        let bytes = std::fs::read(dir.join("out").join(format!("env_{i:03}.txt"))).unwrap();
        envs.push(temt_core::envgen::parse_environment(&bytes).unwrap());
        let ep_bytes =
            std::fs::read(dir.join("out").join(format!("episode_{i:03}.txt"))).unwrap();
        let ep = temt_core::envgen::parse_episode(&ep_bytes).unwrap();
        assert_eq!(ep.env_id, envs[i].id);
    }
    // Same adjacency, fresh stimulus assignments.
    for i in 1..3 {
        assert_eq!(envs[0].n_nodes(), envs[i].n_nodes());
        let same_adjacency = (0..envs[0].n_nodes())
            .all(|n| (0..4).all(|a| envs[0].step(n, a) == envs[i].step(n, a)));
        assert!(same_adjacency);
    }
    let stims: Vec<Vec<usize>> = envs
        .iter()
        .map(|e| (0..e.n_nodes()).map(|n| e.stimulus_of(n)).collect())
        .collect();
    assert!(stims[0] != stims[1] || stims[0] != stims[2]);
}

#[test]
fn generate_is_byte_deterministic() {
    let dir = tmp_dir("generate_det");
    let config = write_config(&dir, "");
    for out in ["a", "b"] {
        run_ok(&[
            "generate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.join(out).to_str().unwrap(),
            "--seed",
            "3",
        ]);
    }
    for i in 0..3 {
        let a = std::fs::read(dir.join("a").join(format!("env_{i:03}.txt"))).unwrap();
        let b = std::fs::read(dir.join("b").join(format!("env_{i:03}.txt"))).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn train_smoke_emits_a_decreasing_loss_curve_and_reusable_checkpoint() {
    let dir = tmp_dir("train");
    let config = write_config(&dir, "");
    let out = dir.join("run");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "7",
    ]);

    let csv = std::fs::read_to_string(out.join("learning_curve.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let loss_col = header.iter().position(|c| *c == "loss_total").unwrap();
    let losses: Vec<f64> = lines
        .map(|l| l.split(',').nth(loss_col).unwrap().parse().unwrap())
        .collect();
    assert!(losses.len() >= 4);
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "loss did not decrease over the smoke run: {losses:?}"
    );

    // The checkpoint evaluates.
    let eval_out = dir.join("eval");
    let output = run_ok(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
        "--seed",
        "7",
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
    ]);
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("zero_shot_acc"));
    assert!(eval_out.join("eval.json").exists());
}

#[test]
fn train_replayed_from_manifest_is_bit_identical() {
    let dir = tmp_dir("replay");
    let config = write_config(&dir, "");
    let first = dir.join("first");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
        "--seed",
        "21",
        "--steps",
        "40",
    ]);
    // Replay from the manifest alone (seed and steps are already baked in).
    let second = dir.join("second");
    run_ok(&[
        "train",
        "--config",
        first.join("manifest.toml").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    let strip_wall = |text: &str| -> String {
        text.lines()
            .map(|l| &l[..l.rfind(',').unwrap_or(l.len())])
            .collect::<Vec<_>>()
            .join("\n")
    };
    let a = std::fs::read_to_string(first.join("learning_curve.csv")).unwrap();
    let b = std::fs::read_to_string(second.join("learning_curve.csv")).unwrap();
    assert_eq!(strip_wall(&a), strip_wall(&b));
    let ca = std::fs::read(first.join("model.ckpt")).unwrap();
    let cb = std::fs::read(second.join("model.ckpt")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn verify_passes_and_reports_each_check() {
    let dir = tmp_dir("verify");
    let out = run_ok(&["verify", "--out", dir.join("out").to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches("PASS").count(), 4, "{text}");
    assert!(!text.contains("FAIL"));
    assert!(dir.join("out").join("verify.txt").exists());
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tmp_dir("badcfg");
    let config = dir.join("bad.toml");
    std::fs::write(&config, "[env]\ntopology = \"moebius\"\n").unwrap();
    let out = temt()
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tmp_dir("missing_ckpt");
    let out = temt()
        .args([
            "eval",
            "--out",
            dir.join("out").to_str().unwrap(),
            "--checkpoint",
            dir.join("nope.ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn eval_of_untrained_checkpoint_reads_chance() {
    let dir = tmp_dir("untrained_eval");
    let config = dir.join("config.toml");
    std::fs::write(
        &config,
        "[env]\nwidth = 4\nheight = 4\nn_stim = 5\n\n\
         [model]\nn_g = 16\nd_k = 8\n\n\
         [train]\nbatch_size = 2\nenvs_per_batch = 1\nepisode_len = 10\n\
         steps = 0\neval_interval = 5\neval_envs = 8\neval_episode_len = 40\n",
    )
    .unwrap();
    let out = dir.join("run");
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "13",
    ]);
    let eval_out = run_ok(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.join("eval").to_str().unwrap(),
        "--seed",
        "13",
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
    ]);
    let text = String::from_utf8_lossy(&eval_out.stdout);
    let grab = |key: &str| -> f64 {
        text.lines()
            .find(|l| l.contains(key))
            .and_then(|l| l.split(':').nth(1))
            .and_then(|v| v.trim().trim_end_matches(',').parse().ok())
            .unwrap_or(f64::NAN)
    };
    let zero_shot = grab("zero_shot_acc");
    let n = grab("zero_shot_n");
    assert!(n >= 20.0, "too few zero-shot steps: {n}");
    let chance = 0.2;
    let slack = 3.0 * (chance * (1.0 - chance) / n).sqrt() + 0.02;
    assert!(
        (zero_shot - chance).abs() <= slack,
        "untrained zero-shot {zero_shot} vs chance {chance} (slack {slack})"
    );
}
