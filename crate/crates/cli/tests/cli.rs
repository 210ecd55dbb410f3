use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use roadblock_cli::{read_episode_csv, CHECKPOINT_JSON, COMPARE_CSV, CONFIG_JSON, EPISODES_CSV, PLOT_DATA_JSON};

const SMOKE: &str = r#"{
    "train": {"batch_size": 32, "warmup": 64, "hidden_sizes": [16]},
    "episode": {"max_steps": 50}
}"#;

fn roadblock(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadblock"))
        .args(args)
        .env("ROADBLOCK_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn write_smoke_config(dir: &Path) -> String {
    let path = dir.join("smoke.json");
    fs::write(&path, SMOKE).unwrap();
    path.to_string_lossy().into_owned()
}

fn train_smoke(dir: &Path, out: &Path, algo: &str, seed: &str) -> Output {
    let config = write_smoke_config(dir);
    roadblock(
        &[
            "train", "--config", &config, "--episodes", "2", "--steps", "50", "--seed", seed, "--algo", algo, "--out",
            out.to_str().unwrap(),
        ],
        dir,
    )
}

#[test]
fn train_smoke_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for algo in ["maddpg", "dqn"] {
        let out = dir.path().join(algo);
        let result = train_smoke(dir.path(), &out, algo, "3");
        assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
        let logs = read_episode_csv(&out.join(EPISODES_CSV)).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.algo == algo && l.n_agents == 4));
        assert!(out.join(CHECKPOINT_JSON).exists());
        assert!(out.join(CONFIG_JSON).exists());
        let leftovers: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
        assert!(String::from_utf8_lossy(&result.stdout).contains("episodes=2"));
    }
}

#[test]
fn default_output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let result = roadblock(
        &["train", "--config", &config, "--episodes", "1", "--steps", "20", "--seed", "5", "--agents", "2"],
        dir.path(),
    );
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    assert!(dir
        .path()
        .join("maddpg-TwoLaneOneBlock-n2-s5")
        .join(EPISODES_CSV)
        .exists());
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"train": {"episodes": 2,"#).unwrap();
    let out = dir.path().join("run");
    let result = roadblock(
        &["train", "--config", config.to_str().unwrap(), "--seed", "1", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(result.status.code(), Some(2));
    assert!(!out.exists());

    // Invalid values are configuration errors too.
    fs::write(&config, r#"{"train": {"gamma": 0.0}}"#).unwrap();
    let result = roadblock(
        &["train", "--config", config.to_str().unwrap(), "--seed", "1", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(result.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn seed_is_mandatory() {
    let dir = tempfile::tempdir().unwrap();
    let result = roadblock(&["train", "--episodes", "1"], dir.path());
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn eval_accepts_two_four_six_agents_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train_smoke(dir.path(), &run, "maddpg", "4").status.success());
    let ckpt = run.join(CHECKPOINT_JSON);
    for agents in ["2", "4", "6"] {
        let csv_a = dir.path().join(format!("a{agents}.csv"));
        let csv_b = dir.path().join(format!("b{agents}.csv"));
        for csv in [&csv_a, &csv_b] {
            let result = roadblock(
                &[
                    "eval", "--checkpoint", ckpt.to_str().unwrap(), "--agents", agents, "--episodes", "2", "--seed",
                    "11", "--steps", "60", "--out", csv.to_str().unwrap(),
                ],
                dir.path(),
            );
            assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
        }
        let a = fs::read(&csv_a).unwrap();
        assert_eq!(a, fs::read(&csv_b).unwrap());
        let text = String::from_utf8(a).unwrap();
        assert!(text.lines().next().unwrap().ends_with(",checkpoint_id"));
        assert_eq!(read_episode_csv(&csv_a).unwrap().len(), 2);
    }
}

#[test]
fn eval_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let result = roadblock(
        &["eval", "--checkpoint", missing.to_str().unwrap(), "--agents", "2", "--seed", "1"],
        dir.path(),
    );
    assert_eq!(result.status.code(), Some(1));
    assert!(!result.stderr.is_empty());

    // A critic whose width does not match the recorded agent count.
    let run = dir.path().join("run");
    assert!(train_smoke(dir.path(), &run, "maddpg", "4").status.success());
    let ckpt = run.join(CHECKPOINT_JSON);
    let text = fs::read_to_string(&ckpt).unwrap();
    let broken = dir.path().join("broken.json");
    fs::write(&broken, text.replacen("\"n_agents\":4", "\"n_agents\":2", 1)).unwrap();
    let result = roadblock(
        &["eval", "--checkpoint", broken.to_str().unwrap(), "--agents", "2", "--seed", "1"],
        dir.path(),
    );
    assert_eq!(result.status.code(), Some(3), "{}", String::from_utf8_lossy(&result.stderr));

    let truncated = dir.path().join("truncated.json");
    fs::write(&truncated, &text[..text.len() / 3]).unwrap();
    let result = roadblock(
        &["eval", "--checkpoint", truncated.to_str().unwrap(), "--agents", "2", "--seed", "1"],
        dir.path(),
    );
    assert_eq!(result.status.code(), Some(3));
}

#[test]
fn compare_runs_the_cross_product() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_smoke_config(dir.path());
    let out = dir.path().join("cmp");
    let result = roadblock(
        &[
            "compare", "--config", &config, "--seeds", "1,2", "--episodes", "2", "--steps", "40", "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let table = fs::read_to_string(out.join(COMPARE_CSV)).unwrap();
    assert_eq!(table.lines().count(), 5);
    let plot: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(PLOT_DATA_JSON)).unwrap()).unwrap();
    let series = plot["series"].as_array().unwrap();
    assert_eq!(series.len(), 4);
    let mut keys: Vec<(String, u64)> = series
        .iter()
        .map(|s| (s["algo"].as_str().unwrap().to_string(), s["seed"].as_u64().unwrap()))
        .collect();
    keys.sort();
    assert_eq!(
        keys,
        vec![("dqn".into(), 1), ("dqn".into(), 2), ("maddpg".into(), 1), ("maddpg".into(), 2)]
    );
    for algo in ["maddpg", "dqn"] {
        for seed in [1, 2] {
            let logs = read_episode_csv(&out.join(algo).join(format!("seed-{seed}")).join(EPISODES_CSV)).unwrap();
            assert_eq!(logs.len(), 2);
        }
    }
}
