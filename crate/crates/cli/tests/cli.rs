use std::path::Path;
use std::process::{Command, Output};

fn clonebench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clonebench"))
        .current_dir(dir)
        .args(args)
        .env_remove("CPL_SERVICE_TOKEN")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = clonebench(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Last line of eval/ablate/mine output is the artifact directory.
fn last_dir(stdout: &str) -> String {
    stdout.lines().last().unwrap().to_string()
}

#[test]
fn demo_eval_mine_report_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["demo", "ws", "--pairs", "20"]);
    let config = "ws/experiment.toml";

    let eval = ok(dir, &["eval", "--config", config]);
    assert!(eval.contains("condition default"), "{eval}");
    let run_dir = last_dir(&eval);
    let run_id = Path::new(&run_dir).file_name().unwrap().to_str().unwrap().to_string();

    // same inputs, same run
    let again = ok(dir, &["eval", "--config", config]);
    assert_eq!(last_dir(&again), run_dir);

    let mined = ok(dir, &["mine", "--config", config, "--run", &run_id]);
    assert!(mined.contains(&format!("run {run_id}")), "{mined}");

    let text = ok(dir, &["report", "--config", config, "--run", &run_id]);
    assert!(text.starts_with(&format!("run {run_id}")), "{text}");
    assert!(text.contains("mining"), "{text}");
    let json = ok(dir, &["report", "--config", config, "--run", &run_id, "--json"]);
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed["run_id"], serde_json::json!(run_id));

    let ablation = ok(dir, &["ablate", "--config", config, "--out", "elsewhere"]);
    assert!(ablation.contains("all_lessons"), "{ablation}");
    assert!(last_dir(&ablation).contains("elsewhere"));
}

#[test]
fn replay_flag_points_at_another_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["demo", "ws", "--pairs", "10"]);
    std::fs::write(dir.join("empty.jsonl"), "").unwrap();
    let out = ok(dir, &["eval", "--config", "ws/experiment.toml", "--replay", "empty.jsonl"]);
    // every prompt misses the empty fixture and is recorded as a failure
    assert!(out.contains("scored 0"), "{out}");
    assert!(out.contains("failed 10"), "{out}");
}

#[test]
fn sample_and_strip_comments() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(ok(dir, &["sample", "--population", "1000"]).trim(), "278");
    assert_eq!(
        ok(dir, &["sample", "--population", "6710000", "--confidence", "0.99", "--margin", "0.01", "--unbalanced"]).trim(),
        "16547"
    );

    ok(dir, &["demo", "ws", "--pairs", "10"]);
    ok(dir, &["sample", "--input", "ws/pairs.jsonl", "--size", "4", "--output", "small.jsonl", "--seed", "3"]);
    let small = std::fs::read_to_string(dir.join("small.jsonl")).unwrap();
    assert_eq!(small.lines().count(), 4);

    std::fs::write(dir.join("A.java"), "int x = 1; // one\n/* block */ int y = 2;\n").unwrap();
    let stripped = ok(dir, &["strip-comments", "A.java", "--language", "java"]);
    assert!(!stripped.contains("one") && !stripped.contains("block"), "{stripped}");
    assert!(stripped.contains("int y = 2;"));

    ok(dir, &["strip-comments", "ws/pairs.jsonl", "--output", "stripped.jsonl"]);
    let pairs = std::fs::read_to_string(dir.join("stripped.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 10);
    let original = std::fs::read_to_string(dir.join("ws/pairs.jsonl")).unwrap();
    assert!(original.contains("//"));
    assert!(!pairs.contains("//"), "{pairs}");
}

#[test]
fn config_problems_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = clonebench(dir, &["eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    ok(dir, &["demo", "ws", "--pairs", "10"]);
    let cfg = std::fs::read_to_string(dir.join("ws/experiment.toml")).unwrap();
    std::fs::write(dir.join("ws/bad.toml"), format!("surprise = 1\n{cfg}")).unwrap();
    let out = clonebench(dir, &["eval", "--config", "ws/bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));

    std::fs::remove_file(dir.join("ws/pairs.jsonl")).unwrap();
    let out = clonebench(dir, &["eval", "--config", "ws/experiment.toml"]);
    assert!(!out.status.success());
    assert!(!dir.join("ws/out").exists(), "nothing may be written before validation");
}

#[test]
fn convert_avatar_records() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let records = [
        r#"{"idx": "a1", "java": "int one() { return 1; }", "python": "def one():\n    return 1"}"#,
        r#"{"idx": "a2", "java": "int two() { return 2; }", "python": "def two():\n    return 2"}"#,
        r#"{"idx": "a3", "java": "int three() { return 3; }", "python": "def three():\n    return 3"}"#,
    ];
    std::fs::write(dir.join("avatar.jsonl"), records.join("\n") + "\nnot json\n").unwrap();
    let strict = clonebench(dir, &["convert", "avatar.jsonl", "pairs.jsonl"]);
    assert!(!strict.status.success());

    ok(dir, &["--lenient", "convert", "avatar.jsonl", "pairs.jsonl", "--seed", "1"]);
    let pairs = std::fs::read_to_string(dir.join("pairs.jsonl")).unwrap();
    // one clone and one non-clone per record
    assert_eq!(pairs.lines().count(), 6);
    let clones = pairs
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["label"] == 1)
        .count();
    assert_eq!(clones, 3);
}
