use std::path::Path;
use std::process::{Command, Output};

fn hypoprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypoprobe"))
        .args(args)
        .env_remove("HYPOPROBE_CLI_KEY")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn demo(dir: &Path) -> String {
    let o = hypoprobe(&["demo", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    stdout(&o).trim().to_string()
}

#[test]
fn explain_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo(dir.path());
    let o = hypoprobe(&["explain", "-c", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!stdout(&o).contains("| Method |"));
    assert!(dir.path().join("results/toy-lm/3/3/explanation.json").is_file());
    assert!(!dir.path().join("results/toy-lm/3/3/geneval.json").exists());

    let o = hypoprobe(&["evaluate", "-c", &cfg]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("| hypoprobe | 3 | 0.90 |"), "{}", stdout(&o));
    assert!(dir.path().join("results/summary.md").is_file());
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo(dir.path());
    let out = dir.path().join("elsewhere");
    let o = hypoprobe(&[
        "run", "-c", &cfg, "--output-dir", out.to_str().unwrap(), "--parallelism", "3", "--method", "mine", "--n-sentences", "5",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("| mine | 7 |"));
    let gen: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("toy-lm/7/12/geneval.json")).unwrap()).unwrap();
    assert_eq!(gen["n_sentences"], 5);
    assert!(!dir.path().join("results").exists());
}

#[test]
fn sample_features_is_seeded() {
    let a = stdout(&hypoprobe(&["sample-features", "--d-sae", "16384", "--seed", "42", "--layer", "3"]));
    let b = stdout(&hypoprobe(&["sample-features", "--d-sae", "16384", "--seed", "42", "--layer", "3"]));
    let c = stdout(&hypoprobe(&["sample-features", "--d-sae", "16384", "--seed", "43", "--layer", "3"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let v: Vec<serde_json::Value> = serde_json::from_str(&a).unwrap();
    assert_eq!(v.len(), 10);
    assert_eq!(code(&hypoprobe(&["sample-features", "--d-sae", "5", "--count", "6"])), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo(dir.path());
    assert_eq!(code(&hypoprobe(&["run", "-c", "/no/such/config.json"])), 2);
    assert_eq!(code(&hypoprobe(&["run", "-c", &cfg, "--parallelism", "0"])), 2);
    assert_eq!(code(&hypoprobe(&["record", "-c", &cfg])), 2);
    assert_eq!(code(&hypoprobe(&["run", "-c", &cfg, "--mode", "sideways"])), 2);
    assert_eq!(code(&hypoprobe(&["frobnicate"])), 2);

    let with_secret = dir.path().join("secret.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["method"] = "${HYPOPROBE_CLI_KEY}".into();
    std::fs::write(&with_secret, v.to_string()).unwrap();
    let o = hypoprobe(&["run", "-c", with_secret.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("HYPOPROBE_CLI_KEY"));
}

#[test]
fn protocol_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo(dir.path());
    let script = serde_json::json!({
        "rules": [{"contains": ["[HYPOTHESIS LIST]"], "response": "Hypothesis_1: a\nHypothesis_2: b\nHypothesis_3: c\nHypothesis_4: d"}],
        "default": "I would rather not say."
    });
    std::fs::write(dir.path().join("script.json"), script.to_string()).unwrap();
    let o = hypoprobe(&["explain", "-c", &cfg]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    let ledger = std::fs::read_to_string(dir.path().join("results/toy-lm/3/3/ledger.jsonl")).unwrap();
    assert!(ledger.trim().is_empty());
}

#[test]
fn unreachable_backend_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo(dir.path());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["mode"] = "live".into();
    v["backend"] = serde_json::json!({"kind": "remote", "base_url": format!("http://127.0.0.1:{port}")});
    let live = dir.path().join("live.json");
    std::fs::write(&live, v.to_string()).unwrap();
    let o = hypoprobe(&["run", "-c", live.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let missing = dir.path().join("no-cassettes");
    assert_eq!(code(&hypoprobe(&["replay", "-c", live.to_str().unwrap(), "--cassettes", missing.to_str().unwrap()])), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unreachable"));
}

#[test]
fn report_single_feature_and_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo(dir.path());
    assert_eq!(code(&hypoprobe(&["run", "-c", &cfg])), 0);
    let o = hypoprobe(&["report", dir.path().join("results/toy-lm/7").to_str().unwrap(), "--json"]);
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["rows"].as_array().unwrap().len(), 1);
    assert_eq!(r["rows"][0]["gen_mean"], 0.9);
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(code(&hypoprobe(&["report", empty.path().to_str().unwrap()])), 2);
}
