use std::path::Path;
use std::process::{Command, Output};

const DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data");

fn fga(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fga"))
        .arg("--store")
        .arg(store)
        .args(args)
        .env_remove("FGA_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn bundled_store() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = fga(&dir.path().join("s"), &["kb", "import", "--bundled"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "110 records");
    dir
}

#[test]
fn import_counts_records() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("facts.jsonl");
    let lines: Vec<String> = (0..3)
        .map(|i| {
            format!(
                r#"{{"entity_id":"phone:test_{i}","attribute":"weight","value":"{}","unit":"g","confidence":1.0,"source":"test","timestamp":"2024-01-01T00:00:00Z"}}"#,
                180 + i
            )
        })
        .collect();
    std::fs::write(&file, lines.join("\n")).unwrap();
    let o = fga(&dir.path().join("s"), &["kb", "import", file.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "3 records");
    let got = fga(&dir.path().join("s"), &["kb", "get", "phone:test_2", "weight"]);
    assert_eq!(stdout(&got).trim(), "182 g");
}

#[test]
fn missing_entity_is_a_data_error() {
    let dir = bundled_store();
    let o = fga(&dir.path().join("s"), &["kb", "get", "phone:unknown", "battery_capacity"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("entity not found"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fga(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fga(dir.path(), &["bench", "latency"]).status.code(), Some(1));
    let o = fga(dir.path(), &["generate", "--alpha-mode", "learned", "hi"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn update_prints_latency_and_changes_the_answer() {
    let dir = bundled_store();
    let store = dir.path().join("s");
    let prompt = "What is the battery capacity of the iPhone 15 Pro?";
    let before = stdout(&fga(&store, &["generate", prompt]));
    assert!(before.contains("3274") || before.contains("3,274"), "{before}");
    let o = fga(&store, &["kb", "update", "phone:iphone_15_pro", "battery_capacity", "3500 mAh"]);
    let text = stdout(&o);
    let ms: f64 = text.split_whitespace().rev().nth(1).unwrap().parse().unwrap();
    assert!(ms < 1000.0, "{text}");
    let after = stdout(&fga(&store, &["generate", prompt]));
    assert!(after.contains("3500") || after.contains("3,500"), "{after}");
    assert_eq!(stdout(&fga(&store, &["kb", "get", "phone:iphone_15_pro", "battery_capacity"])).trim(), "3500 mAh");
}

#[test]
fn trace_shows_the_heuristic_gate_and_the_kb_entry() {
    let dir = bundled_store();
    let o = fga(
        &dir.path().join("s"),
        &["generate", "--trace", "--alpha-mode", "heuristic", "What USB standard does the base iPhone 15 use?"],
    );
    let text = stdout(&o);
    assert!(text.contains("alpha=0.800"), "{text}");
    assert!(text.contains("fact=phone:iphone_15/usb_standard"), "{text}");
    assert!(text.to_lowercase().contains("usb-c 2.0"), "{text}");
}

#[test]
fn no_fga_runs_the_baseline() {
    let dir = bundled_store();
    let o = fga(&dir.path().join("s"), &["generate", "--no-fga", "--trace", "What is the battery capacity of the iPhone 15 Pro?"]);
    let text = stdout(&o);
    assert!(o.status.success());
    assert!(text.contains("alpha=-") && !text.contains("constrained=true"), "{text}");
}

#[test]
fn eval_reports_and_rejudges() {
    let dir = bundled_store();
    let store = dir.path().join("s");
    let out = dir.path().join("ev");
    let queries = format!("{DATA}/queries.jsonl");
    let o = fga(&store, &["eval", &queries, "--mode", "fga", "--mode", "baseline", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("guarantee scope       100.0%"), "{text}");
    let judged = stdout(&fga(&store, &["judge", out.join("eval_records.jsonl").to_str().unwrap()]));
    assert!(text.contains(&judged));
    let csv = std::fs::read_to_string(out.join("eval_cells.csv")).unwrap();
    assert!(csv.starts_with("# seed=42 config_hash="));
}

#[test]
fn empty_dataset_is_rejected() {
    let dir = bundled_store();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = fga(&dir.path().join("s"), &["eval", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_gate_is_reproducible() {
    let dir = bundled_store();
    let store = dir.path().join("s");
    let corpus = format!("{DATA}/gate_corpus.jsonl");
    let config = format!("{DATA}/train_config.json");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = fga(&store, &["train-gate", &corpus, &config, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let a = run("a.fgat");
    let b = run("b.fgat");
    let ece: f64 = a.lines().find(|l| l.starts_with("held-out ECE")).unwrap().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(ece <= 0.1);
    let digest = |s: &str| s.lines().last().unwrap().rsplit(' ').next().unwrap().to_string();
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(std::fs::read(dir.path().join("a.fgat")).unwrap(), std::fs::read(dir.path().join("b.fgat")).unwrap());

    let learned = stdout(&fga(
        &store,
        &["generate", "--alpha-mode", "learned", "--gate", dir.path().join("a.fgat").to_str().unwrap(), "How many seats does the Tesla Model Y Long Range have?"],
    ));
    assert!(learned.contains('7'), "{learned}");
}

#[test]
fn single_class_corpus_exits_with_a_data_error() {
    let dir = bundled_store();
    let corpus = dir.path().join("creative.jsonl");
    let line = r#"{"query":"write a haiku about autumn","gold_answer":"n/a","context_class":"creative"}"#;
    std::fs::write(&corpus, [line; 6].join("\n")).unwrap();
    let config = format!("{DATA}/train_config.json");
    let o = fga(&dir.path().join("s"), &["train-gate", corpus.to_str().unwrap(), &config, "--out", dir.path().join("g").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("degenerate"));
}

#[test]
fn bench_writes_self_describing_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = fga(&dir.path().join("s"), &["bench", "amplification", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("odds_ratio_alpha0.8_g5            54.598150"), "{text}");
    let dat = std::fs::read_to_string(out.join("amplification_odds.dat")).unwrap();
    assert!(dat.starts_with("# suite=amplification seed=42 config_hash="));
}

#[test]
fn seed_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fga"))
        .args(["--store", dir.path().to_str().unwrap(), "bench", "amplification"])
        .env("FGA_SEED", "9")
        .output()
        .unwrap();
    assert!(stdout(&o).starts_with("suite=amplification seed=9 "));
}

#[test]
fn generation_is_deterministic() {
    let dir = bundled_store();
    let store = dir.path().join("s");
    let prompt = "Tell me something about the Pixel 8 Pro";
    let a = stdout(&fga(&store, &["generate", "--trace", prompt]));
    let b = stdout(&fga(&store, &["generate", "--trace", prompt]));
    assert_eq!(a, b);
}
