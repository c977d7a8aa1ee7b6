use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[synth]
num_classes = 4
cubes_per_class = 12
height = 8
width = 8
channels = 8
per_class_train = 8

[prep]
per_class_train = 8

[model]
reduction_ratio = 4
stage_widths = [4]
blocks_per_stage = 1
embedding_dim = 8

[train]
shot = 2
query = 2
epochs = 3

[eval]
shot = 2
repetitions = 3

[baseline]
epochs = 2
batch_size = 8
"#;

fn hsfs(dir: &Path, args: &[&str]) -> Output {
    let out = dir.join("out");
    let config = dir.join("run.toml");
    if !config.exists() {
        fs::write(&config, CONFIG).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_hsfs"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = hsfs(dir, args);
    assert!(
        o.status.success(),
        "hsfs {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "one summary line: {stdout}");
    stdout
}

fn err(dir: &Path, args: &[&str]) -> String {
    let o = hsfs(dir, args);
    assert!(!o.status.success(), "hsfs {args:?} unexpectedly succeeded");
    String::from_utf8(o.stderr).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn complete_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ok(d, &["synth"]).contains("48 cubes"));
    ok(d, &["train"]);
    ok(d, &["ccp"]);
    let line = ok(d, &["eval", "--baseline"]);
    assert!(
        line.contains("CCP accuracy") && line.contains("supervised"),
        "{line}"
    );
    ok(d, &["report"]);

    let out = d.join("out");
    for f in [
        "model/checkpoint.hsck",
        "model/trainlog.json",
        "model/trainlog.jsonl",
        "model/ccp.json",
        "reports/confusion-complete.csv",
        "reports/confusion-difference.csv",
        "reports/attention-heatmap.csv",
        "reports/embeddings-test.csv",
        "reports/embeddings-ccp.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let doc = json(&out.join("reports/eval-complete.json"));
    let acc = doc["result"]["report"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(doc["config"]["model"]["in_channels"], 8);
    assert_eq!(
        doc["digests"]["model"],
        json(&out.join("reports/train.json"))["digests"]["model"]
    );
    // 8 train cubes per class at 2+2 per episode.
    assert_eq!(
        doc["result"]["support_sets"]["per_set"]
            .as_array()
            .unwrap()
            .len(),
        2
    );

    let ccp_rows = fs::read_to_string(out.join("reports/embeddings-ccp.csv")).unwrap();
    assert_eq!(ccp_rows.lines().count(), 1 + 4);

    let a = out.join("reports/eval-complete.json");
    ok(
        d,
        &[
            "report",
            "--compare",
            a.to_str().unwrap(),
            a.to_str().unwrap(),
        ],
    );
    let diff = fs::read_to_string(out.join("reports/confusion-compare.csv")).unwrap();
    assert!(diff
        .lines()
        .skip(1)
        .all(|l| l.split(',').skip(2).all(|v| v == "0")));
}

#[test]
fn complete_eval_without_bank_asks_for_ccp() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth"]);
    ok(d, &["train"]);
    let msg = err(d, &["eval"]);
    assert!(msg.contains("hsfs ccp"), "{msg}");
}

#[test]
fn missing_upstream_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let msg = err(dir.path(), &["train"]);
    assert!(msg.contains("hsfs synth"), "{msg}");
    let msg = err(dir.path(), &["ccp"]);
    assert!(msg.contains("hsfs train"), "{msg}");
}

#[test]
fn rerun_reproduces_reports_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = || {
        ok(d, &["synth", "--seed", "3"]);
        ok(d, &["train", "--seed", "3"]);
        ok(d, &["ccp", "--seed", "3"]);
        ok(d, &["eval", "--seed", "3"]);
        [
            "reports/eval-complete.json",
            "reports/confusion-complete.csv",
            "model/ccp.json",
            "model/checkpoint.hsck",
        ]
        .map(|f| fs::read(d.join("out").join(f)).unwrap())
    };
    let first = run();
    fs::remove_dir_all(d.join("out")).unwrap();
    let second = run();
    assert!(first == second, "outputs differ between identical runs");
}

#[test]
fn partial_class_protocols() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth"]);
    let msg = err(d, &["eval", "--protocol", "partial-s1"]);
    assert!(msg.contains("--exclude"), "{msg}");

    ok(d, &["train"]);
    let msg = err(
        d,
        &[
            "eval",
            "--protocol",
            "partial-s1",
            "--exclude",
            "class01,class03",
        ],
    );
    assert!(msg.contains("seen in training"), "{msg}");

    let line = ok(d, &["train", "--exclude", "class01,class03"]);
    assert!(line.contains("2-way"), "{line}");
    let s1 = ok(
        d,
        &[
            "eval",
            "--protocol",
            "partial-s1",
            "--exclude",
            "class01,class03",
        ],
    );
    let s2 = ok(
        d,
        &[
            "eval",
            "--protocol",
            "partial-s2",
            "--exclude",
            "class01,class03",
        ],
    );
    assert!(s1.contains("strategy 1") && s2.contains("strategy 2"));
    let out = d.join("out/reports");
    let one = json(&out.join("eval-partial-s1.json"));
    let two = json(&out.join("eval-partial-s2.json"));
    assert!(two["result"]["accuracy"].as_f64() <= one["result"]["accuracy"].as_f64());
    assert_eq!(
        two["result"]["study"]["misclassification"]
            .as_array()
            .unwrap()
            .len(),
        4
    );
    assert!(out.join("confusion-partial-s2.csv").exists());

    let msg = err(
        d,
        &["eval", "--protocol", "partial-s1", "--exclude", "nope"],
    );
    assert!(msg.contains("unknown class"), "{msg}");
}

#[test]
fn prep_trims_reduces_and_crops() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth"]);
    fs::write(
        d.join("run.toml"),
        format!(
            "{CONFIG}\n[prep]\ntrim_head = 1\ntrim_tail = 1\nreduce_factor = 2\nwindow = 4\nstride = 4\ndensity_threshold = 0.0\nper_class_train = 40\n"
        )
        .replace("[prep]\nper_class_train = 8\n", ""),
    )
    .unwrap();
    let line = ok(d, &["prep"]);
    assert!(line.contains("192 prepared cubes"), "{line}");
    let m = json(&d.join("out/data/prepared/train.json"));
    assert_eq!(m["entries"].as_array().unwrap().len(), 160);
    let first = m["entries"][0]["path"].as_str().unwrap();
    let header = json(&d.join("out/data/prepared").join(format!("{first}.json")));
    assert_eq!(
        (header["channels"].as_u64(), header["height"].as_u64()),
        (Some(3), Some(4))
    );
}

#[test]
fn invalid_values_fail_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    err(d, &["synth", "--attention", "maybe"]);
    let msg = err(d, &["prep", "--reduce-factor", "0"]);
    assert!(msg.contains("reduce_factor"), "{msg}");
    assert!(!d.join("out/data").exists());
}
