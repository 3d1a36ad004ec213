use std::path::Path;
use std::process::{Command, Output};

fn esc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn esc")
}

fn ok(args: &[&str]) -> String {
    let out = esc(args);
    assert!(
        out.status.success(),
        "esc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    esc(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn erf_describe_reports_each_desk_erf() {
    for erf in [7, 15, 31, 63] {
        let s = ok(&["erf", "describe", "--erf", &erf.to_string(), "--desk"]);
        assert!(s.contains(&format!("theoretical ERF {erf} px")), "{s}");
    }
    let s = ok(&["erf", "describe", "--erf", "7", "--desk", "--followup", "one-by-one"]);
    assert!(s.contains("theoretical ERF 7 px"), "{s}");
    let s = ok(&["erf", "describe", "--erf", "7", "--desk", "--followup", "aggregating"]);
    assert!(!s.contains("theoretical ERF 7 px"), "{s}");
}

#[test]
fn count_params_width_match_lands_within_one_percent() {
    let s = ok(&["count-params", "--erf", "7", "--desk", "--match-erf", "63"]);
    let pct: f64 = s
        .split('(')
        .nth(1)
        .and_then(|t| t.split('%').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(pct.abs() < 1.0, "{s}");
    assert!(s.contains("ERF still 7"), "{s}");
}

#[test]
fn exit_codes_separate_config_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["count-params", "--erf", "8", "--desk"]), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"data": "x"}"#).unwrap();
    assert_eq!(code(&["train", "--config", p(&bad)]), 2);
    std::fs::write(&bad, r#"{"schema_version": 1, "name": "x", "seed": 0, "stages": ["bogus"]}"#).unwrap();
    assert_eq!(code(&["run-plan", p(&bad), "--out", p(dir.path())]), 2);
    assert_eq!(code(&["train", "--config", p(&dir.path().join("missing.json"))]), 3);
    assert_eq!(code(&["report", p(&dir.path().join("nothing"))]), 3);
    assert_eq!(code(&["gen-data", "--regime", "marble", "--out", p(dir.path())]), 2);
    assert_eq!(code(&["gen-data", "--regime", "shape", "--classes", "1", "--out", p(dir.path())]), 2);
}

#[test]
fn single_model_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&[
        "gen-data", "--regime", "shape", "--classes", "4", "--train-per-class", "4", "--test-per-class", "3",
        "--seed", "5", "--out", p(&data),
    ]);
    assert!(data.join("manifest.json").exists());

    std::fs::write(
        root.join("base.json"),
        r#"{"data": "data", "out": "models/erf7.ckpt", "erf": 7, "variant": "base", "epochs": 1, "batch_size": 8, "seed": 1}"#,
    )
    .unwrap();
    ok(&["train", "--config", p(&root.join("base.json"))]);
    let base = root.join("models/erf7.ckpt");
    assert!(base.exists());

    std::fs::write(
        root.join("followup.json"),
        r#"{"data": "data", "out": "models/erf7-scrambled.ckpt", "erf": 7, "variant": "base_followup_scrambled",
            "base_checkpoint": "models/erf7.ckpt", "epochs": 1, "batch_size": 8, "seed": 2}"#,
    )
    .unwrap();
    ok(&["train", "--config", p(&root.join("followup.json"))]);
    let follow = root.join("models/erf7-scrambled.ckpt");

    let before = root.join("eval/plain");
    let after = root.join("eval/global");
    ok(&["eval", "--checkpoint", p(&follow), "--data", p(&data), "--out", p(&before)]);
    ok(&[
        "eval", "--checkpoint", p(&follow), "--data", p(&data), "--scramble", "global", "--seed", "3", "--out",
        p(&after),
    ]);
    let csv = std::fs::read_to_string(after.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("class,precision,recall,f1,support,ratio,eligible"));
    ok(&[
        "scramble-report", "--before", p(&before.with_extension("json")), "--after",
        p(&after.with_extension("json")), "--out", p(&root.join("eval/report")),
    ]);
    assert_eq!(
        code(&["eval", "--checkpoint", p(&base), "--data", p(&data), "--scramble", "global"]),
        2,
        "scrambling needs a follow-up boundary"
    );

    let rsa = root.join("rsa");
    ok(&[
        "rsa", "--checkpoint", p(&base), "--checkpoint", p(&follow), "--data", p(&data), "--images-per-class", "2",
        "--out", p(&rsa),
    ]);
    assert_eq!(std::fs::read_to_string(rsa.join("r2.csv")).unwrap().lines().count(), 3);
    assert!(rsa.join("second_order.rdm").exists());

    let mirc = root.join("mirc");
    ok(&["mirc", "--checkpoint", p(&base), "--dataset", p(&data), "--cap", "3", "--out", p(&mirc)]);
    for f in ["trees.json", "images.csv", "histogram.csv", "run.json"] {
        assert!(mirc.join(f).exists(), "{f}");
    }
    let images = std::fs::read_to_string(mirc.join("images.csv")).unwrap();
    assert_eq!(images.lines().count(), 13);
    let with_mircs = images
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(4).is_some_and(|n| n != "0"))
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .next();
    if let Some(class) = with_mircs {
        let out = root.join("cluster");
        ok(&[
            "mirc-cluster", "--mirc-dir", p(&mirc), "--class", &class, "--k", "1", "--per-cluster", "1", "--out",
            p(&out),
        ]);
        assert!(out.join("clusters.json").exists());
    }
}

#[test]
fn per_class_sets_a_five_to_one_split() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(&[
        "gen-data", "--regime", "texture", "--classes", "3", "--per-class", "10", "--size", "32", "--out",
        p(dir.path()),
    ]);
    assert!(s.starts_with("36 samples"), "{s}");
}

#[test]
fn run_plan_print_and_smoke_preset() {
    let s = ok(&["run-plan", "--preset", "smoke", "--seed", "9", "--print"]);
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["name"], "smoke");

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let s = ok(&["run-plan", "--preset", "smoke", "--out", p(&out)]);
    assert!(s.contains("skipped: []"), "{s}");
    let s = ok(&["run-plan", "--preset", "smoke", "--out", p(&out)]);
    assert!(s.contains("ran: []"), "{s}");
    std::fs::remove_dir_all(out.join("reports")).unwrap();
    ok(&["report", p(&out)]);
    assert!(out.join("reports/erf_accuracy.csv").exists());
}
