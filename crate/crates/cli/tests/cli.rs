use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &["--width", "8", "--n-regions", "4", "--n-blocks", "1", "--image-size", "64"];

fn rpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpt"))
        .args(args)
        .env_remove("RPT_SEED")
        .output()
        .expect("spawn rpt")
}

fn ok(args: &[&str]) -> String {
    let out = rpt(args);
    assert!(out.status.success(), "rpt {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) {
    ok(&["make-data", "--out", s(dir), "--patients", "10", "--size", "64", "--depth", "16", "--seed", "3"]);
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--iterations", "10"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    rpt(&args)
}

fn loss_rows(dir: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(dir.join("loss.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn make_data_is_deterministic() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    small_data(&a);
    small_data(&b);
    for f in ["manifest.json", "patient000/volume.rfv", "patient009/pseudo.rfv"] {
        let (x, y) = (std::fs::read(a.join(f)), std::fs::read(b.join(f)));
        assert!(x.is_ok(), "missing {f}");
        assert_eq!(x.unwrap(), y.unwrap(), "{f} differs");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["patients"].as_array().unwrap().len(), 10);
    assert_eq!(manifest["classes"][1]["name"], "organ2");
}

#[test]
fn bad_input_exits_two() {
    let t = TempDir::new().unwrap();
    let out = rpt(&["make-data", "--out", s(t.path()), "--patients", "0"]);
    assert_eq!(code(&out), 2);

    let cfg = t.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"fold": 1, "learning_rate": 3}"#).unwrap();
    let out = rpt(&["train", "--config", s(&cfg), "--data", s(t.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let out = rpt(&["ablate", "--data", s(t.path()), "--out", s(t.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_plot_round_trip() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    small_data(&data);

    let run = t.path().join("run");
    let out = train_small(&data, &run, &["--fold", "0", "--setting", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(loss_rows(&run).len(), 10);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(saved["setting"], 2);
    assert_eq!(saved["train"]["iterations"], 10);
    assert_eq!(saved["train"]["model"]["width"], 8);

    let ckpt = run.join("model.ckpt");
    let stdout = ok(&["eval", "--data", s(&data), "--out", s(&run), "--checkpoint", s(&ckpt), "--image-size", "64"]);
    assert!(stdout.contains("mean Dice: "));
    assert!(run.join("eval_fold0.json").exists());

    ok(&["plot", "--run", s(&run), "--panels", "2"]);
    let pngs = std::fs::read_dir(&run)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert!(pngs >= 3, "only {pngs} figures");

    let out = rpt(&["eval", "--data", s(&data), "--out", s(&run), "--checkpoint", s(&t.path().join("none.ckpt"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn seed_from_environment_is_overridden_by_flag() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    small_data(&data);
    let seed_of = |dir: &Path| -> u64 {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("run_config.json")).unwrap()).unwrap();
        v["train"]["seed"].as_u64().unwrap()
    };
    let env_run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--data", s(&data), "--out", s(out), "--iterations", "2"];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_rpt")).args(&args).env("RPT_SEED", "42").output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    env_run(&t.path().join("env"), &[]);
    assert_eq!(seed_of(&t.path().join("env")), 42);
    env_run(&t.path().join("flag"), &["--seed", "5"]);
    assert_eq!(seed_of(&t.path().join("flag")), 5);
}

#[test]
fn oracle_fixture_scores_one_hundred_on_every_fold() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    small_data(&data);
    let ckpt = t.path().join("oracle.ckpt");
    ok(&["make-fixture", "--kind", "oracle", "--out", s(&ckpt)]);
    let out = t.path().join("eval");
    let stdout = ok(&[
        "eval", "--data", s(&data), "--out", s(&out), "--checkpoint", s(&ckpt), "--folds", "all", "--image-size", "64",
    ]);
    assert!(stdout.contains("mean Dice: 100.00"), "{stdout}");
    for k in 0..5 {
        let r: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join(format!("eval_fold{k}.json"))).unwrap()).unwrap();
        assert_eq!(r["fold"], k);
        assert_eq!(r["setting"], 1);
        assert_eq!(r["mean"], 100.0);
        assert!(r["per_class"]["organ1"].is_number());
    }
    assert!(out.join("eval_all.json").exists());
}

#[test]
fn divergence_exits_three_and_keeps_last_good_weights() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    small_data(&data);
    let run = t.path().join("run");
    let out = train_small(&data, &run, &["--lr", "1e30"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("last_good.ckpt").exists());
}
