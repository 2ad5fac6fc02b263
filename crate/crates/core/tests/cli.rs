use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cosal_camo::harness::fixture::{generate, FixtureKind};
use cosal_camo::harness::RunReport;
use cosal_camo::raster::load_image;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosal-camo")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fixture_detect_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let group = tmp.path().join("g");
    ok(&["fixture", "--kind", "disc-group", "--n", "3", "--size", "48", "--seed", "5", "--out", path(&group)]);
    let expected = generate(FixtureKind::DiscGroup, 3, 48, 5).unwrap();
    for f in &expected {
        assert_eq!(load_image(group.join("images").join(format!("{}.png", f.stem))).unwrap(), f.image);
    }

    let det = tmp.path().join("det");
    ok(&["detect", "--group", path(&group), "--out", path(&det)]);
    let scored = tmp.path().join("scored");
    let stdout = ok(&["eval", "--group", path(&group), "--maps", path(&det.join("maps")), "--out", path(&scored)]);
    assert!(stdout.contains("\"S\""), "{stdout}");
    let csv = fs::read_to_string(scored.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("image,iou,success,ap,f_beta,mae"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn attack_writes_images_and_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let group = tmp.path().join("g");
    ok(&["fixture", "--n", "2", "--size", "32", "--out", path(&group)]);
    let config = tmp.path().join("c.json");
    fs::write(&config, r#"{"iterations":3,"degree":2,"targets":[1]}"#).unwrap();
    let out = tmp.path().join("a");
    ok(&["attack", "--config", path(&config), "--group", path(&group), "--out", path(&out), "--variant", "single"]);
    assert!(out.join("adv/001.png").is_file());
    assert!(!out.join("adv/000.png").exists());
    assert_eq!(fs::read_to_string(out.join("traces/001.jsonl")).unwrap().lines().count(), 3);
    assert!(fs::read_to_string(out.join("exposure/001.txt")).unwrap().contains("degree = 2"));
}

#[test]
fn experiment_single_condition() {
    let tmp = tempfile::tempdir().unwrap();
    let group = tmp.path().join("g");
    ok(&["fixture", "--n", "2", "--size", "32", "--out", path(&group)]);
    let config = tmp.path().join("c.json");
    fs::write(&config, r#"{"iterations":2,"degree":1}"#).unwrap();
    let out = tmp.path().join("run");
    let stdout = ok(&[
        "experiment", "--config", path(&config), "--group", path(&group), "--out", path(&out),
        "--condition", "w/o noise", "--seed", "4",
    ]);
    assert!(stdout.contains("wo-noise"), "{stdout}");
    let report = RunReport::load(out.join("report.json")).unwrap();
    assert_eq!(report.seed, 4);
    assert_eq!(report.conditions.len(), 1);
    assert!(!report.conditions[0].settings.enable_noise);
    assert!(out.join("wo-noise/metrics.csv").is_file());
}

#[test]
fn bad_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let group = tmp.path().join("g");
    ok(&["fixture", "--n", "2", "--size", "32", "--out", path(&group)]);
    let config = tmp.path().join("c.json");
    fs::write(&config, r#"{"iterations":0}"#).unwrap();
    let out = cli(&["experiment", "--config", path(&config), "--group", path(&group), "--out", path(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("iterations"));

    let out = cli(&["detect", "--group", path(&tmp.path().join("missing")), "--out", path(&tmp.path().join("o"))]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_exits_zero() {
    let stdout = ok(&["gradcheck"]);
    assert!(stdout.contains("40 of 40 checks passed"), "{stdout}");
}
