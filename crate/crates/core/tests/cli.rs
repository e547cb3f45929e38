use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lhe_cnn::tensor::{load_bundle, take_tensor};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lhe-cnn")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn derive_params_prints_plan() {
    let o = run(&["derive-params", "--config", path(&fixture("cnn12/model.toml"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("levels"), "{}", stdout(&o));
}

#[test]
fn worked_example_infers_exactly() {
    let o = run(&[
        "infer",
        "--config",
        path(&fixture("fig2/model.toml")),
        "--weights",
        path(&fixture("fig2/weights.txt")),
        "--inputs",
        path(&fixture("fig2/inputs.txt")),
        "--no-activation",
        "--compare-oracle",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("36 76\n72 152\n"), "{text}");
    assert!(text.contains("oracle: pass"), "{text}");
}

#[test]
fn report_goes_to_out_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("estimate.csv");
    let o = run(&[
        "estimate",
        "--config",
        path(&fixture("cnn12/model.toml")),
        "--report",
        "csv",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.contains("total,10030337"), "{csv}");
}

#[test]
fn train_step_with_zero_rate_keeps_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("updated.txt");
    let o = run(&[
        "train-step",
        "--config",
        path(&fixture("desk/model.toml")),
        "--weights",
        path(&fixture("desk/weights.txt")),
        "--inputs",
        path(&fixture("desk/inputs.txt")),
        "--labels",
        path(&fixture("desk/labels.txt")),
        "--eta",
        "0",
        "--compare-oracle",
        "--weights-out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let before = load_bundle(&fixture("desk/weights.txt")).unwrap();
    let after = load_bundle(&out).unwrap();
    assert_eq!(before, after);
}

#[test]
fn train_step_matches_sgd() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("updated.bin");
    let o = run(&[
        "--workers",
        "2",
        "train-step",
        "--config",
        path(&fixture("desk/model.toml")),
        "--weights",
        path(&fixture("desk/weights.txt")),
        "--inputs",
        path(&fixture("desk/inputs.txt")),
        "--labels",
        path(&fixture("desk/labels.txt")),
        "--compare-oracle",
        "--weights-out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("oracle: pass"));
    let after = load_bundle(&out).unwrap();
    let before = load_bundle(&fixture("desk/weights.txt")).unwrap();
    assert_eq!(after.len(), before.len());
    let name = before.keys().next().unwrap().clone();
    assert_ne!(take_tensor(&after, &name).unwrap(), take_tensor(&before, &name).unwrap());
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "input_side = 0\n").unwrap();
    assert_eq!(run(&["derive-params", "--config", path(&bad)]).status.code(), Some(2));

    let oversized = run(&["derive-params", "--config", path(&fixture("cnn12/model.toml")), "--n", "48"]);
    assert_eq!(oversized.status.code(), Some(2));

    let missing = run(&["derive-params", "--config", path(&dir.path().join("none.toml"))]);
    assert_eq!(missing.status.code(), Some(1));

}
