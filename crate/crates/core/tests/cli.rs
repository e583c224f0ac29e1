use std::fs;
use std::path::{Path, PathBuf};

use fairmimic::cli::run;

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("fairmimic").chain(args.iter().copied()))
}

fn fit_fixture(out: &Path, extra: &[&str]) -> i32 {
    let out = out.display().to_string();
    let data = fixture("small.csv");
    let roles = fixture("small_roles.json");
    let mut args = vec!["fit", "--data", &data, "--roles", &roles, "--out-dir", &out];
    args.extend_from_slice(extra);
    cli(&args)
}

fn read_json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_on_fixture_converges_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fit_fixture(dir.path(), &["--free-dif", "chronic_conditions"]), 0);
    for f in ["model.json", "fit_report.json", "transform_record.json", "fit_config.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report = read_json(dir.path().join("fit_report.json"));
    assert_eq!(report["fit"]["converged"], true);
    let config = read_json(dir.path().join("fit_config.json"));
    assert_eq!(config["subcommand"], "fit");
}

#[test]
fn refit_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(fit_fixture(a.path(), &[]), 0);
    assert_eq!(fit_fixture(b.path(), &[]), 0);
    for f in ["model.json", "fit_report.json", "transform_record.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupt_csv_is_an_input_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = fs::read_to_string(fixture("small.csv")).unwrap();
    text = text.replacen("\n1,", "\n1,not_a_number,", 1);
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, text).unwrap();
    let out = dir.path().join("out");
    let code = cli(&[
        "fit",
        "--data",
        bad.to_str().unwrap(),
        "--roles",
        &fixture("small_roles.json"),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(!out.exists());
}

#[test]
fn model_and_data_schema_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fit_fixture(dir.path(), &[]), 0);
    let text = fs::read_to_string(fixture("small.csv")).unwrap().replacen("hba1c", "glucose", 1);
    let renamed = dir.path().join("renamed.csv");
    fs::write(&renamed, text).unwrap();
    let roles = fs::read_to_string(fixture("small_roles.json")).unwrap().replace("hba1c", "glucose");
    let roles_path = dir.path().join("renamed_roles.json");
    fs::write(&roles_path, roles).unwrap();
    let out = dir.path().join("scores");
    let code = cli(&[
        "score",
        "--data",
        renamed.to_str().unwrap(),
        "--roles",
        roles_path.to_str().unwrap(),
        "--model",
        dir.path().join("model.json").to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(!out.exists());
}

#[test]
fn iteration_cap_reports_non_convergence_but_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fit_fixture(dir.path(), &["--max-iter", "1"]), 2);
    let report = read_json(dir.path().join("fit_report.json"));
    assert_eq!(report["fit"]["converged"], false);
}

#[test]
fn dif_table_has_eight_columns() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fit_fixture(dir.path(), &[]), 0);
    let out = dir.path().join("dif");
    let code = cli(&[
        "dif",
        "--data",
        &fixture("small.csv"),
        "--roles",
        &fixture("small_roles.json"),
        "--model",
        dir.path().join("model.json").to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let table = fs::read_to_string(out.join("dif_table.txt")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        assert_eq!(row.split_whitespace().count(), 8, "{row}");
    }
    let report = read_json(out.join("dif_report.json"));
    let cost = report["rows"].as_array().unwrap().iter().find(|r| r["indicator"] == "cost").unwrap();
    assert!(cost["percent_effect"].is_object());
}

#[test]
fn score_then_audit_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fit_fixture(dir.path(), &[]), 0);
    let model = dir.path().join("model.json").display().to_string();
    let scores = dir.path().join("score");
    let audit = dir.path().join("audit");
    let data = fixture("small.csv");
    let roles = fixture("small_roles.json");
    let code = cli(&[
        "score", "--data", &data, "--roles", &roles, "--model", &model, "--out-dir", scores.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let scores_csv = scores.join("scores.csv").display().to_string();
    let code = cli(&[
        "audit", "--data", &data, "--roles", &roles, "--model", &model, "--scores", &scores_csv, "--out-dir",
        audit.to_str().unwrap(), "--outcome-percentile", "50",
    ]);
    assert_eq!(code, 0);
    for f in ["parity.json", "curve_fair.csv", "curve_naive.csv", "audit.json", "comparison.csv"] {
        assert!(audit.join(f).exists(), "{f}");
    }
}
