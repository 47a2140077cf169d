use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mlsa"))
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/small.toml")
}

fn golden(name: &str) -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

fn exec(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (
        status.code().unwrap(),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

fn write_variant(dir: &Path, from: &str, to: &str) -> PathBuf {
    let text = fs::read_to_string(fixture()).unwrap();
    assert!(text.contains(from), "{from}");
    let p = dir.join("cfg.toml");
    fs::write(&p, text.replace(from, to)).unwrap();
    p
}

#[test]
fn validate_accepts_and_matches_golden() {
    let (code, out, _) = exec(bin().arg("validate").arg(fixture()));
    assert_eq!(code, 0);
    assert!(out.contains("accepted"));
    assert_eq!(out, golden("validate.txt"));
}

#[test]
fn validate_rejects_infeasible_beta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_variant(dir.path(), "beta = 0.5", "beta = 1.2");
    let (code, out, _) = exec(bin().arg("validate").arg(cfg));
    assert_eq!(code, 1);
    assert!(out.contains("β < 1"), "{out}");
}

#[test]
fn malformed_file_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_variant(dir.path(), "alpha = 1.0", "alpha = = 1.0");
    let (code, _, err) = exec(bin().arg("validate").arg(&cfg));
    assert_eq!(code, 2);
    assert!(err.contains("line"), "{err}");
    let cfg = write_variant(dir.path(), "[output]", "[output]\nextra = 1");
    assert_eq!(exec(bin().arg("run").arg(&cfg)).0, 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(exec(bin().arg("frobnicate")).0, 2);
    assert_eq!(exec(bin().arg("run")).0, 2);
    assert_eq!(exec(bin().args(["run", "--workers", "many"]).arg(fixture())).0, 2);
}

#[test]
fn zero_replicas_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_variant(dir.path(), "replicas = 100", "replicas = 0");
    let (code, _, err) = exec(bin().arg("validate").arg(&cfg));
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = exec(bin().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("o")));
    assert_eq!(code, 1);
    assert!(!dir.path().join("o").exists());
}

#[test]
fn predict_matches_golden() {
    let (code, out, _) = exec(bin().arg("predict").arg(fixture()));
    assert_eq!(code, 0);
    assert_eq!(out, golden("predict.txt"));
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (code, out, err) = exec(bin().arg("run").arg(fixture()).arg("--out").arg(&a).args(["--workers", "1"]));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("replicas 100"));
    assert_eq!(exec(bin().arg("run").arg(fixture()).arg("--out").arg(&b).args(["--workers", "4"])).0, 0);

    let ma = manifest(&a);
    assert_eq!(ma["complete"], true);
    let files = ma["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["records.csv", "clt_report.json", "cost_curve.csv", "l2_monitor.json"]);
    assert_eq!(ma, manifest(&b));
    for name in names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }

    let hash = ma["config_hash"].as_str().unwrap();
    for csv in ["records.csv", "cost_curve.csv"] {
        let first = fs::read_to_string(a.join(csv)).unwrap().lines().next().unwrap().to_owned();
        assert_eq!(first, format!("# config_hash={hash} master_seed=11"));
    }
    for json in ["clt_report.json", "l2_monitor.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join(json)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], hash);
        assert_eq!(v["master_seed"], 11);
    }
}

#[test]
fn seed_flag_changes_results_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(exec(bin().arg("run").arg(fixture()).arg("--out").arg(&a)).0, 0);
    assert_eq!(exec(bin().arg("run").arg(fixture()).arg("--out").arg(&b).args(["--seed", "12"])).0, 0);
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_ne!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(mb["master_seed"], 12);
    assert_ne!(fs::read(a.join("records.csv")).unwrap(), fs::read(b.join("records.csv")).unwrap());
}

#[test]
fn plot_renders_slow_guide_and_qq() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert_eq!(exec(bin().arg("run").arg(fixture()).arg("--out").arg(&run)).0, 0);
    assert!(!run.join("error_vs_cost.svg").exists());
    let (code, out, err) = exec(bin().arg("plot").arg(&run));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("guide slope -0.4"));
    let svg = fs::read_to_string(run.join("error_vs_cost.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("stroke-dasharray") && svg.contains("slope −0.4000"));
    assert!(!svg.contains("href"));
    let qq = fs::read_to_string(run.join("qq.csv")).unwrap();
    assert_eq!(qq.lines().count(), 2 + 2 * 100);
}

#[test]
fn plot_fits_critical_curve() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture())
        .unwrap()
        .replace("regime = \"slow\"", "regime = \"critical\"")
        .replace("beta = 0.5", "beta = 1.0");
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, text).unwrap();
    let run = dir.path().join("r");
    assert_eq!(exec(bin().arg("run").arg(&cfg).arg("--out").arg(&run)).0, 0);
    let (code, out, _) = exec(bin().arg("plot").arg(&run));
    assert_eq!(code, 0);
    assert!(out.contains("guide c "));
    assert!(fs::read_to_string(run.join("error_vs_cost.svg")).unwrap().contains("log_M(x)/√x"));
}

#[test]
fn plot_refuses_mixed_and_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let (code, _, err) = exec(bin().arg("plot").arg(&empty));
    assert_eq!(code, 1);
    assert!(err.contains("manifest.json") && err.contains("cost_curve.csv"), "{err}");

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(exec(bin().arg("run").arg(fixture()).arg("--out").arg(&a)).0, 0);
    assert_eq!(exec(bin().arg("run").arg(fixture()).arg("--out").arg(&b).args(["--seed", "3"])).0, 0);
    fs::copy(b.join("cost_curve.csv"), a.join("cost_curve.csv")).unwrap();
    let (code, _, err) = exec(bin().arg("plot").arg(&a));
    assert_eq!(code, 1);
    assert!(err.contains("mixed"), "{err}");
}
