use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn nlb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlb")).args(args).output().expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const OBSTACLE_HEAD: &str =
    "verb = \"obstacle\"\n[kernel]\nfamily = \"fractional\"\ndim = 1\ns = 0.5\n[grid]\nintervals = 32\n";

#[test]
fn shipped_suite_passes_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = configs().join("suite.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = nlb(&["suite", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for run in ["obstacle", "bellman", "parabolic", "bernstein", "kernel_validate", "operator_eval"] {
        let ra = std::fs::read(a.join(run).join("report.json")).unwrap();
        let rb = std::fs::read(b.join(run).join("report.json")).unwrap();
        assert!(ra == rb, "{run} report differs between identical runs");
    }
    let suite: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("suite.json")).unwrap()).unwrap();
    assert_eq!(suite["pass"], true);
    assert_eq!(suite["results"]["runs"].as_array().unwrap().len(), 6);
}

#[test]
fn malformed_expression_reports_line_and_column() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{OBSTACLE_HEAD}[obstacle]\nobstacle = \"1 - 2*x^^2\"\n");
    let p = write(tmp.path(), "bad.toml", &body);
    let o = nlb(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    // line 9, and the second '^' is column 21 of that line
    assert!(stderr(&o).contains("bad.toml:9:21"), "{}", stderr(&o));
}

#[test]
fn malformed_toml_is_a_parse_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "bad.toml", "verb = \"obstacle\"\n[kernel\n");
    let o = nlb(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:2:"), "{}", stderr(&o));
}

#[test]
fn flag_expressions_are_located_too() {
    let o =
        nlb(&["obstacle", "--kernel", "{family=\"fractional\", dim=1, s=0.5}", "--grid", "16", "--obstacle", "1 - (x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--obstacle:1:"), "{}", stderr(&o));
}

#[test]
fn bernstein_with_zero_sigma_fails_and_names_the_node() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "verb = \"bernstein\"\n[kernel]\nfamily = \"fractional\"\ndim = 1\ns = 0.5\n\
                [grid]\nlo = -1.5\nhi = 1.5\nintervals = 48\n\
                [bernstein]\nvariant = \"FirstOrder\"\nu = \"x\"\nsigma = 0.0\n";
    let p = write(tmp.path(), "b.toml", body);
    let report = tmp.path().join("r.json");
    let o = nlb(&["bernstein", "--config", p.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["pass"], false);
    let member = &r["results"]["per_member"][0];
    assert!(!member["violating_nodes"].as_array().unwrap().is_empty());
    assert!(!member["violating_points"][0].as_array().unwrap().is_empty());
    let detail = r["assertions"][0]["detail"].as_str().unwrap();
    assert!(detail.contains("node"), "{detail}");
}

#[test]
fn missing_block_is_a_precondition_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "o.toml", OBSTACLE_HEAD);
    let o = nlb(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("[obstacle]"), "{}", stderr(&o));
}

#[test]
fn ensembles_require_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "verb = \"bernstein\"\n[kernel]\nfamily = \"fractional\"\ndim = 1\ns = 0.5\n\
                [grid]\nintervals = 16\n[bernstein]\nvariant = \"FirstOrder\"\nensemble = { count = 2 }\n";
    let p = write(tmp.path(), "b.toml", body);
    let o = nlb(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn report_embeds_hash_and_version() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{OBSTACLE_HEAD}[obstacle]\nobstacle = \"1 - 2*x^2\"\n");
    let p = write(tmp.path(), "o.toml", &body);
    let report = tmp.path().join("r.json");
    let fields = tmp.path().join("f.csv");
    let o = nlb(&[
        "obstacle",
        "--config",
        p.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--fields",
        fields.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let digest: String = Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(r["config_sha256"], digest);
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r["inputs"]["obstacle"]["obstacle"], "1 - 2*x^2");
    let csv = std::fs::read_to_string(&fields).unwrap();
    assert!(csv.starts_with("x1,u,phi,gap\n"));
    assert_eq!(csv.lines().count(), 34);
}

#[test]
fn list_variants_prints_the_catalogue() {
    let o = nlb(&["--list-variants"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    for tag in ["FirstOrder", "PosPart", "DiffQuot", "HolderQuot", "SecondOrder", "Parabolic", "Drift", "GeneralLevy"] {
        assert!(out.lines().any(|l| l.starts_with(tag)), "{tag} missing");
    }
    assert_eq!(out.lines().count(), 16);
}

#[test]
fn jobs_flag_caps_threads_without_changing_results() {
    let tmp = tempfile::tempdir().unwrap();
    let p = configs().join("bellman.toml");
    let r1 = tmp.path().join("1.json");
    let r4 = tmp.path().join("4.json");
    for (j, r) in [("1", &r1), ("4", &r4)] {
        let o = nlb(&["--jobs", j, "bellman", "--config", p.to_str().unwrap(), "--report", r.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert!(std::fs::read(&r1).unwrap() == std::fs::read(&r4).unwrap());
}

#[test]
fn verb_mismatch_is_rejected() {
    let p = configs().join("bellman.toml");
    let o = nlb(&["obstacle", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
