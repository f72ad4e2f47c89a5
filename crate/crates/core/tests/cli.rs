use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use conformal_kde::{product_kernel, ConformalModel, Dataset, DensityEstimate, KernelFamily};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_conformal-kde"));
    c.env_remove("CONFORMAL_KDE_THREADS");
    c
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn bimodal() -> PathBuf {
    repo_file("data/bimodal_n20.csv")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "failed: {}", stderr(o));
    serde_json::from_str(&stdout(o)).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn region_volumes(v: &Value) -> Vec<f64> {
    v["summary"]["regions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["volume"].as_f64().unwrap_or(f64::INFINITY))
        .collect()
}

/// Runs of set cells in a wire-format region.
fn components(region: &Value) -> usize {
    let rle = region["rle"].as_array().unwrap();
    rle.iter().skip(1).step_by(2).filter(|r| r.as_u64().unwrap() > 0).count()
}

fn bimodal_model(h: f64, alpha: f64) -> ConformalModel {
    let text = std::fs::read_to_string(bimodal()).unwrap();
    let pts: Vec<Vec<f64>> = text.lines().skip(1).map(|l| vec![l.trim().parse().unwrap()]).collect();
    let data = Dataset::new(pts).unwrap();
    let k = product_kernel(KernelFamily::Epanechnikov, 1).unwrap();
    ConformalModel::new(DensityEstimate::new(data, k, h).unwrap(), alpha).unwrap()
}

#[test]
fn region_on_bimodal_sample() {
    let o = run(&["region", s(&bimodal()), "--alpha", "0.05", "--bandwidth", "1"]);
    let v = json(&o);
    let vols = region_volumes(&v);
    // Listed inner, conformal, outer.
    assert!(vols.iter().all(|x| x.is_finite()));
    assert!(vols[0] <= vols[1] && vols[1] <= vols[2], "{vols:?}");
    let c = components(&v["regions"]["conformal"]);
    assert!((1..=4).contains(&c), "{c} intervals");
    assert_eq!(v["summary"]["i_cut"], 1);
    assert_eq!(v["config"]["alpha"].as_f64(), Some(0.05));
    assert_eq!(v["seed"], 0);
    let err = stderr(&o);
    assert!(err.contains("t_minus") && err.contains("volume conformal"), "{err}");
}

#[test]
fn region_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let data = bimodal();
    let base = ["region", s(&data), "--alpha", "0.1", "--tune", "split", "--seed", "9"];
    assert!(run(&[&base[..], &["--out", s(&a)]].concat()).status.success());
    let o = bin()
        .args(base)
        .args(["--out", s(&b)])
        .env("CONFORMAL_KDE_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn degenerate_level_warns() {
    let o = run(&["region", s(&bimodal()), "--alpha", "0.0001"]);
    let v = json(&o);
    assert!(stderr(&o).contains("warning"));
    assert_eq!(v["summary"]["degenerate"], true);
    assert!(v["summary"]["t_minus"].is_null());
    let conformal = &v["regions"]["conformal"];
    assert_eq!(conformal["set_cells"], conformal["rle"][1]);
    assert_eq!(conformal["rle"][0], 0);
}

#[test]
fn bad_input_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("text.csv", "1.0\n2.0\nabc\n", "row 3, column 1"),
        ("ragged.csv", "1,2\n3,4\n5\n", "row 3"),
        ("single.csv", "1.0\n", "at least 2"),
    ];
    for (name, body, needle) in cases {
        let p = write(dir.path(), name, body);
        let o = run(&["region", s(&p), "--alpha", "0.1"]);
        assert_eq!(o.status.code(), Some(2), "{name}");
        assert!(stderr(&o).contains(needle), "{name}: {}", stderr(&o));
    }
    let o = run(&["region", "/nonexistent/file.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn header_flag() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "h.csv", "10\n1\n2\n3\n");
    let with = json(&run(&["region", s(&p), "--bandwidth", "1", "--header", "present"]));
    assert_eq!(with["summary"]["n"], 3);
    let without = json(&run(&["region", s(&p), "--bandwidth", "1"]));
    assert_eq!(without["summary"]["n"], 4);
    assert_eq!(with["config"]["header"], "present");
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        &format!("data = {:?}\nalpha = 0.2\nbandwidth = 1.0\nkernel = \"biweight\"\n", s(&bimodal())),
    );
    let v = json(&run(&["region", "--config", s(&cfg), "--alpha", "0.05"]));
    assert_eq!(v["config"]["alpha"].as_f64(), Some(0.05));
    assert_eq!(v["config"]["kernel"], "biweight");
    assert_eq!(v["model"]["kernel"]["family"], "biweight");

    let bad = write(dir.path(), "bad.toml", "alpha = 0.2\nbandwdth = 1.0\n");
    let o = run(&["region", s(&bimodal()), "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bandwdth"), "{}", stderr(&o));

    let bad = write(dir.path(), "bad.json", r#"{"alpha": "high"}"#);
    let o = run(&["region", s(&bimodal()), "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`alpha`"), "{}", stderr(&o));
}

fn member_rows(o: &Output) -> Vec<(f64, [bool; 3])> {
    assert!(o.status.success(), "{}", stderr(o));
    stdout(o)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), [f[2] == "true", f[3] == "true", f[4] == "true"])
        })
        .collect()
}

#[test]
fn member_from_region_file() {
    let dir = tempfile::tempdir().unwrap();
    let region = dir.path().join("r.json");
    assert!(run(&["region", s(&bimodal()), "--alpha", "0.1", "--bandwidth", "1", "--out", s(&region)])
        .status
        .success());
    // A point in the left cluster, a training point, and one far away.
    let q = write(dir.path(), "q.csv", "-2.2\n-2.251768\n50\n");
    let rows = member_rows(&run(&["member", "--region", s(&region), "--query", s(&q)]));
    assert_eq!(rows.len(), 3);
    assert!(rows[0].1[0] && rows[1].1[0]);
    assert_eq!(rows[2].0, 1.0 / 21.0);
    assert_eq!(rows[2].1, [false, false, false]);

    // Independent check against the definition on the augmented sample.
    let model = bimodal_model(1.0, 0.1);
    for (y, row) in [-2.2, -2.251768, 50.0].iter().zip(&rows) {
        assert_eq!(row.0, model.pvalue_definitional(&[*y]).unwrap());
        let c = model.classify(&[*y]).unwrap();
        assert_eq!(row.1, [c.conformal, c.inner, c.outer]);
    }

    let same = member_rows(&run(&[
        "member", "--data", s(&bimodal()), "--bandwidth", "1", "--alpha", "0.1", "--query", s(&q),
    ]));
    assert_eq!(same, rows);
}

#[test]
fn member_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let region = dir.path().join("r.json");
    assert!(run(&["region", s(&bimodal()), "--bandwidth", "1", "--out", s(&region)]).status.success());
    let empty = write(dir.path(), "empty.csv", "");
    let o = run(&["member", "--region", s(&region), "--query", s(&empty)]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());

    let wide = write(dir.path(), "wide.csv", "1,2\n");
    let o = run(&["member", "--region", s(&region), "--query", s(&wide)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));

    let o = run(&["member", "--query", s(&wide)]);
    assert_eq!(o.status.code(), Some(2));
}

fn curve(path: &Path) -> Vec<(f64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (h, v) = l.split_once(',').unwrap();
            (h.parse().unwrap(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn tune_curve_is_u_shaped_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let c1 = dir.path().join("c1.csv");
    let c2 = dir.path().join("c2.csv");
    let data = bimodal();
    let args = ["tune", s(&data), "--alpha", "0.2", "--seed", "5"];
    let a = json(&run(&[&args[..], &["--curve", s(&c1)]].concat()));
    let b = json(&run(&[&args[..], &["--curve", s(&c2)]].concat()));
    assert_eq!(a["tuning"]["h"], b["tuning"]["h"]);
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());

    let pts = curve(&c1);
    assert_eq!(pts.len(), 20);
    let best = pts
        .iter()
        .enumerate()
        .min_by(|x, y| x.1 .1.total_cmp(&y.1 .1))
        .unwrap()
        .0;
    assert!(best > 0 && best + 1 < pts.len());
    assert!(pts[0].1 > pts[best].1 && pts[pts.len() - 1].1 > pts[best].1);
    assert_eq!(a["tuning"]["h"].as_f64(), Some(pts[best].0));
    assert_eq!(a["summary"]["n"], 10);
}

#[test]
fn bonferroni_with_one_candidate_is_the_plain_region() {
    let t = json(&run(&["tune", s(&bimodal()), "--tuner", "bonferroni", "--grid-size", "1", "--alpha", "0.2"]));
    let r = json(&run(&["region", s(&bimodal()), "--alpha", "0.2"]));
    assert_eq!(t["regions"], r["regions"]);
    assert_eq!(t["summary"]["bandwidth"], r["summary"]["bandwidth"]);
    assert_eq!(t["tuning"]["candidate_alpha"].as_f64(), Some(0.2));
}

#[test]
fn split_needs_four_points() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "three.csv", "1\n2\n3\n");
    let o = run(&["tune", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 4"), "{}", stderr(&o));
}

#[test]
fn simulate_table1_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = run(&[
        "simulate",
        s(&repo_file("configs/table1.toml")),
        "--repetitions",
        "1",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["experiment"]["repetitions"], 1);
    assert_eq!(report["seed"], 2002);
    let rows: Vec<&str> = report["report"]["estimators"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["estimator"].as_str().unwrap())
        .collect();
    assert_eq!(rows, ["conformal", "sandwich_inner", "sandwich_outer"]);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert_eq!(stdout(&o), summary);
    let reps = std::fs::read_to_string(dir.path().join("repetitions.csv")).unwrap();
    assert_eq!(reps.lines().count(), 1 + 3);
}

#[test]
fn simulate_rate_and_stress_configs_parse() {
    let o = run(&["simulate", s(&repo_file("configs/rate.toml")), "--repetitions", "1"]);
    let v = json(&o);
    let ns: Vec<u64> = v["report"]["rows"].as_array().unwrap().iter().map(|r| r["n"].as_u64().unwrap()).collect();
    assert_eq!(ns, [200, 200, 200, 1000, 1000, 1000]);
    assert!(v["report"]["excess_ratio"].is_number());

    let o = run(&["simulate", s(&repo_file("configs/stress.toml")), "--repetitions", "1"]);
    let v = json(&o);
    assert_eq!(v["report"]["rows"].as_array().unwrap().len(), 6);
    assert_eq!(v["config"]["stress"]["repetitions"], 1);
}

#[test]
fn simulate_config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (
            "alpha.toml",
            "mode = \"coverage\"\n[experiment]\nn = 20\nalpha = 1.5\nrepetitions = 1\ntruth = { kind = \"l-shape\" }\nbandwidth = { policy = \"fixed\", h = 0.5 }\n",
            "experiment.alpha",
        ),
        (
            "unknown.toml",
            "mode = \"coverage\"\n[experiment]\nn = 20\nalpha = 0.1\nrepetitions = 1\nwidth = 2\ntruth = { kind = \"l-shape\" }\nbandwidth = { policy = \"fixed\", h = 0.5 }\n",
            "experiment.width",
        ),
        ("mode.toml", "mode = \"sweep\"\n", "mode"),
        ("missing.toml", "mode = \"rate\"\nsizes = [10, 20]\n", "experiment"),
    ];
    for (name, body, key) in cases {
        let p = write(dir.path(), name, body);
        let o = run(&["simulate", s(&p)]);
        assert_eq!(o.status.code(), Some(2), "{name}");
        assert!(stderr(&o).contains(&format!("`{key}")), "{name}: {}", stderr(&o));
    }
}
