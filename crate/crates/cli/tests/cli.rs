use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fhmm_core::fixtures;
use fhmm_core::io::ModelFile;
use fhmm_core::ChainParams;
use tempfile::TempDir;

fn fhmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fhmm"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fhmm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Well separated states with episodes long enough to learn from.
fn separated_model(dir: &Path) -> PathBuf {
    let mut m = fixtures::final_lnc_model();
    m.chains[0] = ChainParams::new([0.8, 0.2], [[0.97, 0.03], [0.1, 0.9]]);
    m.chains[1] = ChainParams::new([0.9, 0.1], [[0.98, 0.02], [0.1, 0.9]]);
    for row in &mut m.emissions.sigma {
        row.iter_mut().for_each(|x| *x *= 0.5);
    }
    let inf = m.emissions.inflated.as_mut().unwrap();
    inf.params.eta2 = m.emissions.sigma[0][inf.dim].powi(2);
    let path = dir.join("truth.json");
    ModelFile::new(m).save(&path).unwrap();
    path
}

#[test]
fn closed_loop_train_evaluate() {
    let dir = TempDir::new().unwrap();
    let truth = separated_model(dir.path());
    let data = dir.path().join("data.csv");
    let model = dir.path().join("m2a.json");
    let report = dir.path().join("eval.json");
    ok(&["simulate", "--model", s(&truth), "--length", "3000", "--seed", "7", "--out", s(&data)]);
    ok(&["train", "--input", s(&data), "--variant", "m2a", "--mode", "supervised", "--out", s(&model)]);
    ok(&["evaluate", "--model", s(&model), "--input", s(&data), "--out", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let micro = v["micro_f1"].as_f64().unwrap();
    assert!(micro > 0.95, "micro-F1 {micro}");
    assert_eq!(v["confusion"].as_array().unwrap().len(), 3);
    assert!(v["auc"]["micro"].as_f64().unwrap() > 0.9);
    assert!(v["per_class_f1"]["dust"].is_number());
}

#[test]
fn weighted_pipeline_and_determinism() {
    let dir = TempDir::new().unwrap();
    let truth = separated_model(dir.path());
    let data = dir.path().join("data.csv");
    ok(&["simulate", "--model", s(&truth), "--length", "1500", "--seed", "3", "--out", s(&data)]);

    let run = |tag: &str| -> Vec<Vec<u8>> {
        let model = dir.path().join(format!("m2d{tag}.json"));
        let dec = dir.path().join(format!("dec{tag}.csv"));
        let fc = dir.path().join(format!("fc{tag}.csv"));
        let grid = dir.path().join(format!("grid{tag}.csv"));
        let mi = dir.path().join(format!("mi{tag}.csv"));
        ok(&["train", "--input", s(&data), "--variant", "m2d", "--out", s(&model)]);
        ok(&["decode", "--model", s(&model), "--input", s(&data), "--out", s(&dec), "--omega", "1.10", "--v", "16.47"]);
        ok(&["forecast", "--model", s(&model), "--input", s(&data), "--horizon", "24", "--out", s(&fc)]);
        ok(&[
            "gridsearch", "--model", s(&model), "--input", s(&data), "--omega-range", "0.7:2.2:3", "--v-range",
            "0.7:22:3", "--out", s(&grid),
        ]);
        ok(&["mi-report", "--input", s(&data), "--k", "3", "--out", s(&mi)]);
        [model, dec, fc, grid, mi].iter().map(|p| fs::read(p).unwrap()).collect()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b, "repeated runs must be byte-identical");

    let dec = String::from_utf8(a[1].clone()).unwrap();
    assert_eq!(dec.lines().next().unwrap(), "timestamp,haze,dust,class");
    assert_eq!(dec.lines().count(), 1501);
    assert!(!dec.contains(",haze_dust"), "reclassification resolves every joint step");

    let fc = String::from_utf8(a[2].clone()).unwrap();
    let mut lines = fc.lines();
    assert_eq!(lines.next().unwrap(), "h,p_clear,p_haze,p_dust,p_both");
    for line in lines {
        let total: f64 = line.split(',').skip(1).map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let grid = String::from_utf8(a[3].clone()).unwrap();
    assert_eq!(grid.lines().count(), 10);
    let mi = String::from_utf8(a[4].clone()).unwrap();
    assert_eq!(mi.lines().count(), 17);
}

#[test]
fn em_training_runs() {
    let dir = TempDir::new().unwrap();
    let truth = separated_model(dir.path());
    let data = dir.path().join("data.csv");
    let model = dir.path().join("m0.json");
    ok(&["simulate", "--model", s(&truth), "--length", "1000", "--seed", "1", "--out", s(&data)]);
    ok(&[
        "train", "--input", s(&data), "--variant", "m0", "--mode", "em", "--max-iters", "5", "--seed", "2", "--out",
        s(&model),
    ]);
    let f = ModelFile::load(&model).unwrap();
    let r = &f.model.emissions.r_global;
    assert_eq!(r, &nalgebra::DMatrix::identity(r.nrows(), r.ncols()));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(fhmm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fhmm(&["decode", "--bogus"]).status.code(), Some(1));
    assert_eq!(fhmm(&["--help"]).status.code(), Some(0));
    let missing = dir.path().join("nope.csv");
    let out = dir.path().join("o.json");
    let r = fhmm(&["train", "--input", s(&missing), "--variant", "m2a", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.csv"));

    // an unlabeled file cannot be evaluated
    let csv = dir.path().join("x.csv");
    fs::write(&csv, "timestamp,pm10,wind,visibility,humidity\n2000-01-01T00:00:00,50,2,5,40\n").unwrap();
    let truth = separated_model(dir.path());
    let r = fhmm(&["evaluate", "--model", s(&truth), "--input", s(&csv), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("label"));
}
