use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bhm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bhm"))
        .args(args)
        .env_remove("BHM_OUT_DIR")
        .env("BHM_THREADS", "2")
        .output()
        .expect("failed to launch bhm")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "bhm failed: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn edit_json(path: &Path, f: impl FnOnce(&mut Value)) {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

fn short_chains(v: &mut Value, steps: u64) {
    v["mcmc"]["n_steps"] = steps.into();
    v["mcmc"]["burn_in"] = (steps / 3).into();
    v["mcmc"]["n_chains"] = 2.into();
    v["predict_draws"] = 10.into();
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn rod_bench_then_calibrate_writes_theta_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("rod");
    ok(&bhm(&["bench", "--kind", "rod", "--seed", "7", "--out", s(&bundle)]));
    assert!(bundle.join("sim.csv").exists() && bundle.join("obs.csv").exists() && bundle.join("truth.json").exists());
    let cfg = bundle.join("calibrate.json");
    edit_json(&cfg, |v| short_chains(v, 300));
    let inputs_before = files_under(&bundle);
    let out = dir.path().join("cal");
    ok(&bhm(&["calibrate", s(&cfg), "--out", s(&out)]));

    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let theta = summary["theta"].as_array().unwrap();
    let names: Vec<&str> = theta.iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["q", "T0"]);
    for t in theta {
        for key in ["mean", "sd", "q025", "q975"] {
            assert!(t[key].as_f64().unwrap().is_finite(), "{key}");
        }
        assert!(t["q025"].as_f64() <= t["q975"].as_f64());
    }
    for f in ["chains/chain_0.csv", "chains/chain_1.csv", "diagnostics.json", "model.json", "plots/posterior_hist.csv", "plots/credible_band.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    // inputs untouched
    assert_eq!(files_under(&bundle), inputs_before);
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("rod");
    ok(&bhm(&["bench", "--kind", "rod", "--seed", "1", "--out", s(&bundle)]));
    let cfg = bundle.join("calibrate.json");
    edit_json(&cfg, |v| {
        v["mcmc"]["n_stepz"] = 10.into();
    });
    let out = bhm(&["calibrate", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_stepz"));
}

#[test]
fn missing_schema_version_and_missing_file_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"model": "m.json", "points": {"path": "p.csv", "roles": {}}}"#).unwrap();
    let out = bhm(&["predict", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));

    fs::write(&cfg, r#"{"schema_version": 1, "model": "m.json", "points": {"path": "p.csv", "roles": {"x": "design"}}}"#).unwrap();
    let out = bhm(&["predict", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // every output identical: the surrogate cannot be standardized
    let mut csv = String::from("x,y\n");
    for i in 0..10 {
        csv += &format!("{},1.0\n", i as f64 / 9.0);
    }
    fs::write(dir.path().join("d.csv"), csv).unwrap();
    let cfg = dir.path().join("s.json");
    fs::write(&cfg, r#"{"schema_version": 1, "surrogate": {"data": {"path": "d.csv", "roles": {"x": "design", "y": "output"}}}}"#).unwrap();
    let out = bhm(&["sensitivity", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("rod");
    ok(&bhm(&["bench", "--kind", "rod", "--seed", "3", "--out", s(&bundle)]));
    let cfg = bundle.join("calibrate.json");
    edit_json(&cfg, |v| short_chains(v, 120));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&bhm(&["calibrate", s(&cfg), "--out", s(&a)]));
    ok(&bhm(&["calibrate", s(&cfg), "--out", s(&b)]));
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs", k.display());
    }

    let again = dir.path().join("rod2");
    ok(&bhm(&["bench", "--kind", "rod", "--seed", "3", "--out", s(&again)]));
    for f in ["sim.csv", "obs.csv", "bundle.json", "truth.json"] {
        assert_eq!(fs::read(bundle.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn robust_demo_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("rd");
    ok(&bhm(&["bench", "--kind", "robust-demo", "--seed", "2", "--out", s(&bundle)]));
    let out = dir.path().join("o");
    ok(&bhm(&["robust-opt", s(&bundle.join("robust-opt.json")), "--out", s(&out)]));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("robust_opt.json")).unwrap()).unwrap();
    assert_eq!(report["function_calls"].as_u64(), Some(1090));
    let hist = fs::read_to_string(out.join("plots/ga_history.csv")).unwrap();
    let lines: Vec<&str> = hist.lines().collect();
    assert_eq!(lines[0], "generation,best,function_calls");
    assert_eq!(lines.len(), 12);
    let best: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));

    // distill the saved surrogate, then predict with both models
    fs::write(dir.path().join("distill.json"), r#"{"schema_version": 1, "model": "o/surrogate.json", "portable": {"family": "spline"}}"#).unwrap();
    let pout = dir.path().join("p");
    ok(&bhm(&["distill", s(&dir.path().join("distill.json")), "--out", s(&pout)]));
    let mut grid = String::from("x2,x1\n");
    for i in 0..11 {
        for j in 0..11 {
            grid += &format!("{},{}\n", i as f64 / 10.0, j as f64 / 10.0);
        }
    }
    fs::write(dir.path().join("pts.csv"), grid).unwrap();
    let pred_cfg = |model: &str| {
        format!(r#"{{"schema_version": 1, "model": "{model}", "points": {{"path": "pts.csv", "roles": {{"x1": "design", "x2": "design"}}}}}}"#)
    };
    fs::write(dir.path().join("pg.json"), pred_cfg("o/surrogate.json")).unwrap();
    fs::write(dir.path().join("pp.json"), pred_cfg("p/portable.json")).unwrap();
    ok(&bhm(&["predict", s(&dir.path().join("pg.json")), "--out", s(&dir.path().join("g"))]));
    ok(&bhm(&["predict", s(&dir.path().join("pp.json")), "--portable", "--out", s(&dir.path().join("pp"))]));
    let read = |p: PathBuf| -> (String, Vec<Vec<f64>>) {
        let text = fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        let head = lines.next().unwrap().to_string();
        (head, lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect())
    };
    let (gh, g) = read(dir.path().join("g/predictions.csv"));
    let (ph, p) = read(dir.path().join("pp/predictions.csv"));
    // columns come back in the model's input order
    assert!(gh.starts_with("x1,x2,") && ph.starts_with("x1,x2,"));
    assert_eq!(g[1][..2], [0.1, 0.0]);
    assert_eq!(g.len(), 121);
    let mad = g.iter().zip(&p).map(|(a, b)| (a[2] - b[2]).abs()).sum::<f64>() / g.len() as f64;
    assert!(mad < 0.08, "mean |GP - portable| = {mad}");
}

#[test]
fn ishigami_sensitivity_report() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("ish");
    ok(&bhm(&["bench", "--kind", "ishigami", "--seed", "0", "--out", s(&bundle)]));
    let out = dir.path().join("o");
    ok(&bhm(&["sensitivity", s(&bundle.join("sensitivity.json")), "--out", s(&out)]));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("sobol_report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"].as_u64(), Some(1));
    let idx = report["indices"].as_array().unwrap();
    assert_eq!(idx.len(), 6);
    for i in idx {
        for k in ["total", "structural", "correlative", "order"] {
            assert!(i.get(k).is_some(), "{k}");
        }
    }
    let bars = fs::read_to_string(out.join("plots/sobol_bars.csv")).unwrap();
    assert!(bars.starts_with("index,order,total,structural,correlative,se"));
}

#[test]
fn legacy_fuse_writes_weights_summing_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("leg");
    ok(&bhm(&["bench", "--kind", "legacy-family", "--seed", "0", "--out", s(&bundle)]));
    let cfg = bundle.join("fuse.json");
    edit_json(&cfg, |v| {
        short_chains(v, 300);
        v["grid_points"] = 5.into();
    });
    let out = dir.path().join("o");
    ok(&bhm(&["fuse", s(&cfg), "--out", s(&out)]));
    let text = fs::read_to_string(out.join("plots/weight_map.csv")).unwrap();
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    let w_cols: Vec<usize> = (0..head.len()).filter(|&i| head[i].starts_with("weight_")).collect();
    assert_eq!(w_cols.len(), 5);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 25);
    for r in rows {
        let v: Vec<f64> = r.split(',').map(|x| x.parse().unwrap()).collect();
        let sum: f64 = w_cols.iter().map(|&i| v[i]).sum();
        assert!((sum - 1.0).abs() < 1e-10);
    }
    assert!(out.join("fused_predictions.csv").exists());
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("fusion_summary.json")).unwrap()).unwrap();
    assert!(summary["max_weight_sum_error"].as_f64().unwrap() < 1e-10);
}

#[test]
fn unknown_bench_kind_is_rejected() {
    let out = bhm(&["bench", "--kind", "pump", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pump"));
}
