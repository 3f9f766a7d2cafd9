use std::path::Path;
use std::process::{Command, Output};

use hsfusion::io::{read_checkpoint, read_cube, read_model};
use hsfusion::metrics;
use hsfusion::HyperCube;

fn hsfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsfusion")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hsfusion(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts failure with a single `error code=<code> message=...` line.
fn fails_with(args: &[&str], code: &str) {
    let out = hsfusion(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    let prefix = format!("error code={code} message=\"");
    assert!(lines[0].starts_with(&prefix), "{stderr}");
    let message = &lines[0]["error code= message=".len() + code.len()..];
    let _: String = serde_json::from_str(message).expect("message is a JSON string");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path) {
    ok(&[
        "simulate", "--width", "12", "--height", "12", "--bands", "4", "--msi-bands", "2", "--scale", "2", "--psf-size",
        "3", "--psf-sigma", "0.8", "--seed", "5", "--out", p(dir),
    ]);
}

fn tiny_config(dir: &Path, iterations: usize) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    let cfg = serde_json::json!({
        "blocks": 1,
        "features": 4,
        "kernel_size": 3,
        "iterations": iterations,
        "lr": 1e-2,
        "log_every": 0,
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn simulate_writes_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let x = read_cube(dir.path().join("X.hcube")).unwrap();
    let y = read_cube(dir.path().join("Y.hcube")).unwrap();
    let z = read_cube(dir.path().join("Z.hcube")).unwrap();
    assert_eq!((x.width(), x.height(), x.bands()), (12, 12, 4));
    assert_eq!((y.width(), y.height(), y.bands()), (6, 6, 4));
    assert_eq!((z.width(), z.height(), z.bands()), (12, 12, 2));
    let model = read_model(dir.path().join("model.json")).unwrap();
    assert_eq!(model.scale, 2);
    assert_eq!((model.srf.rows, model.srf.cols), (2, 4));

    let again = tempfile::tempdir().unwrap();
    simulate(again.path());
    for name in ["X.hcube", "Y.hcube", "Z.hcube", "model.json"] {
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), std::fs::read(again.path().join(name)).unwrap());
    }
}

#[test]
fn simulate_reads_flags_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    std::fs::write(&cfg, r#"{"width": 8, "height": 4, "msi-bands": 3, "scale": 2, "dtype": "f32"}"#).unwrap();
    let out = dir.path().join("scene");
    ok(&["simulate", "--config", p(&cfg), "--height", "6", "--out", p(&out)]);
    let z = read_cube(out.join("Z.hcube")).unwrap();
    assert_eq!((z.width(), z.height(), z.bands()), (8, 6, 3));
    let bytes = std::fs::read(out.join("Z.hcube")).unwrap();
    assert!(String::from_utf8_lossy(&bytes).contains("\"dtype\":\"f32\""));
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let cfg = tiny_config(dir.path(), 6);
    let out = dir.path().join("run");
    let y = dir.path().join("Y.hcube");
    let z = dir.path().join("Z.hcube");
    let stdout = ok(&["train", "--y", p(&y), "--z", p(&z), "--config", p(&cfg), "--out", p(&out)]);
    assert!(stdout.starts_with("iterations=6 "), "{stdout}");

    let xhat = read_cube(out.join("xhat.hcube")).unwrap();
    assert_eq!((xhat.width(), xhat.height(), xhat.bands()), (12, 12, 4));
    let state = read_checkpoint(out.join("checkpoint.bin")).unwrap();
    assert_eq!(state.iteration, 6);
    assert_eq!(state.config.features, 4);
    let model = read_model(out.join("learned_model.json")).unwrap();
    assert!((model.psf.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-4);

    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iteration,l_spa,l_spe,l_lc,total"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 5);
        assert_eq!(row[0], i as f64);
        assert!(row.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let cfg = tiny_config(dir.path(), 6);
    let out = dir.path().join("run");
    let (y, z) = (dir.path().join("Y.hcube"), dir.path().join("Z.hcube"));
    ok(&["train", "--y", p(&y), "--z", p(&z), "--config", p(&cfg), "--iterations", "2", "--beta", "0.5", "--out", p(&out)]);
    let state = read_checkpoint(out.join("checkpoint.bin")).unwrap();
    assert_eq!(state.iteration, 2);
    assert_eq!(state.config.beta, 0.5);
    assert_eq!(state.config.kernel_size, 3);
}

#[test]
fn zero_iterations_then_eval_scores_the_zero_cube() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let cfg = tiny_config(dir.path(), 0);
    let out = dir.path().join("run");
    let (y, z) = (dir.path().join("Y.hcube"), dir.path().join("Z.hcube"));
    ok(&["train", "--y", p(&y), "--z", p(&z), "--config", p(&cfg), "--out", p(&out)]);
    let xhat = read_cube(out.join("xhat.hcube")).unwrap();
    assert_eq!(xhat, HyperCube::zeros(12, 12, 4));

    let report = dir.path().join("report.json");
    let gt = dir.path().join("X.hcube");
    let text = ok(&["eval", "--pred", p(&out.join("xhat.hcube")), "--gt", p(&gt), "--scale", "2", "--out", p(&report)]);
    let x = read_cube(&gt).unwrap();
    let expected = metrics::psnr(&xhat, &x, 1.0).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!((json["psnr"].as_f64().unwrap() - expected).abs() <= 1e-9);
    assert!(text.starts_with(&format!("psnr={}\n", metrics::sig6(expected))), "{text}");
}

#[test]
fn written_artifacts_re_evaluate_identically() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let cfg = tiny_config(dir.path(), 4);
    let out = dir.path().join("run");
    let (y, z) = (dir.path().join("Y.hcube"), dir.path().join("Z.hcube"));
    ok(&["train", "--y", p(&y), "--z", p(&z), "--config", p(&cfg), "--out", p(&out)]);
    let gt = read_cube(dir.path().join("X.hcube")).unwrap();
    let report = dir.path().join("r.json");
    ok(&["eval", "--pred", p(&out.join("xhat.hcube")), "--gt", p(&dir.path().join("X.hcube")), "--scale", "2", "--out", p(&report)]);
    let saved: metrics::MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();

    let mut state = read_checkpoint(out.join("checkpoint.bin")).unwrap();
    let yc = read_cube(&y).unwrap();
    let zc = read_cube(&z).unwrap();
    let xhat = state.three_stage_forward(&yc, &zc).unwrap().x;
    let fresh = metrics::evaluate(&xhat, &gt, 2).unwrap();
    assert!((fresh.psnr - saved.psnr).abs() <= 1e-9);
    assert!((fresh.ssim - saved.ssim).abs() <= 1e-9);
    assert!((fresh.sam - saved.sam).abs() <= 1e-9);
    assert!((fresh.ergas - saved.ergas).abs() <= 1e-9);
}

#[test]
fn upsample_then_eval_gives_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let up = dir.path().join("up.hcube");
    ok(&["upsample", "--input", p(&dir.path().join("Y.hcube")), "--scale", "2", "--out", p(&up)]);
    let cube = read_cube(&up).unwrap();
    assert_eq!((cube.width(), cube.height(), cube.bands()), (12, 12, 4));
    let text = ok(&["eval", "--pred", p(&up), "--gt", p(&dir.path().join("X.hcube")), "--scale", "2"]);
    let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["psnr", "ssim", "sam", "ergas"]);
}

#[test]
fn inspect_summarizes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let cfg = tiny_config(dir.path(), 1);
    let out = dir.path().join("run");
    let (y, z) = (dir.path().join("Y.hcube"), dir.path().join("Z.hcube"));
    ok(&["train", "--y", p(&y), "--z", p(&z), "--config", p(&cfg), "--out", p(&out)]);
    let text = ok(&["inspect", "--checkpoint", p(&out.join("checkpoint.bin"))]);
    let config_line = text.lines().next().unwrap();
    let echo: serde_json::Value = serde_json::from_str(config_line.strip_prefix("config=").unwrap()).unwrap();
    assert_eq!(echo["features"], 4);
    assert!(text.contains("\niteration=1\n"));
    assert!(text.contains("params total="));
    assert!(text.contains("center_of_mass="));
    assert!(text.contains("entropy="));
}

#[test]
fn gradcheck_passes_on_seed_zero() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    let text = ok(&["gradcheck", "--seed", "0", "--out", p(&report)]);
    assert!(text.trim_end().ends_with("PASS"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["params"].as_array().unwrap().len() > 10);
}

#[test]
fn gradcheck_failure_exits_nonzero() {
    // a step far too coarse for the tolerance
    fails_with(&["gradcheck", "--seed", "0", "--step", "0.5", "--tolerance", "1e-12"], "gradcheck_failed");
}

#[test]
fn errors_are_single_machine_readable_lines() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path());
    let (y, z) = (dir.path().join("Y.hcube"), dir.path().join("Z.hcube"));
    let missing = dir.path().join("missing.hcube");
    fails_with(&["eval", "--pred", p(&missing), "--gt", p(&y), "--scale", "2"], "file_not_found");
    fails_with(&["train", "--y", p(&y)], "usage");
    fails_with(&["bogus-command"], "usage");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"learning_rate": 1}"#).unwrap();
    fails_with(&["train", "--y", p(&y), "--z", p(&z), "--config", p(&bad), "--out", p(dir.path())], "bad_config");
    std::fs::write(&bad, "{not json").unwrap();
    fails_with(&["eval", "--config", p(&bad)], "bad_config");

    let garbage = dir.path().join("garbage.hcube");
    std::fs::write(&garbage, b"not a cube").unwrap();
    fails_with(&["eval", "--pred", p(&garbage), "--gt", p(&y), "--scale", "2"], "bad_magic");
    let bytes = std::fs::read(&y).unwrap();
    std::fs::write(&garbage, &bytes[..bytes.len() - 4]).unwrap();
    fails_with(&["eval", "--pred", p(&garbage), "--gt", p(&y), "--scale", "2"], "truncated_payload");

    // Z on the wrong grid for Y
    let odd = dir.path().join("odd");
    ok(&["simulate", "--width", "9", "--height", "9", "--bands", "4", "--scale", "3", "--psf-size", "3", "--out", p(&odd)]);
    let cfg = tiny_config(dir.path(), 1);
    fails_with(
        &["train", "--y", p(&y), "--z", p(&odd.join("Z.hcube")), "--config", p(&cfg), "--out", p(&dir.path().join("r"))],
        "shape_mismatch",
    );
    fails_with(&["simulate", "--width", "7", "--scale", "2", "--out", p(&dir.path().join("s"))], "not_divisible");
}
