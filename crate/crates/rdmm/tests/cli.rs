//! End-to-end checks of the command-line binary: exit codes, file
//! layout, determinism.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rdmm"))
}

#[test]
fn usage_errors_exit_1() {
    let out = bin().arg("register").arg("--out").arg("/tmp/x").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn format_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tns");
    fs::write(&bad, b"definitely not a tensor").unwrap();
    let out = bin()
        .args(["register", "--mode", "lddmm", "--source"])
        .arg(&bad)
        .arg("--target")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("byte"), "error should carry a byte offset: {msg}");
}

#[test]
fn check_grad_small_exits_0() {
    let out = bin()
        .args(["check-grad", "--size", "12", "--seed", "1", "--steps", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max rel error"));
}

#[test]
fn gen_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let st = bin()
            .args(["gen", "--seed", "11", "--size", "64", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    }
    for name in [
        "source.tns",
        "target.tns",
        "source_labels.tns",
        "target_labels.tns",
        "fg_mask.tns",
        "source.pgm",
        "target.pgm",
        "manifest.json",
    ] {
        let fa = fs::read(a.join(name)).unwrap();
        let fb = fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical seeds");
    }
}

#[test]
fn fixed_mode_requires_preweights() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let st = bin()
        .args(["gen", "--seed", "2", "--size", "64", "--out"])
        .arg(&scene)
        .status()
        .unwrap();
    assert!(st.success());
    let out = bin()
        .args(["register", "--mode", "rdmm-fixed", "--source"])
        .arg(scene.join("source.tns"))
        .arg("--target")
        .arg(scene.join("target.tns"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn registering_image_onto_itself_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let st = bin()
        .args(["gen", "--seed", "9", "--size", "64", "--out"])
        .arg(&scene)
        .status()
        .unwrap();
    assert!(st.success());

    let cfg = serde_json::json!({
        "mode": "lddmm",
        "scales": [{"factor": 0.5, "iterations": 5}, {"factor": 1.0, "iterations": 5}],
        "kernel": {"sigmas": [0.04, 0.08], "preweight_sigma": 0.05, "omt_power": 2.0},
        "penalties": {"c_omt": 0.05, "c_range": 10.0, "k_decay": 10.0, "w0_sq": [0.5, 0.5]},
        "similarity": {"kind": "ssd", "windows": [], "eps": 1e-5},
        "integrator": {"n_steps": 4},
        "optimizer": {"step_m": 0.1, "step_h": 0.1, "grad_tolerance": 1e-8,
                      "shrink": 0.5, "grow": 1.3, "max_backtracks": 30},
        "lambda_kin": 1.0
    });
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();

    let out = dir.path().join("out");
    let st = bin()
        .args(["register", "--source"])
        .arg(scene.join("source.tns"))
        .arg("--target")
        .arg(scene.join("source.tns"))
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());

    let warped = rdmm::io::read_image(&out.join("warped.tns")).unwrap();
    let source = rdmm::io::read_image(&scene.join("source.tns")).unwrap();
    let max_diff = warped
        .values()
        .iter()
        .zip(source.values())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-3, "warped deviates from source by {max_diff}");

    // labels warped through the recovered map stay put
    let ev = bin()
        .args(["eval", "--result"])
        .arg(&out)
        .arg("--labels-source")
        .arg(scene.join("source_labels.tns"))
        .arg("--labels-target")
        .arg(scene.join("source_labels.tns"))
        .status()
        .unwrap();
    assert!(ev.success());
    let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
    for line in csv.lines().filter(|l| l.starts_with("dice,")) {
        let val: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(val, 1.0, "{line}");
    }
}

#[test]
fn eval_reports_dice_for_identity_map() {
    // hand-build a result directory holding an identity map, then eval
    // source labels against themselves: every dice must be exactly 1
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let st = bin()
        .args(["gen", "--seed", "5", "--size", "64", "--out"])
        .arg(&scene)
        .status()
        .unwrap();
    assert!(st.success());

    let result = dir.path().join("result");
    fs::create_dir_all(&result).unwrap();
    let grid = rdmm::field::GridSpec::new(&[64, 64]).unwrap();
    let ident = rdmm::field::identity_map(&grid);
    rdmm::io::write_tensor(
        &result.join("phi_inv.tns"),
        &rdmm::io::vector_to_tensor(ident.coords()),
    )
    .unwrap();

    let out = bin()
        .args(["eval", "--result"])
        .arg(&result)
        .arg("--labels-source")
        .arg(scene.join("source_labels.tns"))
        .arg("--labels-target")
        .arg(scene.join("source_labels.tns"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(result.join("eval.csv")).unwrap();
    for line in csv.lines().filter(|l| l.starts_with("dice,")) {
        let val: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(val, 1.0, "{line}");
    }
    assert!(csv.contains("fold_count,,0"));
    assert!(Path::new(&result.join("eval.csv")).exists());
}
