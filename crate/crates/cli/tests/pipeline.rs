use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use magls::forward::kernel_eval;
use magls::geometry::InducingField;
use magls::io::{read_grid_field, read_measurements_csv, write_grid_field};
use magls::levelset::{reinitialize, sphere};

const BASE: &str = r#"
[grid]
min = [0.0, 0.0, -0.5]
max = [1.0, 1.0, 0.0]
counts = [11, 11, 6]

[measurements]
count = 200
seed = 4

[sgd]
batch_size = 50
epochs = 3
"#;

const SPHERE: &str = r#"
[[scene]]
kind = "sphere"
center = [0.5, 0.5, -0.25]
radius = 0.15
"#;

fn magls(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_magls"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout
}

fn out(dir: &Path, name: &str) -> PathBuf {
    dir.join("out").join(name)
}

fn metric(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find(|l| l.starts_with(key))
        .and_then(|l| l[key.len()..].split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no `{key}` in report:\n{report}"))
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!("{BASE}{SPHERE}");
    ok(&magls(d, &cfg, &["scene"]));
    ok(&magls(d, &cfg, &["forward"]));
    let pre = ok(&magls(d, &cfg, &["precondition"]));
    assert!(pre.contains("compression ratio"), "{pre}");
    let truth = out(d, "kappa_true.mgrd");
    ok(&magls(
        d,
        &cfg,
        &["invert", "--truth", truth.to_str().unwrap()],
    ));
    for f in ["phi.mgrd", "kappa.mgrd", "trace.csv"] {
        assert!(out(d, f).exists(), "{f}");
    }
    let trace = fs::read_to_string(out(d, "trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next(),
        Some("iter,epoch,batch,f_sk,dt,max_vn,model_err")
    );
    assert_eq!(lines.count(), 3 * 4);

    let clean = out(d, "data_clean.csv");
    let report = ok(&magls(
        d,
        &cfg,
        &["report", "--clean", clean.to_str().unwrap()],
    ));
    for key in [
        "f_M",
        "rms(d - d*)",
        "noise floor rms",
        "model error",
        "volume",
    ] {
        metric(&report, key);
    }
    let disc = fs::read_to_string(out(d, "discrepancy.csv")).unwrap();
    assert_eq!(disc.lines().count(), 1 + 200);
}

#[test]
fn scene_examples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&magls(d, BASE, &["scene"]));
    let (g, k) = read_grid_field(&out(d, "kappa_true.mgrd")).unwrap();
    assert_eq!(g.dims(), [11, 11, 6]);
    assert!(k.iter().all(|v| *v == 0.0));

    let cube = format!(
        "{BASE}\n[[scene]]\nkind = \"cuboid\"\ncenter = [0.5, 0.5, -0.2]\nsize = [0.4, 0.4, 0.2]\n"
    );
    ok(&magls(d, &cube, &["scene"]));
    let (_, k) = read_grid_field(&out(d, "kappa_true.mgrd")).unwrap();
    // faces lie on grid nodes (spacing 0.1); the closed box holds 5 x 5 x 3
    assert_eq!(k.iter().filter(|v| **v > 0.0).count(), 5 * 5 * 3);
    assert!(k.iter().all(|v| *v == 0.0 || *v == 0.05));
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = Command::new(env!("CARGO_BIN_EXE_magls"))
        .arg("scene")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = magls(d, BASE, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = magls(d, &format!("{BASE}\n[noise]\nsigma = 0.1\n"), &["scene"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));
    let o = magls(d, &format!("{BASE}\n[model]\nkappa0 = -1.0\n"), &["scene"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.kappa0"));
    assert!(!out(d, "kappa_true.mgrd").exists());
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!("{BASE}{SPHERE}");
    let o = magls(d, &cfg, &["forward"]);
    assert_eq!(o.status.code(), Some(2));
    ok(&magls(d, &cfg, &["scene"]));
    ok(&magls(d, &cfg, &["forward"]));
    ok(&magls(d, &cfg, &["precondition"]));
    let op = out(d, "operator.mkop");
    let mut bytes = fs::read(&op).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&op, bytes).unwrap();
    let o = magls(d, &cfg, &["invert"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
    assert!(!out(d, "trace.csv").exists());
}

#[test]
fn stall_exits_3_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!(
        "{BASE}{SPHERE}\n[noise]\neta = 0.0\n[initial]\nkind = \"sphere\"\ncenter = [0.5, 0.5, -0.25]\nradius = 0.17\n"
    )
    .replace("epochs = 3", "epochs = 3\nalpha = 0.0\nband_halfwidth = 1e-9");
    ok(&magls(d, &cfg, &["scene"]));
    ok(&magls(d, &cfg, &["forward"]));
    ok(&magls(d, &cfg, &["precondition"]));
    let o = magls(d, &cfg, &["invert"]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(!out(d, "phi.mgrd").exists());
}

#[test]
fn noiseless_forward_and_single_node() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!("{BASE}\n[noise]\neta = 0.0\n");
    ok(&magls(d, &cfg, &["scene"]));
    let (grid, _) = read_grid_field(&out(d, "kappa_true.mgrd")).unwrap();
    let mut kappa = vec![0.0; grid.n_nodes()];
    let node = grid.node_index(3, 7, 2);
    kappa[node] = 0.05;
    let model = d.join("single.mgrd");
    write_grid_field(&model, &grid, &kappa).unwrap();
    ok(&magls(
        d,
        &cfg,
        &["forward", "--model", model.to_str().unwrap()],
    ));
    let clean = read_measurements_csv(&out(d, "data_clean.csv")).unwrap();
    let noisy = read_measurements_csv(&out(d, "data_noisy.csv")).unwrap();
    assert_eq!(clean.observed, noisy.observed);

    let f = InducingField::new(5.95e4, 75.0, 25.0);
    let scale = 5.95e4 / (4.0 * std::f64::consts::PI) * grid.cell_volume() * 0.05;
    for (p, dv) in clean.points.iter().zip(clean.observed().unwrap()) {
        let k = kernel_eval(p, &grid.node_position(node), &f.direction).unwrap();
        let want = scale * (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
        assert!((dv - want).abs() <= 1e-12 * want, "{dv} vs {want}");
    }
}

#[test]
fn seeds_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!("{BASE}{SPHERE}");
    ok(&magls(d, &cfg, &["scene"]));
    ok(&magls(d, &cfg, &["forward"]));
    let first = fs::read(out(d, "data_noisy.csv")).unwrap();
    ok(&magls(d, &cfg, &["forward"]));
    assert_eq!(first, fs::read(out(d, "data_noisy.csv")).unwrap());
    ok(&magls(d, &cfg, &["precondition"]));
    ok(&magls(d, &cfg, &["--serial", "invert"]));
    let a = fs::read(out(d, "trace.csv")).unwrap();
    ok(&magls(d, &cfg, &["--serial", "invert"]));
    assert_eq!(a, fs::read(out(d, "trace.csv")).unwrap());
    ok(&magls(d, &cfg, &["--threads", "2", "invert"]));
    assert_eq!(a, fs::read(out(d, "trace.csv")).unwrap());

    ok(&magls(d, &cfg, &["--seed-override", "99", "forward"]));
    assert_ne!(first, fs::read(out(d, "data_noisy.csv")).unwrap());
}

#[test]
fn zero_epochs_and_perfect_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!(
        "{BASE}{SPHERE}\n[noise]\neta = 0.0\n[svd]\nepsilon = 0.0\n[initial]\nkind = \"sphere\"\ncenter = [0.5, 0.5, -0.25]\nradius = 0.2\n"
    )
    .replace("epochs = 3", "epochs = 0");
    ok(&magls(d, &cfg, &["scene"]));
    ok(&magls(d, &cfg, &["forward"]));
    ok(&magls(d, &cfg, &["precondition"]));
    ok(&magls(d, &cfg, &["invert"]));
    let (grid, phi) = read_grid_field(&out(d, "phi.mgrd")).unwrap();
    assert_eq!(
        phi,
        reinitialize(&grid, &sphere(&grid, [0.5, 0.5, -0.25], 0.2), 5)
    );
    let trace = fs::read_to_string(out(d, "trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);

    let truth = out(d, "kappa_true.mgrd");
    let report = ok(&magls(
        d,
        &cfg,
        &["report", "--kappa", truth.to_str().unwrap()],
    ));
    assert_eq!(metric(&report, "model error"), 0.0);
    let max_d = read_measurements_csv(&out(d, "data_clean.csv"))
        .unwrap()
        .observed
        .unwrap()
        .into_iter()
        .fold(0.0, f64::max);
    assert!(metric(&report, "rms(d - d*)") <= 1e-10 * max_d, "{report}");
}
