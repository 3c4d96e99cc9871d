//! End-to-end tests of the `adjk` binary: exit codes, artifact layout and
//! the documented demo behaviors.

use std::path::Path;
use std::process::{Command, Output};

fn adjk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adjk")).args(args).output().expect("spawn adjk")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fig3() -> String {
    format!("{}/assets/fig3.dk", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn compile_dumps_select_form_ir() {
    let out = adjk(&["compile", &fig3(), "--dump-ir", "flattened"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("select("), "no select in:\n{text}");
    assert!(!text.contains("if "), "unflattened if in:\n{text}");
}

#[test]
fn compile_adjoint_dump_contains_gradient_kernel() {
    let out = adjk(&["compile", &fig3(), "--dump-ir", "adjoint", "--kernel", "branchy"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("kernel branchy.grad()"), "no adjoint in:\n{text}");
    assert!(text.contains("x.grad["), "no adjoint accumulation in:\n{text}");
}

#[test]
fn compile_missing_file_exits_1() {
    let out = adjk(&["compile", "/nonexistent/nope.dk"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = adjk(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_demo_exits_2() {
    let out = adjk(&["demo", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn demo_with_zero_iters_writes_single_initial_loss_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = adjk(&[
        "demo",
        "mass_spring_simple",
        "--iters",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,loss");
    assert_eq!(lines.len(), 2, "csv:\n{csv}");
    assert!(lines[1].starts_with("0,"), "csv:\n{csv}");
    let loss: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!(loss > 0.0);
}

fn printed_gradient(out: &Output) -> f64 {
    let text = stdout(out);
    let tail = text.split("d height / d h0 =").nth(1).expect("gradient line");
    tail.trim().parse().expect("gradient value")
}

#[test]
fn bouncing_ball_gradient_sign_follows_toi_flag() {
    let naive = adjk(&["demo", "bouncing_ball", "--toi", "off"]);
    assert!(naive.status.success());
    let g = printed_gradient(&naive);
    assert!((g - 1.0).abs() < 0.02, "naive gradient {g}");

    let toi = adjk(&["demo", "bouncing_ball", "--toi", "on"]);
    assert!(toi.status.success());
    let g = printed_gradient(&toi);
    assert!((g + 1.0).abs() < 0.02, "toi gradient {g}");
}

#[test]
fn same_seed_deterministic_runs_write_identical_loss_csv() {
    let run = |dir: &Path| {
        let out = adjk(&[
            "demo",
            "mass_spring_robot",
            "--iters",
            "2",
            "--steps",
            "32",
            "--seed",
            "7",
            "--deterministic",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.join("loss.csv")).unwrap()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(d1.path()), run(d2.path()), "loss.csv differs between identical runs");
}

#[test]
fn demo_writes_pgm_frames() {
    let dir = tempfile::tempdir().unwrap();
    let out = adjk(&[
        "demo",
        "wave",
        "--iters",
        "1",
        "--steps",
        "16",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let first = dir.path().join("frame_0000.pgm");
    assert!(first.exists());
    let bytes = std::fs::read(first).unwrap();
    assert!(bytes.starts_with(b"P5\n"), "not a binary PGM");
}

#[test]
fn grad_check_reports_and_exits_by_result() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("quad.dk");
    std::fs::write(
        &file,
        "
field x: f32[6] needs_grad;
field loss: f32[] needs_grad;
kernel quad() { parallel for i in 0..6 { loss[] += 0.5 * x[i] * x[i] + sin(x[i]); } }
",
    )
    .unwrap();
    let ok = adjk(&["grad-check", file.to_str().unwrap(), "--loss", "loss", "--input", "x", "--f64"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(stdout(&ok).contains("pass"));

    let bad = adjk(&["grad-check", file.to_str().unwrap(), "--loss", "nope", "--input", "x"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn check_access_flags_rule_violations() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean.dk");
    std::fs::write(
        &clean,
        "
field y: f32[4];
kernel k() { parallel for i in 0..4 { y[i] = 1.0; } }
",
    )
    .unwrap();
    let ok = adjk(&["check-access", clean.to_str().unwrap(), "--kernel", "k"]);
    assert!(ok.status.success());
    assert!(stdout(&ok).contains("no access-rule violations"));

    let dirty = dir.path().join("dirty.dk");
    std::fs::write(
        &dirty,
        "
field y: f32[4];
kernel k() { y[0] = 1.0; y[0] = 2.0; }
",
    )
    .unwrap();
    let bad = adjk(&["check-access", dirty.to_str().unwrap(), "--kernel", "k"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("rule 1"), "{}", stdout(&bad));
}

#[test]
fn scan_writes_value_loss_gradient_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("scan.csv");
    let out = adjk(&[
        "scan",
        "bouncing_ball",
        "--param",
        "h0",
        "--from",
        "0.3",
        "--to",
        "0.7",
        "--samples",
        "5",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "value,loss,gradient");
    assert_eq!(lines.len(), 6, "csv:\n{csv}");
}
