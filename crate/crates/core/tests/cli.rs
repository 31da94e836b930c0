use std::path::Path;
use std::process::{Command, Output};

use hkd::metrics::{read_csv, CurveRow, MetricsRow, CURVES_HEADER, METRICS_HEADER};

const TINY: &str = r#"
seed = 3
mode = "static"
epochs = 2
batch_size = 16
[data]
classes = 3
dim = 4
train_per_class = 20
eval_per_class = 10
meta_per_class = 2
[teacher]
hidden = [8, 8]
feature_tap = 1
epochs = 2
[student]
hidden = [4]
[meta]
interval = 2
hidden = 6
"#;

fn hkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hkd"))
        .args(args)
        .env("HKD_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes_and_is_repeatable() {
    let a = hkd(&["gradcheck", "--seed", "9"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = hkd(&["gradcheck", "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("hypergradient"));
}

#[test]
fn corrupted_gradient_fails_naming_the_op() {
    let o = hkd(&["gradcheck", "--corrupt", "softmax"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("softmax"));
}

#[test]
fn teacher_then_static_distill_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.to_string_lossy().into_owned();
    let t = hkd(&["train-teacher", "--config", &cfg, "--out", &out_s]);
    assert!(t.status.success(), "{}", stderr(&t));
    let d = hkd(&["distill", "--config", &cfg, "--out", &out_s]);
    assert!(d.status.success(), "{}", stderr(&d));
    for f in ["teacher.ckpt", "student.ckpt", "best.ckpt", "metrics.csv", "weights.csv", "distill.config.toml", "distill.run.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert_eq!(std::fs::read_to_string(out.join("distill.config.toml")).unwrap(), TINY);
    let run_txt = std::fs::read_to_string(out.join("distill.run.txt")).unwrap();
    assert!(run_txt.contains("seed = 3") && run_txt.contains("version = ") && run_txt.contains("mode = static"));
    let metrics: Vec<MetricsRow> = read_csv(&out.join("metrics.csv"), METRICS_HEADER).unwrap();
    assert_eq!(metrics.len(), 2 * 4);
    assert!(metrics.last().unwrap().eval_acc.is_some());

    std::fs::remove_file(out.join("weights_epoch.csv")).unwrap();
    let e = hkd(&["export-curves", &out_s]);
    assert!(e.status.success(), "{}", stderr(&e));
    let curves: Vec<CurveRow> = read_csv(&out.join("weights_epoch.csv"), CURVES_HEADER).unwrap();
    assert_eq!(curves.len(), 2);
    assert!(curves.iter().all(|c| c.beta_mean == 1.0 && c.gamma_mean == 1.0 && c.beta_std == 0.0));
}

#[test]
fn mode_and_seed_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    let out_s = out.to_string_lossy().into_owned();
    assert!(hkd(&["train-teacher", "--config", &cfg, "--out", &out_s, "--seed", "8"]).status.success());
    let d = hkd(&["distill", "--config", &cfg, "--out", &out_s, "--seed", "8", "--mode", "hkd"]);
    assert!(d.status.success(), "{}", stderr(&d));
    let run_txt = std::fs::read_to_string(out.join("distill.run.txt")).unwrap();
    assert!(run_txt.contains("seed = 8") && run_txt.contains("mode = hkd"));
}

#[test]
fn zero_epoch_teacher_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("epochs = 2\n[student]", "epochs = 0\n[student]"));
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = hkd(&["train-teacher", "--config", &cfg, "--out", &out.to_string_lossy()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(std::fs::read_to_string(out.join("teacher_metrics.csv")).unwrap(), format!("{METRICS_HEADER}\n"));
        bytes.push(std::fs::read(out.join("teacher.ckpt")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn error_paths_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let e = hkd(&["export-curves", &empty.to_string_lossy()]);
    assert_eq!(e.status.code(), Some(3));
    assert!(stderr(&e).contains("weights.csv") && stderr(&e).contains("metrics.csv"));

    let cfg = write_config(dir.path(), TINY);
    let m = hkd(&["distill", "--config", &cfg, "--out", &empty.to_string_lossy()]);
    assert_eq!(m.status.code(), Some(3));
    assert!(stderr(&m).contains("teacher.ckpt"));

    let bad = write_config(dir.path(), "batch_size = 0\n");
    let c = hkd(&["train-teacher", "--config", &bad, "--out", &empty.to_string_lossy()]);
    assert_eq!(c.status.code(), Some(2));
    assert!(stderr(&c).contains("batch_size"));
}

#[test]
fn teacher_architecture_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("r");
    let out_s = out.to_string_lossy().into_owned();
    assert!(hkd(&["train-teacher", "--config", &cfg, "--out", &out_s]).status.success());
    let other = dir.path().join("other.toml");
    std::fs::write(&other, TINY.replace("hidden = [8, 8]", "hidden = [9, 8]")).unwrap();
    let d = hkd(&["distill", "--config", &other.to_string_lossy(), "--out", &out_s]);
    assert_eq!(d.status.code(), Some(2));
    assert!(stderr(&d).contains("checkpoint mismatch"));
}
