use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use decode_core::scenegen::domain_scene_id;

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/tiny.toml")
}

fn decode(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decode"))
        .arg("--config")
        .arg(config())
        .arg("--out")
        .arg(out)
        .args(args)
        .env("DECODE_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = decode(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// A working directory taken through all three phases.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(dir.path(), &["gen-data"]);
        ok(dir.path(), &["pretrain"]);
        for m in ["1", "2", "3"] {
            ok(dir.path(), &["expand", "--phase", m]);
        }
        dir
    })
    .path()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_data_writes_four_domains_and_a_mix_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let printed = ok(a.path(), &["gen-data"]);
    ok(b.path(), &["gen-data"]);
    assert!(printed.contains("mix: 150 scenes"));
    let mut files: Vec<String> = fs::read_dir(a.path().join("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["aggressive-arc.ds", "arc.ds", "mix.ds", "straight.ds", "turn.ds"]);
    for f in &files {
        let x = fs::read(a.path().join("data").join(f)).unwrap();
        let y = fs::read(b.path().join("data").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["gen-data"]);
    ok(b.path(), &["--seed", "12", "gen-data"]);
    assert_ne!(
        fs::read(a.path().join("data/arc.ds")).unwrap(),
        fs::read(b.path().join("data/arc.ds")).unwrap()
    );
}

#[test]
fn bad_spec_fails_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = fs::read_to_string(config()).unwrap().replace("modes = 3", "modes = 3\nmodez = 4");
    fs::write(&cfg, text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_decode"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("modez"));

    ok(dir.path(), &["gen-data"]);
    let cfg = dir.path().join("range.toml");
    let text = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(text.contains("speed_range = [5.0, 12.0]"));
    fs::write(&cfg, text.replace("speed_range = [5.0, 12.0]", "speed_range = [12.0, 5.0]")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_decode"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("speed_range"));
}

#[test]
fn missing_artifacts_give_remediation_hints() {
    let dir = tempfile::tempdir().unwrap();
    let o = decode(dir.path(), &["pretrain"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("decode gen-data"));
    ok(dir.path(), &["gen-data"]);
    let o = decode(dir.path(), &["expand", "--phase", "1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("decode pretrain"));
    let o = decode(dir.path(), &["eval", "--phase", "2"]);
    assert!(!o.status.success());
}

#[test]
fn eval_after_phase_three_reports_a_full_staircase() {
    let dir = trained();
    let printed = ok(dir, &["eval", "--phase", "3"]);
    assert!(printed.contains("selection accuracy"));
    let eval = dir.join("eval/phase-3");
    let rows = csv_rows(&eval.join("staircase.csv"));
    let decode: Vec<_> = rows.iter().filter(|r| r[0] == "decode").collect();
    assert_eq!(decode.len(), 6);
    for method in ["frozen-generalized", "naive-finetune", "experience-replay"] {
        assert_eq!(rows.iter().filter(|r| r[0] == method).count(), 6, "{method}");
    }
    for d in ["arc", "straight", "turn"] {
        assert!(eval.join(format!("roc-{d}.csv")).exists());
    }
    assert_eq!(csv_rows(&eval.join("confusion.csv")).len(), 9);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["decode"]["ade"]["rows"].as_array().unwrap().len(), 3);
    assert_eq!(summary["config"]["seed"], 11);
}

#[test]
fn eval_is_reproducible() {
    let dir = trained();
    ok(dir, &["eval", "--phase", "2"]);
    let first = fs::read(dir.join("eval/phase-2/summary.json")).unwrap();
    ok(dir, &["eval", "--phase", "2"]);
    assert_eq!(fs::read(dir.join("eval/phase-2/summary.json")).unwrap(), first);
}

#[test]
fn predict_before_a_domain_is_learned_stays_with_the_generalized_model() {
    let dir = trained();
    let straight_id = domain_scene_id(2, 65);
    ok(dir, &["predict", "--phase", "1", "--scene", &straight_id.to_string(), "--samples", "20"]);
    let v: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.join(format!("predict/scene-{straight_id}-phase-1.json"))).unwrap(),
    )
    .unwrap();
    let e_star = v["e_star"].as_f64().unwrap();
    assert!(e_star < v["e0"].as_f64().unwrap());
    let fused = v["fused_min_ade"].as_f64().unwrap();
    let gen = v["generalized_min_ade"].as_f64().unwrap();
    assert!((fused - gen).abs() <= 0.01 * gen, "{fused} vs {gen}");
    let w = v["generalized_weight"].as_f64().unwrap() + v["specialized_weight"].as_f64().unwrap();
    assert!((w - 1.0).abs() < 1e-12);
    assert_eq!(v["samples"].as_array().unwrap().len(), 20);
    assert_eq!(v["log_evidence"].as_array().unwrap().len(), 1);
}

#[test]
fn unknown_scene_is_an_error() {
    let o = decode(trained(), &["predict", "--scene", "999"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("999"));
}

#[test]
fn ablation_sweeps_the_configured_grid() {
    let dir = trained();
    ok(dir, &["ablate-e0", "--phase", "1"]);
    let rows = csv_rows(&dir.join("ablation/e0-phase-1.csv"));
    assert_eq!(rows.len(), 4 * 3);
    let spec: Vec<f64> = rows
        .iter()
        .filter(|r| r[2] == "specialized")
        .map(|r| r[3].parse().unwrap())
        .collect();
    assert_eq!(spec.len(), 4);
    for w in spec.windows(2) {
        assert!(w[1] >= w[0] * (1.0 - 1e-3), "{spec:?}");
    }
}

#[test]
fn report_runs_the_plan_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = ok(a.path(), &["report"]);
    let pb = ok(b.path(), &["report"]);
    assert_eq!(pa, pb);
    assert_eq!(
        fs::read(a.path().join("report/report.json")).unwrap(),
        fs::read(b.path().join("report/report.json")).unwrap()
    );
    for m in 0..4 {
        let name = format!("report/checkpoints/phase-{m}.ck");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
}
