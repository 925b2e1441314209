use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fmamba_cli::ablate::Preset;
use fmamba_cli::bench::{cross_attention, parse_sizes, CSV_HEADER};
use fmamba_cli::CliConfig;

fn fmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmamba")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "image_size=64\nn_train=4\nn_test=2\nepochs=1\nbatch_size=2\nn_dssf=1\nstate_dim=4\n";

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

#[test]
fn unknown_subcommand_fails() {
    let o = fmamba(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(!fmamba(&[]).status.success());
}

#[test]
fn train_eval_heatmap_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.display().to_string();

    let o = fmamba(&["train", "--config", &cfg, "--out", &out_s, "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("seed=3") && text.contains("lambda_coord=7.5"), "{text}");
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss,coord,conf,class\n"));
    assert_eq!(log.lines().count(), 3);
    assert!(out.join("checkpoint/manifest.txt").exists());
    let saved = CliConfig::load(out.join("checkpoint/config.txt")).unwrap();
    assert_eq!(saved.train.seed, 3);
    assert_eq!(saved.train.fmb.n_dssf, 1);

    // eval and heatmap reuse the configuration stored with the checkpoint
    let o = fmamba(&["eval", "--out", &out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(metrics.contains("map50=") && metrics.contains("map50_95="), "{metrics}");

    let o = fmamba(&["heatmap", "--out", &out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgm_path = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "pgm"))
        .expect("heatmap written");
    let pgm = fs::read_to_string(pgm_path).unwrap();
    assert!(pgm.starts_with("P2\n2 2\n255\n"), "{pgm}");
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty").display().to_string();
    assert!(!fmamba(&["eval", "--out", &out]).status.success());
}

#[test]
fn bad_config_fails_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "epochs=2\nn_dssf=zero\n").unwrap();
    let o = fmamba(&["train", "--config", &path.display().to_string(), "--out", &dir.path().display().to_string()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn bench_rows_follow_the_size_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = fmamba(&["bench", "--sizes", "64,128", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + 3 * 2);
    let kernels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        kernels,
        ["s6_forward", "s6_forward", "ss2d_forward", "ss2d_forward", "cross_attention", "cross_attention"]
    );
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
    assert!(!fmamba(&["bench", "--sizes", "64,abc", "--out", &out]).status.success());
}

#[test]
fn sizes_must_be_row_multiples() {
    assert_eq!(parse_sizes("256, 512").unwrap(), vec![256, 512]);
    assert!(parse_sizes("100").is_err());
    assert!(parse_sizes("").is_err());
}

#[test]
fn attention_reference_matches_direct_formula() {
    let (len, d) = (3, 2);
    let q = [1.0f32, 0.0, 0.0, 1.0, 0.5, 0.5];
    let kv = [0.2f32, -0.1, 0.4, 0.3, -0.5, 0.9];
    let out = cross_attention(&q, &kv, len, d);
    for i in 0..len {
        let s: Vec<f64> = (0..len)
            .map(|j| (0..d).map(|k| (q[i * d + k] * kv[j * d + k]) as f64).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for k in 0..d {
            let want: f64 = (0..len).map(|j| s[j].exp() / z * kv[j * d + k] as f64).sum();
            assert!((out[i * d + k] as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn ablate_presets() {
    assert_eq!(Preset::DualAttention.rows(&CliConfig::default()).len(), 4);
    assert_eq!(Preset::Modules.rows(&CliConfig::default()).len(), 4);
    assert_eq!(Preset::Position.rows(&CliConfig::default()).len(), 3);
    let counts: Vec<usize> = Preset::DssfCount
        .rows(&CliConfig::default())
        .iter()
        .map(|(_, c)| c.train.fmb.n_dssf)
        .collect();
    assert_eq!(counts, [2, 4, 8, 16]);
    assert!("nope".parse::<Preset>().is_err());

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().display().to_string();
    let o = fmamba(&["ablate", "--preset", "dual_attention", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("ablate_dual_attention.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        labels,
        ["full", "remove_rgb_branch_cross", "remove_ir_branch_cross", "remove_both"]
    );
    assert!(!fmamba(&["ablate", "--out", &out]).status.success());
    assert!(!fmamba(&["ablate", "--preset", "nope", "--out", &out]).status.success());
}
