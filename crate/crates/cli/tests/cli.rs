use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{Array1, Array2, Array3};
use serde_json::Value;
use spectrafuse::bundle::Window;
use spectrafuse::segmentation::{encode_pgm, read_pgm};
use spectrafuse::synthetic::{golden_bundle, GOLDEN_SEED};
use spectrafuse::{pipeline, spectral, write_bundle, Bundle, LabelMap, RunConfig};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectrafuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn segment(bundle: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "segment",
        "--bundle",
        path_str(bundle),
        "--out",
        path_str(out),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

/// One head, `N = 4` patches with orthonormal keys, so the Gram graph is `I`.
fn identity_bundle(dir: &Path, copy_vfm_to_clip: bool) {
    let n = 4;
    let keys = Array3::from_shape_fn((2, n, n), |(h, p, c)| {
        f32::from(u8::from(p == c)) * if h == 0 { 1.0 } else { 2.0 }
    });
    let other = Array3::from_shape_fn((2, n, n), |(h, p, c)| ((h + p * c) % 3) as f32 - 0.5);
    let b = Bundle {
        image_size_hw: [8, 8],
        window_size: 8,
        stride: 8,
        grid_hw: [2, 2],
        class_names: vec!["a".into(), "b".into()],
        w_o: Array2::eye(2 * n),
        post_ln_scale: Array1::ones(2 * n),
        post_ln_bias: Array1::zeros(2 * n),
        proj: Array2::from_shape_fn((2 * n, 2), |(r, c)| f32::from(u8::from(r % 2 == c))),
        text_embeddings: Array2::eye(2),
        cls_embedding: Array1::from(vec![0.6, 0.8]),
        windows: vec![Window {
            origin_xy: [0, 0],
            k_vfm: keys.clone(),
            k_clip: if copy_vfm_to_clip {
                keys
            } else {
                other.clone()
            },
            v_clip: other,
        }],
    };
    write_bundle(&b, dir).unwrap();
}

#[test]
fn golden_labels_are_reproduced() {
    let out = tempfile::tempdir().unwrap();
    let o = segment(&data("golden_bundle"), out.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(out.path().join("labels.pgm")).unwrap(),
        fs::read(data("golden_labels.pgm")).unwrap()
    );
}

#[test]
fn frozen_golden_bundle_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    write_bundle(&golden_bundle(GOLDEN_SEED), tmp.path()).unwrap();
    for entry in fs::read_dir(data("golden_bundle")).unwrap() {
        let entry = entry.unwrap();
        assert_eq!(
            fs::read(entry.path()).unwrap(),
            fs::read(tmp.path().join(entry.file_name())).unwrap(),
            "{:?}",
            entry.file_name()
        );
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(
        segment(&data("golden_bundle"), a.path(), &["--threads", "1"])
            .status
            .success()
    );
    assert!(
        segment(&data("golden_bundle"), b.path(), &["--threads", "3"])
            .status
            .success()
    );
    for f in ["labels.pgm", "labels.json", "report.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn reduction_flags_give_the_vanilla_path() {
    let out = tempfile::tempdir().unwrap();
    let o = segment(
        &data("golden_bundle"),
        out.path(),
        &["--no-vfm", "--alpha", "0", "--gamma", "0"],
    );
    assert!(o.status.success());
    let expected = pipeline::segment(&golden_bundle(GOLDEN_SEED), &RunConfig::vanilla()).unwrap();
    assert_eq!(
        fs::read(out.path().join("labels.pgm")).unwrap(),
        encode_pgm(&expected.labels).unwrap()
    );
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    assert!(report["windows"][0]["assignment"].is_null());
}

#[test]
fn report_echoes_config_file_and_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"alpha": 0.2, "eta": 0.8, "matching": "similar"}"#).unwrap();
    let out = tmp.path().join("out");
    let o = segment(
        &data("golden_bundle"),
        &out,
        &[
            "--config",
            path_str(&cfg),
            "--eta",
            "0.95",
            "--no-ota",
            "--timing",
            path_str(&tmp.path().join("t.json")),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["config"]["alpha"], 0.2);
    assert_eq!(r["config"]["eta"], 0.95);
    assert_eq!(r["config"]["matching"], "similar");
    assert_eq!(r["config"]["use_text_adjustment"], false);
    assert_eq!(r["resolved_m"], 3);
    assert_eq!(r["defaults"]["alpha"]["value"], 0.03);
    assert_eq!(r["design"]["layer_norm_eps"], 1e-5);
    assert_eq!(r["windows"].as_array().unwrap().len(), 6);
    assert_eq!(r["windows"][0]["rank_selections"][0]["eta"], 0.95);
    let timing: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("t.json")).unwrap()).unwrap();
    assert!(timing["total_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let o = segment(&missing, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert_eq!(
        segment(&data("golden_bundle"), tmp.path(), &["--alpha", "1.5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        segment(&data("golden_bundle"), tmp.path(), &["--m", "17"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["segment"]).status.code(), Some(2));
    let bad_head = run(&[
        "inspect-spectrum",
        "--bundle",
        path_str(&data("golden_bundle")),
        "--side",
        "vfm",
        "--head",
        "3",
    ]);
    assert_eq!(bad_head.status.code(), Some(2));
}

fn parse_csv(text: &str) -> Vec<(usize, f64, f64, bool)> {
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("rank,eigenvalue,cumulative_fraction,selected")
    );
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].parse().unwrap(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
                f[3] == "1",
            )
        })
        .collect()
}

#[test]
fn identity_spectrum_selects_ceil_eta_n() {
    let tmp = tempfile::tempdir().unwrap();
    identity_bundle(tmp.path(), false);
    for (eta, k) in [("0.9", 4), ("0.5", 2), ("0.6", 3), ("0.25", 1)] {
        let o = run(&[
            "inspect-spectrum",
            "--bundle",
            path_str(tmp.path()),
            "--side",
            "vfm",
            "--head",
            "0",
            "--eta",
            eta,
        ]);
        assert!(o.status.success());
        let rows = parse_csv(&String::from_utf8(o.stdout).unwrap());
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.1 == 1.0));
        assert_eq!(rows.iter().filter(|r| r.3).count(), k, "eta {eta}");
    }
}

#[test]
fn spectrum_csv_parses_back_to_library_values() {
    let o = run(&[
        "inspect-spectrum",
        "--bundle",
        path_str(&data("golden_bundle")),
        "--side",
        "clip",
        "--head",
        "1",
        "--window",
        "2",
    ]);
    assert!(o.status.success());
    let rows = parse_csv(&String::from_utf8(o.stdout).unwrap());
    let b = golden_bundle(GOLDEN_SEED);
    let g = spectrafuse::build_gram_graph(&b.windows[2].k_clip).unwrap();
    let eig = spectral::eigendecompose_symmetric(g.head(1)).unwrap();
    let sel =
        spectral::select_rank_energy(&eig.eigenvalues, spectral::trace(g.head(1)), 0.9).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.1).collect::<Vec<_>>(),
        eig.eigenvalues
    );
    assert_eq!(rows.iter().filter(|r| r.3).count(), sel.k);
    assert!(rows.windows(2).all(|w| w[0].2 <= w[1].2));
    assert!((rows.last().unwrap().2 - 1.0).abs() < 1e-9);
    assert_eq!(
        rows.iter().map(|r| r.0).collect::<Vec<_>>(),
        (1..=16).collect::<Vec<_>>()
    );
}

fn match_json(bundle: &Path) -> Value {
    let o = run(&["match-heads", "--bundle", path_str(bundle)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn self_match_has_zero_weights() {
    let tmp = tempfile::tempdir().unwrap();
    identity_bundle(tmp.path(), true);
    let j = match_json(tmp.path());
    let weights: Vec<f64> = serde_json::from_value(j["weights"].clone()).unwrap();
    assert_eq!(weights, vec![0.0, 0.0]);
}

#[test]
fn emitted_matching_is_consistent() {
    let j = match_json(&data("golden_bundle"));
    let vfm: Vec<Vec<f64>> = serde_json::from_value(j["vfm_signatures"].clone()).unwrap();
    let clip: Vec<Vec<f64>> = serde_json::from_value(j["clip_signatures"].clone()).unwrap();
    let cost: Vec<Vec<f64>> = serde_json::from_value(j["cost_matrix"].clone()).unwrap();
    let pairs: Vec<(usize, usize)> = serde_json::from_value(j["pairs"].clone()).unwrap();
    let weights: Vec<f64> = serde_json::from_value(j["weights"].clone()).unwrap();
    let dw = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    for i in 0..3 {
        for k in 0..3 {
            assert_eq!(cost[i][k], 1.0 - dw(&vfm[i], &clip[k]));
        }
    }
    let mut targets: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    targets.sort();
    assert_eq!(targets, vec![0, 1, 2]);
    assert_eq!(pairs.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    for (&(i, k), w) in pairs.iter().zip(weights) {
        assert_eq!(w, dw(&vfm[i], &clip[k]));
    }
}

fn write_labels(dir: &Path, name: &str, labels: Array2<u32>) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, encode_pgm(&LabelMap { labels }).unwrap()).unwrap();
    p
}

fn eval(pred: &Path, gt: &Path, classes: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "eval",
        "--pred",
        path_str(pred),
        "--gt",
        path_str(gt),
        "--classes",
        path_str(classes),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn eval_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let classes = d.join("classes.json");
    fs::write(&classes, r#"["background", "object"]"#).unwrap();
    let pred = write_labels(d, "pred.pgm", ndarray::array![[0, 0], [1, 1]]);
    let gt = write_labels(d, "gt.pgm", ndarray::array![[0, 1], [1, 1]]);
    let o = eval(&pred, &gt, &classes, &[]);
    assert!(o.status.success());
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["miou"].as_f64().unwrap(), 7.0 / 12.0);
    assert_eq!(r["pacc"].as_f64().unwrap(), 0.75);

    let r: Value = serde_json::from_slice(&eval(&gt, &gt, &classes, &[]).stdout).unwrap();
    assert_eq!(r["miou"].as_f64().unwrap(), 1.0);
    let inverted = write_labels(d, "inv.pgm", ndarray::array![[1, 0], [0, 0]]);
    let r: Value = serde_json::from_slice(&eval(&inverted, &gt, &classes, &[]).stdout).unwrap();
    assert_eq!(r["miou"].as_f64().unwrap(), 0.0);

    let wide = write_labels(d, "wide.pgm", ndarray::array![[0, 0, 1]]);
    assert_eq!(eval(&wide, &gt, &classes, &[]).status.code(), Some(2));
}

#[test]
fn eval_accepts_segment_metadata_as_classes() {
    let out = tempfile::tempdir().unwrap();
    assert!(segment(&data("golden_bundle"), out.path(), &[])
        .status
        .success());
    let labels = out.path().join("labels.pgm");
    let o = eval(
        &labels,
        &data("golden_labels.pgm"),
        &out.path().join("labels.json"),
        &["--ignore-index", "2"],
    );
    assert!(o.status.success());
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["pacc"].as_f64().unwrap(), 1.0);
    assert_eq!(
        read_pgm(&labels).unwrap(),
        read_pgm(data("golden_labels.pgm")).unwrap()
    );
}
