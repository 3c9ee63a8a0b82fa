use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectrafuse::bundle::{read_manifest, Window, MANIFEST_FILE};
use spectrafuse::synthetic::{golden_bundle, GOLDEN_SEED};
use spectrafuse::{read_bundle, write_bundle, Bundle, Error};

fn random_bundle(seed: u64, heads: usize, grid: usize, head_dim: usize, windows: usize) -> Bundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid * grid;
    let width = heads * head_dim;
    let (d, c) = (4, 3);
    let window_size = grid * 16;
    let mut tensor = |shape: (usize, usize, usize)| {
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    };
    let ws: Vec<Window> = (0..windows)
        .map(|i| Window {
            origin_xy: [i * window_size / 2, 0],
            k_vfm: tensor((heads, n, head_dim)),
            k_clip: tensor((heads, n, head_dim)),
            v_clip: tensor((heads, n, head_dim)),
        })
        .collect();
    let image_w = window_size + (windows - 1) * window_size / 2;
    Bundle {
        image_size_hw: [window_size, image_w],
        window_size,
        stride: window_size / 2,
        grid_hw: [grid, grid],
        class_names: (0..c).map(|k| format!("class{k}")).collect(),
        w_o: Array2::eye(width),
        post_ln_scale: Array1::ones(width),
        post_ln_bias: Array1::zeros(width),
        proj: Array2::from_shape_fn((width, d), |(r, k)| ((r + k) % 3) as f32 - 1.0),
        text_embeddings: Array2::from_shape_fn((c, d), |(r, k)| f32::from(u8::from(r == k))),
        cls_embedding: Array1::from(vec![0.5, 0.5, 0.5, 0.5]),
        windows: ws,
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let b = golden_bundle(GOLDEN_SEED);
    write_bundle(&b, tmp.path()).unwrap();
    assert_eq!(read_bundle(tmp.path()).unwrap(), b);
}

#[test]
fn two_window_bundle_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let b = random_bundle(3, 2, 2, 4, 2);
    b.validate().unwrap();
    write_bundle(&b, tmp.path()).unwrap();
    let back = read_bundle(tmp.path()).unwrap();
    assert_eq!(back.windows.len(), 2);
    assert_eq!(back, b);
}

#[test]
fn writing_twice_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let bundle = golden_bundle(GOLDEN_SEED);
    write_bundle(&bundle, a.path()).unwrap();
    write_bundle(&bundle, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
}

#[test]
fn truncated_tensor_file_is_shape_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let b = random_bundle(5, 12, 14, 64, 1);
    write_bundle(&b, tmp.path()).unwrap();
    let m = read_manifest(tmp.path()).unwrap();
    let spec = m
        .tensors
        .iter()
        .find(|t| t.name == m.windows[0].k_clip)
        .unwrap();
    assert_eq!(spec.shape, vec![12, 196, 64]);
    fs::write(tmp.path().join(&spec.file), vec![0u8; 196 * 64 * 4]).unwrap();
    assert!(matches!(
        read_bundle(tmp.path()),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn nan_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let b = random_bundle(6, 2, 2, 4, 1);
    write_bundle(&b, tmp.path()).unwrap();
    let m = read_manifest(tmp.path()).unwrap();
    let spec = m
        .tensors
        .iter()
        .find(|t| t.name == m.windows[0].v_clip)
        .unwrap();
    let mut values = b.windows[0].v_clip.clone();
    values[[1, 2, 3]] = f32::NAN;
    f32_file(tmp.path(), &spec.file, values.as_slice().unwrap());
    assert!(matches!(read_bundle(tmp.path()), Err(Error::NonFinite(_))));
}

#[test]
fn empty_window_list_is_invalid() {
    let tmp = tempfile::tempdir().unwrap();
    let b = random_bundle(7, 2, 2, 4, 1);
    write_bundle(&b, tmp.path()).unwrap();
    let mut m = read_manifest(tmp.path()).unwrap();
    m.windows.clear();
    fs::write(
        tmp.path().join(MANIFEST_FILE),
        serde_json::to_string(&m).unwrap(),
    )
    .unwrap();
    assert!(matches!(
        read_bundle(tmp.path()),
        Err(Error::ManifestInvalid(_))
    ));
}

#[test]
fn missing_directory_or_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(
        read_bundle(tmp.path().join("nope")),
        Err(Error::MissingFile(_))
    ));
    write_bundle(&random_bundle(8, 2, 2, 4, 1), tmp.path()).unwrap();
    fs::remove_file(tmp.path().join("proj.bin")).unwrap();
    assert!(matches!(
        read_bundle(tmp.path()),
        Err(Error::MissingFile(_))
    ));
}

fn f32_file(dir: &Path, name: &str, values: &[f32]) {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(name), bytes).unwrap();
}

#[test]
fn reads_hand_written_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let manifest = r#"{
  "version": 1,
  "image_size_hw": [4, 4],
  "window_size": 4,
  "stride": 4,
  "grid_hw": [1, 1],
  "num_heads": 1,
  "num_patches": 1,
  "head_dim": 2,
  "embed_dim": 2,
  "num_classes": 2,
  "class_names": ["sky", "sea"],
  "tensors": [
    {"name": "w_o", "shape": [2, 2], "dtype": "f32", "file": "w_o.bin", "byte_order": "little-endian"},
    {"name": "post_ln_scale", "shape": [2], "dtype": "f32", "file": "s.bin", "byte_order": "little-endian"},
    {"name": "post_ln_bias", "shape": [2], "dtype": "f32", "file": "b.bin", "byte_order": "little-endian"},
    {"name": "proj", "shape": [2, 2], "dtype": "f32", "file": "proj.bin", "byte_order": "little-endian"},
    {"name": "text_embeddings", "shape": [2, 2], "dtype": "f32", "file": "text.bin", "byte_order": "little-endian"},
    {"name": "cls_embedding", "shape": [2], "dtype": "f32", "file": "cls.bin", "byte_order": "little-endian"},
    {"name": "kv", "shape": [1, 1, 2], "dtype": "f32", "file": "kv.bin", "byte_order": "little-endian"},
    {"name": "kc", "shape": [1, 1, 2], "dtype": "f32", "file": "kc.bin", "byte_order": "little-endian"},
    {"name": "vc", "shape": [1, 1, 2], "dtype": "f32", "file": "vc.bin", "byte_order": "little-endian"}
  ],
  "windows": [{"origin_xy": [0, 0], "k_vfm": "kv", "k_clip": "kc", "v_clip": "vc"}]
}"#;
    fs::write(dir.join(MANIFEST_FILE), manifest).unwrap();
    f32_file(dir, "w_o.bin", &[1.0, 2.0, 3.0, 4.0]);
    f32_file(dir, "s.bin", &[1.0, 1.0]);
    f32_file(dir, "b.bin", &[0.0, 0.5]);
    f32_file(dir, "proj.bin", &[1.0, 0.0, 0.0, 1.0]);
    f32_file(dir, "text.bin", &[1.0, 0.0, 0.0, 1.0]);
    f32_file(dir, "cls.bin", &[0.6, 0.8]);
    f32_file(dir, "kv.bin", &[3.0, -1.0]);
    f32_file(dir, "kc.bin", &[0.25, 0.5]);
    f32_file(dir, "vc.bin", &[-2.0, 7.0]);

    let b = read_bundle(dir).unwrap();
    assert_eq!(b.class_names, ["sky", "sea"]);
    // Row-major: w_o[0, 1] is the second stored value.
    assert_eq!(b.w_o[[0, 1]], 2.0);
    assert_eq!(b.w_o[[1, 0]], 3.0);
    assert_eq!(b.post_ln_bias[1], 0.5);
    assert_eq!(b.windows[0].k_vfm[[0, 0, 0]], 3.0);
    assert_eq!(b.windows[0].v_clip[[0, 0, 1]], 7.0);
    assert_eq!(b.cls_embedding.to_vec(), vec![0.6, 0.8]);
}
