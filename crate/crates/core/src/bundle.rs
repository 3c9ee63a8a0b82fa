//! On-disk tensor bundle.
//!
//! A bundle is a directory holding `manifest.json` plus one headerless
//! little-endian `f32` blob per tensor, row-major. The manifest is
//! authoritative for names, shapes and files. Everything a single image needs
//! (per-window attention keys/values and the image-level projections, text
//! embeddings and global embedding) travels in one bundle.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: &str = "f32";
pub const LITTLE_ENDIAN: &str = "little-endian";

pub const W_O: &str = "w_o";
pub const POST_LN_SCALE: &str = "post_ln_scale";
pub const POST_LN_BIAS: &str = "post_ln_bias";
pub const PROJ: &str = "proj";
pub const TEXT_EMBEDDINGS: &str = "text_embeddings";
pub const CLS_EMBEDDING: &str = "cls_embedding";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_order: String,
}

impl TensorSpec {
    fn f32(name: &str, shape: &[usize]) -> Self {
        TensorSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: DTYPE_F32.to_string(),
            file: format!("{name}.bin"),
            byte_order: LITTLE_ENDIAN.to_string(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Names the three per-window tensors and where the window sits in the image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRecord {
    /// Pixel offset `[x, y]` of the window's top-left corner.
    pub origin_xy: [usize; 2],
    pub k_vfm: String,
    pub k_clip: String,
    pub v_clip: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub image_size_hw: [usize; 2],
    pub window_size: usize,
    pub stride: usize,
    /// Patch grid of one window, `[rows, cols]`.
    pub grid_hw: [usize; 2],
    pub num_heads: usize,
    pub num_patches: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub tensors: Vec<TensorSpec>,
    pub windows: Vec<WindowRecord>,
}

/// Per-window encoder tensors, each `[heads, patches, head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub origin_xy: [usize; 2],
    pub k_vfm: Array3<f32>,
    pub k_clip: Array3<f32>,
    pub v_clip: Array3<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub image_size_hw: [usize; 2],
    pub window_size: usize,
    pub stride: usize,
    pub grid_hw: [usize; 2],
    pub class_names: Vec<String>,
    /// `[h*D_h, h*D_h]`, applied as `x · w_o`.
    pub w_o: Array2<f32>,
    pub post_ln_scale: Array1<f32>,
    pub post_ln_bias: Array1<f32>,
    /// `[h*D_h, d]`, applied as `x · proj`.
    pub proj: Array2<f32>,
    pub text_embeddings: Array2<f32>,
    pub cls_embedding: Array1<f32>,
    pub windows: Vec<Window>,
}

/// Window origins `[x, y]` for sliding a square window over an image.
///
/// Along each axis the origins are `0, stride, 2*stride, ...` with the last
/// one pulled back to `len - window` so the far edge is covered. Row-major
/// order (y outer).
pub fn tile_origins(image_hw: [usize; 2], window: usize, stride: usize) -> Vec<[usize; 2]> {
    let axis = |len: usize| -> Vec<usize> {
        if len <= window || stride == 0 {
            return vec![0];
        }
        let steps = (len - window).div_ceil(stride) + 1;
        (0..steps).map(|i| (i * stride).min(len - window)).collect()
    };
    let ys = axis(image_hw[0]);
    let xs = axis(image_hw[1]);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| [x, y]))
        .collect()
}

/// First pixel (row-major) not covered by any window, if any.
pub fn first_uncovered(
    image_hw: [usize; 2],
    window: usize,
    origins: impl IntoIterator<Item = [usize; 2]>,
) -> Option<(usize, usize)> {
    let [h, w] = image_hw;
    let mut covered = vec![false; h * w];
    for [ox, oy] in origins {
        for y in oy..(oy + window).min(h) {
            covered[y * w + ox.min(w)..(ox + window).min(w) + y * w]
                .iter_mut()
                .for_each(|c| *c = true);
        }
    }
    covered.iter().position(|c| !c).map(|i| (i % w, i / w))
}

impl Bundle {
    pub fn num_heads(&self) -> usize {
        self.windows.first().map_or(0, |w| w.k_clip.dim().0)
    }

    pub fn num_patches(&self) -> usize {
        self.windows.first().map_or(0, |w| w.k_clip.dim().1)
    }

    pub fn head_dim(&self) -> usize {
        self.windows.first().map_or(0, |w| w.k_clip.dim().2)
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.text_embeddings.nrows()
    }

    fn window_tensor_names(index: usize) -> [String; 3] {
        [
            format!("window_{index}_k_vfm"),
            format!("window_{index}_k_clip"),
            format!("window_{index}_v_clip"),
        ]
    }

    /// The manifest describing this bundle. Deterministic in the bundle contents.
    pub fn manifest(&self) -> BundleManifest {
        let (h, n, dh) = (self.num_heads(), self.num_patches(), self.head_dim());
        let width = h * dh;
        let (d, c) = (self.embed_dim(), self.num_classes());
        let mut tensors = vec![
            TensorSpec::f32(W_O, &[width, width]),
            TensorSpec::f32(POST_LN_SCALE, &[width]),
            TensorSpec::f32(POST_LN_BIAS, &[width]),
            TensorSpec::f32(PROJ, &[width, d]),
            TensorSpec::f32(TEXT_EMBEDDINGS, &[c, d]),
            TensorSpec::f32(CLS_EMBEDDING, &[d]),
        ];
        let mut windows = Vec::with_capacity(self.windows.len());
        for (i, win) in self.windows.iter().enumerate() {
            let [k_vfm, k_clip, v_clip] = Self::window_tensor_names(i);
            for name in [&k_vfm, &k_clip, &v_clip] {
                tensors.push(TensorSpec::f32(name, &[h, n, dh]));
            }
            windows.push(WindowRecord {
                origin_xy: win.origin_xy,
                k_vfm,
                k_clip,
                v_clip,
            });
        }
        BundleManifest {
            version: FORMAT_VERSION,
            image_size_hw: self.image_size_hw,
            window_size: self.window_size,
            stride: self.stride,
            grid_hw: self.grid_hw,
            num_heads: h,
            num_patches: n,
            head_dim: dh,
            embed_dim: d,
            num_classes: c,
            class_names: self.class_names.clone(),
            tensors,
            windows,
        }
    }

    /// Checks every bundle invariant on the in-memory representation.
    pub fn validate(&self) -> Result<()> {
        let manifest = self.manifest();
        validate_manifest(&manifest)?;
        let shapes: [(&str, &[usize]); 6] = [
            (W_O, self.w_o.shape()),
            (POST_LN_SCALE, self.post_ln_scale.shape()),
            (POST_LN_BIAS, self.post_ln_bias.shape()),
            (PROJ, self.proj.shape()),
            (TEXT_EMBEDDINGS, self.text_embeddings.shape()),
            (CLS_EMBEDDING, self.cls_embedding.shape()),
        ];
        let width = manifest.num_heads * manifest.head_dim;
        let expected: [&[usize]; 6] = [
            &[width, width],
            &[width],
            &[width],
            &[width, manifest.embed_dim],
            &[manifest.num_classes, manifest.embed_dim],
            &[manifest.embed_dim],
        ];
        for ((name, got), want) in shapes.iter().zip(expected) {
            if *got != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {want:?}, got {got:?}"
                )));
            }
            check_finite(name, self.tensor_slice(name))?;
        }
        let dims = (manifest.num_heads, manifest.num_patches, manifest.head_dim);
        for (i, win) in self.windows.iter().enumerate() {
            for (name, t) in
                Self::window_tensor_names(i)
                    .iter()
                    .zip([&win.k_vfm, &win.k_clip, &win.v_clip])
            {
                if t.dim() != dims {
                    return Err(Error::ShapeMismatch(format!(
                        "{name}: expected {dims:?}, got {:?}",
                        t.dim()
                    )));
                }
                check_finite(name, t.iter())?;
            }
        }
        Ok(())
    }

    fn tensor_slice<'a>(&'a self, name: &str) -> Box<dyn Iterator<Item = &'a f32> + 'a> {
        match name {
            W_O => Box::new(self.w_o.iter()),
            POST_LN_SCALE => Box::new(self.post_ln_scale.iter()),
            POST_LN_BIAS => Box::new(self.post_ln_bias.iter()),
            PROJ => Box::new(self.proj.iter()),
            TEXT_EMBEDDINGS => Box::new(self.text_embeddings.iter()),
            CLS_EMBEDDING => Box::new(self.cls_embedding.iter()),
            _ => Box::new(std::iter::empty()),
        }
    }
}

fn check_finite<'a>(name: &str, values: impl IntoIterator<Item = &'a f32>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ManifestInvalid(msg.into())
}

/// Schema-level checks that need no tensor data.
pub fn validate_manifest(m: &BundleManifest) -> Result<()> {
    if m.version != FORMAT_VERSION {
        return Err(invalid(format!("unsupported version {}", m.version)));
    }
    let positive = [
        ("window_size", m.window_size),
        ("stride", m.stride),
        ("num_heads", m.num_heads),
        ("num_patches", m.num_patches),
        ("head_dim", m.head_dim),
        ("embed_dim", m.embed_dim),
        ("num_classes", m.num_classes),
        ("grid rows", m.grid_hw[0]),
        ("grid cols", m.grid_hw[1]),
    ];
    if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
        return Err(invalid(format!("{field} must be positive")));
    }
    if m.grid_hw[0] * m.grid_hw[1] != m.num_patches {
        return Err(invalid(format!(
            "grid {:?} does not hold {} patches",
            m.grid_hw, m.num_patches
        )));
    }
    if m.class_names.len() != m.num_classes {
        return Err(invalid(format!(
            "{} class names for {} classes",
            m.class_names.len(),
            m.num_classes
        )));
    }
    let [ih, iw] = m.image_size_hw;
    if ih < m.window_size || iw < m.window_size {
        return Err(invalid(format!(
            "image {:?} smaller than window {}",
            m.image_size_hw, m.window_size
        )));
    }
    if m.windows.is_empty() {
        return Err(invalid("at least one window is required"));
    }

    let mut by_name = BTreeMap::new();
    for spec in &m.tensors {
        if spec.dtype != DTYPE_F32 {
            return Err(invalid(format!(
                "{}: unsupported dtype {}",
                spec.name, spec.dtype
            )));
        }
        if spec.byte_order != LITTLE_ENDIAN {
            return Err(invalid(format!(
                "{}: unsupported byte order {}",
                spec.name, spec.byte_order
            )));
        }
        if spec.shape.is_empty() || spec.shape.contains(&0) {
            return Err(invalid(format!("{}: shape must be positive", spec.name)));
        }
        if spec.file.is_empty() || Path::new(&spec.file).is_absolute() || spec.file.contains("..") {
            return Err(invalid(format!(
                "{}: file must be a relative path",
                spec.name
            )));
        }
        if by_name.insert(spec.name.as_str(), spec).is_some() {
            return Err(invalid(format!("duplicate tensor name {}", spec.name)));
        }
    }

    let width = m.num_heads * m.head_dim;
    let required: [(&str, Vec<usize>); 6] = [
        (W_O, vec![width, width]),
        (POST_LN_SCALE, vec![width]),
        (POST_LN_BIAS, vec![width]),
        (PROJ, vec![width, m.embed_dim]),
        (TEXT_EMBEDDINGS, vec![m.num_classes, m.embed_dim]),
        (CLS_EMBEDDING, vec![m.embed_dim]),
    ];
    let window_shape = vec![m.num_heads, m.num_patches, m.head_dim];
    let window_refs = m.windows.iter().flat_map(|w| {
        [&w.k_vfm, &w.k_clip, &w.v_clip].map(|name| (name.as_str(), window_shape.clone()))
    });
    let mut used = BTreeSet::new();
    for (name, shape) in required.into_iter().chain(window_refs) {
        let spec = by_name
            .get(name)
            .ok_or_else(|| invalid(format!("missing required tensor {name}")))?;
        if spec.shape != shape {
            return Err(invalid(format!(
                "{name}: declared shape {:?}, expected {shape:?}",
                spec.shape
            )));
        }
        if !used.insert(name) {
            return Err(invalid(format!("tensor {name} referenced twice")));
        }
    }

    for w in &m.windows {
        let [x, y] = w.origin_xy;
        if x + m.window_size > iw || y + m.window_size > ih {
            return Err(invalid(format!(
                "window at {:?} exceeds image {:?}",
                w.origin_xy, m.image_size_hw
            )));
        }
    }
    if let Some((x, y)) = first_uncovered(
        m.image_size_hw,
        m.window_size,
        m.windows.iter().map(|w| w.origin_xy),
    ) {
        return Err(invalid(format!(
            "pixel ({x}, {y}) not covered by any window"
        )));
    }
    Ok(())
}

fn read_tensor(dir: &Path, spec: &TensorSpec) -> Result<ArrayD<f32>> {
    let path = dir.join(&spec.file);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path));
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let expected = spec.num_elements() * 4;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{}: shape {:?} needs {expected} bytes, file has {}",
            spec.name,
            spec.shape,
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_finite(&spec.name, &data)?;
    Ok(ArrayD::from_shape_vec(IxDyn(&spec.shape), data).expect("length checked above"))
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path)),
        Err(e) => return Err(Error::io(path, e)),
    };
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
    validate_manifest(&manifest)?;
    Ok(manifest)
}

/// Loads and fully validates a bundle directory.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut loaded = BTreeMap::new();
    for spec in &manifest.tensors {
        loaded.insert(spec.name.clone(), read_tensor(dir, spec)?);
    }
    let mut take = |name: &str| loaded.remove(name).expect("validated by manifest");
    let into2 = |a: ArrayD<f32>| a.into_dimensionality().expect("rank checked");

    let w_o: Array2<f32> = into2(take(W_O));
    let post_ln_scale: Array1<f32> = take(POST_LN_SCALE).into_dimensionality().expect("rank");
    let post_ln_bias: Array1<f32> = take(POST_LN_BIAS).into_dimensionality().expect("rank");
    let proj: Array2<f32> = into2(take(PROJ));
    let text_embeddings: Array2<f32> = into2(take(TEXT_EMBEDDINGS));
    let cls_embedding: Array1<f32> = take(CLS_EMBEDDING).into_dimensionality().expect("rank");
    let windows = manifest
        .windows
        .iter()
        .map(|rec| {
            let mut t3 =
                |name: &str| -> Array3<f32> { take(name).into_dimensionality().expect("rank") };
            Window {
                origin_xy: rec.origin_xy,
                k_vfm: t3(&rec.k_vfm),
                k_clip: t3(&rec.k_clip),
                v_clip: t3(&rec.v_clip),
            }
        })
        .collect();

    Ok(Bundle {
        image_size_hw: manifest.image_size_hw,
        window_size: manifest.window_size,
        stride: manifest.stride,
        grid_hw: manifest.grid_hw,
        class_names: manifest.class_names,
        w_o,
        post_ln_scale,
        post_ln_bias,
        proj,
        text_embeddings,
        cls_embedding,
        windows,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes<'a>(values: impl IntoIterator<Item = &'a f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `manifest.json` (sorted keys) and one raw blob per tensor.
///
/// The bundle must already satisfy its invariants; only I/O can fail.
pub fn write_bundle(bundle: &Bundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = bundle.manifest();

    let mut blobs: Vec<(&str, Vec<u8>)> = vec![
        (W_O, f32_bytes(bundle.w_o.iter())),
        (POST_LN_SCALE, f32_bytes(bundle.post_ln_scale.iter())),
        (POST_LN_BIAS, f32_bytes(bundle.post_ln_bias.iter())),
        (PROJ, f32_bytes(bundle.proj.iter())),
        (TEXT_EMBEDDINGS, f32_bytes(bundle.text_embeddings.iter())),
        (CLS_EMBEDDING, f32_bytes(bundle.cls_embedding.iter())),
    ];
    for (rec, win) in manifest.windows.iter().zip(&bundle.windows) {
        blobs.push((&rec.k_vfm, f32_bytes(win.k_vfm.iter())));
        blobs.push((&rec.k_clip, f32_bytes(win.k_clip.iter())));
        blobs.push((&rec.v_clip, f32_bytes(win.v_clip.iter())));
    }
    for (name, bytes) in &blobs {
        let spec = manifest
            .tensors
            .iter()
            .find(|s| s.name == *name)
            .expect("manifest lists every tensor");
        write_file(&dir.join(&spec.file), bytes)?;
    }

    // serde_json::Value maps are BTreeMaps, so keys come out sorted.
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}
