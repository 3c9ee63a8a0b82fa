//! Deterministic synthetic bundles for tests, goldens and demos.
//!
//! A scene assigns each patch to an object. Per patch and head:
//! - VFM keys point along the object's axis (clean object structure),
//! - CLIP keys are isotropic noise (no object structure),
//! - CLIP values carry a weak object signal under heavy noise, laid out so it
//!   survives the final layernorm (`+s` on one feature, `-s` on its partner).
//!
//! The output projection is the identity and the joint-space projection maps
//! each object's feature pair onto that object's text axis.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bundle::{tile_origins, Bundle, Window};

pub const GOLDEN_SEED: u64 = 20_250_611;
pub const TWO_OBJECT_SEED: u64 = 7;

#[derive(Clone, Copy, Debug)]
pub struct SceneParams {
    pub num_heads: usize,
    pub head_dim: usize,
    pub vfm_key_scale: f32,
    pub vfm_key_noise: f32,
    pub clip_key_sigma: f32,
    pub value_signal: f32,
    pub value_noise: f32,
}

impl SceneParams {
    pub fn two_object() -> Self {
        SceneParams {
            num_heads: 2,
            head_dim: 8,
            vfm_key_scale: 16.0,
            vfm_key_noise: 0.05,
            clip_key_sigma: 0.8,
            value_signal: 0.7,
            value_noise: 1.0,
        }
    }
}

fn normal(sigma: f32) -> Normal<f32> {
    Normal::new(0.0, sigma).expect("finite sigma")
}

/// Keys and values for one window whose patches belong to `objects`.
pub fn window_tensors(
    rng: &mut ChaCha8Rng,
    objects: &[usize],
    p: &SceneParams,
) -> (Array3<f32>, Array3<f32>, Array3<f32>) {
    let n = objects.len();
    let shape = (p.num_heads, n, p.head_dim);
    let vfm_noise = normal(p.vfm_key_noise);
    let clip_noise = normal(p.clip_key_sigma);
    let value_noise = normal(p.value_noise);
    let mut k_vfm = Array3::zeros(shape);
    let mut k_clip = Array3::zeros(shape);
    let mut v_clip = Array3::zeros(shape);
    for h in 0..p.num_heads {
        for (q, &obj) in objects.iter().enumerate() {
            for c in 0..p.head_dim {
                let axis = if c == obj % p.head_dim {
                    p.vfm_key_scale
                } else {
                    0.0
                };
                k_vfm[[h, q, c]] = axis + vfm_noise.sample(rng);
                k_clip[[h, q, c]] = clip_noise.sample(rng);
                let signal = if c == 2 * obj {
                    p.value_signal
                } else if c == 2 * obj + 1 {
                    -p.value_signal
                } else {
                    0.0
                };
                v_clip[[h, q, c]] = signal + value_noise.sample(rng);
            }
        }
    }
    (k_vfm, k_clip, v_clip)
}

/// `[h*D_h, d]` projection sending each head's feature pair `(2o, 2o+1)` to
/// text axis `o`.
pub fn pair_projection(num_heads: usize, head_dim: usize, embed_dim: usize) -> Array2<f32> {
    let mut proj = Array2::zeros((num_heads * head_dim, embed_dim));
    for h in 0..num_heads {
        for o in 0..(head_dim / 2).min(embed_dim) {
            proj[[h * head_dim + 2 * o, o]] = 1.0;
            proj[[h * head_dim + 2 * o + 1, o]] = -1.0;
        }
    }
    proj
}

fn unit_rows(mut a: Array2<f32>) -> Array2<f32> {
    for mut row in a.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    a
}

/// One 64x64 window with an 8x8 patch grid: a 4x4 minority object embedded
/// in a majority object, two orthogonal classes.
pub struct TwoObjectFixture {
    pub bundle: Bundle,
    /// Object (= class) index per patch, row-major over the grid.
    pub patch_objects: Vec<usize>,
}

pub fn two_object_bundle(seed: u64) -> TwoObjectFixture {
    two_object_bundle_with(seed, &SceneParams::two_object())
}

pub fn two_object_bundle_with(seed: u64, p: &SceneParams) -> TwoObjectFixture {
    let grid = 8;
    let objects: Vec<usize> = (0..grid * grid)
        .map(|i| {
            let (r, c) = (i / grid, i % grid);
            usize::from((2..6).contains(&r) && (3..7).contains(&c))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k_vfm, k_clip, v_clip) = window_tensors(&mut rng, &objects, p);
    let width = p.num_heads * p.head_dim;
    let embed_dim = 4;
    let mut text = Array2::zeros((2, embed_dim));
    text[[0, 0]] = 1.0;
    text[[1, 1]] = 1.0;
    let half = std::f32::consts::FRAC_1_SQRT_2;
    let bundle = Bundle {
        image_size_hw: [64, 64],
        window_size: 64,
        stride: 32,
        grid_hw: [grid, grid],
        class_names: vec!["majority".into(), "minority".into()],
        w_o: Array2::eye(width),
        post_ln_scale: Array1::ones(width),
        post_ln_bias: Array1::zeros(width),
        proj: pair_projection(p.num_heads, p.head_dim, embed_dim),
        text_embeddings: text,
        cls_embedding: Array1::from(vec![half, half, 0.0, 0.0]),
        windows: vec![Window {
            origin_xy: [0, 0],
            k_vfm,
            k_clip,
            v_clip,
        }],
    };
    TwoObjectFixture {
        bundle,
        patch_objects: objects,
    }
}

/// Object index of an image pixel in the golden scene (three regions).
pub fn golden_scene_object(x: usize, y: usize) -> usize {
    if (12..30).contains(&x) && (8..28).contains(&y) {
        1
    } else if x >= 36 && y >= 20 {
        2
    } else {
        0
    }
}

/// A 40x56 image tiled by six 32x32 windows (stride 16, 4x4 patch grid),
/// three heads and three classes, with perturbed projections and text.
pub fn golden_bundle(seed: u64) -> Bundle {
    let p = SceneParams {
        num_heads: 3,
        head_dim: 6,
        vfm_key_scale: 6.0,
        vfm_key_noise: 0.1,
        clip_key_sigma: 1.0,
        value_signal: 0.8,
        value_noise: 1.0,
    };
    let (image_hw, window, stride, grid) = ([40, 56], 32, 16, 4);
    let patch = window / grid;
    let embed_dim = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = tile_origins(image_hw, window, stride)
        .into_iter()
        .map(|[ox, oy]| {
            let objects: Vec<usize> = (0..grid * grid)
                .map(|i| {
                    let (r, c) = (i / grid, i % grid);
                    golden_scene_object(ox + c * patch + patch / 2, oy + r * patch + patch / 2)
                })
                .collect();
            let (k_vfm, k_clip, v_clip) = window_tensors(&mut rng, &objects, &p);
            Window {
                origin_xy: [ox, oy],
                k_vfm,
                k_clip,
                v_clip,
            }
        })
        .collect();

    let width = p.num_heads * p.head_dim;
    let jitter = normal(0.05);
    let w_o = Array2::from_shape_fn((width, width), |(r, c)| {
        f32::from(u8::from(r == c)) + jitter.sample(&mut rng)
    });
    let post_ln_scale = Array1::from_shape_fn(width, |_| 1.0 + jitter.sample(&mut rng));
    let post_ln_bias = Array1::from_shape_fn(width, |_| jitter.sample(&mut rng));
    let mut proj = pair_projection(p.num_heads, p.head_dim, embed_dim);
    proj.mapv_inplace(|v| v + jitter.sample(&mut rng));
    let text = unit_rows(Array2::from_shape_fn((3, embed_dim), |(r, c)| {
        f32::from(u8::from(r == c)) + jitter.sample(&mut rng)
    }));
    let cls = {
        let mut v = Array1::from(vec![0.6f32, 0.5, 0.4, 0.1, 0.0]);
        v.mapv_inplace(|x| x + jitter.sample(&mut rng));
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v / norm
    };

    Bundle {
        image_size_hw: image_hw,
        window_size: window,
        stride,
        grid_hw: [grid, grid],
        class_names: vec!["ground".into(), "vehicle".into(), "building".into()],
        w_o,
        post_ln_scale,
        post_ln_bias,
        proj,
        text_embeddings: text,
        cls_embedding: cls,
        windows,
    }
}
