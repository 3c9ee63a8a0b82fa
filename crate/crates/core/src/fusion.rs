//! VFM-to-CLIP graph distillation and the modified final attention block.
//!
//! The final CLIP block is reduced to its attention: no residual path and no
//! MLP. Its attention logits are replaced by the distilled graph
//! `A_ψ^j = (w_ij Ä^i + A^j) / (w_ij + 1)`, and the result is normalized and
//! projected into the joint embedding space.
//!
//! Matrix products here are written as explicit loops with a fixed summation
//! order; the pipeline promises bit-stable logits across runs and thread
//! counts.

use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::graph::MultiHeadGraph;
use crate::matching::HeadAssignment;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Distilled attention graphs, indexed by CLIP head.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedAttention {
    pub graphs: Vec<Array2<f64>>,
}

/// Joint-space patch features, one L2-normalized row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub rows: Array2<f64>,
    /// Rows whose projection vanished; left as zero vectors.
    pub zero_rows: Vec<usize>,
}

pub fn distill_graph(tailored: &Array2<f64>, clip: &Array2<f64>, w: f64) -> Result<Array2<f64>> {
    if tailored.dim() != clip.dim() {
        return Err(Error::ShapeMismatch(format!(
            "tailored graph {:?} vs CLIP graph {:?}",
            tailored.dim(),
            clip.dim()
        )));
    }
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::NonFinite(format!("distillation weight {w}")));
    }
    let denom = w + 1.0;
    let mut out = clip.clone();
    out.zip_mut_with(tailored, |c, &t| *c = (w * t + *c) / denom);
    Ok(out)
}

/// `graphs[j] = distill(Ä^i, A^j, w_ij)` for every matched pair `(i, j)`.
pub fn fuse(
    tailored_vfm: &[Array2<f64>],
    clip: &MultiHeadGraph,
    assignment: &HeadAssignment,
) -> Result<FusedAttention> {
    let h = clip.num_heads();
    if tailored_vfm.len() != h || assignment.pairs.len() != h || assignment.weights.len() != h {
        return Err(Error::ShapeMismatch(format!(
            "{} VFM graphs, {} CLIP heads, {} pairs",
            tailored_vfm.len(),
            h,
            assignment.pairs.len()
        )));
    }
    let mut graphs: Vec<Option<Array2<f64>>> = vec![None; h];
    for (&(i, j), &w) in assignment.pairs.iter().zip(&assignment.weights) {
        if i >= h || j >= h || graphs[j].is_some() {
            return Err(Error::ShapeMismatch(format!(
                "head pairing is not a bijection at ({i}, {j})"
            )));
        }
        graphs[j] = Some(distill_graph(&tailored_vfm[i], clip.head(j), w)?);
    }
    Ok(FusedAttention {
        graphs: graphs.into_iter().map(|g| g.expect("bijection")).collect(),
    })
}

/// Row-wise softmax of `a * scale`, max-subtracted.
pub fn softmax_rows(a: &Array2<f64>, scale: f64) -> Array2<f64> {
    let mut out = a.mapv(|v| v * scale);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// `Concat_j[softmax(A_ψ^j / √D_h) V^j] · W^O` → `[N, h*D_h]`.
pub fn attention_forward(
    fused: &[Array2<f64>],
    v_clip: &Array3<f32>,
    w_o: &Array2<f64>,
) -> Result<Array2<f64>> {
    let (h, n, dh) = v_clip.dim();
    let width = h * dh;
    if fused.len() != h || fused.iter().any(|g| g.dim() != (n, n)) {
        return Err(Error::ShapeMismatch(format!(
            "{} attention graphs for values {:?}",
            fused.len(),
            v_clip.dim()
        )));
    }
    if w_o.dim() != (width, width) {
        return Err(Error::ShapeMismatch(format!(
            "output projection {:?}, expected ({width}, {width})",
            w_o.dim()
        )));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Array2::<f64>::zeros((n, width));
    for (j, graph) in fused.iter().enumerate() {
        let attn = softmax_rows(graph, scale);
        let v = v_clip.index_axis(Axis(0), j).mapv(f64::from);
        for p in 0..n {
            for c in 0..dh {
                let mut acc = 0.0;
                for q in 0..n {
                    acc += attn[[p, q]] * v[[q, c]];
                }
                concat[[p, j * dh + c]] = acc;
            }
        }
    }
    let z = matmul(&concat, w_o);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention output".into()));
    }
    Ok(z)
}

pub(crate) fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (rows, inner) = a.dim();
    let cols = b.ncols();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for k in 0..inner {
                acc += a[[r, k]] * b[[k, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

pub(crate) fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        acc += a[k] * b[k];
    }
    acc
}

/// LayerNorm (affine), projection, then per-row L2 normalization.
pub fn project_features(
    z_star: &Array2<f64>,
    ln_scale: &[f64],
    ln_bias: &[f64],
    proj: &Array2<f64>,
) -> Result<VisualFeatures> {
    let width = z_star.ncols();
    if ln_scale.len() != width || ln_bias.len() != width || proj.nrows() != width {
        return Err(Error::ShapeMismatch(format!(
            "features have width {width}; layernorm {}/{}, projection {:?}",
            ln_scale.len(),
            ln_bias.len(),
            proj.dim()
        )));
    }
    let mut normed = Array2::zeros(z_star.dim());
    for (src, mut dst) in z_star.axis_iter(Axis(0)).zip(normed.axis_iter_mut(Axis(0))) {
        let mean = src.iter().sum::<f64>() / width as f64;
        let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for k in 0..width {
            dst[k] = (src[k] - mean) * inv * ln_scale[k] + ln_bias[k];
        }
    }
    let mut rows = matmul(&normed, proj);
    let mut zero_rows = Vec::new();
    for (p, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
        let norm = dot(row.view(), row.view()).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        } else {
            row.fill(0.0);
            zero_rows.push(p);
        }
    }
    Ok(VisualFeatures { rows, zero_rows })
}
