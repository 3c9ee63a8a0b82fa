//! Per-head attention adjacency graphs built from key tensors.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// `h` stacked `N x N` symmetric PSD graphs, one per attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadGraph {
    heads: Vec<Array2<f64>>,
}

impl MultiHeadGraph {
    pub fn new(heads: Vec<Array2<f64>>) -> Result<Self> {
        let n = heads.first().map_or(0, |a| a.nrows());
        for (i, a) in heads.iter().enumerate() {
            if a.dim() != (n, n) {
                return Err(Error::ShapeMismatch(format!(
                    "head {i} graph is {:?}, expected ({n}, {n})",
                    a.dim()
                )));
            }
        }
        Ok(MultiHeadGraph { heads })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.heads.first().map_or(0, |a| a.nrows())
    }

    pub fn head(&self, i: usize) -> &Array2<f64> {
        &self.heads[i]
    }

    pub fn heads(&self) -> &[Array2<f64>] {
        &self.heads
    }

    pub fn into_heads(self) -> Vec<Array2<f64>> {
        self.heads
    }
}

/// `K Kᵀ` for one head, accumulated in f64 and symmetrized as `(M + Mᵀ)/2`.
///
/// Dot products are summed in ascending feature order so results do not
/// depend on the BLAS-style kernel in use.
pub fn gram(keys: ArrayView2<'_, f32>) -> Array2<f64> {
    let k = keys.mapv(f64::from);
    let n = k.nrows();
    let mut m = Array2::zeros((n, n));
    for p in 0..n {
        let kp = k.row(p);
        for q in 0..n {
            let kq = k.row(q);
            let mut dot = 0.0;
            for c in 0..kp.len() {
                dot += kp[c] * kq[c];
            }
            m[[p, q]] = dot;
        }
    }
    let mut a = m.clone();
    a.zip_mut_with(&m.t(), |x, &y| *x = 0.5 * (*x + y));
    a
}

/// Builds the per-head Gram graph `A^i = K^i (K^i)ᵀ` from `[h, N, D_h]` keys.
pub fn build_gram_graph(keys: &Array3<f32>) -> Result<MultiHeadGraph> {
    if keys.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention keys".into()));
    }
    let heads = keys.axis_iter(Axis(0)).map(gram).collect();
    MultiHeadGraph::new(heads)
}
