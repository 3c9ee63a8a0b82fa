//! Symmetric eigendecomposition, energy-based rank selection and dynamic
//! eigenscaling of the VFM attention graph.
//!
//! The tailored graph keeps the top-`k` eigenpairs of `A`, where `k` is the
//! smallest rank whose eigenvalue mass reaches a fraction `eta` of
//! `trace(A)`, and rescales the kept spectrum with an affine map that sends
//! the largest eigenvalue to `epsilon * max` and the smallest to
//! `(2 - epsilon) * min`.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative asymmetry above which a matrix is rejected.
pub const SYMMETRY_TOL: f64 = 1e-8;
pub const DEFAULT_ETA: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1.5;

/// Descending eigenvalues and matching orthonormal eigenvectors (as columns).
#[derive(Clone, Debug, PartialEq)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Array2<f64>,
}

impl EigenSystem {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `Σ_{i<k} s_i u_i u_iᵀ` for the leading `scales.len()` eigenvectors.
    pub fn reconstruct_with(&self, scales: &[f64]) -> Array2<f64> {
        let n = self.len();
        let k = scales.len();
        let u_k = self.eigenvectors.slice(ndarray::s![.., ..k]);
        let mut scaled = u_k.to_owned();
        for (mut col, &s) in scaled.columns_mut().into_iter().zip(scales) {
            col *= s;
        }
        let mut a = scaled.dot(&u_k.t());
        symmetrize(&mut a);
        debug_assert_eq!(a.dim(), (n, n));
        a
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        self.reconstruct_with(&self.eigenvalues)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankSelection {
    pub k: usize,
    pub energy_fraction: f64,
    pub eta: f64,
}

pub(crate) fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn trace(a: &Array2<f64>) -> f64 {
    a.diag().sum()
}

pub fn eigendecompose_symmetric(a: &Array2<f64>) -> Result<EigenSystem> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric matrix".into()));
    }
    let asymmetry = (a - &a.t()).iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm = frobenius(a);
    if asymmetry > SYMMETRY_TOL * norm {
        return Err(Error::NotSymmetric { asymmetry, norm });
    }
    if n == 0 {
        return Ok(EigenSystem {
            eigenvalues: Vec::new(),
            eigenvectors: Array2::zeros((0, 0)),
        });
    }

    let m = DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 1000 * n.max(10))
        .ok_or(Error::ConvergenceFailure(n))?;

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the solver's order among exactly equal eigenvalues.
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut eigenvectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let sign = match col.iter().find(|v| v.abs() > 1e-10) {
            Some(&v) if v < 0.0 => -1.0,
            _ => 1.0,
        };
        for r in 0..n {
            eigenvectors[[r, dst]] = sign * col[r];
        }
    }
    Ok(EigenSystem {
        eigenvalues,
        eigenvectors,
    })
}

/// Smallest `k` whose leading eigenvalue mass reaches `eta * trace`.
///
/// Negative eigenvalues (round-off on PSD input) count as zero. When no rank
/// reaches the threshold, including a non-positive trace, every rank is kept.
pub fn select_rank_energy(eigenvalues: &[f64], trace: f64, eta: f64) -> Result<RankSelection> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidEta(eta));
    }
    let n = eigenvalues.len();
    if trace > 0.0 {
        let mut cumulative = 0.0;
        for (i, &lambda) in eigenvalues.iter().enumerate() {
            cumulative += lambda.max(0.0);
            let fraction = cumulative / trace;
            if fraction >= eta {
                return Ok(RankSelection {
                    k: i + 1,
                    energy_fraction: fraction,
                    eta,
                });
            }
        }
    }
    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    Ok(RankSelection {
        k: n,
        energy_fraction: if trace > 0.0 { total / trace } else { 0.0 },
        eta,
    })
}

/// Affine spectrum map `φ`: `max -> epsilon*max`, `min -> (2-epsilon)*min`.
///
/// A (numerically) flat spectrum is returned unchanged.
pub fn dynamic_eigenscale(sigma: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 1.0 && epsilon < 2.0) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    let Some(first) = sigma.first() else {
        return Ok(Vec::new());
    };
    let (lo, hi) = sigma
        .iter()
        .fold((*first, *first), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let spread = hi - lo;
    if spread < 1e-9 * hi.max(1.0) {
        return Ok(sigma.to_vec());
    }
    let scaled_range = epsilon * hi - (2.0 - epsilon) * lo;
    if scaled_range <= 0.0 {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    Ok(sigma
        .iter()
        .map(|&s| (s - lo) / spread * scaled_range + (2.0 - epsilon) * lo)
        .collect())
}

/// Tailored graph from an existing decomposition of `A` with `trace(A)`.
pub fn tailor_from_eigen(
    eig: &EigenSystem,
    trace: f64,
    eta: f64,
    epsilon: f64,
) -> Result<(Array2<f64>, RankSelection)> {
    let selection = select_rank_energy(&eig.eigenvalues, trace, eta)?;
    let kept: Vec<f64> = eig.eigenvalues[..selection.k]
        .iter()
        .map(|l| l.max(0.0))
        .collect();
    let scaled = dynamic_eigenscale(&kept, epsilon)?;
    Ok((eig.reconstruct_with(&scaled), selection))
}

/// `U_k φ(Σ_k) U_kᵀ` for a symmetric PSD graph.
pub fn tailor_vfm_graph(
    a: &Array2<f64>,
    eta: f64,
    epsilon: f64,
) -> Result<(Array2<f64>, RankSelection)> {
    let eig = eigendecompose_symmetric(a)?;
    tailor_from_eigen(&eig, trace(a), eta, epsilon)
}
