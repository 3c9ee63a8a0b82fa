//! Spectral head matching.
//!
//! Each head graph is summarized by its top-`m` eigenvalues, L1-normalized.
//! Heads are compared with the sorted-L1 (1-D Wasserstein) distance and paired
//! by an exact assignment over the cost `1 - D_W`, which pairs every VFM head
//! with the CLIP head whose spectrum differs most.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::MultiHeadGraph;
use crate::spectral::{eigendecompose_symmetric, EigenSystem};

/// Largest head count [`brute_force_assignment`] will enumerate.
pub const BRUTE_FORCE_MAX: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralSignature {
    /// Normalized eigenvalues, ascending.
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingStrategy {
    /// Maximize total spectral distance.
    #[default]
    Complementary,
    /// Minimize total spectral distance.
    Similar,
    /// Head `i` to head `i`.
    Sequential,
}

impl std::str::FromStr for MatchingStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "complementary" => Ok(Self::Complementary),
            "similar" => Ok(Self::Similar),
            "sequential" => Ok(Self::Sequential),
            other => Err(format!(
                "unknown matching mode '{other}' (expected complementary, similar or sequential)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadAssignment {
    /// `(vfm_head, clip_head)`, ordered by VFM head.
    pub pairs: Vec<(usize, usize)>,
    /// `D_W` between the paired signatures.
    pub weights: Vec<f64>,
}

/// Matching result plus the intermediates needed to audit it.
#[derive(Clone, Debug)]
pub struct HeadMatch {
    pub assignment: HeadAssignment,
    pub cost_matrix: Array2<f64>,
    pub vfm_signatures: Vec<SpectralSignature>,
    pub clip_signatures: Vec<SpectralSignature>,
}

pub fn spectral_signature(eigenvalues: &[f64], m: usize) -> Result<SpectralSignature> {
    if m < 1 || m > eigenvalues.len() {
        return Err(Error::InvalidM {
            m,
            max: eigenvalues.len(),
        });
    }
    let top: Vec<f64> = eigenvalues[..m].iter().map(|l| l.max(0.0)).collect();
    let total: f64 = top.iter().sum();
    let mut values: Vec<f64> = if total > 0.0 {
        top.iter().map(|l| l / total).collect()
    } else {
        vec![1.0 / m as f64; m]
    };
    values.sort_by(f64::total_cmp);
    Ok(SpectralSignature { values })
}

/// `Σ |sort(u)_i - sort(v)_i|`.
pub fn wasserstein_sorted(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    let mut u = u.to_vec();
    let mut v = v.to_vec();
    u.sort_by(f64::total_cmp);
    v.sort_by(f64::total_cmp);
    Ok(u.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum())
}

/// `C_ij = 1 - D_W(vfm_i, clip_j)`.
pub fn build_cost_matrix(
    vfm: &[SpectralSignature],
    clip: &[SpectralSignature],
) -> Result<Array2<f64>> {
    let mut c = Array2::zeros((vfm.len(), clip.len()));
    for (i, a) in vfm.iter().enumerate() {
        for (j, b) in clip.iter().enumerate() {
            c[[i, j]] = 1.0 - wasserstein_sorted(&a.values, &b.values)?;
        }
    }
    Ok(c)
}

/// Sum of `cost[i, perm[i]]` in row order.
pub fn assignment_cost(cost: &Array2<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
}

fn tie_tolerance(cost: &Array2<f64>) -> f64 {
    let scale = cost.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    1e-12 * scale.max(1.0) * cost.nrows().max(1) as f64
}

fn check_square(cost: &Array2<f64>) -> Result<usize> {
    let (rows, cols) = cost.dim();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(rows)
}

/// Shortest-augmenting-path Hungarian method with row/column potentials on
/// the submatrix `rows x cols`. Returns the column index (into `cols`)
/// assigned to each row and the total cost.
fn hungarian_core(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let at = |r: usize, c: usize| cost[[rows[r - 1], cols[c - 1]]];
    // 1-based with a virtual column 0 holding the row being inserted.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let slack = at(r0, c) - u[r0] - v[c];
                if slack < min_slack[c] {
                    min_slack[c] = slack;
                    way[c] = col0;
                }
                if min_slack[c] < delta {
                    delta = min_slack[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[row_of_col[c]] += delta;
                    v[c] -= delta;
                } else {
                    min_slack[c] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            row_of_col[col0] = row_of_col[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assigned = vec![0; n];
    for c in 1..=n {
        assigned[row_of_col[c] - 1] = c - 1;
    }
    let total = assigned
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[[rows[r], cols[c]]])
        .sum();
    (assigned, total)
}

/// Minimum-cost permutation (`perm[row] = col`).
///
/// Among optimal permutations the lexicographically smallest is returned:
/// rows are fixed in order, each to the smallest column that still admits an
/// optimal completion.
pub fn hungarian_min_assignment(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = check_square(cost)?;
    let all: Vec<usize> = (0..n).collect();
    let (_, optimum) = hungarian_core(cost, &all, &all);
    let tol = tie_tolerance(cost);

    let mut perm = Vec::with_capacity(n);
    let mut free: Vec<usize> = all.clone();
    let mut prefix = 0.0;
    for row in 0..n {
        let rest_rows: Vec<usize> = ((row + 1)..n).collect();
        let mut chosen = None;
        for (pos, &col) in free.iter().enumerate() {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&c| c != col).collect();
            let (_, rest) = hungarian_core(cost, &rest_rows, &rest_cols);
            if prefix + cost[[row, col]] + rest <= optimum + tol {
                chosen = Some(pos);
                break;
            }
        }
        // The column of any optimal completion always qualifies, so this only
        // guards against pathological round-off.
        let pos = chosen.unwrap_or_else(|| {
            let rest_rows: Vec<usize> = (row..n).collect();
            hungarian_core(cost, &rest_rows, &free).0[0]
        });
        let col = free.remove(pos);
        prefix += cost[[row, col]];
        perm.push(col);
    }
    Ok(perm)
}

/// Exhaustive minimum over all permutations, same tie-break as
/// [`hungarian_min_assignment`]. Test oracle; `h <= 8`.
pub fn brute_force_assignment(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = check_square(cost)?;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::TooLarge {
            h: n,
            max: BRUTE_FORCE_MAX,
        });
    }
    let mut perms = Vec::new();
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    lexicographic_permutations(n, &mut current, &mut used, &mut perms);
    let costs: Vec<f64> = perms.iter().map(|p| assignment_cost(cost, p)).collect();
    let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = tie_tolerance(cost);
    let idx = costs
        .iter()
        .position(|&c| c <= best + tol)
        .expect("at least one permutation");
    Ok(perms.swap_remove(idx))
}

fn lexicographic_permutations(
    n: usize,
    current: &mut Vec<usize>,
    used: &mut [bool],
    out: &mut Vec<Vec<usize>>,
) {
    if current.len() == n {
        out.push(current.clone());
        return;
    }
    for j in 0..n {
        if !used[j] {
            used[j] = true;
            current.push(j);
            lexicographic_permutations(n, current, used, out);
            current.pop();
            used[j] = false;
        }
    }
}

/// Matches heads given both sides' decompositions.
pub fn match_from_eigen(
    vfm: &[EigenSystem],
    clip: &[EigenSystem],
    m: usize,
    strategy: MatchingStrategy,
) -> Result<HeadMatch> {
    if vfm.len() != clip.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} VFM heads vs {} CLIP heads",
            vfm.len(),
            clip.len()
        )));
    }
    let signatures = |side: &[EigenSystem]| -> Result<Vec<SpectralSignature>> {
        side.iter()
            .map(|e| spectral_signature(&e.eigenvalues, m))
            .collect()
    };
    let vfm_signatures = signatures(vfm)?;
    let clip_signatures = signatures(clip)?;
    let cost_matrix = build_cost_matrix(&vfm_signatures, &clip_signatures)?;

    let perm = match strategy {
        MatchingStrategy::Complementary => hungarian_min_assignment(&cost_matrix)?,
        MatchingStrategy::Similar => hungarian_min_assignment(&cost_matrix.mapv(|c| 1.0 - c))?,
        MatchingStrategy::Sequential => (0..vfm.len()).collect(),
    };
    let pairs: Vec<(usize, usize)> = perm.into_iter().enumerate().collect();
    let weights = pairs
        .iter()
        .map(|&(i, j)| wasserstein_sorted(&vfm_signatures[i].values, &clip_signatures[j].values))
        .collect::<Result<_>>()?;

    Ok(HeadMatch {
        assignment: HeadAssignment { pairs, weights },
        cost_matrix,
        vfm_signatures,
        clip_signatures,
    })
}

pub fn decompose_heads(graph: &MultiHeadGraph) -> Result<Vec<EigenSystem>> {
    graph
        .heads()
        .par_iter()
        .map(eigendecompose_symmetric)
        .collect()
}

pub fn match_heads(
    vfm: &MultiHeadGraph,
    clip: &MultiHeadGraph,
    m: usize,
    strategy: MatchingStrategy,
) -> Result<HeadMatch> {
    if vfm.num_nodes() != clip.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} VFM nodes vs {} CLIP nodes",
            vfm.num_nodes(),
            clip.num_nodes()
        )));
    }
    match_from_eigen(&decompose_heads(vfm)?, &decompose_heads(clip)?, m, strategy)
}
