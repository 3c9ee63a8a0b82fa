//! Object presence prior and object-guided text embedding adjustment.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{dot, VisualFeatures};

pub const DEFAULT_TOP_N: usize = 16;
pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.6;
const UNIT_TOL: f64 = 1e-4;

/// Per-class cosine score against the global image embedding.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PresencePrior {
    pub scores: Vec<f64>,
}

impl PresencePrior {
    /// Index of the highest score among `members`; lowest index on ties.
    pub fn winner(&self, members: &[usize]) -> Option<usize> {
        members.iter().copied().fold(None, |best, i| match best {
            None => Some(i),
            Some(b) => {
                let (si, sb) = (self.scores[i], self.scores[b]);
                Some(if si > sb || (si == sb && i < b) { i } else { b })
            }
        })
    }
}

/// One agglomeration step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Merge {
    /// Smallest original index in each merged cluster; `left < right`.
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

fn unit(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 && (norm - 1.0).abs() > UNIT_TOL {
        v.mapv(|x| x / norm)
    } else {
        v.to_owned()
    }
}

pub fn presence_prior(text: &Array2<f64>, cls: &Array1<f64>) -> Result<PresencePrior> {
    if text.ncols() != cls.len() {
        return Err(Error::ShapeMismatch(format!(
            "text embeddings {:?} vs image embedding of length {}",
            text.dim(),
            cls.len()
        )));
    }
    let cls = unit(cls.view());
    let scores = text
        .axis_iter(Axis(0))
        .map(|t| dot(unit(t).view(), cls.view()))
        .collect();
    Ok(PresencePrior { scores })
}

/// Pairwise cosine distance `1 - cos(a, b)`, clipped to `[0, 2]`.
pub fn cosine_distances(x: &Array2<f64>) -> Array2<f64> {
    let c = x.nrows();
    let norms: Vec<f64> = x
        .axis_iter(Axis(0))
        .map(|r| {
            let n = dot(r, r).sqrt();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    let mut d = Array2::zeros((c, c));
    for i in 0..c {
        for j in (i + 1)..c {
            let cos = dot(x.row(i), x.row(j)) / (norms[i] * norms[j]);
            let v = (1.0 - cos).clamp(0.0, 2.0);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Ward agglomeration over cosine distances via Lance-Williams updates.
///
/// Heights are reported on the distance scale (the update runs on squared
/// distances). Each cluster lives in the slot of its smallest member, so
/// scanning slot pairs in order breaks ties toward the smallest index pair.
pub fn ward_linkage(text: &Array2<f64>) -> Vec<Merge> {
    let c = text.nrows();
    let mut d2 = cosine_distances(text).mapv(|v| v * v);
    let mut size = vec![1usize; c];
    let mut active = vec![true; c];
    let mut merges = Vec::with_capacity(c.saturating_sub(1));
    for _ in 1..c {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..c {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..c {
                if active[j] && best.is_none_or(|(a, b)| d2[[i, j]] < d2[[a, b]]) {
                    best = Some((i, j));
                }
            }
        }
        let (a, b) = best.expect("two active clusters");
        let dab = d2[[a, b]];
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in 0..c {
            if !active[k] || k == a || k == b {
                continue;
            }
            let nk = size[k] as f64;
            let updated =
                ((nk + na) * d2[[k, a]] + (nk + nb) * d2[[k, b]] - nk * dab) / (na + nb + nk);
            let updated = updated.max(0.0);
            d2[[k, a]] = updated;
            d2[[a, k]] = updated;
        }
        active[b] = false;
        size[a] += size[b];
        merges.push(Merge {
            left: a,
            right: b,
            height: dab.sqrt(),
            size: size[a],
        });
    }
    merges
}

/// Flat clusters from merges of height `<= threshold`, each sorted, ordered
/// by smallest member.
pub fn flat_clusters(num_items: usize, merges: &[Merge], threshold: f64) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..num_items).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for m in merges.iter().filter(|m| m.height <= threshold) {
        let (ra, rb) = (root(&mut parent, m.left), root(&mut parent, m.right));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi] = lo;
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; num_items];
    for i in 0..num_items {
        let r = root(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

pub fn ward_cluster(text: &Array2<f64>, threshold: f64) -> Vec<Vec<usize>> {
    flat_clusters(text.nrows(), &ward_linkage(text), threshold)
}

/// Blends each group's most likely class embedding toward the mean of its
/// `n` best-matching patch features and renormalizes it.
///
/// Rows that win no group are returned untouched; with `alpha == 0` the whole
/// input is returned untouched.
pub fn adjust_text_embeddings(
    text: &Array2<f64>,
    groups: &[Vec<usize>],
    prior: &PresencePrior,
    features: &VisualFeatures,
    n: usize,
    alpha: f64,
) -> Result<Array2<f64>> {
    let num_patches = features.rows.nrows();
    if n < 1 || n > num_patches {
        return Err(Error::InvalidN {
            n,
            max: num_patches,
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if features.rows.ncols() != text.ncols() || prior.scores.len() != text.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?}, text {:?}, prior of length {}",
            features.rows.dim(),
            text.dim(),
            prior.scores.len()
        )));
    }
    let mut out = text.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    for group in groups {
        let Some(winner) = prior.winner(group) else {
            continue;
        };
        let t = text.row(winner);
        let mut ranked: Vec<(usize, f64)> = features
            .rows
            .axis_iter(Axis(0))
            .map(|f| dot(f, t))
            .enumerate()
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut mu = Array1::<f64>::zeros(text.ncols());
        for &(p, _) in &ranked[..n] {
            mu += &features.rows.row(p);
        }
        mu /= n as f64;
        let blended = &t.mapv(|x| (1.0 - alpha) * x) + &mu.mapv(|x| alpha * x);
        let norm = dot(blended.view(), blended.view()).sqrt();
        if norm > 0.0 {
            out.row_mut(winner).assign(&blended.mapv(|x| x / norm));
        }
    }
    Ok(out)
}
