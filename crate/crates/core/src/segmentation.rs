//! Patch-text scoring, window stitching, label decoding and metrics.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{dot, VisualFeatures};
use crate::text::PresencePrior;

/// Stitched per-pixel class scores `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsMap {
    pub values: Array3<f64>,
    pub counts: Array2<u32>,
}

/// Per-pixel class indices `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Array2<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` where the class appears in neither map.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pacc: f64,
}

/// `Ŝ[p, c] = <f_p, t_c>`.
pub fn patch_text_similarity(features: &VisualFeatures, text: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = features.rows.dim();
    if text.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "features of width {d} vs text embeddings {:?}",
            text.dim()
        )));
    }
    let c = text.nrows();
    let mut s = Array2::zeros((n, c));
    for p in 0..n {
        for k in 0..c {
            s[[p, k]] = dot(features.rows.row(p), text.row(k));
        }
    }
    Ok(s)
}

/// `(1 - γ) Ŝ + γ P`, with the prior broadcast over patches.
pub fn blend_with_prior(
    s_hat: &Array2<f64>,
    prior: &PresencePrior,
    gamma: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    if prior.scores.len() != s_hat.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "prior of length {} for {} classes",
            prior.scores.len(),
            s_hat.ncols()
        )));
    }
    if gamma == 0.0 {
        return Ok(s_hat.clone());
    }
    let mut out = s_hat.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        for (v, &p) in row.iter_mut().zip(&prior.scores) {
            *v = (1.0 - gamma) * *v + gamma * p;
        }
    }
    Ok(out)
}

pub fn refine_with_prior(
    s_hat: &Array2<f64>,
    text: &Array2<f64>,
    cls: &ndarray::Array1<f64>,
    gamma: f64,
) -> Result<Array2<f64>> {
    let prior = crate::text::presence_prior(text, cls)?;
    blend_with_prior(s_hat, &prior, gamma)
}

fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let x = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (x.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, x - i0 as f64)
}

/// Bilinear resize of `[gh, gw, C]` to `[out_h, out_w, C]`, half-pixel centers.
pub fn upsample_logits(patch_logits: &Array3<f64>, out_hw: [usize; 2]) -> Array3<f64> {
    let (gh, gw, c) = patch_logits.dim();
    let [oh, ow] = out_hw;
    let mut out = Array3::zeros((oh, ow, c));
    if gh == 0 || gw == 0 {
        return out;
    }
    let cols: Vec<_> = (0..ow).map(|x| source_coord(x, ow, gw)).collect();
    for y in 0..oh {
        let (y0, y1, fy) = source_coord(y, oh, gh);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for k in 0..c {
                let top = patch_logits[[y0, x0, k]] * (1.0 - fx) + patch_logits[[y0, x1, k]] * fx;
                let bottom =
                    patch_logits[[y1, x0, k]] * (1.0 - fx) + patch_logits[[y1, x1, k]] * fx;
                out[[y, x, k]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Per-pixel mean over covering windows, accumulated in list order.
pub fn stitch_windows(
    windows: &[(Array3<f64>, [usize; 2])],
    image_hw: [usize; 2],
) -> Result<LogitsMap> {
    let [h, w] = image_hw;
    let c = windows.first().map_or(0, |(l, _)| l.dim().2);
    let mut values = Array3::<f64>::zeros((h, w, c));
    let mut counts = Array2::<u32>::zeros((h, w));
    for (logits, [ox, oy]) in windows {
        let (wh, ww, wc) = logits.dim();
        if wc != c || ox + ww > w || oy + wh > h {
            return Err(Error::ShapeMismatch(format!(
                "window {:?} at ({ox}, {oy}) does not fit image {image_hw:?} with {c} classes",
                logits.dim()
            )));
        }
        for y in 0..wh {
            for x in 0..ww {
                counts[[oy + y, ox + x]] += 1;
                for k in 0..c {
                    values[[oy + y, ox + x, k]] += logits[[y, x, k]];
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let n = counts[[y, x]];
            if n == 0 {
                return Err(Error::CoverageGap { x, y });
            }
            let n = f64::from(n);
            for k in 0..c {
                values[[y, x, k]] /= n;
            }
        }
    }
    Ok(LogitsMap { values, counts })
}

/// Per-pixel argmax, lowest class index on ties.
pub fn argmax_labels(logits: &LogitsMap) -> LabelMap {
    let (h, w, c) = logits.values.dim();
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if logits.values[[y, x, k]] > logits.values[[y, x, best]] {
                best = k;
            }
        }
        best as u32
    });
    LabelMap { labels }
}

pub fn evaluate(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    ignore_index: Option<u32>,
) -> Result<EvalReport> {
    if pred.labels.dim() != gt.labels.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.labels.dim(),
            gt.labels.dim()
        )));
    }
    let mut intersection = vec![0u64; num_classes];
    let mut pred_count = vec![0u64; num_classes];
    let mut gt_count = vec![0u64; num_classes];
    let (mut valid, mut correct) = (0u64, 0u64);
    for (&p, &g) in pred.labels.iter().zip(gt.labels.iter()) {
        if Some(g) == ignore_index {
            continue;
        }
        for label in [p, g] {
            if label as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: num_classes,
                });
            }
        }
        valid += 1;
        pred_count[p as usize] += 1;
        gt_count[g as usize] += 1;
        if p == g {
            correct += 1;
            intersection[p as usize] += 1;
        }
    }
    let per_class_iou: Vec<Option<f64>> = (0..num_classes)
        .map(|k| {
            let union = pred_count[k] + gt_count[k] - intersection[k];
            (union > 0).then(|| intersection[k] as f64 / union as f64)
        })
        .collect();
    let fractions: Vec<(u64, u64)> = (0..num_classes)
        .map(|k| {
            (
                intersection[k],
                pred_count[k] + gt_count[k] - intersection[k],
            )
        })
        .filter(|&(_, union)| union > 0)
        .collect();
    let miou = mean_of_fractions(&fractions);
    let pacc = if valid == 0 {
        0.0
    } else {
        correct as f64 / valid as f64
    };
    Ok(EvalReport {
        per_class_iou,
        miou,
        pacc,
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num/den` fractions, correctly rounded whenever the exact sum fits
/// in 53-bit integers; plain float averaging otherwise.
fn mean_of_fractions(fractions: &[(u64, u64)]) -> f64 {
    if fractions.is_empty() {
        return 0.0;
    }
    let exact = fractions
        .iter()
        .try_fold((0u128, 1u128), |(num, den), &(n, d)| {
            let (n, d) = (u128::from(n), u128::from(d));
            let num = num.checked_mul(d)?.checked_add(n.checked_mul(den)?)?;
            let den = den.checked_mul(d)?;
            let g = gcd(num, den).max(1);
            Some((num / g, den / g))
        });
    const EXACT: u128 = 1 << 53;
    if let Some((num, den)) = exact {
        let den = den * fractions.len() as u128;
        let g = gcd(num, den).max(1);
        let (num, den) = (num / g, den / g);
        if num <= EXACT && den <= EXACT {
            return num as f64 / den as f64;
        }
    }
    fractions
        .iter()
        .map(|&(n, d)| n as f64 / d as f64)
        .sum::<f64>()
        / fractions.len() as f64
}

/// Binary PGM (P5, maxval 255), one class index per byte.
pub fn encode_pgm(labels: &LabelMap) -> Result<Vec<u8>> {
    let (h, w) = labels.labels.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &l in labels.labels.iter() {
        let byte = u8::try_from(l).map_err(|_| Error::LabelOutOfRange {
            label: l,
            classes: 256,
        })?;
        out.push(byte);
    }
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let bad = |msg: &str| Error::InvalidLabelMap(msg.to_string());
    // Header: magic, width, height, maxval separated by whitespace, with
    // optional '#' comments, then exactly one whitespace byte.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected binary PGM (P5)"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad("malformed header number"))
    };
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = bytes
        .get(pos + 1..)
        .ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            w * h,
            data.len()
        )));
    }
    let labels = Array2::from_shape_vec((h, w), data.iter().map(|&b| u32::from(b)).collect())
        .expect("length checked");
    Ok(LabelMap { labels })
}

pub fn write_pgm(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(labels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    match fs::read(path) {
        Ok(bytes) => decode_pgm(&bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}
