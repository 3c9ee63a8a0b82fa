//! End-to-end segmentation of one bundle.
//!
//! Per window: build both Gram graphs, match heads, tailor the VFM graphs,
//! distill into the CLIP graphs, run the modified attention block, adjust the
//! text embeddings, score patches against classes and blend in the presence
//! prior. Windows are independent and run on the ambient rayon pool; their
//! logits are upsampled and stitched sequentially in window order.

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, Window};
use crate::error::{Error, Result};
use crate::fusion::{self, VisualFeatures};
use crate::graph::build_gram_graph;
use crate::matching::{self, HeadAssignment, MatchingStrategy};
use crate::segmentation::{self, LabelMap, LogitsMap};
use crate::spectral::{self, RankSelection, DEFAULT_EPSILON, DEFAULT_ETA};
use crate::text::{self, PresencePrior, DEFAULT_CLUSTER_THRESHOLD, DEFAULT_TOP_N};

pub const DEFAULT_ALPHA: f64 = 0.03;
pub const DEFAULT_GAMMA: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub epsilon: f64,
    /// Signature length; `None` means one eigenvalue per head.
    pub m: Option<usize>,
    pub n: usize,
    pub cluster_threshold: f64,
    pub matching: MatchingStrategy,
    pub use_vfm: bool,
    pub use_tailoring: bool,
    pub use_prior_similarity: bool,
    pub use_text_adjustment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            eta: DEFAULT_ETA,
            epsilon: DEFAULT_EPSILON,
            m: None,
            n: DEFAULT_TOP_N,
            cluster_threshold: DEFAULT_CLUSTER_THRESHOLD,
            matching: MatchingStrategy::Complementary,
            use_vfm: true,
            use_tailoring: true,
            use_prior_similarity: true,
            use_text_adjustment: true,
        }
    }
}

impl RunConfig {
    /// The plain modified-CLIP path: no VFM graph, no prior, no adjustment.
    pub fn vanilla() -> Self {
        RunConfig {
            alpha: 0.0,
            gamma: 0.0,
            use_vfm: false,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidGamma(self.gamma));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidEta(self.eta));
        }
        if !(self.epsilon > 1.0 && self.epsilon < 2.0) {
            return Err(Error::InvalidEpsilon(self.epsilon));
        }
        if self.m == Some(0) {
            return Err(Error::InvalidM { m: 0, max: 0 });
        }
        if self.n == 0 {
            return Err(Error::InvalidN { n: 0, max: 0 });
        }
        if self.cluster_threshold.is_nan() || self.cluster_threshold < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "cluster threshold must be nonnegative, got {}",
                self.cluster_threshold
            )));
        }
        Ok(())
    }

    pub fn resolved_m(&self, num_heads: usize) -> usize {
        self.m.unwrap_or(num_heads)
    }
}

/// Diagnostics for one window.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowReport {
    pub origin_xy: [usize; 2],
    /// Absent when the VFM graph is disabled.
    pub assignment: Option<HeadAssignment>,
    pub cost_matrix: Option<Vec<Vec<f64>>>,
    /// Per VFM head; absent when tailoring is disabled.
    pub rank_selections: Option<Vec<RankSelection>>,
    pub zero_feature_rows: Vec<usize>,
}

pub struct WindowOutput {
    /// `[N, C]` patch-class scores after prior blending.
    pub patch_logits: Array2<f64>,
    pub report: WindowReport,
}

pub struct SegmentOutput {
    pub windows: Vec<WindowOutput>,
    pub logits: LogitsMap,
    pub labels: LabelMap,
    pub groups: Vec<Vec<usize>>,
    pub prior: PresencePrior,
}

/// Image-level inputs shared by all windows, in f64.
pub struct ImageContext {
    pub w_o: Array2<f64>,
    pub ln_scale: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub proj: Array2<f64>,
    pub text: Array2<f64>,
    pub cls: Array1<f64>,
    pub prior: PresencePrior,
    pub groups: Vec<Vec<usize>>,
}

impl ImageContext {
    pub fn new(bundle: &Bundle, config: &RunConfig) -> Result<Self> {
        let text = bundle.text_embeddings.mapv(f64::from);
        let cls = bundle.cls_embedding.mapv(f64::from);
        let prior = text::presence_prior(&text, &cls)?;
        let groups = text::ward_cluster(&text, config.cluster_threshold);
        Ok(ImageContext {
            w_o: bundle.w_o.mapv(f64::from),
            ln_scale: bundle.post_ln_scale.iter().map(|&v| f64::from(v)).collect(),
            ln_bias: bundle.post_ln_bias.iter().map(|&v| f64::from(v)).collect(),
            proj: bundle.proj.mapv(f64::from),
            text,
            cls,
            prior,
            groups,
        })
    }
}

/// Joint-space patch features for one window, plus diagnostics.
pub fn window_features(
    window: &Window,
    ctx: &ImageContext,
    config: &RunConfig,
) -> Result<(VisualFeatures, WindowReport)> {
    let clip = build_gram_graph(&window.k_clip)?;
    let mut report = WindowReport {
        origin_xy: window.origin_xy,
        assignment: None,
        cost_matrix: None,
        rank_selections: None,
        zero_feature_rows: Vec::new(),
    };
    let attention = if config.use_vfm {
        let vfm = build_gram_graph(&window.k_vfm)?;
        let m = config.resolved_m(vfm.num_heads());
        let vfm_eigen = matching::decompose_heads(&vfm)?;
        let clip_eigen = matching::decompose_heads(&clip)?;
        let matched = matching::match_from_eigen(&vfm_eigen, &clip_eigen, m, config.matching)?;
        let tailored = if config.use_tailoring {
            let (graphs, selections): (Vec<_>, Vec<_>) = vfm_eigen
                .iter()
                .zip(vfm.heads())
                .map(|(eig, a)| {
                    spectral::tailor_from_eigen(eig, spectral::trace(a), config.eta, config.epsilon)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            report.rank_selections = Some(selections);
            graphs
        } else {
            vfm.heads().to_vec()
        };
        log::debug!(
            "window {:?}: pairs {:?}, weights {:?}",
            window.origin_xy,
            matched.assignment.pairs,
            matched.assignment.weights
        );
        let fused = fusion::fuse(&tailored, &clip, &matched.assignment)?;
        report.cost_matrix = Some(
            matched
                .cost_matrix
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        );
        report.assignment = Some(matched.assignment);
        fused.graphs
    } else {
        clip.into_heads()
    };
    let z_star = fusion::attention_forward(&attention, &window.v_clip, &ctx.w_o)?;
    let features = fusion::project_features(&z_star, &ctx.ln_scale, &ctx.ln_bias, &ctx.proj)?;
    report.zero_feature_rows = features.zero_rows.clone();
    Ok((features, report))
}

/// Patch-class scores `[N, C]` for one window.
pub fn window_logits(
    window: &Window,
    ctx: &ImageContext,
    config: &RunConfig,
) -> Result<WindowOutput> {
    let (features, report) = window_features(window, ctx, config)?;
    let text = if config.use_text_adjustment {
        text::adjust_text_embeddings(
            &ctx.text,
            &ctx.groups,
            &ctx.prior,
            &features,
            config.n,
            config.alpha,
        )?
    } else {
        ctx.text.clone()
    };
    let s_hat = segmentation::patch_text_similarity(&features, &text)?;
    let patch_logits = if config.use_prior_similarity {
        segmentation::blend_with_prior(&s_hat, &ctx.prior, config.gamma)?
    } else {
        s_hat
    };
    Ok(WindowOutput {
        patch_logits,
        report,
    })
}

/// Lays `[N, C]` patch scores on the `[rows, cols]` grid and resizes them to
/// window pixels.
pub fn window_pixels(
    patch_logits: &Array2<f64>,
    grid_hw: [usize; 2],
    window_size: usize,
) -> Array3<f64> {
    let c = patch_logits.ncols();
    let grid = patch_logits
        .to_owned()
        .into_shape_with_order((grid_hw[0], grid_hw[1], c))
        .expect("N = rows * cols");
    segmentation::upsample_logits(&grid, [window_size, window_size])
}

pub fn segment(bundle: &Bundle, config: &RunConfig) -> Result<SegmentOutput> {
    config.validate()?;
    let ctx = ImageContext::new(bundle, config)?;
    log::info!(
        "segmenting {} windows, {} classes in {} text groups",
        bundle.windows.len(),
        bundle.num_classes(),
        ctx.groups.len()
    );
    let windows: Vec<WindowOutput> = bundle
        .windows
        .par_iter()
        .map(|w| window_logits(w, &ctx, config))
        .collect::<Result<_>>()?;
    let pixel_windows: Vec<(Array3<f64>, [usize; 2])> = windows
        .iter()
        .zip(&bundle.windows)
        .map(|(out, w)| {
            (
                window_pixels(&out.patch_logits, bundle.grid_hw, bundle.window_size),
                w.origin_xy,
            )
        })
        .collect();
    let logits = segmentation::stitch_windows(&pixel_windows, bundle.image_size_hw)?;
    if logits.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stitched logits".into()));
    }
    let labels = segmentation::argmax_labels(&logits);
    Ok(SegmentOutput {
        windows,
        logits,
        labels,
        groups: ctx.groups,
        prior: ctx.prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.alpha, c.gamma, c.eta, c.epsilon), (0.03, 0.10, 0.9, 1.5));
        assert_eq!((c.m, c.n, c.cluster_threshold), (None, 16, 0.6));
        assert_eq!(c.matching, MatchingStrategy::Complementary);
        assert!(c.use_vfm && c.use_tailoring && c.use_prior_similarity && c.use_text_adjustment);
        assert_eq!(c.resolved_m(12), 12);
        c.validate().unwrap();
    }

    #[test]
    fn config_from_partial_json() {
        let c: RunConfig =
            serde_json::from_str(r#"{"alpha": 0.2, "matching": "similar"}"#).unwrap();
        assert_eq!(c.alpha, 0.2);
        assert_eq!(c.matching, MatchingStrategy::Similar);
        assert_eq!(c.gamma, DEFAULT_GAMMA);
        assert!(serde_json::from_str::<RunConfig>(r#"{"alpah": 0.2}"#).is_err());
    }

    #[test]
    fn invalid_ranges_rejected() {
        let bad = [
            RunConfig {
                alpha: 1.5,
                ..RunConfig::default()
            },
            RunConfig {
                gamma: -0.1,
                ..RunConfig::default()
            },
            RunConfig {
                eta: 0.0,
                ..RunConfig::default()
            },
            RunConfig {
                epsilon: 2.0,
                ..RunConfig::default()
            },
            RunConfig {
                n: 0,
                ..RunConfig::default()
            },
            RunConfig {
                m: Some(0),
                ..RunConfig::default()
            },
            RunConfig {
                cluster_threshold: -1.0,
                ..RunConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
