//! JSON documents written by `segment`.

use serde::Serialize;
use serde_json::{json, Value};
use spectrafuse::pipeline::{self, WindowReport};
use spectrafuse::{spectral, text, Bundle, RunConfig, SegmentOutput};

#[derive(Serialize)]
pub struct BundleSummary {
    pub image_size_hw: [usize; 2],
    pub window_size: usize,
    pub stride: usize,
    pub grid_hw: [usize; 2],
    pub num_windows: usize,
    pub num_heads: usize,
    pub num_patches: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub class_names: Vec<String>,
}

impl BundleSummary {
    pub fn new(b: &Bundle) -> Self {
        BundleSummary {
            image_size_hw: b.image_size_hw,
            window_size: b.window_size,
            stride: b.stride,
            grid_hw: b.grid_hw,
            num_windows: b.windows.len(),
            num_heads: b.num_heads(),
            num_patches: b.num_patches(),
            head_dim: b.head_dim(),
            embed_dim: b.embed_dim(),
            class_names: b.class_names.clone(),
        }
    }
}

/// Default of every tunable and where it comes from.
fn defaults() -> Value {
    let d = RunConfig::default();
    let entry = |value: Value, source: &str| json!({ "value": value, "source": source });
    json!({
        "alpha": entry(json!(d.alpha), "published"),
        "gamma": entry(json!(d.gamma), "published"),
        "epsilon": entry(json!(d.epsilon), "published"),
        "eta": entry(json!(d.eta), "repo"),
        "m": entry(json!("num_heads"), "repo"),
        "n": entry(json!(d.n), "repo"),
        "cluster_threshold": entry(json!(d.cluster_threshold), "repo"),
        "matching": entry(json!(d.matching), "published"),
        "use_vfm": entry(json!(d.use_vfm), "repo"),
        "use_tailoring": entry(json!(d.use_tailoring), "repo"),
        "use_prior_similarity": entry(json!(d.use_prior_similarity), "repo"),
        "use_text_adjustment": entry(json!(d.use_text_adjustment), "repo"),
    })
}

/// Fixed implementation choices that affect outputs.
fn design() -> Value {
    json!({
        "gram_accumulation": "f64, ascending feature order, symmetrized (M + M^T) / 2",
        "symmetry_tolerance": spectral::SYMMETRY_TOL,
        "eigenvector_sign": "first component with |x| > 1e-10 is positive",
        "eigenvalue_order": "descending, stable",
        "rank_energy_denominator": "trace, negative eigenvalues clamped to 0",
        "rank_fallback": "k = N when the threshold is never reached or the trace is not positive",
        "eigenscale_degenerate": "spectra with spread below 1e-9 * max(max, 1) pass through unchanged",
        "signature_order": "ascending after L1 normalization; all-zero spectra become uniform",
        "assignment_tie_break": "lexicographically smallest optimal permutation",
        "attention_scale": "1 / sqrt(head_dim)",
        "layer_norm_eps": spectrafuse::fusion::LAYER_NORM_EPS,
        "presence_prior_text": "unadjusted text embeddings",
        "ward_distance": "cosine, Lance-Williams on squared distances, heights as distances",
        "ward_cut": "merge while height <= threshold",
        "ward_tie_break": "smallest cluster slot pair",
        "text_adjustment_scope": "per window, one winner per group",
        "top_n_tie_break": "lower patch index",
        "upsampling": "bilinear, half-pixel centers, edge clamped",
        "stitching": "mean over covering windows in window order",
        "argmax_tie_break": "lowest class index",
        "default_top_n": text::DEFAULT_TOP_N,
        "default_cluster_threshold": text::DEFAULT_CLUSTER_THRESHOLD,
        "default_alpha": pipeline::DEFAULT_ALPHA,
        "default_gamma": pipeline::DEFAULT_GAMMA,
    })
}

#[derive(Serialize)]
struct Report<'a> {
    bundle: BundleSummary,
    config: &'a RunConfig,
    resolved_m: usize,
    defaults: Value,
    design: Value,
    text_groups: &'a [Vec<usize>],
    presence_prior: &'a [f64],
    windows: Vec<&'a WindowReport>,
}

pub fn segment_report(bundle: &Bundle, config: &RunConfig, out: &SegmentOutput) -> String {
    let report = Report {
        bundle: BundleSummary::new(bundle),
        config,
        resolved_m: config.resolved_m(bundle.num_heads()),
        defaults: defaults(),
        design: design(),
        text_groups: &out.groups,
        presence_prior: &out.prior.scores,
        windows: out.windows.iter().map(|w| &w.report).collect(),
    };
    let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
    s.push('\n');
    s
}

pub fn labels_json(bundle: &Bundle) -> String {
    let mut s = serde_json::to_string_pretty(&json!({
        "class_names": bundle.class_names,
        "image_size_hw": bundle.image_size_hw,
        "format": "P5 PGM, one class index per pixel",
    }))
    .expect("labels metadata serializes");
    s.push('\n');
    s
}
