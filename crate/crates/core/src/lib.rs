//! Training-free open-vocabulary segmentation by spectral distillation of a
//! vision-foundation-model attention graph into a CLIP attention graph.
//!
//! The crate works purely on precomputed encoder tensors stored in a
//! [`bundle`]; no deep-learning runtime is involved.

pub mod bundle;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod matching;
pub mod pipeline;
pub mod segmentation;
pub mod spectral;
pub mod synthetic;
pub mod text;

pub use bundle::{read_bundle, write_bundle, Bundle, BundleManifest};
pub use error::{Error, Result};
pub use graph::{build_gram_graph, MultiHeadGraph};
pub use matching::{HeadAssignment, MatchingStrategy};
pub use pipeline::{segment, RunConfig, SegmentOutput};
pub use segmentation::{EvalReport, LabelMap, LogitsMap};
pub use spectral::{EigenSystem, RankSelection};
