//! Item timeliness modeling and timeliness-aware reranking for feed recommendation.
//!
//! Impression logs become per-item age timelines ([`corpus`]), which are
//! labeled with deactivation events ([`labeler`]) and used to fit a Cox
//! proportional-hazards model whose survival curves give each item's global
//! residual value ([`grv_model`]). Backbone relevance scores ([`backbone`])
//! are blended with that timeliness signal ([`rerank`]) and scored for
//! accuracy and exposure fairness ([`evaluate`]). [`synthgen`] produces
//! synthetic corpora with known ground truth and [`pipeline`] chains the
//! stages with on-disk manifests.

pub mod backbone;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod grv_model;
pub mod labeler;
pub mod pipeline;
pub mod rerank;
pub mod synthgen;

pub use error::{Error, Result};
