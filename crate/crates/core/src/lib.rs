//! Multimodal KV-cache compression engine.
//!
//! Given one layer's head-averaged causal attention matrix and its key/value
//! rows, laid out as video | audio | text, the engine:
//!
//! 1. removes the positional bias of cumulative scores ([`redistribution`]),
//! 2. weights video and audio by how much the text queries attend to them
//!    ([`focus`]),
//! 3. keeps a budget of top tokens, merges the rest within each modality
//!    and evicts low-priority rows that do not align with the high-priority
//!    modality ([`calibration`]).
//!
//! [`baselines`] holds the comparison policies, [`cost`] the analytic decode
//! cost model, [`trace`] the synthetic trace generator and `.avtrace`
//! format, and [`harness`] the replay, sweep and proof-check drivers.

pub mod baselines;
pub mod calibration;
pub mod cost;
pub mod error;
pub mod focus;
pub mod harness;
pub mod model;
pub mod policy;
pub mod redistribution;
pub mod trace;

pub use error::{Error, Result};
pub use model::{
    build_layout, AttentionMatrix, CompressionConfig, CompressionResult, LayerKV, MergeStrategy, Modality,
    ModalityLayout, Policy, RowOrigin,
};
pub use policy::compress_layer;
