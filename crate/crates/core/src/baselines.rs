//! Reference policies reduced to their scoring essence: modality-agnostic
//! heavy-hitter eviction (H2O), windowed scoring (SnapKV), cross-modal
//! residual merging, and whole-modality eviction.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::calibration::{merge_residual, top_k_indices};
use crate::error::{Error, Result};
use crate::model::{
    AttentionMatrix, CompressionConfig, CompressionResult, Draft, LayerKV, MergeStrategy, Modality,
    ModalityLayout, Policy, DEFAULT_SNAPKV_WINDOW,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    H2o,
    SnapKv,
    NaiveCrossMerge,
    EvictAllAudio,
    EvictAllVideo,
    EvictAudioHighLayers,
    EvictVideoHighLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub budget_k: usize,
    pub window: usize,
    pub high_layer_start: usize,
}

impl BaselineConfig {
    /// Defaults: SnapKV window 32, high layers from `ceil(num_layers / 2)`.
    #[must_use]
    pub fn new(kind: BaselineKind, budget_k: usize, num_layers: usize) -> Self {
        Self { kind, budget_k, window: DEFAULT_SNAPKV_WINDOW, high_layer_start: num_layers.div_ceil(2) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.budget_k < 1 {
            return Err(Error::Config("budget_k must be >= 1".into()));
        }
        Ok(())
    }

    /// Equivalent engine configuration.
    #[must_use]
    pub fn to_compression_config(&self) -> CompressionConfig {
        let (policy, high) = match self.kind {
            BaselineKind::H2o => (Policy::H2o, None),
            BaselineKind::SnapKv => (Policy::SnapKv, None),
            BaselineKind::NaiveCrossMerge => (Policy::NaiveCrossMerge, None),
            BaselineKind::EvictAllAudio => (Policy::EvictModality(Modality::Audio), None),
            BaselineKind::EvictAllVideo => (Policy::EvictModality(Modality::Video), None),
            BaselineKind::EvictAudioHighLayers => {
                (Policy::EvictModality(Modality::Audio), Some(self.high_layer_start))
            }
            BaselineKind::EvictVideoHighLayers => {
                (Policy::EvictModality(Modality::Video), Some(self.high_layer_start))
            }
        };
        let mut cfg = CompressionConfig::new(policy, self.budget_k, 0.0);
        cfg.snapkv_window = self.window;
        cfg.high_layer_start = high;
        cfg
    }
}

/// Column sums over `rows`, restricted to multimodal columns.
fn multimodal_scores(a: &AttentionMatrix, layout: &ModalityLayout, rows: Range<usize>) -> Vec<(usize, f64)> {
    let m = a.entries();
    layout.video().chain(layout.audio()).map(|j| (j, rows.clone().map(|i| m[[i, j]]).sum())).collect()
}

fn keep_topk(
    policy: Policy,
    scored: &[(usize, f64)],
    layout: &ModalityLayout,
    k: usize,
) -> Result<(Draft, Vec<usize>)> {
    if k > scored.len() {
        return Err(Error::Budget { budget: k, available: scored.len() });
    }
    let keep = top_k_indices(scored, k);
    let mut d = Draft::new(policy);
    let mut dropped = Vec::new();
    for &(j, _) in scored {
        if keep.binary_search(&j).is_ok() {
            match layout.modality_of(j) {
                Some(Modality::Video) => d.retained_video.push(j),
                Some(Modality::Audio) => d.retained_audio.push(j),
                None => unreachable!("scored columns are multimodal"),
            }
        } else {
            dropped.push(j);
        }
    }
    Ok((d, dropped))
}

/// Keeps the `k` multimodal tokens with the highest raw cumulative
/// attention over all query rows; evicts the rest.
pub fn h2o_compress(
    a: &AttentionMatrix,
    kv: &LayerKV,
    layout: &ModalityLayout,
    k: usize,
) -> Result<CompressionResult> {
    let scored = multimodal_scores(a, layout, 0..a.len());
    let (mut d, dropped) = keep_topk(Policy::H2o, &scored, layout, k)?;
    d.evicted = dropped;
    Ok(d.finish(kv, layout))
}

/// Like [`h2o_compress`] but scores only the trailing `window` query rows.
/// A window longer than the sequence covers every row.
pub fn snapkv_compress(
    a: &AttentionMatrix,
    kv: &LayerKV,
    layout: &ModalityLayout,
    k: usize,
    window: usize,
) -> Result<CompressionResult> {
    if window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let l = a.len();
    let scored = multimodal_scores(a, layout, l.saturating_sub(window)..l);
    let (mut d, dropped) = keep_topk(Policy::SnapKv, &scored, layout, k)?;
    d.evicted = dropped;
    Ok(d.finish(kv, layout))
}

/// H2O selection, then every non-retained video and audio row averaged
/// into one shared merged row.
pub fn naive_cross_merge(
    a: &AttentionMatrix,
    kv: &LayerKV,
    layout: &ModalityLayout,
    k: usize,
) -> Result<CompressionResult> {
    let scored = multimodal_scores(a, layout, 0..a.len());
    let (mut d, residual) = keep_topk(Policy::NaiveCrossMerge, &scored, layout, k)?;
    let zeros = vec![0.0; residual.len()];
    d.merged_cross = merge_residual(kv, &residual, &zeros, MergeStrategy::Average)?;
    Ok(d.finish(kv, layout))
}

/// Drops an entire modality span. With `high_layer_start = Some(s)`, only
/// layers at index `s` or above are affected.
#[must_use]
pub fn evict_modality(
    kv: &LayerKV,
    layout: &ModalityLayout,
    which: Modality,
    layer_idx: usize,
    high_layer_start: Option<usize>,
) -> CompressionResult {
    let active = high_layer_start.is_none_or(|s| layer_idx >= s);
    let mut d = Draft::new(Policy::EvictModality(which));
    for m in [Modality::Video, Modality::Audio] {
        let span: Vec<usize> = layout.span(m).collect();
        if active && m == which {
            d.evicted.extend(span);
        } else {
            match m {
                Modality::Video => d.retained_video = span,
                Modality::Audio => d.retained_audio = span,
            }
        }
    }
    d.finish(kv, layout)
}
