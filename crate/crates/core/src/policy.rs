use crate::baselines::{evict_modality, h2o_compress, naive_cross_merge, snapkv_compress};
use crate::calibration::acckv_compress;
use crate::error::{Error, Result};
use crate::model::{
    full_cache, AttentionMatrix, CompressionConfig, CompressionResult, LayerKV, ModalityLayout, Policy,
};

/// Runs `cfg.policy` on one layer. `layer_idx` only matters to layer-gated
/// policies.
pub fn compress_layer(
    layer_idx: usize,
    a: &AttentionMatrix,
    kv: &LayerKV,
    layout: &ModalityLayout,
    cfg: &CompressionConfig,
) -> Result<CompressionResult> {
    cfg.validate()?;
    if a.len() != layout.seq_len() || kv.len() != layout.seq_len() {
        return Err(Error::Shape(format!(
            "attention {} rows, kv {} rows, layout {} tokens",
            a.len(),
            kv.len(),
            layout.seq_len()
        )));
    }
    match cfg.policy {
        Policy::AccKv => acckv_compress(a, kv, layout, cfg),
        Policy::H2o => h2o_compress(a, kv, layout, cfg.budget_k),
        Policy::SnapKv => snapkv_compress(a, kv, layout, cfg.budget_k, cfg.snapkv_window),
        Policy::NaiveCrossMerge => naive_cross_merge(a, kv, layout, cfg.budget_k),
        Policy::EvictModality(m) => Ok(evict_modality(kv, layout, m, layer_idx, cfg.high_layer_start)),
        Policy::FullCache => Ok(full_cache(kv, layout)),
    }
}
