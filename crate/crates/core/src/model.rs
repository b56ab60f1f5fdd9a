//! Core data types shared by every policy: modality layout, validated
//! attention matrices, per-layer KV rows, configuration and results.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::calibration::{AlignmentReport, TopKSelection};
use crate::error::{Error, Result};
use crate::focus::FocusWeights;

/// Row-stochastic tolerance for attention matrices.
pub const STOCHASTIC_TOL: f64 = 1e-6;

// ── Layout ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    #[must_use]
    pub fn other(self) -> Self {
        match self {
            Self::Video => Self::Audio,
            Self::Audio => Self::Video,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Video => "video",
            Self::Audio => "audio",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(Self::Video),
            "audio" => Ok(Self::Audio),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Contiguous video | audio | text spans over a token sequence.
///
/// All ranges are half-open. The text span is never empty because every
/// score is read off the text-query rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityLayout {
    video_start: usize,
    video_end: usize,
    audio_start: usize,
    audio_end: usize,
    text_start: usize,
    seq_len: usize,
}

impl ModalityLayout {
    pub fn new(
        video_start: usize,
        video_end: usize,
        audio_start: usize,
        audio_end: usize,
        text_start: usize,
        seq_len: usize,
    ) -> Result<Self> {
        let ordered = video_start <= video_end
            && video_end <= audio_start
            && audio_start <= audio_end
            && audio_end <= text_start
            && text_start <= seq_len;
        if !ordered {
            return Err(Error::Layout(format!(
                "spans out of order: video [{video_start},{video_end}) audio [{audio_start},{audio_end}) text [{text_start},{seq_len})"
            )));
        }
        if video_start != 0 || video_end != audio_start || audio_end != text_start {
            return Err(Error::Layout("spans must be contiguous from index 0".into()));
        }
        if text_start == seq_len {
            return Err(Error::Layout("text span must be non-empty".into()));
        }
        Ok(Self { video_start, video_end, audio_start, audio_end, text_start, seq_len })
    }

    #[must_use]
    pub fn video(&self) -> Range<usize> {
        self.video_start..self.video_end
    }

    #[must_use]
    pub fn audio(&self) -> Range<usize> {
        self.audio_start..self.audio_end
    }

    #[must_use]
    pub fn text(&self) -> Range<usize> {
        self.text_start..self.seq_len
    }

    #[must_use]
    pub fn span(&self, m: Modality) -> Range<usize> {
        match m {
            Modality::Video => self.video(),
            Modality::Audio => self.audio(),
        }
    }

    #[must_use]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[must_use]
    pub fn n_video(&self) -> usize {
        self.video_end - self.video_start
    }

    #[must_use]
    pub fn n_audio(&self) -> usize {
        self.audio_end - self.audio_start
    }

    #[must_use]
    pub fn n_text(&self) -> usize {
        self.seq_len - self.text_start
    }

    /// Number of video plus audio tokens.
    #[must_use]
    pub fn multimodal_len(&self) -> usize {
        self.n_video() + self.n_audio()
    }

    /// Which modality owns `index`, `None` for text.
    #[must_use]
    pub fn modality_of(&self, index: usize) -> Option<Modality> {
        if self.video().contains(&index) {
            Some(Modality::Video)
        } else if self.audio().contains(&index) {
            Some(Modality::Audio)
        } else {
            None
        }
    }
}

/// Lays out `n_video` video tokens, then `n_audio` audio tokens, then
/// `n_text` text tokens.
pub fn build_layout(n_video: usize, n_audio: usize, n_text: usize) -> Result<ModalityLayout> {
    if n_text == 0 {
        return Err(Error::Layout("text span must be non-empty".into()));
    }
    let audio_start = n_video;
    let text_start = audio_start + n_audio;
    ModalityLayout::new(0, n_video, audio_start, text_start, text_start, text_start + n_text)
}

// ── Attention ───────────────────────────────────────────────────────────────

/// Causal, row-stochastic attention for one layer (head-averaged).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(Array2<f64>);

impl AttentionMatrix {
    /// Accepts `raw` if it is square, lower-triangular, non-negative and each
    /// row sums to 1 within [`STOCHASTIC_TOL`].
    pub fn validate(raw: Array2<f64>) -> Result<Self> {
        let (rows, cols) = raw.dim();
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        for ((row, col), &value) in raw.indexed_iter() {
            if col > row && value != 0.0 {
                return Err(Error::CausalityViolation { row, col, value });
            }
        }
        for ((row, col), &value) in raw.indexed_iter() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidEntry { row, col, value });
            }
        }
        for (row, r) in raw.axis_iter(Axis(0)).enumerate() {
            let sum: f64 = r.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NotStochastic { row, sum });
            }
        }
        Ok(Self(raw))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::validate(rows_to_array(rows)?)
    }

    /// Averages per-head matrices into one layer matrix before validation.
    pub fn from_heads(heads: &[Array2<f64>]) -> Result<Self> {
        let first = heads.first().ok_or_else(|| Error::Shape("at least one head is required".into()))?;
        let mut acc = Array2::<f64>::zeros(first.dim());
        for h in heads {
            if h.dim() != first.dim() {
                return Err(Error::Shape("heads differ in shape".into()));
            }
            acc += h;
        }
        acc /= heads.len() as f64;
        Self::validate(acc)
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    #[must_use]
    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    #[must_use]
    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, m), flat).map_err(|e| Error::Shape(e.to_string()))
}

// ── KV rows ─────────────────────────────────────────────────────────────────

/// Key and value rows of one layer, `seq_len x d_k` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV {
    keys: Array2<f64>,
    values: Array2<f64>,
}

impl LayerKV {
    pub fn new(keys: Array2<f64>, values: Array2<f64>) -> Result<Self> {
        if keys.dim() != values.dim() {
            return Err(Error::Shape(format!("keys {:?} and values {:?} differ", keys.dim(), values.dim())));
        }
        Ok(Self { keys, values })
    }

    pub fn from_rows(keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(keys)?, rows_to_array(values)?)
    }

    #[must_use]
    pub fn empty(d_k: usize) -> Self {
        Self { keys: Array2::zeros((0, d_k)), values: Array2::zeros((0, d_k)) }
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }

    #[must_use]
    pub fn d_k(&self) -> usize {
        self.keys.ncols()
    }

    #[must_use]
    pub fn keys(&self) -> &Array2<f64> {
        &self.keys
    }

    #[must_use]
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    #[must_use]
    pub fn key(&self, i: usize) -> ArrayView1<'_, f64> {
        self.keys.row(i)
    }

    #[must_use]
    pub fn value(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Gathers rows at strictly increasing `indices`.
    pub fn slice(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index { index: bad, len: self.len() });
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape("indices must be strictly increasing".into()));
        }
        Ok(Self { keys: self.keys.select(Axis(0), indices), values: self.values.select(Axis(0), indices) })
    }
}

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeStrategy {
    /// Arithmetic mean of the residual rows.
    Average,
    /// Rows scaled by their raw post-focus cumulative scores and summed.
    ScoreWeighted,
    /// Rows weighted by scores normalized to sum to one.
    NormalizedScoreWeighted,
}

impl FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(Self::Average),
            "score-weighted" | "weighted" => Ok(Self::ScoreWeighted),
            "normalized-score-weighted" | "normalized" => Ok(Self::NormalizedScoreWeighted),
            other => Err(Error::Config(format!("unknown merge strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    #[serde(rename = "acckv")]
    AccKv,
    H2o,
    #[serde(rename = "snapkv")]
    SnapKv,
    #[serde(rename = "naive-merge")]
    NaiveCrossMerge,
    EvictModality(Modality),
    #[serde(rename = "full")]
    FullCache,
}

impl Policy {
    /// Policies that select against `budget_k`.
    #[must_use]
    pub fn is_budgeted(self) -> bool {
        matches!(self, Self::AccKv | Self::H2o | Self::SnapKv | Self::NaiveCrossMerge)
    }

    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            Self::AccKv => "acckv",
            Self::H2o => "h2o",
            Self::SnapKv => "snapkv",
            Self::NaiveCrossMerge => "naive-merge",
            Self::EvictModality(Modality::Video) => "evict-video",
            Self::EvictModality(Modality::Audio) => "evict-audio",
            Self::FullCache => "full",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acckv" => Ok(Self::AccKv),
            "h2o" => Ok(Self::H2o),
            "snapkv" => Ok(Self::SnapKv),
            "naive-merge" | "naive-cross-merge" => Ok(Self::NaiveCrossMerge),
            "evict-video" => Ok(Self::EvictModality(Modality::Video)),
            "evict-audio" => Ok(Self::EvictModality(Modality::Audio)),
            "full" | "full-cache" => Ok(Self::FullCache),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

/// Default SnapKV observation window.
pub const DEFAULT_SNAPKV_WINDOW: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Retained multimodal tokens, merged rows excluded.
    pub budget_k: usize,
    /// Alignment threshold for the low-priority modality.
    pub tau: f64,
    pub merge_strategy: MergeStrategy,
    pub policy: Policy,
    /// Trailing query rows scored by SnapKV.
    pub snapkv_window: usize,
    /// For `EvictModality`: first layer evicted. `None` evicts in every layer.
    pub high_layer_start: Option<usize>,
}

impl CompressionConfig {
    #[must_use]
    pub fn new(policy: Policy, budget_k: usize, tau: f64) -> Self {
        Self {
            budget_k,
            tau,
            merge_strategy: MergeStrategy::Average,
            policy,
            snapkv_window: DEFAULT_SNAPKV_WINDOW,
            high_layer_start: None,
        }
    }

    #[must_use]
    pub fn with_merge_strategy(mut self, s: MergeStrategy) -> Self {
        self.merge_strategy = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.policy == Policy::AccKv && self.budget_k < 2 {
            return Err(Error::Config(format!("acckv needs budget_k >= 2, got {}", self.budget_k)));
        }
        if self.policy.is_budgeted() && self.budget_k < 1 {
            return Err(Error::Config("budget_k must be positive".into()));
        }
        if self.snapkv_window < 1 {
            return Err(Error::Config("snapkv window must be >= 1".into()));
        }
        Ok(())
    }
}

// ── Results ─────────────────────────────────────────────────────────────────

/// Where a merged row's sources came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeSource {
    Video,
    Audio,
    /// Residual rows of both modalities averaged together.
    Cross,
}

impl From<Modality> for MergeSource {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Video => Self::Video,
            Modality::Audio => Self::Audio,
        }
    }
}

/// A single KV row standing in for a set of residual tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedToken {
    pub key_row: Vec<f64>,
    pub value_row: Vec<f64>,
    /// Global indices of the merged tokens, ascending.
    pub sources: Vec<usize>,
}

impl MergedToken {
    #[must_use]
    pub fn source_count(&self) -> usize {
        self.sources.len()
    }
}

/// Provenance of one row in a compacted cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowOrigin {
    Token(usize),
    Merged(MergeSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub seq_len: usize,
    pub video_span: usize,
    pub audio_span: usize,
    pub text_span: usize,
    pub retained_video: usize,
    pub retained_audio: usize,
    pub merged_rows: usize,
    pub evicted: usize,
    pub final_rows: usize,
    /// `final_rows / seq_len`.
    pub retained_ratio: f64,
    /// Final multimodal rows (merged included) over the multimodal span.
    pub multimodal_retained_ratio: f64,
    pub n_video: Option<usize>,
    pub n_audio: Option<usize>,
    pub w_video: Option<f64>,
    pub high_priority: Option<Modality>,
    pub mean_similarity: Option<f64>,
    pub alignment_evicted: usize,
}

#[derive(Debug, Clone)]
pub struct CompressionResult {
    pub policy: Policy,
    /// Video tokens present in the final cache.
    pub retained_video: Vec<usize>,
    /// Audio tokens present in the final cache.
    pub retained_audio: Vec<usize>,
    pub merged_video: Option<MergedToken>,
    pub merged_audio: Option<MergedToken>,
    pub merged_cross: Option<MergedToken>,
    /// Multimodal tokens dropped outright, including the sources of a
    /// merged row that alignment removed.
    pub evicted: Vec<usize>,
    pub final_kv: LayerKV,
    pub origins: Vec<RowOrigin>,
    pub selection: Option<TopKSelection>,
    pub focus: Option<FocusWeights>,
    pub alignment: Option<AlignmentReport>,
    pub high_priority: Option<Modality>,
    pub stats: LayerStats,
}

impl CompressionResult {
    pub fn merged_rows(&self) -> impl Iterator<Item = (MergeSource, &MergedToken)> {
        [
            (MergeSource::Video, self.merged_video.as_ref()),
            (MergeSource::Audio, self.merged_audio.as_ref()),
            (MergeSource::Cross, self.merged_cross.as_ref()),
        ]
        .into_iter()
        .filter_map(|(s, m)| m.map(|m| (s, m)))
    }

    /// Final rows that are original (unmerged) multimodal tokens.
    #[must_use]
    pub fn retained_multimodal(&self) -> usize {
        self.retained_video.len() + self.retained_audio.len()
    }

    /// True when a budgeted policy kept more than `budget_k` tokens or more
    /// than `budget_k + 2` multimodal rows.
    #[must_use]
    pub fn violates_budget(&self, budget_k: usize, text_len: usize) -> bool {
        self.policy.is_budgeted()
            && (self.retained_multimodal() > budget_k || self.final_kv.len() > budget_k + 2 + text_len)
    }

    /// Set of row origins kept in the final cache.
    #[must_use]
    pub fn kept_set(&self) -> BTreeSet<RowOrigin> {
        self.origins.iter().copied().collect()
    }
}

/// One entry of a final cache in output order.
enum Piece<'a> {
    Token(usize),
    Merged(MergeSource, &'a MergedToken),
}

/// Partial result from a policy, finished by [`finish`].
pub(crate) struct Draft {
    pub policy: Policy,
    pub retained_video: Vec<usize>,
    pub retained_audio: Vec<usize>,
    pub merged_video: Option<MergedToken>,
    pub merged_audio: Option<MergedToken>,
    pub merged_cross: Option<MergedToken>,
    pub evicted: Vec<usize>,
    pub selection: Option<TopKSelection>,
    pub focus: Option<FocusWeights>,
    pub alignment: Option<AlignmentReport>,
    pub high_priority: Option<Modality>,
}

impl Draft {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            retained_video: Vec::new(),
            retained_audio: Vec::new(),
            merged_video: None,
            merged_audio: None,
            merged_cross: None,
            evicted: Vec::new(),
            selection: None,
            focus: None,
            alignment: None,
            high_priority: None,
        }
    }

    fn merged(&self, s: MergeSource) -> Option<&MergedToken> {
        match s {
            MergeSource::Video => self.merged_video.as_ref(),
            MergeSource::Audio => self.merged_audio.as_ref(),
            MergeSource::Cross => self.merged_cross.as_ref(),
        }
    }

    fn retained(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Video => &self.retained_video,
            Modality::Audio => &self.retained_audio,
        }
    }

    /// Assembles the final cache as
    /// `[first retained, first merged, second retained, second merged, cross merged, text]`
    /// where `first` is the high-priority modality (video when unset).
    pub fn finish(mut self, kv: &LayerKV, layout: &ModalityLayout) -> CompressionResult {
        self.retained_video.sort_unstable();
        self.retained_audio.sort_unstable();
        self.evicted.sort_unstable();

        let first = self.high_priority.unwrap_or(Modality::Video);
        let mut pieces = Vec::new();
        for m in [first, first.other()] {
            pieces.extend(self.retained(m).iter().map(|&i| Piece::Token(i)));
            if let Some(t) = self.merged(m.into()) {
                pieces.push(Piece::Merged(m.into(), t));
            }
        }
        if let Some(t) = self.merged_cross.as_ref() {
            pieces.push(Piece::Merged(MergeSource::Cross, t));
        }
        pieces.extend(layout.text().map(Piece::Token));

        let d_k = kv.d_k();
        let mut keys = Vec::with_capacity(pieces.len() * d_k);
        let mut values = Vec::with_capacity(pieces.len() * d_k);
        let mut origins = Vec::with_capacity(pieces.len());
        for p in &pieces {
            match *p {
                Piece::Token(i) => {
                    keys.extend(kv.key(i).iter());
                    values.extend(kv.value(i).iter());
                    origins.push(RowOrigin::Token(i));
                }
                Piece::Merged(s, t) => {
                    keys.extend_from_slice(&t.key_row);
                    values.extend_from_slice(&t.value_row);
                    origins.push(RowOrigin::Merged(s));
                }
            }
        }
        let rows = origins.len();
        let final_kv = LayerKV {
            keys: Array2::from_shape_vec((rows, d_k), keys).expect("row-major assembly"),
            values: Array2::from_shape_vec((rows, d_k), values).expect("row-major assembly"),
        };

        let merged_rows = self.merged_video.is_some() as usize
            + self.merged_audio.is_some() as usize
            + self.merged_cross.is_some() as usize;
        let mm_final = rows - layout.n_text();
        let alignment_evicted =
            self.alignment.as_ref().map_or(0, |a| a.kept_mask.iter().filter(|k| !**k).count());
        let stats = LayerStats {
            seq_len: layout.seq_len(),
            video_span: layout.n_video(),
            audio_span: layout.n_audio(),
            text_span: layout.n_text(),
            retained_video: self.retained_video.len(),
            retained_audio: self.retained_audio.len(),
            merged_rows,
            evicted: self.evicted.len(),
            final_rows: rows,
            retained_ratio: rows as f64 / layout.seq_len() as f64,
            multimodal_retained_ratio: if layout.multimodal_len() == 0 {
                1.0
            } else {
                mm_final as f64 / layout.multimodal_len() as f64
            },
            n_video: self.selection.as_ref().map(|s| s.n_video),
            n_audio: self.selection.as_ref().map(|s| s.n_audio),
            w_video: self.focus.map(|f| f.w_video),
            high_priority: self.high_priority,
            mean_similarity: self.alignment.as_ref().map(AlignmentReport::overall_mean),
            alignment_evicted,
        };

        CompressionResult {
            policy: self.policy,
            retained_video: self.retained_video,
            retained_audio: self.retained_audio,
            merged_video: self.merged_video,
            merged_audio: self.merged_audio,
            merged_cross: self.merged_cross,
            evicted: self.evicted,
            final_kv,
            origins,
            selection: self.selection,
            focus: self.focus,
            alignment: self.alignment,
            high_priority: self.high_priority,
            stats,
        }
    }
}

/// Full cache, unchanged.
pub fn full_cache(kv: &LayerKV, layout: &ModalityLayout) -> CompressionResult {
    let mut d = Draft::new(Policy::FullCache);
    d.retained_video = layout.video().collect();
    d.retained_audio = layout.audio().collect();
    d.finish(kv, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layout_examples() {
        let l = build_layout(2, 2, 1).unwrap();
        assert_eq!((l.video(), l.audio(), l.text(), l.seq_len()), (0..2, 2..4, 4..5, 5));

        let l = build_layout(0, 3, 2).unwrap();
        assert!(l.video().is_empty());
        assert_eq!((l.audio(), l.text()), (0..3, 3..5));

        let l = build_layout(4, 0, 1).unwrap();
        assert!(l.audio().is_empty());
        assert_eq!(l.seq_len(), 5);

        assert!(matches!(build_layout(3, 3, 0), Err(Error::Layout(_))));
    }

    #[test]
    fn layout_rejects_gaps_and_interleaving() {
        assert!(ModalityLayout::new(0, 2, 3, 4, 4, 5).is_err());
        assert!(ModalityLayout::new(0, 3, 2, 4, 4, 5).is_err());
        assert!(ModalityLayout::new(1, 2, 2, 4, 4, 5).is_err());
    }

    #[test]
    fn attention_validation() {
        assert!(AttentionMatrix::validate(array![[1.0, 0.0], [0.5, 0.5]]).is_ok());
        assert!(matches!(
            AttentionMatrix::validate(array![[1.0, 0.1], [0.5, 0.5]]),
            Err(Error::CausalityViolation { row: 0, col: 1, .. })
        ));
        assert!(matches!(
            AttentionMatrix::validate(array![[1.0, 0.0], [0.4, 0.5]]),
            Err(Error::NotStochastic { row: 1, .. })
        ));
        assert!(matches!(
            AttentionMatrix::validate(array![[1.0, 0.0], [1.5, -0.5]]),
            Err(Error::InvalidEntry { .. })
        ));
        assert!(matches!(AttentionMatrix::validate(Array2::zeros((2, 3))), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn heads_are_averaged() {
        let a = array![[1.0, 0.0], [1.0, 0.0]];
        let b = array![[1.0, 0.0], [0.0, 1.0]];
        let m = AttentionMatrix::from_heads(&[a, b]).unwrap();
        assert_eq!(m.entries(), &array![[1.0, 0.0], [0.5, 0.5]]);
    }

    #[test]
    fn slice_examples() {
        let kv = LayerKV::from_rows(
            &[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]],
            &[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]],
        )
        .unwrap();
        let s = kv.slice(&[0, 2]).unwrap();
        assert_eq!(s.keys(), &array![[1.0, 1.0], [3.0, 3.0]]);
        assert_eq!(kv.slice(&[]).unwrap().len(), 0);
        assert!(matches!(kv.slice(&[3]), Err(Error::Index { index: 3, len: 3 })));
        assert_eq!(kv.slice(&[0, 1, 2]).unwrap(), kv);
    }

    #[test]
    fn kv_shape_mismatch() {
        assert!(LayerKV::new(Array2::zeros((2, 3)), Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CompressionConfig::new(Policy::AccKv, 2, 0.5).validate().is_ok());
        assert!(CompressionConfig::new(Policy::AccKv, 1, 0.5).validate().is_err());
        assert!(CompressionConfig::new(Policy::AccKv, 4, 1.01).validate().is_err());
        assert!(CompressionConfig::new(Policy::AccKv, 4, f64::NAN).validate().is_err());
        assert!(CompressionConfig::new(Policy::H2o, 1, 0.0).validate().is_ok());
        assert!(CompressionConfig::new(Policy::FullCache, 0, 0.0).validate().is_ok());
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [
            Policy::AccKv,
            Policy::H2o,
            Policy::SnapKv,
            Policy::NaiveCrossMerge,
            Policy::EvictModality(Modality::Video),
            Policy::EvictModality(Modality::Audio),
            Policy::FullCache,
        ] {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
        }
    }

    #[test]
    fn full_cache_is_identity() {
        let layout = build_layout(1, 1, 1).unwrap();
        let kv = LayerKV::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], &[vec![4.0], vec![5.0], vec![6.0]])
            .unwrap();
        let r = full_cache(&kv, &layout);
        assert_eq!(r.final_kv, kv);
        assert_eq!(r.stats.retained_ratio, 1.0);
    }
}
