//! Cross-modal calibration: budgeted top-k selection over both modalities,
//! intra-modal merging of the residual tokens, and cosine alignment of the
//! low-priority modality against the high-priority one.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::{apply_focus, focus_weights, mean_modal_scores};
use crate::model::{
    AttentionMatrix, CompressionConfig, CompressionResult, Draft, LayerKV, MergeStrategy, MergedToken,
    Modality, ModalityLayout, Policy, RowOrigin,
};
use crate::redistribution::{redistribute, RedistributedScores};

// ── Scores ──────────────────────────────────────────────────────────────────

/// Per-token text-query scores of the video and audio spans.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeScores {
    pub video_start: usize,
    pub video: Vec<f64>,
    pub audio_start: usize,
    pub audio: Vec<f64>,
}

impl CumulativeScores {
    /// Score of global token `index`, if it is multimodal.
    #[must_use]
    pub fn get(&self, index: usize) -> Option<f64> {
        if let Some(v) = index.checked_sub(self.video_start).and_then(|i| self.video.get(i)) {
            return Some(*v);
        }
        index.checked_sub(self.audio_start).and_then(|i| self.audio.get(i)).copied()
    }

    fn scored(&self, m: Modality) -> Vec<(usize, f64)> {
        let (start, s) = match m {
            Modality::Video => (self.video_start, &self.video),
            Modality::Audio => (self.audio_start, &self.audio),
        };
        s.iter().enumerate().map(|(i, &v)| (start + i, v)).collect()
    }

    fn len(&self, m: Modality) -> usize {
        match m {
            Modality::Video => self.video.len(),
            Modality::Audio => self.audio.len(),
        }
    }
}

/// Column sums over the text rows, restricted to each modality span.
#[must_use]
pub fn cumulative_scores(scores: &RedistributedScores, layout: &ModalityLayout) -> CumulativeScores {
    let a = scores.entries();
    let col = |j: usize| layout.text().map(|i| a[[i, j]]).sum::<f64>();
    CumulativeScores {
        video_start: layout.video().start,
        video: layout.video().map(col).collect(),
        audio_start: layout.audio().start,
        audio: layout.audio().map(col).collect(),
    }
}

/// Indices of the `k` highest scores, ties broken toward the lower index.
/// The result is sorted ascending.
#[must_use]
pub fn top_k_indices(scored: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = scored.to_vec();
    order.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).map(|(i, _)| i).collect();
    picked.sort_unstable();
    picked
}

// ── Selection ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKSelection {
    /// Combined top-k before the per-modality minimum was enforced.
    pub combined_top: Vec<usize>,
    pub video_top: Vec<usize>,
    pub audio_top: Vec<usize>,
    pub n_video: usize,
    pub n_audio: usize,
    pub video_merge: Vec<usize>,
    pub audio_merge: Vec<usize>,
}

impl TopKSelection {
    #[must_use]
    pub fn top(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Video => &self.video_top,
            Modality::Audio => &self.audio_top,
        }
    }

    #[must_use]
    pub fn merge(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Video => &self.video_merge,
            Modality::Audio => &self.audio_merge,
        }
    }
}

/// Picks `budget_k` tokens across both modalities by score, then makes sure
/// every non-empty modality keeps at least one token. Raising one modality
/// from zero to one drops the weakest pick of the other, so the total stays
/// at `budget_k`. The unpicked remainder of each span is its merge set.
pub fn select_topk(scores: &CumulativeScores, budget_k: usize) -> Result<TopKSelection> {
    let nv_span = scores.len(Modality::Video);
    let na_span = scores.len(Modality::Audio);
    let available = nv_span + na_span;
    if budget_k > available {
        return Err(Error::Budget { budget: budget_k, available });
    }
    let video = scores.scored(Modality::Video);
    let audio = scores.scored(Modality::Audio);
    let mut all = video.clone();
    all.extend_from_slice(&audio);
    let combined_top = top_k_indices(&all, budget_k);

    let in_video = |i: &&usize| (scores.video_start..scores.video_start + nv_span).contains(*i);
    let mut n_video = combined_top.iter().filter(in_video).count();
    let mut n_audio = combined_top.len() - n_video;
    if budget_k >= 2 {
        if n_video == 0 && nv_span > 0 {
            n_video = 1;
            n_audio -= 1;
        } else if n_audio == 0 && na_span > 0 {
            n_audio = 1;
            n_video -= 1;
        }
    }

    let video_top = top_k_indices(&video, n_video);
    let audio_top = top_k_indices(&audio, n_audio);
    let complement = |span: &[(usize, f64)], top: &[usize]| -> Vec<usize> {
        span.iter().map(|&(i, _)| i).filter(|i| top.binary_search(i).is_err()).collect()
    };
    Ok(TopKSelection {
        video_merge: complement(&video, &video_top),
        audio_merge: complement(&audio, &audio_top),
        combined_top,
        video_top,
        audio_top,
        n_video,
        n_audio,
    })
}

// ── Merging ─────────────────────────────────────────────────────────────────

/// Per-row weights a strategy applies to `scores`.
///
/// `NormalizedScoreWeighted` falls back to uniform weights when the scores
/// sum to zero.
#[must_use]
pub fn merge_weights(scores: &[f64], strategy: MergeStrategy) -> Vec<f64> {
    let n = scores.len();
    let uniform = || vec![1.0 / n as f64; n];
    match strategy {
        MergeStrategy::Average => uniform(),
        MergeStrategy::ScoreWeighted => scores.to_vec(),
        MergeStrategy::NormalizedScoreWeighted => {
            let total: f64 = scores.iter().sum();
            if total > 0.0 {
                scores.iter().map(|s| s / total).collect()
            } else {
                uniform()
            }
        }
    }
}

fn combine_rows(rows: &Array2<f64>, indices: &[usize], weights: Option<&[f64]>) -> Vec<f64> {
    let mut acc = Array1::<f64>::zeros(rows.ncols());
    for (n, &i) in indices.iter().enumerate() {
        match weights {
            Some(w) => acc.scaled_add(w[n], &rows.row(i)),
            None => acc += &rows.row(i),
        }
    }
    if weights.is_none() {
        acc /= indices.len() as f64;
    }
    acc.to_vec()
}

/// Collapses the rows at `indices` into one KV row. `scores[n]` is the score
/// of `indices[n]`. Returns `None` for an empty index set.
pub fn merge_residual(
    kv: &LayerKV,
    indices: &[usize],
    scores: &[f64],
    strategy: MergeStrategy,
) -> Result<Option<MergedToken>> {
    if indices.is_empty() {
        return Ok(None);
    }
    if scores.len() != indices.len() {
        return Err(Error::Shape(format!("{} merge scores for {} indices", scores.len(), indices.len())));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= kv.len()) {
        return Err(Error::Index { index: bad, len: kv.len() });
    }
    let weights = match strategy {
        MergeStrategy::Average => None,
        s => Some(merge_weights(scores, s)),
    };
    let w = weights.as_deref();
    Ok(Some(MergedToken {
        key_row: combine_rows(kv.keys(), indices, w),
        value_row: combine_rows(kv.values(), indices, w),
        sources: indices.to_vec(),
    }))
}

// ── Alignment ───────────────────────────────────────────────────────────────

/// Cosine similarity clamped to `[-1, 1]`; zero vectors score 0.
#[must_use]
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `sim[i][j]` is the cosine between low-priority key `i` and
/// high-priority key `j`.
pub fn cross_modal_similarity(low_keys: &Array2<f64>, high_keys: &Array2<f64>) -> Result<Array2<f64>> {
    if low_keys.ncols() != high_keys.ncols() {
        return Err(Error::Shape(format!("key width {} vs {}", low_keys.ncols(), high_keys.ncols())));
    }
    Ok(Array2::from_shape_fn((low_keys.nrows(), high_keys.nrows()), |(i, j)| {
        cosine(low_keys.row(i), high_keys.row(j))
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub similarity: Array2<f64>,
    /// Row means of `similarity`.
    pub mean_similarity: Vec<f64>,
    /// `mean_similarity[i] >= tau`.
    pub kept_mask: Vec<bool>,
    pub tau: f64,
    /// Provenance of each low-priority row, in similarity row order.
    pub rows: Vec<RowOrigin>,
}

impl AlignmentReport {
    /// Mean of the per-row mean similarities, 0 when there are no rows.
    #[must_use]
    pub fn overall_mean(&self) -> f64 {
        if self.mean_similarity.is_empty() {
            0.0
        } else {
            self.mean_similarity.iter().sum::<f64>() / self.mean_similarity.len() as f64
        }
    }
}

/// Averages each row of `sim` and keeps rows whose mean reaches `tau`.
/// Rows strictly below `tau` are evicted.
#[must_use]
pub fn align_and_filter(sim: Array2<f64>, tau: f64) -> AlignmentReport {
    let mean_similarity: Vec<f64> = if sim.ncols() == 0 {
        vec![0.0; sim.nrows()]
    } else {
        sim.mean_axis(Axis(1)).expect("non-empty axis").to_vec()
    };
    let kept_mask = mean_similarity.iter().map(|&m| m >= tau).collect();
    AlignmentReport { similarity: sim, mean_similarity, kept_mask, tau, rows: Vec::new() }
}

fn stack_keys(kv: &LayerKV, tokens: &[usize], merged: Option<&MergedToken>) -> Array2<f64> {
    let d_k = kv.d_k();
    let mut flat = Vec::with_capacity((tokens.len() + 1) * d_k);
    for &i in tokens {
        flat.extend(kv.key(i).iter());
    }
    if let Some(m) = merged {
        flat.extend_from_slice(&m.key_row);
    }
    Array2::from_shape_vec((flat.len() / d_k.max(1), d_k), flat).expect("row-major keys")
}

// ── Pipeline ────────────────────────────────────────────────────────────────

/// Full AccKV pipeline for one layer: redistribute, focus, select, merge
/// within each modality, align the low-priority block and assemble the
/// compacted cache.
pub fn acckv_compress(
    a: &AttentionMatrix,
    kv: &LayerKV,
    layout: &ModalityLayout,
    cfg: &CompressionConfig,
) -> Result<CompressionResult> {
    let redistributed = redistribute(a);
    let (mean_v, mean_a) = mean_modal_scores(&redistributed, layout);
    let weights = focus_weights(mean_v, mean_a);
    let focused = apply_focus(&redistributed, layout, &weights);
    let cum = cumulative_scores(&focused, layout);
    let sel = select_topk(&cum, cfg.budget_k)?;

    let merge = |idx: &[usize]| {
        let s: Vec<f64> = idx.iter().map(|&i| cum.get(i).expect("multimodal index")).collect();
        merge_residual(kv, idx, &s, cfg.merge_strategy)
    };
    let mut merged_video = merge(&sel.video_merge)?;
    let mut merged_audio = merge(&sel.audio_merge)?;

    let high = match (layout.n_video(), layout.n_audio()) {
        (0, _) => Modality::Audio,
        (_, 0) => Modality::Video,
        _ => weights.high_priority(),
    };
    let low = high.other();

    let mut draft = Draft::new(Policy::AccKv);
    draft.retained_video.clone_from(&sel.video_top);
    draft.retained_audio.clone_from(&sel.audio_top);

    if layout.n_video() > 0 && layout.n_audio() > 0 {
        let (high_merged, low_merged) = match high {
            Modality::Video => (merged_video.as_ref(), merged_audio.as_ref()),
            Modality::Audio => (merged_audio.as_ref(), merged_video.as_ref()),
        };
        let low_top = sel.top(low).to_vec();
        let high_keys = stack_keys(kv, sel.top(high), high_merged);
        let low_keys = stack_keys(kv, &low_top, low_merged);
        let sim = cross_modal_similarity(&low_keys, &high_keys)?;
        let mut report = align_and_filter(sim, cfg.tau);
        report.rows = low_top.iter().map(|&i| RowOrigin::Token(i)).collect();
        if low_merged.is_some() {
            report.rows.push(RowOrigin::Merged(low.into()));
        }

        let mut surviving = Vec::new();
        for (origin, &keep) in report.rows.iter().zip(&report.kept_mask) {
            match (*origin, keep) {
                (RowOrigin::Token(i), true) => surviving.push(i),
                (RowOrigin::Token(i), false) => draft.evicted.push(i),
                (RowOrigin::Merged(_), true) => {}
                (RowOrigin::Merged(_), false) => {
                    let dropped = match low {
                        Modality::Video => merged_video.take(),
                        Modality::Audio => merged_audio.take(),
                    };
                    draft.evicted.extend(dropped.expect("low merged row present").sources);
                }
            }
        }
        match low {
            Modality::Video => draft.retained_video = surviving,
            Modality::Audio => draft.retained_audio = surviving,
        }
        draft.alignment = Some(report);
    }

    draft.merged_video = merged_video;
    draft.merged_audio = merged_audio;
    draft.selection = Some(sel);
    draft.focus = Some(weights);
    draft.high_priority = Some(high);
    Ok(draft.finish(kv, layout))
}
