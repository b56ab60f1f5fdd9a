//! Layer-adaptive modality priority.
//!
//! Each layer measures how much attention its text queries pay to the
//! average video token versus the average audio token, normalises the two
//! into priority weights, and scales the modality columns by them.

use serde::{Deserialize, Serialize};

use crate::model::{Modality, ModalityLayout};
use crate::redistribution::RedistributedScores;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocusWeights {
    pub w_video: f64,
    pub w_audio: f64,
    pub mean_video_score: f64,
    pub mean_audio_score: f64,
}

impl FocusWeights {
    /// The modality with the larger weight; exact ties go to video.
    #[must_use]
    pub fn high_priority(&self) -> Modality {
        if self.w_audio > self.w_video {
            Modality::Audio
        } else {
            Modality::Video
        }
    }

    #[must_use]
    pub fn weight(&self, m: Modality) -> f64 {
        match m {
            Modality::Video => self.w_video,
            Modality::Audio => self.w_audio,
        }
    }
}

/// Text-query mass per token of each modality span. An empty span scores 0.
#[must_use]
pub fn mean_modal_scores(scores: &RedistributedScores, layout: &ModalityLayout) -> (f64, f64) {
    let a = scores.entries();
    let span_mean = |cols: std::ops::Range<usize>| {
        if cols.is_empty() {
            return 0.0;
        }
        let n = cols.len() as f64;
        let total: f64 = cols.map(|j| layout.text().map(|i| a[[i, j]]).sum::<f64>()).sum();
        total / n
    };
    (span_mean(layout.video()), span_mean(layout.audio()))
}

/// Normalises the two mean scores into weights summing to one, falling back
/// to an even split when both are zero.
#[must_use]
pub fn focus_weights(mean_video: f64, mean_audio: f64) -> FocusWeights {
    let total = mean_video + mean_audio;
    let (w_video, w_audio) = if total > 0.0 {
        let wv = mean_video / total;
        (wv, 1.0 - wv)
    } else {
        (0.5, 0.5)
    };
    FocusWeights { w_video, w_audio, mean_video_score: mean_video, mean_audio_score: mean_audio }
}

/// Scales video columns by `w_video` and audio columns by `w_audio`.
#[must_use]
pub fn apply_focus(
    scores: &RedistributedScores,
    layout: &ModalityLayout,
    w: &FocusWeights,
) -> RedistributedScores {
    let mut out = scores.clone();
    let m = out.entries_mut();
    for (cols, weight) in [(layout.video(), w.w_video), (layout.audio(), w.w_audio)] {
        for j in cols {
            m.column_mut(j).mapv_inplace(|v| v * weight);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_layout;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn scores_from(m: Array2<f64>) -> RedistributedScores {
        RedistributedScores::from_entries(m)
    }

    fn text_row_example() -> (RedistributedScores, ModalityLayout) {
        let layout = build_layout(2, 2, 1).unwrap();
        let mut m = Array2::zeros((5, 5));
        for (j, v) in [0.3, 0.1, 0.2, 0.2, 0.2].into_iter().enumerate() {
            m[[4, j]] = v;
        }
        // Non-text rows must not contribute.
        m[[1, 0]] = 7.0;
        (scores_from(m), layout)
    }

    #[test]
    fn mean_scores_single_text_row() {
        let (s, layout) = text_row_example();
        let (sv, sa) = mean_modal_scores(&s, &layout);
        assert!((sv - 0.2).abs() < 1e-15);
        assert!((sa - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mean_scores_zero_and_empty_spans() {
        let layout = build_layout(2, 2, 1).unwrap();
        let mut m = Array2::zeros((5, 5));
        m[[4, 0]] = 0.5;
        m[[4, 1]] = 0.5;
        let (sv, sa) = mean_modal_scores(&scores_from(m), &layout);
        assert_eq!((sv, sa), (0.5, 0.0));

        let layout = build_layout(3, 0, 1).unwrap();
        let m = Array2::from_elem((4, 4), 0.25);
        let (_, sa) = mean_modal_scores(&scores_from(m), &layout);
        assert_eq!(sa, 0.0);
    }

    #[test]
    fn weight_examples() {
        let w = focus_weights(0.6, 0.2);
        assert!((w.w_video - 0.75).abs() < 1e-15 && (w.w_audio - 0.25).abs() < 1e-15);
        let w = focus_weights(0.2, 0.2);
        assert_eq!((w.w_video, w.w_audio), (0.5, 0.5));
        let w = focus_weights(0.0, 0.0);
        assert_eq!((w.w_video, w.w_audio), (0.5, 0.5));
        assert_eq!(w.high_priority(), Modality::Video);
        assert_eq!(focus_weights(0.1, 0.3).high_priority(), Modality::Audio);
        let w = focus_weights(0.4, 0.0);
        assert_eq!((w.w_video, w.w_audio), (1.0, 0.0));
    }

    #[test]
    fn apply_focus_scales_columns() {
        let layout = build_layout(1, 1, 1).unwrap();
        let m = Array2::from_elem((3, 3), 0.4);
        let s = scores_from(m);
        let w = focus_weights(0.6, 0.2);
        let out = apply_focus(&s, &layout, &w);
        assert!((out.entries()[[2, 0]] - 0.3).abs() < 1e-15);
        assert!((out.entries()[[2, 1]] - 0.1).abs() < 1e-15);
        assert_eq!(out.entries()[[2, 2]], 0.4);

        let zeroed = apply_focus(&s, &layout, &focus_weights(1.0, 0.0));
        assert!(zeroed.entries().column(1).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(sv in 0.0f64..10.0, sa in 0.0f64..10.0) {
            let w = focus_weights(sv, sa);
            prop_assert!((w.w_video + w.w_audio - 1.0).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&w.w_video));
            if sv > sa {
                prop_assert!(w.w_video > 0.5);
            }
        }

        #[test]
        fn focus_keeps_ranking_and_text(
            nv in 1usize..5, na in 1usize..5, nt in 1usize..4,
            vals in proptest::collection::vec(0.0f64..1.0, 144),
            sv in 0.01f64..1.0, sa in 0.01f64..1.0,
        ) {
            let layout = build_layout(nv, na, nt).unwrap();
            let l = layout.seq_len();
            let m = Array2::from_shape_fn((l, l), |(i, j)| if j <= i { vals[i * 12 + j] } else { 0.0 });
            let s = scores_from(m);
            let w = focus_weights(sv, sa);
            let out = apply_focus(&s, &layout, &w);
            for j in layout.text() {
                for i in 0..l {
                    prop_assert_eq!(out.entries()[[i, j]].to_bits(), s.entries()[[i, j]].to_bits());
                }
            }
            let before = s.column_sums();
            let after = out.column_sums();
            for span in [layout.video(), layout.audio()] {
                for a in span.clone() {
                    for b in span.clone() {
                        if before[a] > before[b] {
                            prop_assert!(after[a] >= after[b]);
                        }
                    }
                }
            }
        }
    }
}
