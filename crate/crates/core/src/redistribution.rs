//! Positional-bias correction for cumulative attention scores.
//!
//! In a causal matrix, column `j` collects mass from the `l - j` queries at
//! or after it, so summing columns favours early tokens. Redistribution
//! scales entry `(i, j)` by `(i + 1) / (l - j)`: later query rows (which
//! spread one unit over more keys) are boosted, and each column is
//! normalised by how many queries can see it.

use ndarray::{Array1, Array2, Axis};

use crate::model::AttentionMatrix;

/// Attention after redistribution. Rows no longer sum to one; these are
/// ranking weights, not probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RedistributedScores(Array2<f64>);

impl RedistributedScores {
    #[must_use]
    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    #[cfg(test)]
    pub(crate) fn from_entries(m: Array2<f64>) -> Self {
        Self(m)
    }

    pub(crate) fn entries_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    /// Column sums over every row.
    #[must_use]
    pub fn column_sums(&self) -> Array1<f64> {
        self.0.sum_axis(Axis(0))
    }
}

/// Weight applied to entry `(i, j)` of an `l`-token matrix.
#[inline]
#[must_use]
pub fn redistribution_weight(i: usize, j: usize, l: usize) -> f64 {
    (i + 1) as f64 / (l - j) as f64
}

pub fn redistribute(a: &AttentionMatrix) -> RedistributedScores {
    let l = a.len();
    let mut out = a.entries().clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        if *v != 0.0 {
            *v *= redistribution_weight(i, j, l);
        }
    }
    RedistributedScores(out)
}

/// `S_j = sum_{i >= j} A[i][j]`.
#[must_use]
pub fn raw_column_sums(a: &AttentionMatrix) -> Array1<f64> {
    a.entries().sum_axis(Axis(0))
}

/// The causal matrix where every query attends uniformly to its prefix:
/// `A[i][j] = 1 / (i + 1)` for `j <= i`.
#[must_use]
pub fn uniform_attention(l: usize) -> AttentionMatrix {
    let m = Array2::from_shape_fn((l, l), |(i, j)| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 });
    AttentionMatrix::validate(m).expect("uniform prefix attention is causal and stochastic")
}

/// Raw and redistributed column sums of [`uniform_attention`]`(l)`.
///
/// Under uniform attention the raw sums are `H_l - H_j` (strictly
/// decreasing) while the redistributed sums are all exactly one.
#[must_use]
pub fn uniform_column_oracle(l: usize) -> (Vec<f64>, Vec<f64>) {
    let a = uniform_attention(l);
    let raw = raw_column_sums(&a).to_vec();
    let redist = redistribute(&a).column_sums().to_vec();
    (raw, redist)
}

/// `H_n = 1 + 1/2 + ... + 1/n`, with `H_0 = 0`.
#[must_use]
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}
