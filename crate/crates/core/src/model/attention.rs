//! Overflow-safe attention scores.
//!
//! `softmax(q.k / sqrt(d))` is evaluated as
//! `softmax(((q / (alpha * sqrt(d))) . k - rowmax) * alpha)`: the query is
//! shrunk by `alpha` before the dot product so the raw score never reaches
//! the range where low-precision floats overflow, and the row maximum is
//! removed before scaling back up.

use num_traits::Float;

/// Softmax weights for one query row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow<T> {
    pub weights: Vec<T>,
    /// Set when every key was masked; the weights are then all zero.
    pub all_masked: bool,
}

/// In-place stabilized softmax of one row of pre-shrunk scores
/// `s_j = (q / (alpha sqrt d)) . k_j` (plus any additive bias divided by
/// `alpha`). Masked keys get weight zero and are ignored by the row maximum.
/// Returns `false` and zeroes the row when no key is visible.
pub fn stabilized_softmax_row<T: Float>(scores: &mut [T], alpha: T, key_visible: Option<&[bool]>) -> bool {
    let visible = |j: usize| key_visible.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &s) in scores.iter().enumerate() {
        if visible(j) && s > max {
            max = s;
        }
    }
    if max == T::neg_infinity() {
        scores.iter_mut().for_each(|s| *s = T::zero());
        return false;
    }
    let mut sum = T::zero();
    for (j, s) in scores.iter_mut().enumerate() {
        *s = if visible(j) { ((*s - max) * alpha).exp() } else { T::zero() };
        sum = sum + *s;
    }
    scores.iter_mut().for_each(|s| *s = *s / sum);
    true
}

/// Attention weights of `query` over the rows of `keys` (each `d_head`
/// wide), computed entirely in `T`.
pub fn stabilized_attention_scores<T: Float>(query: &[T], keys: &[T], d_head: usize, alpha: T, key_visible: Option<&[bool]>) -> AttentionRow<T> {
    let shrink = alpha * T::from(d_head).expect("head width fits the float type").sqrt();
    let q: Vec<T> = query.iter().map(|&v| v / shrink).collect();
    let mut scores: Vec<T> = keys
        .chunks(d_head)
        .map(|k| q.iter().zip(k).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
        .collect();
    let ok = stabilized_softmax_row(&mut scores, alpha, key_visible);
    AttentionRow { weights: scores, all_masked: !ok }
}
