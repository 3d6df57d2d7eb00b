//! Bucketed 1D and 2D relative position biases.

use ndarray::Array2;

use crate::docmodel::EncodedInput;
use crate::model::ModelConfig;

/// Sign-aware bucket of a relative offset: half the buckets per sign, exact
/// buckets for offsets below a quarter of the total, logarithmic buckets up
/// to `max_distance`, and saturation beyond.
pub fn relative_bucket(delta: i64, buckets: usize, max_distance: usize) -> usize {
    let half = buckets / 2;
    let mut ret = 0;
    if delta > 0 {
        ret += half;
    }
    let n = delta.unsigned_abs() as usize;
    let max_exact = (half / 2).max(1);
    if n < max_exact {
        return ret + n;
    }
    let span = (half - max_exact) as f64;
    let log_ratio = ((n as f64) / max_exact as f64).ln() / ((max_distance as f64) / max_exact as f64).ln();
    let large = max_exact + (log_ratio * span) as usize;
    ret + large.min(half - 1)
}

/// Per-pair bucket indices for one input, independent of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasIndex {
    pub len: usize,
    pub rel1d: Vec<u16>,
    pub rel2d_x: Vec<u16>,
    pub rel2d_y: Vec<u16>,
}

impl BiasIndex {
    /// Positions are indices within each modality; boxes are token boxes for
    /// text and cell extents for patches, compared through their centers.
    pub fn new(enc: &EncodedInput, cfg: &ModelConfig) -> Self {
        let text = enc.text_len();
        let mut pos = Vec::with_capacity(text + enc.num_patches());
        let mut centers = Vec::with_capacity(pos.capacity());
        for (i, b) in enc.token_boxes.iter().enumerate() {
            pos.push(i as i64);
            centers.push(b.center());
        }
        for (m, b) in enc.patch_boxes.iter().enumerate() {
            pos.push(m as i64);
            centers.push(b.center());
        }
        let n = pos.len();
        let mut rel1d = Vec::with_capacity(n * n);
        let mut rel2d_x = Vec::with_capacity(n * n);
        let mut rel2d_y = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                rel1d.push(relative_bucket(pos[j] - pos[i], cfg.rel1d_buckets, cfg.rel1d_max_distance) as u16);
                let dx = i64::from(centers[j].0 - centers[i].0);
                let dy = i64::from(centers[j].1 - centers[i].1);
                rel2d_x.push(relative_bucket(dx, cfg.rel2d_buckets, cfg.rel2d_max_distance) as u16);
                rel2d_y.push(relative_bucket(dy, cfg.rel2d_buckets, cfg.rel2d_max_distance) as u16);
            }
        }
        Self { len: n, rel1d, rel2d_x, rel2d_y }
    }

    /// Materializes the per-head `(L+M) x (L+M)` additive bias from the
    /// `buckets x heads` tables.
    pub fn bias(&self, t1: &Array2<f64>, tx: &Array2<f64>, ty: &Array2<f64>) -> Vec<Array2<f64>> {
        let heads = t1.ncols();
        let n = self.len;
        (0..heads)
            .map(|h| {
                Array2::from_shape_fn((n, n), |(i, j)| {
                    let k = i * n + j;
                    t1[[self.rel1d[k] as usize, h]] + tx[[self.rel2d_x[k] as usize, h]] + ty[[self.rel2d_y[k] as usize, h]]
                })
            })
            .collect()
    }

    /// Scatters a per-head bias gradient into the three tables.
    pub fn backward(&self, h: usize, d_bias: &Array2<f64>, g1: &mut Array2<f64>, gx: &mut Array2<f64>, gy: &mut Array2<f64>) {
        let n = self.len;
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                let g = d_bias[[i, j]];
                g1[[self.rel1d[k] as usize, h]] += g;
                gx[[self.rel2d_x[k] as usize, h]] += g;
                gy[[self.rel2d_y[k] as usize, h]] += g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct transcription of the bidirectional T5 bucket rule.
    fn reference(relative_position: i64, num_buckets: i64, max_distance: i64) -> i64 {
        let half = num_buckets / 2;
        let mut ret = if relative_position > 0 { half } else { 0 };
        let n = relative_position.abs();
        let max_exact = half / 2;
        if n < max_exact {
            return ret + n;
        }
        let v = max_exact
            + ((n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
                * (half - max_exact) as f64) as i64;
        ret += v.min(half - 1);
        ret
    }

    #[test]
    fn matches_reference_enumeration() {
        for delta in -300..=300 {
            assert_eq!(relative_bucket(delta, 32, 128) as i64, reference(delta, 32, 128), "delta {delta}");
            assert_eq!(relative_bucket(delta * 4, 64, 1000) as i64, reference(delta * 4, 64, 1000));
        }
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(relative_bucket(0, 32, 128), 0);
        assert_eq!(relative_bucket(64, 32, 128), relative_bucket(65, 32, 128));
        assert_ne!(relative_bucket(1, 32, 128), relative_bucket(2, 32, 128));
        assert_ne!(relative_bucket(1, 32, 128), relative_bucket(-1, 32, 128));
        assert_eq!(relative_bucket(10_000, 32, 128), 31);
        assert_eq!(relative_bucket(-10_000, 32, 128), 15);
    }

    #[test]
    fn buckets_are_in_range_and_monotone_per_sign() {
        for buckets in [2usize, 4, 8, 32, 64] {
            let mut prev = 0;
            for d in 0..2000 {
                let b = relative_bucket(d, buckets, 128);
                assert!(b < buckets);
                if d > 0 {
                    assert!(b >= prev || d == 1);
                }
                prev = b;
            }
        }
    }
}
