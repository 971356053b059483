//! Bag-level pooling of segment predictions outside the autodiff graph.
//!
//! These are the evaluation-time counterparts of [`Graph::attention_pool`],
//! [`Graph::segment_mean`] and [`Graph::segment_max`] and share their
//! arithmetic.
//!
//! [`Graph::attention_pool`]: crate::autodiff::Graph::attention_pool
//! [`Graph::segment_mean`]: crate::autodiff::Graph::segment_mean
//! [`Graph::segment_max`]: crate::autodiff::Graph::segment_max

use serde::{Deserialize, Serialize};

use crate::autodiff::attention_forward;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    #[default]
    Attention,
    Mean,
    Max,
}

/// Segment-level predictions `S: [C × K]` with entries in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentScores(Tensor);

impl SegmentScores {
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.rank() != 2 {
            return Err(Error::shape("segment scores", scores.shape(), &[0, 0]));
        }
        if let Some(&v) = scores.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::OutOfRange {
                name: "segment score",
                value: v,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(Self(scores))
    }

    pub fn classes(&self) -> usize {
        self.0.dim(0)
    }

    pub fn segments(&self) -> usize {
        self.0.dim(1)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.0.row(class)
    }
}

/// Attention matrix `W_Φ: [C × C]`; its size does not depend on `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams(Tensor);

impl AttentionParams {
    pub fn zeros(classes: usize) -> Self {
        Self(Tensor::zeros(&[classes, classes]))
    }

    pub fn new(w: Tensor) -> Result<Self> {
        if w.rank() != 2 || w.dim(0) != w.dim(1) {
            return Err(Error::shape("attention params", w.shape(), &[w.dim(0), w.dim(0)]));
        }
        Ok(Self(w))
    }

    pub fn classes(&self) -> usize {
        self.0.dim(0)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledPrediction {
    /// Bag-level prediction per class.
    pub output: Vec<f64>,
    /// Attention weights `A: [C × K]`; each row sums to one.
    pub attention: Tensor,
}

pub fn attention_pool(s: &SegmentScores, w: &AttentionParams) -> Result<PooledPrediction> {
    let (c, k) = (s.classes(), s.segments());
    if w.classes() != c {
        return Err(Error::shape("attention_pool", s.tensor().shape(), w.tensor().shape()));
    }
    let mut a = vec![0.0; c * k];
    let mut o = vec![0.0; c];
    attention_forward(s.tensor().data(), w.tensor().data(), c, k, &mut a, &mut o);
    Ok(PooledPrediction {
        output: o,
        attention: Tensor::new(vec![c, k], a)?,
    })
}

pub fn mean_pool(s: &SegmentScores) -> Vec<f64> {
    (0..s.classes())
        .map(|c| s.row(c).iter().sum::<f64>() / s.segments() as f64)
        .collect()
}

pub fn max_pool(s: &SegmentScores) -> Vec<f64> {
    (0..s.classes())
        .map(|c| s.row(c).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(c: usize, k: usize, data: Vec<f64>) -> SegmentScores {
        SegmentScores::new(Tensor::new(vec![c, k], data).unwrap()).unwrap()
    }

    /// Direct evaluation of `A = softmax_k(W S)`, `o = Σ_k (A ⊙ S)_k`.
    fn scalar_oracle(s: &[Vec<f64>], w: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let c = s.len();
        let k = s[0].len();
        let mut a = vec![vec![0.0; k]; c];
        let mut o = vec![0.0; c];
        for ci in 0..c {
            let mut z = vec![0.0; k];
            for kk in 0..k {
                for j in 0..c {
                    z[kk] += w[ci][j] * s[j][kk];
                }
            }
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            for kk in 0..k {
                a[ci][kk] = z[kk].exp() / denom;
                o[ci] += a[ci][kk] * s[ci][kk];
            }
        }
        (a, o)
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let s = scores(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7, 0.6]);
        let p = attention_pool(&s, &AttentionParams::zeros(2)).unwrap();
        assert!(p.attention.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        let mean = mean_pool(&s);
        for (o, m) in p.output.iter().zip(&mean) {
            assert!((o - m).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_segment_is_identity() {
        let s = scores(3, 1, vec![0.2, 0.5, 0.9]);
        let w = AttentionParams::new(Tensor::full(&[3, 3], 0.7)).unwrap();
        let p = attention_pool(&s, &w).unwrap();
        assert_eq!(p.attention.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(p.output, vec![0.2, 0.5, 0.9]);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.random_range(0.01..0.99)).collect()).collect();
            let w: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let (a, o) = scalar_oracle(&s, &w);
            let p = attention_pool(
                &scores(2, 3, s.concat()),
                &AttentionParams::new(Tensor::from_rows(&w).unwrap()).unwrap(),
            )
            .unwrap();
            for (x, y) in p.attention.data().iter().zip(a.concat()) {
                assert!((x - y).abs() < 1e-14);
            }
            for (x, y) in p.output.iter().zip(o) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn class_count_mismatch() {
        let s = scores(2, 2, vec![0.5; 4]);
        assert!(matches!(
            attention_pool(&s, &AttentionParams::zeros(3)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mean_and_max_baselines() {
        let s = scores(1, 2, vec![0.1, 0.9]);
        assert!((mean_pool(&s)[0] - 0.5).abs() < 1e-15);
        assert_eq!(max_pool(&s)[0], 0.9);
        let s = scores(2, 3, vec![0.4; 6]);
        assert_eq!(max_pool(&s), vec![0.4, 0.4]);
        assert!(mean_pool(&s).iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn scores_outside_open_interval_rejected() {
        assert!(SegmentScores::new(Tensor::new(vec![1, 2], vec![0.0, 0.5]).unwrap()).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
        (1usize..6, 1usize..9).prop_flat_map(|(c, k)| {
            (
                Just(c),
                Just(k),
                prop::collection::vec(0.001..0.999f64, c * k),
                prop::collection::vec(-5.0..5.0f64, c * c),
            )
        })
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_output_is_convex((c, k, s, w) in arb_case()) {
            let s = scores(c, k, s);
            let p = attention_pool(&s, &AttentionParams::new(Tensor::new(vec![c, c], w).unwrap()).unwrap()).unwrap();
            for ci in 0..c {
                let row = p.attention.row(ci);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                let lo = s.row(ci).iter().copied().fold(f64::INFINITY, f64::min);
                let hi = s.row(ci).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(p.output[ci] >= lo - 1e-15 && p.output[ci] <= hi + 1e-15);
            }
        }

        #[test]
        fn segment_permutation_equivariance((c, k, s, w) in arb_case(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<f64> = (0..c).flat_map(|ci| perm.iter().map(|&p| s[ci * k + p]).collect::<Vec<_>>()).collect();
            let wt = AttentionParams::new(Tensor::new(vec![c, c], w).unwrap()).unwrap();
            let base = attention_pool(&scores(c, k, s), &wt).unwrap();
            let moved = attention_pool(&scores(c, k, permuted), &wt).unwrap();
            for ci in 0..c {
                for (kk, &p) in perm.iter().enumerate() {
                    prop_assert!((moved.attention.row(ci)[kk] - base.attention.row(ci)[p]).abs() <= 1e-12);
                }
                prop_assert!((moved.output[ci] - base.output[ci]).abs() <= 1e-12);
            }
        }
    }
}
