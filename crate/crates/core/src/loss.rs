//! Binary cross-entropy with fractional targets and per-class weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clipped into `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-7;

/// Which part of the per-class loss the class weight multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    WholeTerm,
    PositiveOnly,
}

/// `ℓ(p, y) = -y ln p - (1 - y) ln(1 - p)` for `y ∈ [0, 1]`.
pub fn bce(p: f64, y: f64) -> f64 {
    let q = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    -y * q.ln() - (1.0 - y) * (1.0 - q).ln()
}

fn weighted_term(p: f64, y: f64, w: f64, mode: WeightMode) -> f64 {
    let q = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    let pos = -y * q.ln();
    let neg = -(1.0 - y) * (1.0 - q).ln();
    match mode {
        WeightMode::WholeTerm => w * (pos + neg),
        WeightMode::PositiveOnly => w * pos + neg,
    }
}

/// Mean over classes and rows of the weighted loss; `p` and `y` are
/// row-major `[rows × weights.len()]`.
pub(crate) fn bce_mean(p: &[f64], y: &[f64], weights: &[f64], mode: WeightMode) -> f64 {
    let c = weights.len();
    let total: f64 = p
        .chunks_exact(c)
        .zip(y.chunks_exact(c))
        .map(|(pr, yr)| {
            pr.iter()
                .zip(yr)
                .zip(weights)
                .map(|((&p, &y), &w)| weighted_term(p, y, w, mode))
                .sum::<f64>()
        })
        .sum();
    total / p.len() as f64
}

pub(crate) fn bce_mean_grad(p: &[f64], y: &[f64], weights: &[f64], mode: WeightMode, out: &mut [f64]) {
    let c = weights.len();
    let n = p.len() as f64;
    for (i, ((&p, &y), o)) in p.iter().zip(y).zip(out.iter_mut()).enumerate() {
        if p <= PROB_CLIP || p >= 1.0 - PROB_CLIP {
            *o = 0.0;
            continue;
        }
        let w = weights[i % c];
        let (wp, wn) = match mode {
            WeightMode::WholeTerm => (w, w),
            WeightMode::PositiveOnly => (w, 1.0),
        };
        *o = (-wp * y / p + wn * (1.0 - y) / (1.0 - p)) / n;
    }
}

/// Scalar weighted BCE of predictions against targets, both `[rows × C]`.
pub fn bce_loss(
    p: &[Vec<f64>],
    y: &[Vec<f64>],
    weights: Option<&ClassWeights>,
    mode: WeightMode,
) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::shape("bce_loss", &[p.len()], &[y.len()]));
    }
    let c = p[0].len();
    if p.iter().chain(y).any(|r| r.len() != c) {
        return Err(Error::shape("bce_loss", &[p.len(), c], &[y.len(), y[0].len()]));
    }
    let ones = vec![1.0; c];
    let w = match weights {
        Some(cw) if cw.len() != c => return Err(Error::shape("bce_loss weights", &[c], &[cw.len()])),
        Some(cw) => cw.as_slice(),
        None => &ones,
    };
    Ok(bce_mean(&p.concat(), &y.concat(), w, mode))
}

/// `w_c = 1 + log2(γ_c)` with `γ_c` the inverse class prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn from_priors(priors: &[f64]) -> Result<Self> {
        priors
            .iter()
            .map(|&p| {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::OutOfRange {
                        name: "class prior",
                        value: p,
                        lo: f64::MIN_POSITIVE,
                        hi: 1.0,
                    });
                }
                Ok(1.0 + (1.0 / p).log2())
            })
            .collect::<Result<_>>()
            .map(Self)
    }

    /// Priors are the positive rate of each label column; a column without
    /// positives is treated as having a single one.
    pub fn from_labels(labels: &[Vec<f64>]) -> Result<Self> {
        let n = labels.len();
        let c = labels.first().map_or(0, Vec::len);
        if n == 0 || c == 0 {
            return Err(Error::Empty("label matrix"));
        }
        let priors: Vec<f64> = (0..c)
            .map(|ci| {
                let pos: f64 = labels.iter().map(|r| r[ci]).sum();
                pos.max(1.0) / n as f64
            })
            .collect();
        Self::from_priors(&priors)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn worked_values() {
        assert_abs_diff_eq!(bce(0.5, 1.0), std::f64::consts::LN_2, epsilon = 1e-15);
        // -0.3 ln 0.7 - 0.7 ln 0.3
        let direct = -0.3 * 0.7f64.ln() - 0.7 * 0.3f64.ln();
        assert_abs_diff_eq!(bce(0.7, 0.3), direct, epsilon = 1e-15);
        assert_abs_diff_eq!(bce(0.7, 0.3), 0.94978, epsilon = 1e-5);
    }

    #[test]
    fn perfect_predictions_are_near_zero() {
        let bound = -(1.0 - PROB_CLIP).ln();
        assert!(bce(1.0, 1.0) <= bound + 1e-15);
        assert!(bce(0.0, 0.0) <= bound + 1e-15);
        assert!(bound < 1.1e-7);
    }

    #[test]
    fn mean_over_classes_and_rows() {
        let p = vec![vec![0.5, 0.7], vec![0.2, 0.9]];
        let y = vec![vec![1.0, 0.3], vec![0.0, 1.0]];
        let expect = (bce(0.5, 1.0) + bce(0.7, 0.3) + bce(0.2, 0.0) + bce(0.9, 1.0)) / 4.0;
        let got = bce_loss(&p, &y, None, WeightMode::WholeTerm).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-15);
        assert!(bce_loss(&p, &y[..1], None, WeightMode::WholeTerm).is_err());
    }

    #[test]
    fn weight_modes() {
        let w = ClassWeights::from_priors(&[0.25]).unwrap();
        assert_abs_diff_eq!(w.as_slice()[0], 3.0, epsilon = 1e-15);
        let p = vec![vec![0.6]];
        let y = vec![vec![0.4]];
        let whole = bce_loss(&p, &y, Some(&w), WeightMode::WholeTerm).unwrap();
        let pos = bce_loss(&p, &y, Some(&w), WeightMode::PositiveOnly).unwrap();
        assert_abs_diff_eq!(whole, 3.0 * bce(0.6, 0.4), epsilon = 1e-14);
        let expect = 3.0 * -0.4 * 0.6f64.ln() - 0.6 * 0.4f64.ln();
        assert_abs_diff_eq!(pos, expect, epsilon = 1e-14);
    }

    #[test]
    fn class_weight_is_one_for_unit_prior() {
        let w = ClassWeights::from_priors(&[1.0, 0.5, 0.01]).unwrap();
        assert_eq!(w.as_slice()[0], 1.0);
        assert!(w.as_slice().iter().all(|&v| v >= 1.0));
        assert!(ClassWeights::from_priors(&[0.0]).is_err());
        let from_labels = ClassWeights::from_labels(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(from_labels.as_slice(), &[1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn convex_in_prediction(y in 0.0..=1.0f64, a in 0.001..0.999f64, b in 0.001..0.999f64) {
            let mid = bce(0.5 * (a + b), y);
            prop_assert!(mid <= 0.5 * (bce(a, y) + bce(b, y)) + 1e-12);
        }

        #[test]
        fn affine_in_target(p in 0.0..=1.0f64, y in 0.0..=1.0f64, t in 0.0..=1.0f64, alpha in 0.0..=1.0f64) {
            let blended = bce(p, alpha * y + (1.0 - alpha) * t);
            let split = alpha * bce(p, y) + (1.0 - alpha) * bce(p, t);
            prop_assert!((blended - split).abs() <= 1e-12);
        }
    }
}
