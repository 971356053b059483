//! Linear probes on frozen embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Graph};
use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::loss::WeightMode;
use crate::metrics::MetricsReport;
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Per-feature standardization fitted on the probe's training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().ok_or(Error::Empty("probe training set"))?.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        // constant features are centered and left unscaled
        let scale = var.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::FeatureDimMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            data.extend(r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s));
        }
        Tensor::new(vec![rows.len(), d], data)
    }
}

#[derive(Debug, Clone)]
pub struct LinearProbe {
    params: ParamSet,
    layer: Dense,
    standardizer: Standardizer,
}

impl LinearProbe {
    /// Full-batch logistic regression of `labels` on `features`.
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[Vec<bool>],
        epochs: usize,
        adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::shape("linear probe", &[features.len()], &[labels.len()]));
        }
        let standardizer = Standardizer::fit(features)?;
        let x = standardizer.apply(features)?;
        let c = labels[0].len();
        let y = Tensor::new(
            vec![labels.len(), c],
            labels.iter().flatten().map(|&b| f64::from(u8::from(b))).collect(),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layer = Dense::new(&mut params, "probe", x.dim(1), c, Activation::Sigmoid, &mut rng);
        let mut opt = AdamState::new(adam, &params)?;
        for _ in 0..epochs {
            params.zero_grad();
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let p = layer.forward(&mut g, &params, xv)?;
            let loss = g.bce(p, &y, None, WeightMode::WholeTerm)?;
            g.backward(loss, &mut params)?;
            opt.step(&mut params)?;
        }
        Ok(Self {
            params,
            layer,
            standardizer,
        })
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = self.standardizer.apply(features)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let p = self.layer.forward(&mut g, &self.params, xv)?;
        let t = g.value(p);
        Ok(t.data().chunks_exact(t.dim(1)).map(<[f64]>::to_vec).collect())
    }

    pub fn evaluate(&self, features: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<MetricsReport> {
        MetricsReport::compute(&self.predict(features)?, labels, threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_data_is_learned() {
        let feats: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, 3.0, (i % 3) as f64]).collect();
        let labels: Vec<Vec<bool>> = (0..40).map(|i| vec![i >= 20, i % 3 == 0]).collect();
        let probe = LinearProbe::fit(&feats, &labels, 400, AdamConfig { learning_rate: 0.05, ..Default::default() }, 1)
            .unwrap();
        let r = probe.evaluate(&feats, &labels, 0.5).unwrap();
        assert!(r.classes[0].accuracy.unwrap() > 0.95);
        assert_eq!(r.classes[0].auc, Some(1.0));
    }

    #[test]
    fn dimension_mismatch() {
        let feats = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
        let labels = vec![vec![true], vec![false]];
        let probe = LinearProbe::fit(&feats, &labels, 5, AdamConfig::default(), 1).unwrap();
        assert!(matches!(
            probe.predict(&[vec![1.0]]),
            Err(Error::FeatureDimMismatch { expected: 2, found: 1 })
        ));
    }
}
