//! Minibatch training of a [`WeaNet`] against fractional bag targets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::loss::{ClassWeights, WeightMode};
use crate::metrics;
use crate::mil::bag::Bag;
use crate::mil::model::{ModelConfig, WeaNet};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of epochs during which the attention matrix stays frozen.
    pub attention_warmup: f64,
    pub class_weighting: bool,
    pub weight_mode: WeightMode,
    /// Keep the parameters of the best validation epoch.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            attention_warmup: 0.2,
            class_weighting: false,
            weight_mode: WeightMode::WholeTerm,
            select_best: true,
        }
    }
}

impl TrainConfig {
    /// Number of leading epochs with the attention matrix frozen.
    pub fn warmup_epochs(&self) -> usize {
        (self.attention_warmup * self.epochs as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.attention_warmup) {
            return Err(Error::OutOfRange {
                name: "attention_warmup",
                value: self.attention_warmup,
                lo: 0.0,
                hi: 1.0,
            });
        }
        self.adam.validate()
    }
}

/// Bags plus the binary labels model selection is scored against.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub bags: &'a [Bag],
    pub labels: &'a [Vec<bool>],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: Option<f64>,
    pub attention_frozen: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: WeaNet,
    /// 1-based epoch whose parameters `model` holds.
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Weighted BCE between pooled predictions and targets, averaged over bags.
pub fn mil_loss(
    model: &WeaNet,
    bags: &[Bag],
    targets: &[Vec<f64>],
    weights: Option<&ClassWeights>,
    mode: WeightMode,
) -> Result<f64> {
    check_targets(model.config(), bags, targets)?;
    let mut total = 0.0;
    for (run, tgt) in runs_with_targets(bags, targets, 64) {
        let mut g = Graph::new();
        let refs: Vec<&Bag> = run.iter().collect();
        let x = g.input(model.batch_input(&refs)?);
        let fwd = model.forward_graph(&mut g, x)?;
        let t = Tensor::from_rows(tgt)?;
        let loss = g.bce(fwd.pooled, &t, weights.map(ClassWeights::as_slice), mode)?;
        total += g.value(loss).item() * run.len() as f64;
    }
    Ok(total / bags.len() as f64)
}

/// Accumulates the gradient of the batch-mean loss over `bags` into the
/// model's parameters and returns the loss.
pub fn accumulate_gradients(
    model: &mut WeaNet,
    bags: &[&Bag],
    targets: &[&Vec<f64>],
    weights: Option<&ClassWeights>,
    mode: WeightMode,
) -> Result<f64> {
    let n = bags.len() as f64;
    let mut total = 0.0;
    let mut start = 0;
    while start < bags.len() {
        let frames = bags[start].frames();
        let end = (start..bags.len())
            .find(|&i| bags[i].frames() != frames)
            .unwrap_or(bags.len());
        let mut g = Graph::new();
        let x = g.input(model.batch_input(&bags[start..end])?);
        let fwd = model.forward_graph(&mut g, x)?;
        let rows: Vec<Vec<f64>> = targets[start..end].iter().map(|t| (*t).clone()).collect();
        let t = Tensor::from_rows(&rows)?;
        let loss = g.bce(fwd.pooled, &t, weights.map(ClassWeights::as_slice), mode)?;
        // runs are weighted by their share of the batch
        let share = (end - start) as f64 / n;
        let scaled = g.scale(loss, share);
        total += g.value(scaled).item();
        g.backward(scaled, model.params_mut())?;
        start = end;
    }
    Ok(total)
}

pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
    bags: &[Bag],
    targets: &[Vec<f64>],
    weights: Option<&ClassWeights>,
    validation: Option<Validation<'_>>,
) -> Result<TrainOutcome> {
    let model = WeaNet::new(model_config.clone(), seed)?;
    train_from(model, config, seed, bags, targets, weights, validation)
}

/// Trains starting from the given model's current parameters.
pub fn train_from(
    mut model: WeaNet,
    config: &TrainConfig,
    seed: u64,
    bags: &[Bag],
    targets: &[Vec<f64>],
    weights: Option<&ClassWeights>,
    validation: Option<Validation<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_targets(model.config(), bags, targets)?;
    if let Some(v) = &validation {
        if v.bags.len() != v.labels.len() {
            return Err(Error::shape("validation", &[v.bags.len()], &[v.labels.len()]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_0dde_90c4);
    let mut adam = AdamState::new(config.adam, model.params())?;
    let warmup = config.warmup_epochs();
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, WeaNet)> = None;

    for epoch in 1..=config.epochs {
        let frozen = epoch <= warmup;
        if let Some(id) = model.attention_param() {
            model.params_mut().set_trainable(id, !frozen);
        }
        order.shuffle(&mut rng);
        // equal-length bags are contiguous within a batch after a stable sort
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_by_key(|&i| bags[i].frames());
            let b: Vec<&Bag> = idx.iter().map(|&i| &bags[i]).collect();
            let t: Vec<&Vec<f64>> = idx.iter().map(|&i| &targets[i]).collect();
            model.params_mut().zero_grad();
            let loss = accumulate_gradients(&mut model, &b, &t, weights, config.weight_mode)?;
            adam.step(model.params_mut())?;
            epoch_loss += loss * chunk.len() as f64;
        }
        let val_map = match &validation {
            Some(v) => {
                let scores = model.predict(v.bags)?;
                Some(metrics::mean_average_precision(&scores, v.labels)?)
            }
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / bags.len() as f64,
            val_map,
            attention_frozen: frozen,
        });
        if config.select_best {
            if let Some(m) = val_map {
                if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                    best = Some((m, epoch, model.clone()));
                }
            }
        }
    }
    if let Some(id) = model.attention_param() {
        model.params_mut().set_trainable(id, true);
    }
    model.params_mut().zero_grad();
    let (model, selected_epoch) = match best {
        Some((_, epoch, mut m)) => {
            if let Some(id) = m.attention_param() {
                m.params_mut().set_trainable(id, true);
            }
            m.params_mut().zero_grad();
            (m, epoch)
        }
        None => (model, config.epochs),
    };
    Ok(TrainOutcome {
        model,
        selected_epoch,
        history,
    })
}

fn check_targets(cfg: &ModelConfig, bags: &[Bag], targets: &[Vec<f64>]) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::Empty("training bags"));
    }
    if bags.len() != targets.len() {
        return Err(Error::shape("targets", &[bags.len()], &[targets.len()]));
    }
    for t in targets {
        if t.len() != cfg.n_classes {
            return Err(Error::ClassCountMismatch {
                model: cfg.n_classes,
                data: t.len(),
            });
        }
        if let Some(&v) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange {
                name: "target",
                value: v,
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    Ok(())
}

fn runs_with_targets<'a>(
    bags: &'a [Bag],
    targets: &'a [Vec<f64>],
    max: usize,
) -> Vec<(&'a [Bag], &'a [Vec<f64>])> {
    let mut out = Vec::new();
    let mut offset = 0;
    for run in crate::mil::model::equal_length_runs(bags, max) {
        out.push((run, &targets[offset..offset + run.len()]));
        offset += run.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::bce;
    use crate::mil::bag::Event;

    fn toy_bags(n: usize) -> Vec<Bag> {
        (0..n)
            .map(|i| {
                let data = (0..128 * 4).map(|j| (((i * 31 + j * 7) % 13) as f64 - 6.0) * 0.1).collect();
                Bag {
                    id: format!("b{i}"),
                    features: Tensor::new(vec![128, 4], data).unwrap(),
                    true_labels: None,
                    observed_labels: vec![i % 2 == 0, i % 3 == 0],
                    events: Vec::<Event>::new(),
                }
            })
            .collect()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            n_classes: 2,
            conv_blocks: vec![crate::mil::model::ConvBlockConfig {
                channels: 4,
                kernel: 3,
                pool: 16,
            }],
            segment_kernel: 2,
            embedding_dim: 6,
            hidden_dims: vec![],
            pooling: Default::default(),
        }
    }

    #[test]
    fn self_targets_give_entropy() {
        let model = WeaNet::new(small_config(), 1).unwrap();
        let bags = toy_bags(4);
        let preds = model.predict(&bags).unwrap();
        let loss = mil_loss(&model, &bags, &preds, None, WeightMode::WholeTerm).unwrap();
        let entropy: f64 = preds
            .iter()
            .flat_map(|r| r.iter().map(|&p| -p * p.ln() - (1.0 - p) * (1.0 - p).ln()))
            .sum::<f64>()
            / 8.0;
        assert!((loss - entropy).abs() < 1e-12);
        assert!(loss > 0.0);
    }

    #[test]
    fn wrong_target_width_rejected() {
        let model = WeaNet::new(small_config(), 1).unwrap();
        let bags = toy_bags(2);
        let r = mil_loss(&model, &bags, &[vec![1.0], vec![0.0]], None, WeightMode::WholeTerm);
        assert!(matches!(r, Err(Error::ClassCountMismatch { .. })));
    }

    #[test]
    fn single_bag_half_prediction_is_ln2() {
        let cfg = ModelConfig {
            n_classes: 1,
            ..small_config()
        };
        let mut model = WeaNet::new(cfg, 1).unwrap();
        let pred = *model.predictor();
        let shape = model.params().value(pred.weight).shape().to_vec();
        model.params_mut().set_value(pred.weight, Tensor::zeros(&shape)).unwrap();
        let bags = toy_bags(1);
        let loss = mil_loss(&model, &bags, &[vec![1.0]], None, WeightMode::WholeTerm).unwrap();
        assert!((loss - bce(0.5, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn attention_frozen_through_warmup() {
        let bags = toy_bags(24);
        let targets: Vec<Vec<f64>> = bags.iter().map(Bag::observed_f64).collect();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            attention_warmup: 0.8,
            select_best: false,
            ..Default::default()
        };
        assert_eq!(cfg.warmup_epochs(), 4);
        let warm = TrainConfig {
            attention_warmup: 1.0,
            ..cfg.clone()
        };
        let out = train(&small_config(), &warm, 3, &bags, &targets, None, None).unwrap();
        let id = out.model.attention_param().unwrap();
        assert!(out.model.params().value(id).data().iter().all(|v| v.to_bits() == 0));
        let out = train(&small_config(), &cfg, 3, &bags, &targets, None, None).unwrap();
        assert!(out.model.params().value(id).data().iter().any(|&v| v != 0.0));
        assert!(out.history[..4].iter().all(|e| e.attention_frozen));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let bags = toy_bags(32);
        let targets: Vec<Vec<f64>> = bags.iter().map(Bag::observed_f64).collect();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 8,
            select_best: false,
            ..Default::default()
        };
        let a = train(&small_config(), &cfg, 9, &bags, &targets, None, None).unwrap();
        let b = train(&small_config(), &cfg, 9, &bags, &targets, None, None).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    }
}
