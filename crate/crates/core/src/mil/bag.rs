use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// A planted event: `class` occupies frames `start..start + len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub class: usize,
    pub start: usize,
    pub len: usize,
}

/// One weakly labeled recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    /// `[frames × feature_dim]`.
    pub features: Tensor,
    /// `None` for external data without ground truth.
    pub true_labels: Option<Vec<bool>>,
    pub observed_labels: Vec<bool>,
    pub events: Vec<Event>,
}

impl Bag {
    pub fn frames(&self) -> usize {
        self.features.dim(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim(1)
    }

    pub fn n_classes(&self) -> usize {
        self.observed_labels.len()
    }

    pub fn observed_f64(&self) -> Vec<f64> {
        to_f64(&self.observed_labels)
    }
}

pub fn to_f64(labels: &[bool]) -> Vec<f64> {
    labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}
