//! Synthetic data generation and on-disk formats.

pub mod io;
pub mod snapshot;
pub mod spec;
pub mod synth;

use crate::mil::bag::Bag;
use spec::DatasetSpec;
use synth::Split;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    /// Generator settings; `None` for external data.
    pub spec: Option<DatasetSpec>,
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Bag] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.train.first().map_or(0, Bag::feature_dim)
    }

    /// True labels of a split, `None` if any bag lacks them.
    pub fn true_labels(&self, split: Split) -> Option<Vec<Vec<bool>>> {
        self.split(split).iter().map(|b| b.true_labels.clone()).collect()
    }

    pub fn observed_labels(&self, split: Split) -> Vec<Vec<bool>> {
        self.split(split).iter().map(|b| b.observed_labels.clone()).collect()
    }
}
