//! Synthetic weakly labeled recordings with planted class events.
//!
//! Each class owns a fixed random template of `event_frames × feature_dim`
//! values. A bag is a white-noise floor with the templates of its present
//! classes added at random offsets; the bag is positive for a class exactly
//! when at least one of its events was planted. Observed labels are the true
//! labels passed through [`inject_noise`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::spec::{DatasetSpec, LabelMode};
use crate::data::Dataset;
use crate::error::Result;
use crate::mil::bag::{Bag, Event};
use crate::noise::{inject_noise, NoiseSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// SplitMix64 finalizer over a combination of stream identifiers.
pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Noise process applied to the true labels of `split`.
pub fn split_noise_spec(spec: &DatasetSpec, split: Split) -> NoiseSpec {
    NoiseSpec {
        delta: spec.noise.delta.clone(),
        seed: mix(&[spec.seed, spec.noise.seed, 0x0004_015e, split.salt()]),
    }
}

pub fn class_templates(spec: &DatasetSpec) -> Vec<Tensor> {
    (0..spec.n_classes)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, 0x7e_3b1a7e, c as u64]));
            let data = (0..spec.event_frames * spec.feature_dim)
                .map(|_| spec.event_amplitude * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::new(vec![spec.event_frames, spec.feature_dim], data).expect("template shape")
        })
        .collect()
}

fn sample_classes<R: Rng>(spec: &DatasetSpec, priors: &[f64], rng: &mut R) -> Vec<bool> {
    match spec.label_mode {
        LabelMode::Multi => priors.iter().map(|&p| rng.random::<f64>() < p).collect(),
        LabelMode::Single => {
            let total: f64 = priors.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = priors.len() - 1;
            for (c, &p) in priors.iter().enumerate() {
                if u < p {
                    pick = c;
                    break;
                }
                u -= p;
            }
            (0..priors.len()).map(|c| c == pick).collect()
        }
    }
}

fn place_event<R: Rng>(spec: &DatasetSpec, placed: &[Event], rng: &mut R) -> usize {
    let span = spec.frames - spec.event_frames + 1;
    let may_overlap = rng.random::<f64>() < spec.overlap_prob;
    const TRIES: usize = 32;
    let mut start = rng.random_range(0..span);
    if !may_overlap {
        for _ in 0..TRIES {
            let clear = placed
                .iter()
                .all(|e| start + spec.event_frames <= e.start || e.start + e.len <= start);
            if clear {
                break;
            }
            start = rng.random_range(0..span);
        }
    }
    start
}

fn generate_bag(spec: &DatasetSpec, templates: &[Tensor], priors: &[f64], split: Split, index: usize, salt: u64) -> Bag {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, split.salt(), salt, index as u64]));
    let present = sample_classes(spec, priors, &mut rng);
    let (frames, dim) = (spec.frames, spec.feature_dim);
    let mut features: Vec<f64> = (0..frames * dim)
        .map(|_| spec.feature_noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut events = Vec::new();
    for (class, _) in present.iter().enumerate().filter(|(_, &on)| on) {
        let count = rng.random_range(1..=spec.max_events_per_class);
        for _ in 0..count {
            let start = place_event(spec, &events, &mut rng);
            let t = templates[class].data();
            for (dst, src) in features[start * dim..(start + spec.event_frames) * dim].iter_mut().zip(t) {
                *dst += src;
            }
            events.push(Event {
                class,
                start,
                len: spec.event_frames,
            });
        }
    }
    events.sort_by_key(|e| (e.start, e.class));
    // stored on disk as f32
    for v in &mut features {
        *v = f64::from(*v as f32);
    }
    Bag {
        id: format!("{}-{index:05}", split.name()),
        features: Tensor::new(vec![frames, dim], features).expect("bag shape"),
        true_labels: Some(present.clone()),
        observed_labels: present,
        events,
    }
}

fn generate_split(spec: &DatasetSpec, templates: &[Tensor], split: Split) -> Result<Vec<Bag>> {
    let n = match split {
        Split::Train => spec.train_bags,
        Split::Val => spec.val_bags,
        Split::Test => spec.test_bags,
    };
    let priors = spec.priors();
    let mut salt = 0;
    let mut bags = loop {
        let bags: Vec<Bag> = (0..n)
            .map(|i| generate_bag(spec, templates, &priors, split, i, salt))
            .collect();
        let every_class_present = (0..spec.n_classes)
            .all(|c| bags.iter().any(|b| b.true_labels.as_ref().is_some_and(|t| t[c])));
        // classes with a zero prior can never appear
        let satisfiable = priors.iter().all(|&p| p > 0.0);
        if split != Split::Test || every_class_present || !satisfiable || salt >= 64 {
            break bags;
        }
        salt += 1;
    };
    let truth: Vec<Vec<bool>> = bags.iter().map(|b| b.true_labels.clone().unwrap_or_default()).collect();
    if !truth.is_empty() {
        let observed = inject_noise(&truth, &split_noise_spec(spec, split))?;
        for (bag, obs) in bags.iter_mut().zip(observed) {
            bag.observed_labels = obs;
        }
    }
    Ok(bags)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let templates = class_templates(spec);
    Ok(Dataset {
        n_classes: spec.n_classes,
        spec: Some(spec.clone()),
        train: generate_split(spec, &templates, Split::Train)?,
        val: generate_split(spec, &templates, Split::Val)?,
        test: generate_split(spec, &templates, Split::Test)?,
    })
}
