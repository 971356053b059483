use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{Delta, NoiseSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Each class is present independently with its prior.
    #[default]
    Multi,
    /// Exactly one class per bag, drawn from the normalized priors.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priors {
    Uniform(f64),
    /// `prior_c = max · (c + 1)^(-exponent)`.
    PowerLaw { max: f64, exponent: f64 },
    Explicit(Vec<f64>),
}

impl Priors {
    pub fn resolve(&self, classes: usize) -> Vec<f64> {
        match self {
            Priors::Uniform(p) => vec![*p; classes],
            Priors::PowerLaw { max, exponent } => (0..classes)
                .map(|c| max * ((c + 1) as f64).powf(-exponent))
                .collect(),
            Priors::Explicit(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    pub frames: usize,
    pub feature_dim: usize,
    /// Length of every planted event.
    pub event_frames: usize,
    /// Events of a present class are drawn uniformly from `1..=max`.
    pub max_events_per_class: usize,
    pub label_mode: LabelMode,
    pub class_priors: Priors,
    /// Probability that an event may overlap earlier events of the bag.
    pub overlap_prob: f64,
    /// Standard deviation of the white-noise floor.
    pub feature_noise: f64,
    /// Scale of the class templates.
    pub event_amplitude: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            train_bags: 2000,
            val_bags: 400,
            test_bags: 600,
            frames: 128,
            feature_dim: 16,
            event_frames: 32,
            max_events_per_class: 2,
            label_mode: LabelMode::Multi,
            class_priors: Priors::Uniform(0.25),
            overlap_prob: 0.3,
            feature_noise: 1.0,
            event_amplitude: 1.0,
            noise: NoiseSpec::uniform(1.0, 0),
            seed: 0,
        }
    }
}

/// Named starting points for [`DatasetSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Default,
    /// No overlap, no feature noise, no label noise.
    Clean,
    /// Uniform `δ = 0.3`.
    HighNoise,
    /// Uniform `δ = 0.95`.
    LowNoise,
    /// Class-dependent `δ_c` spread over `[0.3, 0.95]`.
    ClassNoise,
    /// Power-law class priors.
    AudiosetLike,
    /// Smaller, label-noisy dataset used as a transfer target.
    NoisyProbe,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Default,
        Preset::Clean,
        Preset::HighNoise,
        Preset::LowNoise,
        Preset::ClassNoise,
        Preset::AudiosetLike,
        Preset::NoisyProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Default => "default",
            Preset::Clean => "clean",
            Preset::HighNoise => "high-noise",
            Preset::LowNoise => "low-noise",
            Preset::ClassNoise => "class-noise",
            Preset::AudiosetLike => "audioset-like",
            Preset::NoisyProbe => "noisy-probe",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn spec(self) -> DatasetSpec {
        let base = DatasetSpec::default();
        match self {
            Preset::Default => base,
            Preset::Clean => DatasetSpec {
                overlap_prob: 0.0,
                feature_noise: 0.0,
                ..base
            },
            Preset::HighNoise => DatasetSpec {
                noise: NoiseSpec::uniform(0.3, 0),
                ..base
            },
            Preset::LowNoise => DatasetSpec {
                noise: NoiseSpec::uniform(0.95, 0),
                ..base
            },
            Preset::ClassNoise => {
                let c = base.n_classes;
                let deltas = (0..c)
                    .map(|i| 0.3 + 0.65 * i as f64 / (c - 1).max(1) as f64)
                    .collect();
                DatasetSpec {
                    noise: NoiseSpec {
                        delta: Delta::PerClass(deltas),
                        seed: 0,
                    },
                    ..base
                }
            }
            Preset::AudiosetLike => DatasetSpec {
                class_priors: Priors::PowerLaw {
                    max: 0.5,
                    exponent: 1.2,
                },
                ..base
            },
            Preset::NoisyProbe => DatasetSpec {
                train_bags: 600,
                val_bags: 200,
                test_bags: 400,
                noise: NoiseSpec::uniform(0.8, 0),
                ..base
            },
        }
    }
}

impl DatasetSpec {
    pub fn priors(&self) -> Vec<f64> {
        self.class_priors.resolve(self.n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::Invalid(m));
        if self.n_classes == 0 || self.feature_dim == 0 || self.frames == 0 {
            return invalid("n_classes, feature_dim and frames must be positive".into());
        }
        if self.train_bags == 0 || self.test_bags == 0 {
            return invalid("train and test splits must not be empty".into());
        }
        if self.event_frames == 0 || self.event_frames > self.frames {
            return Err(Error::InvalidGeometry {
                op: "generate_dataset",
                detail: format!(
                    "event template of {} frames does not fit bags of {} frames",
                    self.event_frames, self.frames
                ),
            });
        }
        if self.max_events_per_class == 0 {
            return invalid("max_events_per_class must be positive".into());
        }
        let priors = self.priors();
        if priors.len() != self.n_classes {
            return Err(Error::shape("class priors", &[self.n_classes], &[priors.len()]));
        }
        if let Some(&p) = priors.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::OutOfRange {
                name: "class prior",
                value: p,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if self.label_mode == LabelMode::Single && priors.iter().sum::<f64>() <= 0.0 {
            return invalid("single-label priors must have positive mass".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::OutOfRange {
                name: "overlap_prob",
                value: self.overlap_prob,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !(self.feature_noise >= 0.0 && self.event_amplitude >= 0.0) {
            return invalid("feature_noise and event_amplitude must be non-negative".into());
        }
        self.noise.validate(self.n_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_names() {
        for p in Preset::ALL {
            p.spec().validate().unwrap();
            assert_eq!(Preset::parse(p.name()), Some(p));
        }
    }

    #[test]
    fn audioset_like_is_power_law() {
        let priors = Preset::AudiosetLike.spec().priors();
        assert!(priors.windows(2).all(|w| w[1] < w[0]));
        assert!((priors[0] - 0.5).abs() < 1e-15);
        assert!((priors[1] - 0.5 * 2f64.powf(-1.2)).abs() < 1e-15);
        assert!(priors[0] / priors[7] > 10.0);
    }

    #[test]
    fn template_longer_than_bag_rejected() {
        let spec = DatasetSpec {
            event_frames: 200,
            frames: 128,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::InvalidGeometry { .. })));
    }
}
