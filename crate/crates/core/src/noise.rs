//! Symmetric label-flip noise, the teacher-noise identity, and Monte-Carlo
//! checks of the alignment between blended targets and the truth.
//!
//! Conventions: `δ` is the probability that an observed label equals the true
//! label, `ε` the accuracy of the teacher, and `δ̄` the probability that the
//! teacher's prediction equals the true label. `δ < ½` is the high-noise
//! regime.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::mil::bag::Bag;
use crate::mil::model::WeaNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Delta {
    Uniform(f64),
    PerClass(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub delta: Delta,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    HighNoise,
    LowNoise,
}

impl Regime {
    pub fn of(delta: f64) -> Self {
        if delta < 0.5 {
            Regime::HighNoise
        } else {
            Regime::LowNoise
        }
    }
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value: v,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

impl NoiseSpec {
    pub fn uniform(delta: f64, seed: u64) -> Self {
        Self {
            delta: Delta::Uniform(delta),
            seed,
        }
    }

    pub fn clean(seed: u64) -> Self {
        Self::uniform(1.0, seed)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match &self.delta {
            Delta::Uniform(d) => check_unit("delta", *d),
            Delta::PerClass(ds) => {
                if ds.len() != classes {
                    return Err(Error::shape("noise delta", &[classes], &[ds.len()]));
                }
                ds.iter().try_for_each(|&d| check_unit("delta", d))
            }
        }
    }

    pub fn delta_for(&self, class: usize) -> f64 {
        match &self.delta {
            Delta::Uniform(d) => *d,
            Delta::PerClass(ds) => ds[class],
        }
    }

    /// Regime of a uniform spec; `None` for class-dependent noise.
    pub fn regime(&self) -> Option<Regime> {
        match &self.delta {
            Delta::Uniform(d) => Some(Regime::of(*d)),
            Delta::PerClass(_) => None,
        }
    }
}

/// Keeps each label with probability `δ_c` and flips it otherwise,
/// independently per sample and class.
pub fn inject_noise(true_labels: &[Vec<bool>], spec: &NoiseSpec) -> Result<Vec<Vec<bool>>> {
    let c = true_labels.first().map_or(0, Vec::len);
    spec.validate(c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    true_labels
        .iter()
        .map(|row| {
            if row.len() != c {
                return Err(Error::shape("inject_noise", &[c], &[row.len()]));
            }
            Ok(row
                .iter()
                .enumerate()
                .map(|(ci, &y)| {
                    let keep = rng.random::<f64>() < spec.delta_for(ci);
                    if keep {
                        y
                    } else {
                        !y
                    }
                })
                .collect())
        })
        .collect()
}

/// `δ̄ = ε δ + (1 − ε)(1 − δ)`.
pub fn predicted_teacher_noise(eps: f64, delta: f64) -> f64 {
    eps * delta + (1.0 - eps) * (1.0 - delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub delta_bar: f64,
    /// Truth weight of the blended target: `α₀ δ + (1 − α₀) δ̄`.
    pub alignment: f64,
    /// `α₀ δ + (1 − α₀) δ̄ − δ`, equal to `(1 − α₀)(1 − ε)(1 − 2δ)`.
    pub alignment_gain: f64,
    /// `(1 − ε)(1 − 2δ)`, the per-class gain without the `(1 − α₀)` factor.
    pub stated_gain: f64,
    /// `δ < ½` and `ε < 1`.
    pub improves: bool,
    /// The literal inequality `α₀ δ + (1 − α₀) δ̄ > δ`; false at `α₀ = 1`.
    pub alignment_improves: bool,
}

pub fn predicted_gain(eps: f64, delta: f64, alpha0: f64) -> Gain {
    let delta_bar = predicted_teacher_noise(eps, delta);
    let alignment = alpha0 * delta + (1.0 - alpha0) * delta_bar;
    let stated_gain = (1.0 - eps) * (1.0 - 2.0 * delta);
    let alignment_gain = (1.0 - alpha0) * stated_gain;
    Gain {
        delta_bar,
        alignment,
        alignment_gain,
        stated_gain,
        improves: stated_gain > 0.0,
        alignment_improves: alignment_gain > 0.0,
    }
}

/// How simulated teacher predictions relate to the labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TeacherSampler {
    /// Agrees with the true label with probability `delta_bar`, independently
    /// of the observed label.
    Oracle { delta_bar: f64 },
    /// Agrees with the observed (noisy) label with probability `accuracy`.
    Composed { accuracy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
    /// Set when fewer than 1000 samples were drawn.
    pub low_sample_warning: bool,
}

impl McEstimate {
    /// Whether `expected` lies within `k` standard errors of the estimate.
    pub fn within(&self, expected: f64, k: f64) -> bool {
        (self.estimate - expected).abs() <= k * self.std_error
    }
}

/// Averages `α₀·1[y = y*] + (1 − α₀)·1[p̂ = y*]` over simulated
/// `(y*, y, p̂)` triples.
pub fn monte_carlo_alignment(
    delta: f64,
    teacher: TeacherSampler,
    alpha0: f64,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_unit("delta", delta)?;
    check_unit("alpha0", alpha0)?;
    match teacher {
        TeacherSampler::Oracle { delta_bar } => check_unit("delta_bar", delta_bar)?,
        TeacherSampler::Composed { accuracy } => check_unit("accuracy", accuracy)?,
    }
    if samples == 0 {
        return Err(Error::Empty("Monte-Carlo sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let truth: bool = rng.random();
        let observed = if rng.random::<f64>() < delta { truth } else { !truth };
        let predicted = match teacher {
            TeacherSampler::Oracle { delta_bar } => {
                if rng.random::<f64>() < delta_bar {
                    truth
                } else {
                    !truth
                }
            }
            TeacherSampler::Composed { accuracy } => {
                if rng.random::<f64>() < accuracy {
                    observed
                } else {
                    !observed
                }
            }
        };
        let w = alpha0 * f64::from(u8::from(observed == truth))
            + (1.0 - alpha0) * f64::from(u8::from(predicted == truth));
        sum += w;
        sum_sq += w * w;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
        samples,
        low_sample_warning: samples < 1000,
    })
}

/// Per-class agreement between thresholded predictions and binary labels;
/// `None` for classes with no positive example.
pub fn teacher_accuracy(predictions: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Vec<Option<f64>> {
    let acc = metrics::per_class_accuracy(predictions, labels, threshold);
    acc.into_iter()
        .enumerate()
        .map(|(c, a)| a.filter(|_| labels.iter().any(|row| row[c])))
        .collect()
}

/// `ε_c` of a trained network against the true labels of `bags`.
pub fn measure_teacher_accuracy(model: &WeaNet, bags: &[Bag]) -> Result<Vec<Option<f64>>> {
    let truth: Vec<Vec<bool>> = bags
        .iter()
        .map(|b| b.true_labels.clone().ok_or(Error::Invalid(format!("bag {} has no true labels", b.id))))
        .collect::<Result<_>>()?;
    let preds = model.predict(bags)?;
    Ok(teacher_accuracy(&preds, &truth, 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGain {
    pub class: usize,
    pub eps: f64,
    pub gain: Gain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub delta: f64,
    pub alpha0: f64,
    pub regime: Regime,
    pub classes: Vec<ClassGain>,
}

impl GainReport {
    /// Classes with unknown accuracy are skipped.
    pub fn new(eps: &[Option<f64>], delta: f64, alpha0: f64) -> Result<Self> {
        check_unit("delta", delta)?;
        check_unit("alpha0", alpha0)?;
        let classes = eps
            .iter()
            .enumerate()
            .filter_map(|(class, e)| e.map(|e| (class, e)))
            .map(|(class, e)| {
                check_unit("eps", e)?;
                Ok(ClassGain {
                    class,
                    eps: e,
                    gain: predicted_gain(e, delta, alpha0),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            delta,
            alpha0,
            regime: Regime::of(delta),
            classes,
        })
    }
}
