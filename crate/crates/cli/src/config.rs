//! Experiment configuration: one JSON document, every section optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sustain::data::spec::{DatasetSpec, Preset};
use sustain::engine::{window_schedule, CascadeConfig, EvalLabels, StagePlan};
use sustain::mil::model::ModelConfig;
use sustain::mil::train::TrainConfig;
use sustain::optim::AdamConfig;
use sustain::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub preset: Preset,
    /// Fields merged over the preset's generator settings.
    pub overrides: serde_json::Map<String, Value>,
    /// Existing dataset directory; when set, nothing is generated.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            preset: Preset::HighNoise,
            overrides: serde_json::Map::new(),
            path: None,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self, seed: u64) -> Result<DatasetSpec> {
        let mut value = serde_json::to_value(self.preset.spec())?;
        let obj = value.as_object_mut().expect("spec serializes to an object");
        for (k, v) in &self.overrides {
            obj.insert(k.clone(), v.clone());
        }
        let mut spec: DatasetSpec = serde_json::from_value(value)?;
        spec.seed = seed;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// `α₀` of stages 1, 2, ...; stage 0 always trains on observed labels.
    pub alpha0: Vec<f64>,
    /// Number of previous stages acting as teachers.
    pub teachers_per_stage: usize,
    /// Explicit plans; replaces `alpha0` and `teachers_per_stage` when set.
    pub stages: Option<Vec<StagePlan>>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            alpha0: vec![0.7, 0.5, 0.3],
            teachers_per_stage: 1,
            stages: None,
        }
    }
}

impl ScheduleSection {
    pub fn plans(&self) -> Result<Vec<StagePlan>> {
        if let Some(s) = &self.stages {
            if s.is_empty() {
                return Err(Error::Empty("schedule.stages"));
            }
            return Ok(s.clone());
        }
        if self.teachers_per_stage == 0 && !self.alpha0.is_empty() {
            return Err(Error::Invalid("schedule.teachers_per_stage must be positive".into()));
        }
        Ok(window_schedule(&self.alpha0, self.teachers_per_stage))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub threshold: f64,
    pub tau_sat: f64,
    pub eval_labels: EvalLabels,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            tau_sat: 0.002,
            eval_labels: EvalLabels::Observed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub deltas: Vec<f64>,
    pub eps: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub samples: usize,
    /// Cells pass when within this many standard errors.
    pub sigmas: f64,
    /// Minimum fraction of passing cells.
    pub min_pass_rate: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            deltas: (1..=9).map(|i| i as f64 / 10.0).collect(),
            eps: (5..=10).map(|i| i as f64 / 10.0).collect(),
            alpha0: vec![0.0, 0.3, 0.7, 1.0],
            samples: 100_000,
            sigmas: 3.0,
            min_pass_rate: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSweepSection {
    pub grid: Vec<f64>,
}

impl Default for AlphaSweepSection {
    fn default() -> Self {
        Self {
            grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    /// Cascade directory holding stage snapshots and `manifest.json`.
    pub cascade: Option<PathBuf>,
    /// Probe dataset directory; generated from `probe_preset` when unset.
    pub probe: Option<PathBuf>,
    pub probe_preset: Preset,
    /// Stages to compare; all stages of the cascade when empty.
    pub stages: Vec<usize>,
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self {
            cascade: None,
            probe: None,
            probe_preset: Preset::NoisyProbe,
            stages: vec![],
            epochs: 300,
            adam: AdamConfig {
                learning_rate: 0.02,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    /// Snapshot to inspect.
    pub model: Option<PathBuf>,
    pub bag_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSection,
    pub metrics: MetricsSection,
    pub stop_rule: bool,
    pub warm_start: bool,
    pub verify: VerifySection,
    pub alpha_sweep: AlphaSweepSection,
    pub transfer: TransferSection,
    pub attention: AttentionSection,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleSection::default(),
            metrics: MetricsSection::default(),
            stop_rule: false,
            warm_start: false,
            verify: VerifySection::default(),
            alpha_sweep: AlphaSweepSection::default(),
            transfer: TransferSection::default(),
            attention: AttentionSection::default(),
            output: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cascade().validate()?;
        self.dataset.spec(self.seed)?;
        for (t, plan) in self.schedule.plans()?.iter().enumerate() {
            plan.validate(t)?;
        }
        let v = &self.verify;
        let unit = |name: &'static str, xs: &[f64]| -> Result<()> {
            match xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                Some(&value) => Err(Error::OutOfRange {
                    name,
                    value,
                    lo: 0.0,
                    hi: 1.0,
                }),
                None => Ok(()),
            }
        };
        unit("verify.deltas", &v.deltas)?;
        unit("verify.eps", &v.eps)?;
        unit("verify.alpha0", &v.alpha0)?;
        unit("alpha_sweep.grid", &self.alpha_sweep.grid)?;
        if v.samples == 0 || !(v.sigmas > 0.0) {
            return Err(Error::Invalid("verify.samples and verify.sigmas must be positive".into()));
        }
        if self.transfer.epochs == 0 {
            return Err(Error::Invalid("transfer.epochs must be positive".into()));
        }
        self.transfer.adam.validate()
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
            threshold: self.metrics.threshold,
            tau_sat: self.metrics.tau_sat,
            stop_rule: self.stop_rule,
            warm_start: self.warm_start,
            eval_labels: self.metrics.eval_labels,
        }
    }
}

/// Default configuration plus a description of every field.
pub fn schema() -> Value {
    let defaults = serde_json::to_value(ExperimentConfig::default()).expect("serializable");
    json!({
        "defaults": defaults,
        "unknown_keys": "rejected in every section",
        "fields": {
            "seed": "seed of data generation, initialization and batch order; --seed overrides",
            "output": "output directory; --out overrides",
            "stop_rule": "halt the cascade once validation mAP stops improving by more than metrics.tau_sat",
            "warm_start": "initialize each student from the previous stage instead of afresh",
            "dataset.preset": Preset::ALL.iter().map(|p| p.name()).collect::<Vec<_>>(),
            "dataset.overrides": "generator fields merged over the preset: n_classes, train_bags, val_bags, test_bags, frames, feature_dim, event_frames, max_events_per_class, label_mode (multi|single), class_priors ({uniform: p} | {power_law: {max, exponent}} | {explicit: [...]}), overlap_prob, feature_noise, event_amplitude, noise ({delta: number or per-class list, seed}), seed",
            "dataset.path": "existing dataset directory (spec.json optional; train/, val/, test/ with labels.csv and features/)",
            "model": "feature_dim, n_classes, conv_blocks [{channels, kernel (odd), pool}], segment_kernel, embedding_dim, hidden_dims, pooling (attention|mean|max)",
            "train": "epochs, batch_size, adam {learning_rate, beta1, beta2, epsilon}, attention_warmup (fraction of epochs with frozen attention), class_weighting, weight_mode (whole_term|positive_only), select_best",
            "schedule": "alpha0 per stage after the first, teachers_per_stage (window of previous stages), or explicit stages [{teachers, alphas, epochs?, adam?}]",
            "metrics": "threshold for per-class accuracy, tau_sat saturation tolerance, eval_labels (observed|true) for test metrics",
            "verify": "deltas × eps × alpha0 grid, Monte-Carlo samples per cell, sigmas tolerance, min_pass_rate",
            "alpha_sweep.grid": "α₀ values for single-teacher students on top of stage 0",
            "transfer": "cascade directory, probe dataset directory or probe_preset, stages to compare, probe epochs and adam settings",
            "attention": "model snapshot and bag_id for dump-attention (first test bag when unset)"
        }
    })
}
