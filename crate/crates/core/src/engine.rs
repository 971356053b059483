//! The sequential self-teaching cascade.
//!
//! Stage 0 trains a default teacher on the observed labels. Every later stage
//! trains a fresh student on a convex blend of the observed labels and the
//! cached training-set predictions of one or more earlier stages.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::snapshot::save_model;
use crate::data::synth::Split;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::ClassWeights;
use crate::metrics::{self, MetricsReport};
use crate::mil::bag::{to_f64, Bag};
use crate::mil::model::{ModelConfig, WeaNet};
use crate::mil::train::{train_from, EpochRecord, TrainConfig, Validation};
use crate::noise;
use crate::optim::AdamConfig;

const CONVEX_TOL: f64 = 1e-12;

/// One stage of the cascade: `alphas[0]` weighs the observed labels and
/// `alphas[1 + i]` the predictions of stage `teachers[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub teachers: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Overrides the cascade's epoch count for this stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Overrides the cascade's optimizer settings for this stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamConfig>,
}

impl StagePlan {
    /// Plain supervised training on the observed labels.
    pub fn baseline() -> Self {
        Self {
            teachers: vec![],
            alphas: vec![1.0],
            epochs: None,
            adam: None,
        }
    }

    /// Stage `stage` taught by the previous stage.
    pub fn single_teacher(stage: usize, alpha0: f64) -> Self {
        Self::window(stage, 1, alpha0)
    }

    /// Stage `stage` taught by the previous `m` stages (fewer if not
    /// available), sharing `1 − α₀` equally.
    pub fn window(stage: usize, m: usize, alpha0: f64) -> Self {
        let m = m.min(stage);
        if m == 0 {
            return Self::baseline();
        }
        let teachers: Vec<usize> = (stage - m..stage).rev().collect();
        let mut alphas = vec![alpha0];
        alphas.extend(std::iter::repeat_n((1.0 - alpha0) / m as f64, m));
        Self {
            teachers,
            alphas,
            epochs: None,
            adam: None,
        }
    }

    pub fn alpha0(&self) -> f64 {
        self.alphas[0]
    }

    pub fn validate(&self, stage: usize) -> Result<()> {
        check_alphas(&self.alphas)?;
        if self.alphas.len() != self.teachers.len() + 1 {
            return Err(Error::InvalidSchedule {
                stage,
                detail: format!(
                    "{} teachers need {} blend weights, got {}",
                    self.teachers.len(),
                    self.teachers.len() + 1,
                    self.alphas.len()
                ),
            });
        }
        if stage == 0 && (self.alphas[0] != 1.0 || !self.teachers.is_empty()) {
            return Err(Error::InvalidSchedule {
                stage,
                detail: "the default teacher must be trained on observed labels only (α₀ = 1)".into(),
            });
        }
        if let Some(&t) = self.teachers.iter().find(|&&t| t >= stage) {
            return Err(Error::UnknownTeacher { stage, teacher: t });
        }
        if self.epochs == Some(0) {
            return Err(Error::InvalidSchedule {
                stage,
                detail: "epochs must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Baseline followed by one single-teacher stage per `alpha0s` entry.
pub fn single_teacher_schedule(alpha0s: &[f64]) -> Vec<StagePlan> {
    window_schedule(alpha0s, 1)
}

/// Baseline followed by stages taught by up to `m` previous stages.
pub fn window_schedule(alpha0s: &[f64], m: usize) -> Vec<StagePlan> {
    std::iter::once(StagePlan::baseline())
        .chain(alpha0s.iter().enumerate().map(|(i, &a)| StagePlan::window(i + 1, m, a)))
        .collect()
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    let sum: f64 = alphas.iter().sum();
    if alphas.is_empty() || alphas.iter().any(|a| !(*a >= 0.0)) || (sum - 1.0).abs() > CONVEX_TOL {
        return Err(Error::NonConvexAlphas { sum });
    }
    Ok(())
}

/// `ȳ = α₀ y + Σ_τ α_τ p̂_τ`, elementwise, for every sample.
pub fn blend_targets(observed: &[Vec<f64>], teachers: &[&[Vec<f64>]], alphas: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_alphas(alphas)?;
    if teachers.len() + 1 != alphas.len() {
        return Err(Error::TeacherCountMismatch {
            expected: alphas.len() - 1,
            found: teachers.len(),
        });
    }
    for t in teachers {
        if t.len() != observed.len() {
            return Err(Error::shape("blend_targets", &[observed.len()], &[t.len()]));
        }
    }
    observed
        .iter()
        .enumerate()
        .map(|(s, y)| {
            let mut row: Vec<f64> = y.iter().map(|v| alphas[0] * v).collect();
            for (t, &a) in teachers.iter().zip(&alphas[1..]) {
                let p = &t[s];
                if p.len() != y.len() {
                    return Err(Error::shape("blend_targets", &[y.len()], &[p.len()]));
                }
                for (r, v) in row.iter_mut().zip(p) {
                    *r += a * v;
                }
            }
            // rounding can leave a convex combination an ulp outside [0, 1]
            for r in &mut row {
                *r = r.clamp(0.0, 1.0);
            }
            Ok(row)
        })
        .collect()
}

/// Saturation rule over a per-stage metric history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision")]
pub enum StopDecision {
    Continue,
    /// `best` is the stage with the highest metric.
    Stop { best: usize },
}

/// Stops once the latest stage fails to beat every earlier one by more than
/// `tau`.
pub fn stopping_rule(history: &[f64], tau: f64) -> StopDecision {
    match history.split_last() {
        Some((&last, prev)) if !prev.is_empty() => {
            let best_prev = prev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if last <= best_prev + tau {
                StopDecision::Stop {
                    best: argmax(history),
                }
            } else {
                StopDecision::Continue
            }
        }
        _ => StopDecision::Continue,
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    (0..values.len()).fold(0, |b, i| if values[i] > values[b] { i } else { b })
}

/// Which labels the test split is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalLabels {
    /// Held-out labels from the same noisy process as the training labels.
    #[default]
    Observed,
    /// Ground truth, when the dataset carries it.
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of every stage's initialization and batch order.
    pub seed: u64,
    /// Threshold for per-class accuracy.
    pub threshold: f64,
    pub tau_sat: f64,
    /// Halt the cascade when [`stopping_rule`] fires on validation mAP.
    pub stop_rule: bool,
    /// Initialize each student from the previous stage instead of afresh.
    pub warm_start: bool,
    pub eval_labels: EvalLabels,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            threshold: 0.5,
            tau_sat: 0.002,
            stop_rule: false,
            warm_start: false,
            eval_labels: EvalLabels::Observed,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::OutOfRange {
                name: "threshold",
                value: self.threshold,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !(self.tau_sat >= 0.0) {
            return Err(Error::Invalid("tau_sat must be non-negative".into()));
        }
        Ok(())
    }

    fn for_dataset(&self, data: &Dataset) -> Result<ModelConfig> {
        let fd = data.feature_dim();
        if fd != self.model.feature_dim {
            return Err(Error::FeatureDimMismatch {
                expected: self.model.feature_dim,
                found: fd,
            });
        }
        if data.n_classes != self.model.n_classes {
            return Err(Error::ClassCountMismatch {
                model: self.model.n_classes,
                data: data.n_classes,
            });
        }
        Ok(self.model.clone())
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub stage: usize,
    pub plan: StagePlan,
    /// Best-validation checkpoint.
    pub model: WeaNet,
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Soft predictions of `model` on every training bag, in dataset order.
    pub train_predictions: Vec<Vec<f64>>,
    /// Validation mAP of the selected checkpoint against observed labels.
    pub val_map: f64,
    /// Test metrics against the configured evaluation labels.
    pub test: MetricsReport,
    /// Test metrics against the true labels, when available.
    pub test_true: Option<MetricsReport>,
    /// Per-class accuracy against true validation labels.
    pub eps: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Cascade {
    pub stages: Vec<StageResult>,
    pub config: CascadeConfig,
    /// Stage selected by the stopping rule, if it fired.
    pub stopped: Option<usize>,
}

impl Cascade {
    pub fn new(config: CascadeConfig) -> Self {
        Self {
            stages: Vec::new(),
            config,
            stopped: None,
        }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn val_history(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.val_map).collect()
    }

    pub fn test_history(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.test.map).collect()
    }

    /// Stage with the best validation mAP.
    pub fn best_stage(&self) -> Option<usize> {
        (!self.stages.is_empty()).then(|| argmax(&self.val_history()))
    }

    /// Blended targets `plan` would train on, recomputed from the caches.
    pub fn targets_for(&self, stage: usize, plan: &StagePlan, train: &[Bag]) -> Result<Vec<Vec<f64>>> {
        plan.validate(stage)?;
        let observed: Vec<Vec<f64>> = train.iter().map(Bag::observed_f64).collect();
        let mut preds = Vec::with_capacity(plan.teachers.len());
        for &t in &plan.teachers {
            let s = self.stages.get(t).ok_or(Error::UnknownTeacher { stage, teacher: t })?;
            preds.push(s.train_predictions.as_slice());
        }
        blend_targets(&observed, &preds, &plan.alphas)
    }
}

fn eval_truth(bags: &[Bag], which: EvalLabels) -> Result<Vec<Vec<bool>>> {
    match which {
        EvalLabels::Observed => Ok(bags.iter().map(|b| b.observed_labels.clone()).collect()),
        EvalLabels::True => bags
            .iter()
            .map(|b| b.true_labels.clone())
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Invalid("evaluation on true labels needs a dataset with ground truth".into())),
    }
}

/// Trains the next stage of `cascade` and appends it.
pub fn run_stage<'a>(cascade: &'a mut Cascade, plan: &StagePlan, data: &Dataset) -> Result<&'a StageResult> {
    let stage = cascade.len();
    let cfg = &cascade.config;
    let model_cfg = cfg.for_dataset(data)?;
    let targets = cascade.targets_for(stage, plan, &data.train)?;
    let mut train_cfg = cfg.train.clone();
    if let Some(e) = plan.epochs {
        train_cfg.epochs = e;
    }
    if let Some(a) = plan.adam {
        train_cfg.adam = a;
    }
    let weights = if train_cfg.class_weighting {
        let obs: Vec<Vec<f64>> = data.train.iter().map(Bag::observed_f64).collect();
        Some(ClassWeights::from_labels(&obs)?)
    } else {
        None
    };
    let init = match (cfg.warm_start, cascade.stages.last()) {
        (true, Some(prev)) => prev.model.clone(),
        _ => WeaNet::new(model_cfg, cfg.seed)?,
    };
    let val_bags: &[Bag] = if data.val.is_empty() { &data.train } else { &data.val };
    let val_labels: Vec<Vec<bool>> = val_bags.iter().map(|b| b.observed_labels.clone()).collect();
    let outcome = train_from(
        init,
        &train_cfg,
        cfg.seed,
        &data.train,
        &targets,
        weights.as_ref(),
        Some(Validation {
            bags: val_bags,
            labels: &val_labels,
        }),
    )?;
    let model = outcome.model;
    let train_predictions = model.predict(&data.train)?;
    let val_map = metrics::mean_average_precision(&model.predict(val_bags)?, &val_labels)?;
    let test_bags: &[Bag] = if data.test.is_empty() { val_bags } else { &data.test };
    let test_scores = model.predict(test_bags)?;
    let test = MetricsReport::compute(&test_scores, &eval_truth(test_bags, cfg.eval_labels)?, cfg.threshold)?;
    let test_true = match data.true_labels(Split::Test) {
        Some(t) if !data.test.is_empty() => Some(MetricsReport::compute(&test_scores, &t, cfg.threshold)?),
        _ => None,
    };
    let eps = match val_bags.iter().all(|b| b.true_labels.is_some()) {
        true => Some(noise::measure_teacher_accuracy(&model, val_bags)?),
        false => None,
    };
    cascade.stages.push(StageResult {
        stage,
        plan: plan.clone(),
        model,
        selected_epoch: outcome.selected_epoch,
        history: outcome.history,
        train_predictions,
        val_map,
        test,
        test_true,
        eps,
    });
    Ok(cascade.stages.last().expect("just pushed"))
}

/// Runs `schedule` in order, halting early when the stopping rule is on and
/// fires.
pub fn run_cascade(data: &Dataset, schedule: &[StagePlan], config: &CascadeConfig) -> Result<Cascade> {
    if schedule.is_empty() {
        return Err(Error::Empty("schedule"));
    }
    config.validate()?;
    for (t, plan) in schedule.iter().enumerate() {
        plan.validate(t)?;
    }
    let mut cascade = Cascade::new(config.clone());
    for plan in schedule {
        run_stage(&mut cascade, plan, data)?;
        if let StopDecision::Stop { best } = stopping_rule(&cascade.val_history(), config.tau_sat) {
            if config.stop_rule {
                cascade.stopped = Some(best);
                break;
            }
        }
    }
    Ok(cascade)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha0: f64,
    pub val_map: f64,
    pub test_map: f64,
    pub test_true_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub rows: Vec<SweepRow>,
    /// Grid value with the highest validation mAP.
    pub best_alpha0: f64,
}

impl AlphaSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha0,val_map,test_map,test_true_map\n");
        for r in &self.rows {
            let t = r.test_true_map.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{:.6},{:.6},{}\n", r.alpha0, r.val_map, r.test_map, t));
        }
        out
    }
}

/// Trains one single-teacher student per grid value on top of the stage-0
/// teacher in `cascade`.
pub fn alpha_search(cascade: &Cascade, data: &Dataset, grid: &[f64]) -> Result<AlphaSweep> {
    if grid.is_empty() {
        return Err(Error::Empty("α₀ grid"));
    }
    if cascade.is_empty() {
        return Err(Error::Invalid("alpha search needs a trained stage-0 teacher".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &a in grid {
        if a == 1.0 {
            // all mass on observed labels: the student is the stage-0 teacher
            let s = &cascade.stages[0];
            rows.push(SweepRow {
                alpha0: a,
                val_map: s.val_map,
                test_map: s.test.map,
                test_true_map: s.test_true.as_ref().map(|m| m.map),
            });
            continue;
        }
        let mut c = Cascade {
            stages: vec![cascade.stages[0].clone()],
            config: cascade.config.clone(),
            stopped: None,
        };
        let s = run_stage(&mut c, &StagePlan::single_teacher(1, a), data)?;
        rows.push(SweepRow {
            alpha0: a,
            val_map: s.val_map,
            test_map: s.test.map,
            test_true_map: s.test_true.as_ref().map(|m| m.map),
        });
    }
    let vals: Vec<f64> = rows.iter().map(|r| r.val_map).collect();
    let best_alpha0 = rows[argmax(&vals)].alpha0;
    Ok(AlphaSweep { rows, best_alpha0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStage {
    pub stage: usize,
    pub teachers: Vec<usize>,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub selected_epoch: usize,
    pub val_map: f64,
    pub test: serde_json::Value,
    pub test_true: Option<serde_json::Value>,
    pub model_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: CascadeConfig,
    pub stages: Vec<ManifestStage>,
    pub best_stage: Option<usize>,
    pub stopped_at: Option<usize>,
}

impl Manifest {
    pub fn of(cascade: &Cascade) -> Self {
        Self {
            config: cascade.config.clone(),
            stages: cascade
                .stages
                .iter()
                .map(|s| ManifestStage {
                    stage: s.stage,
                    teachers: s.plan.teachers.clone(),
                    alphas: s.plan.alphas.clone(),
                    seed: cascade.config.seed,
                    selected_epoch: s.selected_epoch,
                    val_map: s.val_map,
                    test: s.test.summary_json(),
                    test_true: s.test_true.as_ref().map(MetricsReport::summary_json),
                    model_file: stage_file(s.stage),
                })
                .collect(),
            best_stage: cascade.best_stage(),
            stopped_at: cascade.stopped,
        }
    }
}

pub fn stage_file(stage: usize) -> String {
    format!("stage_{stage}.sstm")
}

/// Writes one snapshot per stage plus `manifest.json`.
pub fn save_cascade(cascade: &Cascade, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &cascade.stages {
        save_model(&s.model, &dir.join(stage_file(s.stage)))?;
    }
    let manifest = Manifest::of(cascade);
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Observed labels as blend inputs.
pub fn observed_targets(bags: &[Bag]) -> Vec<Vec<f64>> {
    bags.iter().map(|b| to_f64(&b.observed_labels)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_worked_example() {
        let y = vec![vec![1.0]];
        let p = vec![vec![0.6]];
        let out = blend_targets(&y, &[&p], &[0.3, 0.7]).unwrap();
        assert!((out[0][0] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn blend_degenerate_cases() {
        let y = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = vec![vec![0.2, 0.9], vec![0.35, 0.4]];
        assert_eq!(blend_targets(&y, &[&p], &[1.0, 0.0]).unwrap(), y);
        assert_eq!(blend_targets(&y, &[], &[1.0]).unwrap(), y);
        assert_eq!(blend_targets(&y, &[&p], &[0.0, 1.0]).unwrap(), p);
    }

    #[test]
    fn blend_rejects_non_convex() {
        let y = vec![vec![1.0]];
        let p = vec![vec![0.5]];
        match blend_targets(&y, &[&p], &[0.5, 0.6]) {
            Err(Error::NonConvexAlphas { sum }) => assert!((sum - 1.1).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            blend_targets(&y, &[&p], &[1.2, -0.2]),
            Err(Error::NonConvexAlphas { .. })
        ));
        assert!(matches!(
            blend_targets(&y, &[&p, &p], &[0.5, 0.5]),
            Err(Error::TeacherCountMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn stopping_rule_examples() {
        assert_eq!(stopping_rule(&[0.3], 0.002), StopDecision::Continue);
        assert_eq!(stopping_rule(&[0.3, 0.31, 0.33], 0.002), StopDecision::Continue);
        assert_eq!(stopping_rule(&[0.30, 0.35, 0.351], 0.002), StopDecision::Stop { best: 2 });
        assert_eq!(stopping_rule(&[0.40, 0.38], 0.002), StopDecision::Stop { best: 0 });
    }

    #[test]
    fn window_plans() {
        let s = window_schedule(&[0.3, 0.2, 0.1, 0.05], 2);
        assert_eq!(s[0], StagePlan::baseline());
        assert_eq!(s[1].teachers, vec![0]);
        assert_eq!(s[1].alphas, vec![0.3, 0.7]);
        assert_eq!(s[2].teachers, vec![1, 0]);
        assert_eq!(s[2].alphas, vec![0.2, 0.4, 0.4]);
        assert_eq!(s[4].teachers, vec![3, 2]);
        for (t, p) in s.iter().enumerate() {
            p.validate(t).unwrap();
        }
    }

    #[test]
    fn plan_validation() {
        assert!(matches!(
            StagePlan::single_teacher(1, 0.3).validate(0),
            Err(Error::InvalidSchedule { stage: 0, .. })
        ));
        let bad = StagePlan {
            teachers: vec![2],
            alphas: vec![0.5, 0.5],
            epochs: None,
            adam: None,
        };
        assert!(matches!(bad.validate(2), Err(Error::UnknownTeacher { stage: 2, teacher: 2 })));
    }
}
