use sustain::data::snapshot::load_model;
use sustain::data::spec::DatasetSpec;
use sustain::data::synth::generate_dataset;
use sustain::data::Dataset;
use sustain::engine::{
    alpha_search, load_manifest, run_cascade, run_stage, save_cascade, single_teacher_schedule, stage_file,
    Cascade, CascadeConfig, EvalLabels, StagePlan,
};
use sustain::mil::train::TrainConfig;
use sustain::Error;

fn data() -> Dataset {
    generate_dataset(&DatasetSpec {
        train_bags: 80,
        val_bags: 30,
        test_bags: 40,
        seed: 2,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn config() -> CascadeConfig {
    CascadeConfig {
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        ..CascadeConfig::default()
    }
}

#[test]
fn all_weight_on_labels_reproduces_the_teacher() {
    let d = data();
    let mut c = Cascade::new(config());
    run_stage(&mut c, &StagePlan::baseline(), &d).unwrap();
    let student = run_stage(&mut c, &StagePlan::single_teacher(1, 1.0), &d).unwrap().clone();
    assert_eq!(student.model, c.stages[0].model);
    assert_eq!(student.val_map, c.stages[0].val_map);

    let sweep = alpha_search(&c, &d, &[0.5, 1.0]).unwrap();
    assert_eq!(sweep.rows[1].val_map, c.stages[0].val_map);
    assert_eq!(sweep.rows[1].test_map, c.stages[0].test.map);
}

#[test]
fn stages_use_their_blended_targets() {
    let d = data();
    let c = run_cascade(&d, &single_teacher_schedule(&[0.4]), &config()).unwrap();
    let targets = c.targets_for(1, &c.stages[1].plan, &d.train).unwrap();
    for ((t, b), p) in targets.iter().zip(&d.train).zip(&c.stages[0].train_predictions) {
        for ((v, &y), q) in t.iter().zip(&b.observed_labels).zip(p) {
            assert!((v - (0.4 * f64::from(u8::from(y)) + 0.6 * q)).abs() < 1e-12);
        }
    }
    assert_ne!(c.stages[1].model, c.stages[0].model);
}

#[test]
fn evaluation_labels_are_selectable() {
    let d = data();
    let cfg = CascadeConfig {
        eval_labels: EvalLabels::True,
        ..config()
    };
    let c = run_cascade(&d, &[StagePlan::baseline()], &cfg).unwrap();
    assert_eq!(c.stages[0].test.map, c.stages[0].test_true.as_ref().unwrap().map);
}

#[test]
fn saved_cascade_reloads() {
    let d = data();
    let c = run_cascade(&d, &single_teacher_schedule(&[0.5]), &config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = save_cascade(&c, dir.path()).unwrap();
    let manifest = load_manifest(dir.path()).unwrap();
    assert_eq!(manifest, written);
    assert_eq!(manifest.stages.len(), 2);
    assert_eq!(manifest.stages[1].teachers, vec![0]);
    for s in &c.stages {
        assert_eq!(load_model(&dir.path().join(stage_file(s.stage))).unwrap(), s.model);
    }
}

#[test]
fn mismatched_data_is_rejected() {
    let d = generate_dataset(&DatasetSpec {
        n_classes: 5,
        train_bags: 10,
        val_bags: 4,
        test_bags: 12,
        seed: 1,
        ..DatasetSpec::default()
    })
    .unwrap();
    assert!(matches!(
        run_cascade(&d, &[StagePlan::baseline()], &config()),
        Err(Error::ClassCountMismatch { model: 8, data: 5 })
    ));
    assert!(matches!(run_cascade(&d, &[], &config()), Err(Error::Empty(_))));
}
