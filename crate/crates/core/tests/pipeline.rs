use std::collections::BTreeMap;

use detdisc_core::gradcheck::make_fixture;
use detdisc_core::mining::{mine_dataset, with_background_labels};
use detdisc_core::objective::classification_objective;
use detdisc_core::synth::{generate, SynthConfig};
use detdisc_core::trainer::{
    run_pipeline, run_stage_init, run_stage_joint, run_stage_strong, ReprConfig, StageEpochs, TrainConfig,
};
use detdisc_core::{BBox, Bag, Dataset, Label, Model, Region, Source};

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        num_categories_strong: 2,
        num_categories_weak: 2,
        strong_bags_per_category: 6,
        weak_bags_per_category: 8,
        test_bags_per_category: 2,
        regions_per_bag: 6,
        feature_dim: 6,
        ..Default::default()
    }
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: StageEpochs {
            init: 5,
            strong: 5,
            joint: 5,
        },
        ..Default::default()
    }
}

fn weak_detectors(m: &Model, d: &Dataset) -> BTreeMap<String, Vec<f64>> {
    d.categories_weak
        .iter()
        .map(|k| (k.clone(), m.weights(m.slot(k).unwrap()).to_vec()))
        .collect()
}

#[test]
fn stage_b_leaves_weak_detectors_bit_identical() {
    let out = generate(&small_synth(0)).unwrap();
    let d = with_background_labels(&out.train, 0.3);
    let cfg = quick(0);
    let mut m = cfg.initial_model(&d).unwrap();
    run_stage_init(&mut m, &d, &cfg).unwrap();
    let before = weak_detectors(&m, &d);
    let repr_before = m.repr.clone();
    run_stage_strong(&mut m, &d, &cfg).unwrap();
    assert_eq!(weak_detectors(&m, &d), before);
    assert_ne!(
        m.repr, repr_before,
        "strong stage should still train the representation"
    );
}

#[test]
fn stage_b_freeze_covers_categories_in_both_splits() {
    let fx = make_fixture(5, 0, 0, None).unwrap();
    let mut m = fx.model.clone();
    let before = weak_detectors(&m, &fx.dataset);
    let strong_only = m.slot("a").unwrap();
    let a_before = m.weights(strong_only).to_vec();
    run_stage_strong(&mut m, &fx.dataset, &quick(1)).unwrap();
    assert_eq!(weak_detectors(&m, &fx.dataset), before);
    assert_ne!(m.weights(strong_only), a_before.as_slice());
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let out = generate(&small_synth(1)).unwrap();
    let d = with_background_labels(&out.train, 0.3);
    let cfg = TrainConfig {
        epochs: StageEpochs {
            init: 0,
            strong: 0,
            joint: 0,
        },
        ..quick(1)
    };
    let m0 = cfg.initial_model(&d).unwrap();
    let mut m = m0.clone();
    let r = run_stage_init(&mut m, &d, &cfg).unwrap();
    assert_eq!(r.trace.len(), 1);
    run_stage_strong(&mut m, &d, &cfg).unwrap();
    let a = mine_dataset(&m, &d, &cfg.mining, 1).unwrap();
    run_stage_joint(&mut m, &d, &a, &cfg, 1).unwrap();
    assert_eq!(m, m0);
}

fn separable_toy() -> Dataset {
    let mut d = Dataset::new(2, Vec::<String>::new(), ["a".to_string(), "b".to_string()]);
    let b = BBox::from([0.0, 0.0, 10.0, 10.0]);
    for i in 0..8 {
        let jitter = 0.1 * i as f64;
        let (feat, label_a) = if i % 2 == 0 {
            ([2.0 + jitter, 0.0], true)
        } else {
            ([0.0, 2.0 + jitter], false)
        };
        d.push_bag(Bag {
            id: format!("t{i}"),
            source: Source::Weak,
            weak_labels: [
                ("a".to_string(), Label::from_bool(label_a)),
                ("b".to_string(), Label::from_bool(!label_a)),
            ]
            .into(),
            whole_image_feature: None,
            regions: vec![Region::new(b, feat.to_vec()), Region::new(b, feat.to_vec())],
        });
    }
    d
}

#[test]
fn init_stage_fits_separable_toy() {
    let d = separable_toy();
    // a separator with unit margin exists: w_a = (1, -1, 0), w_b = (-1, 1, 0)
    for bag in &d.weak_bags {
        let x = bag.whole_image_feature();
        let s = x[0] - x[1];
        assert!(bag.weak_label("a").sign() * s >= 1.0);
        assert!(bag.weak_label("b").sign() * -s >= 1.0);
    }
    let cfg = TrainConfig {
        epochs: StageEpochs {
            init: 300,
            strong: 0,
            joint: 0,
        },
        ..Default::default()
    };
    let mut m = cfg.initial_model(&d).unwrap();
    let report = run_stage_init(&mut m, &d, &cfg).unwrap();
    assert!(report.trace.iter().all(|t| t.total.is_finite()));
    let v = classification_objective(&m, &d).unwrap();
    assert!(v.data_loss < 0.01, "data loss {}", v.data_loss);
    assert_eq!(m.background, vec![0.0; m.detector_width()]);
}

#[test]
fn strong_objective_drops_over_first_epoch() {
    let out = generate(&small_synth(2)).unwrap();
    let mut d = with_background_labels(&out.train, 0.3);
    d.weak_bags.clear();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: StageEpochs {
            init: 0,
            strong: 1,
            joint: 0,
        },
        ..quick(2)
    };
    let mut m = cfg.initial_model(&d).unwrap();
    let r = run_stage_strong(&mut m, &d, &cfg).unwrap();
    assert!(r.trace[1].total < r.trace[0].total, "{:?}", r.trace);
}

#[test]
fn joint_objective_drops_on_planted_data() {
    let out = generate(&small_synth(3)).unwrap();
    let d = with_background_labels(&out.train, 0.3);
    let cfg = quick(3);
    let mut m = cfg.initial_model(&d).unwrap();
    run_stage_init(&mut m, &d, &cfg).unwrap();
    run_stage_strong(&mut m, &d, &cfg).unwrap();
    let a = mine_dataset(&m, &d, &cfg.mining, 1).unwrap();
    let r = run_stage_joint(&mut m, &d, &a, &cfg, 1).unwrap();
    assert!(r.trace.last().unwrap().total < r.trace[0].total);
}

#[test]
fn pipeline_is_deterministic() {
    let out = generate(&small_synth(4)).unwrap();
    let a = run_pipeline(&out.train, &quick(4)).unwrap();
    let b = run_pipeline(&out.train, &quick(4)).unwrap();
    assert_eq!(a.model, b.model);
    for (x, y) in a.stages.iter().zip(&b.stages) {
        assert_eq!(x.stage, y.stage);
        assert_eq!(x.trace, y.trace);
    }
    for (x, y) in a.rounds.iter().zip(&b.rounds) {
        assert_eq!(x.assignments, y.assignments);
    }
    let c = run_pipeline(&out.train, &quick(5)).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn pipeline_runs_the_fixed_stage_order() {
    let out = generate(&small_synth(6)).unwrap();
    for rounds in [1, 3] {
        let cfg = TrainConfig {
            outer_rounds: rounds,
            ..quick(6)
        };
        let r = run_pipeline(&out.train, &cfg).unwrap();
        let names: Vec<String> = r.stages.iter().map(|s| s.stage.name()).collect();
        let mut want = vec!["stageA".to_string(), "stageB".to_string()];
        want.extend((1..=rounds).map(|t| format!("round{t}")));
        assert_eq!(names, want);
        assert_eq!(r.rounds.len(), rounds);
    }
}

#[test]
fn alternation_does_not_increase_the_joint_surrogate_when_converged() {
    let out = generate(&small_synth(7)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        lr_decay: 0.97,
        epochs: StageEpochs {
            init: 50,
            strong: 50,
            joint: 300,
        },
        outer_rounds: 4,
        repr: ReprConfig {
            layers: 0,
            frozen: true,
            ..Default::default()
        },
        ..quick(7)
    };
    let r = run_pipeline(&out.train, &cfg).unwrap();
    let ends: Vec<f64> = r.stages[2..].iter().map(|s| s.trace.last().unwrap().total).collect();
    for pair in ends.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-6, "{ends:?}");
    }
}

#[test]
fn invalid_dataset_aborts_before_training() {
    let mut d = generate(&small_synth(8)).unwrap().train;
    d.weak_bags[0].regions.clear();
    let err = run_pipeline(&d, &quick(8)).unwrap_err();
    assert!(err.partial.stages.is_empty());
    assert!(err.to_string().contains("regions empty"));
}
