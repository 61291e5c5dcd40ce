//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use detdisc_core::eval::{average_precision, iou, map, mined_precision, nms, Detection, GroundTruth};
use detdisc_core::gradcheck::{run_grad_check, GradCheckConfig};
use detdisc_core::mining::{latent_refine, mine_dataset, with_background_labels, MiningConfig};
use detdisc_core::repr::ReprParams;
use detdisc_core::synth::{generate, Split, SynthConfig, TransformSpec};
use detdisc_core::trainer::{
    run_pipeline, run_pipeline_with, run_stage_init, run_stage_joint, run_stage_strong, PipelineEvent, Stage,
    TrainConfig,
};
use detdisc_core::{BBox, Dataset, HyperParams, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let cfg = GradCheckConfig::default();
    let report = run_grad_check(&cfg).expect("gradient check runs");
    let secs = started.elapsed().as_secs_f64();
    let fixtures = report.results.iter().map(|r| r.fixture).max().map_or(0, |m| m + 1);
    let worst = report.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let objectives = report.worst_by_target().len();
    Outcome {
        pass: report.passed() && fixtures >= 20 && objectives == 5 && worst < 1e-4 && secs < 30.0,
        detail: format!(
            "{fixtures} fixtures x {objectives} gradients, max rel error {worst:.2e} (< 1e-4), {secs:.1}s (< 30s)"
        ),
    }
}

fn misvm_monotone() -> Outcome {
    let mut fixtures = 0;
    let mut worst_rise = f64::NEG_INFINITY;
    for seed in 0..10 {
        let out = generate(&SynthConfig {
            seed,
            num_categories_strong: 1,
            num_categories_weak: 3,
            strong_bags_per_category: 2,
            weak_bags_per_category: 12,
            test_bags_per_category: 0,
            regions_per_bag: 8,
            feature_dim: 6,
            cluster_separation: 2.5,
            noise_sigma: 1.0,
            ..Default::default()
        })
        .expect("synthetic data");
        let d = &out.train;
        let mut m = Model::new(ReprParams::identity(d.feature_dim), d, HyperParams::default()).expect("model");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut m.detectors {
            w.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        for k in &d.categories_weak {
            let o = latent_refine(&m, d, k, None, &MiningConfig::default(), 1).expect("refine");
            for pair in o.surrogate_trace.windows(2) {
                worst_rise = worst_rise.max(pair[1] - pair[0]);
            }
            fixtures += 1;
        }
    }
    Outcome {
        pass: fixtures >= 10 && worst_rise <= 1e-8,
        detail: format!("{fixtures} fixtures, largest surrogate rise between alternations {worst_rise:.2e} (<= 1e-8)"),
    }
}

fn mining_oracle() -> Outcome {
    let started = Instant::now();
    let out = generate(&SynthConfig {
        noise_sigma: 0.1,
        ..Default::default()
    })
    .expect("synthetic data");
    let cfg = TrainConfig::default();
    let data = with_background_labels(&out.train, cfg.iou_bg_threshold);
    let mut m = cfg.initial_model(&data).expect("model");
    run_stage_init(&mut m, &data, &cfg).expect("stage A");
    run_stage_strong(&mut m, &data, &cfg).expect("stage B");
    let mined = mine_dataset(&m, &data, &cfg.mining, 1).expect("mining");
    let oracle = out.truth.oracle().expect("oracle");
    let pairs = data
        .weak_bags
        .iter()
        .map(|b| data.categories_weak.iter().filter(|k| b.weak_label(k).is_pos()).count())
        .sum::<usize>();
    let agree = mined
        .iter()
        .filter(|a| {
            let bag = data.find_bag(&a.bag_id).expect("mined bag exists");
            oracle.pick(bag, &a.category).expect("oracle pick") == a.region_index
        })
        .count();
    let rate = agree as f64 / pairs as f64;
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: rate >= 0.95 && secs < 60.0,
        detail: format!("agreement {agree}/{pairs} = {rate:.3} (>= 0.95), {secs:.1}s (< 60s)"),
    }
}

fn cw(d: &Dataset) -> Vec<String> {
    d.categories_weak.iter().cloned().collect()
}

/// Image-level classification then mining and joint rounds on the weak split
/// alone, without the strong stage.
fn weak_only_model(d: &Dataset, cfg: &TrainConfig) -> Model {
    let data = with_background_labels(&d.without_strong(), cfg.iou_bg_threshold);
    let mut m = cfg.initial_model(&data).expect("model");
    run_stage_init(&mut m, &data, cfg).expect("stage A");
    for round in 1..=cfg.outer_rounds {
        let a = mine_dataset(&m, &data, &cfg.mining, round).expect("mining");
        run_stage_joint(&mut m, &data, &a, cfg, round).expect("joint stage");
    }
    m
}

fn joint_training_helps() -> Outcome {
    let started = Instant::now();
    let (mut full, mut init_only, mut weak_only) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let out = generate(&SynthConfig {
            seed,
            transform: Some(TransformSpec::Random { strength: 1.0 }),
            ..Default::default()
        })
        .expect("synthetic data");
        let gt = out.truth.ground_truth(&[Split::Test]);
        let cats = cw(&out.train);
        let score = |m: &Model| {
            map(m, &out.test, &gt, Some(&cats), 0.5, 0.3)
                .expect("map")
                .mean
                .expect("weak categories have test boxes")
        };
        let cfg = TrainConfig {
            seed,
            outer_rounds: 2,
            ..Default::default()
        };
        let mut a_only = None;
        let report = run_pipeline_with(&out.train, &cfg, &mut |e| {
            if let PipelineEvent::StageDone {
                stage: Stage::Init,
                model,
            } = e
            {
                a_only = Some(model.clone());
            }
        })
        .expect("pipeline");
        full.push(score(&report.model));
        init_only.push(score(&a_only.expect("stage A reported")));
        weak_only.push(score(&weak_only_model(&out.train, &cfg)));
    }
    let secs = started.elapsed().as_secs_f64();
    let (f, a, w) = (
        median(full.clone()),
        median(init_only.clone()),
        median(weak_only.clone()),
    );
    Outcome {
        pass: f - a >= 0.05 && f - w >= 0.05 && secs < 300.0,
        detail: format!(
            "median C_W mAP full {f:.3} vs stage-A-only {a:.3} (margin {:+.3}) vs weak-only {w:.3} (margin {:+.3}), need >= +0.05; \
             per seed full {} A {} weak {}; {secs:.1}s (< 300s)",
            f - a,
            f - w,
            fmt_list(&full),
            fmt_list(&init_only),
            fmt_list(&weak_only)
        ),
    }
}

fn iteration_benefit() -> Outcome {
    let (mut r1, mut r2) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let out = generate(&SynthConfig {
            seed,
            ..Default::default()
        })
        .expect("synthetic data");
        let gt = out.truth.ground_truth(&[Split::Weak]);
        let cfg = TrainConfig {
            seed,
            outer_rounds: 2,
            ..Default::default()
        };
        let report = run_pipeline(&out.train, &cfg).expect("pipeline");
        let p = |i: usize| mined_precision(&report.rounds[i].assignments, &out.train, &gt, 0.5).expect("assignments");
        r1.push(p(0));
        r2.push(p(1));
    }
    let (m1, m2) = (median(r1.clone()), median(r2.clone()));
    Outcome {
        pass: m2 >= m1 - 0.02,
        detail: format!(
            "median mined precision round 1 {m1:.3}, round 2 {m2:.3} (>= round 1 - 0.02); per seed {} -> {}",
            fmt_list(&r1),
            fmt_list(&r2)
        ),
    }
}

fn det(bag: &str, b: [f64; 4], score: f64) -> Detection {
    Detection {
        bag_id: bag.into(),
        category: "k".into(),
        bbox: BBox::from(b),
        score,
    }
}

fn eval_oracles() -> Outcome {
    let mut gt = GroundTruth::default();
    gt.boxes
        .entry("a".into())
        .or_default()
        .insert("k".into(), vec![BBox::from([0.0, 0.0, 10.0, 10.0])]);
    gt.boxes
        .entry("b".into())
        .or_default()
        .insert("k".into(), vec![BBox::from([0.0, 0.0, 10.0, 10.0])]);
    let dets = [
        det("a", [0.0, 0.0, 10.0, 10.0], 0.9),
        det("a", [50.0, 50.0, 60.0, 60.0], 0.8),
        det("b", [0.0, 0.0, 10.0, 10.0], 0.7),
    ];
    let ap = average_precision(&dets, &gt, "k", 0.5);
    let overlap = iou(&BBox::from([0.0, 0.0, 10.0, 10.0]), &BBox::from([0.0, 5.0, 10.0, 15.0]));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut idempotent = 0;
    for _ in 0..100 {
        let n = rng.random_range(0..30);
        let ds: Vec<Detection> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
                let (w, h) = (rng.random_range(1.0..40.0), rng.random_range(1.0..40.0));
                det("r", [x, y, x + w, y + h], rng.random_range(-1.0..1.0))
            })
            .collect();
        let t = rng.random_range(0.1..0.9);
        let once = nms(&ds, t);
        if nms(&once, t) == once {
            idempotent += 1;
        }
    }
    Outcome {
        pass: ap == Some(5.0 / 6.0) && overlap == 1.0 / 3.0 && idempotent == 100,
        detail: format!("AP {ap:?} (== 5/6), IoU {overlap:?} (== 1/3), nms idempotent on {idempotent}/100 fixtures"),
    }
}

fn run(bin: &str, args: &[&str]) {
    let status = Command::new(bin).args(args).status().expect("spawn detdisc");
    assert!(status.success(), "detdisc {args:?} failed with {status}");
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_detdisc");
    let dir = tempfile::tempdir().expect("tempdir");
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let data_dir = p("data");
    run(
        bin,
        &[
            "gen-synth",
            "--out",
            &data_dir,
            "--seed",
            "7",
            "--transform-strength",
            "1.0",
        ],
    );
    let train = Path::new(&data_dir).join("train.jsonl").to_string_lossy().into_owned();
    let runs = [("1", "t1a"), ("1", "t1b"), ("4", "t4"), ("3", "t3")];
    let mut bytes = Vec::new();
    for (threads, name) in runs {
        run(
            bin,
            &[
                "--threads",
                threads,
                "train",
                "--data",
                &train,
                "--out",
                &p(name),
                "--seed",
                "3",
            ],
        );
        bytes.push(std::fs::read(Path::new(&p(name)).join("final.ckpt")).expect("final checkpoint"));
    }
    let identical = bytes.iter().all(|b| *b == bytes[0]);
    Outcome {
        pass: identical && !bytes[0].is_empty(),
        detail: format!(
            "final.ckpt from --threads 1, 1, 4, 3: {} ({} bytes)",
            if identical { "bit-identical" } else { "differ" },
            bytes[0].len()
        ),
    }
}

fn freeze() -> Outcome {
    let mut checked = 0;
    let mut changed = Vec::new();
    for seed in 0..SEEDS {
        let out = generate(&SynthConfig {
            seed,
            transform: Some(TransformSpec::Random { strength: 1.0 }),
            ..Default::default()
        })
        .expect("synthetic data");
        let cfg = TrainConfig {
            seed,
            outer_rounds: 1,
            ..Default::default()
        };
        let mut after_a = None;
        let mut after_b = None;
        run_pipeline_with(&out.train, &cfg, &mut |e| {
            if let PipelineEvent::StageDone { stage, model } = e {
                match stage {
                    Stage::Init => after_a = Some(model.clone()),
                    Stage::Strong => after_b = Some(model.clone()),
                    Stage::Joint(_) => {}
                }
            }
        })
        .expect("pipeline");
        let (a, b) = (after_a.expect("stage A"), after_b.expect("stage B"));
        for k in &out.train.categories_weak {
            let before = a.weights(a.slot(k).expect("slot"));
            let after = b.weights(b.slot(k).expect("slot"));
            checked += 1;
            if before != after {
                changed.push(format!("seed {seed} {k}"));
            }
        }
    }
    Outcome {
        pass: changed.is_empty() && checked > 0,
        detail: format!(
            "{checked} weak-category detectors compared across the strong stage, {} changed {:?}",
            changed.len(),
            changed
        ),
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradients),
        ("multiple-instance alternation monotone", misvm_monotone),
        ("mining agrees with Bayes oracle", mining_oracle),
        ("joint training helps weak categories", joint_training_helps),
        ("iteration does not hurt mining", iteration_benefit),
        ("evaluation oracles", eval_oracles),
        ("training determinism across thread counts", determinism),
        ("strong stage freezes weak detectors", freeze),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} {}: {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "{} of {} acceptance criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
